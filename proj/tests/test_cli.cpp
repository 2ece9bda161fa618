#include <sys/wait.h>

#include <cstdlib>

#include "doctest.h"
#include "bowda/phantom.hpp"
#include "bowda/volume.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kSource = BOWDA_SOURCE_DIR;

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result bowda_cli(const std::string& args, const fs::path& scratch) {
  const fs::path out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd = std::string(BOWDA_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  ScratchDir dir("cli_usage");
  CHECK(bowda_cli("", dir.path()).code == 1);
  CHECK(bowda_cli("no-such-command", dir.path()).code == 1);
  CHECK(bowda_cli("evaluate --ref a.mhd", dir.path()).code == 1);
  CHECK(bowda_cli("gradcheck", dir.path()).code == 1);
  CHECK(bowda_cli("gradcheck --op no_such_op", dir.path()).code == 1);
  CHECK(bowda_cli("gen-phantom --domain nowhere --out " + (dir.path() / "x").string(), dir.path()).code == 1);
  const Result bad_key = bowda_cli("run-strategy --spec " + (kSource / "tests/data/tiny_spec.json").string() +
                                       " --set sgd.momentun=0.5 --out " + (dir.path() / "r").string(),
                                   dir.path());
  CHECK(bad_key.code == 1);
  CHECK(bad_key.err.find("momentun") != std::string::npos);
  CHECK(bowda_cli("run-strategy --spec " + (kSource / "tests/data/tiny_spec.json").string() +
                      " --strategy sideways --out " + (dir.path() / "r").string(),
                  dir.path())
            .code == 1);
}

TEST_CASE("every subcommand has help") {
  ScratchDir dir("cli_help");
  const Result top = bowda_cli("--help", dir.path());
  CHECK(top.code == 0);
  for (const char* sub : {"gen-phantom", "train-source", "train-adapt", "run-strategy", "infer", "evaluate",
                          "gradcheck", "histogram"}) {
    INFO(sub);
    CHECK(top.out.find(sub) != std::string::npos);
    const Result r = bowda_cli(std::string(sub) + " --help", dir.path());
    CHECK(r.code == 0);
    CHECK(r.out.find("--") != std::string::npos);
  }
}

TEST_CASE("runtime failures exit with 2") {
  ScratchDir dir("cli_runtime");
  const Result r = bowda_cli("evaluate --ref " + (dir.path() / "missing.mhd").string() + " --seg " +
                                 (dir.path() / "missing.mhd").string(),
                             dir.path());
  CHECK(r.code == 2);
  CHECK(r.err.find("missing.mhd") != std::string::npos);
}

TEST_CASE("phantom generation, histogram and evaluation") {
  ScratchDir dir("cli_phantom");
  const fs::path data = dir.path() / "data";
  const Result g = bowda_cli("gen-phantom --domain target --count 3 --val-fraction 0.34 --set dims=[16,24,24] "
                             "--set radius_min=4 --set radius_max=6 --out " + data.string(),
                             dir.path());
  REQUIRE(g.code == 0);
  const bowda::DatasetManifest m = bowda::read_manifest(data / "manifest.json");
  REQUIRE(m.cases.size() == 3);
  CHECK(m.split("val").size() == 1);

  const std::string label = (data / "case_000_label.mhd").string();
  const Result e = bowda_cli("evaluate --ref " + label + " --seg " + label, dir.path());
  CHECK(e.code == 0);
  CHECK(e.out == "DSC 100.000000\nRVD 0.000000\nABD 0.000000\nHD 0.000000\n");

  const Result h = bowda_cli("histogram --image " + (data / "case_000_image.mhd").string() + " --label " + label +
                                 " --bins 16 --out " + (dir.path() / "hist").string(),
                             dir.path());
  CHECK(h.code == 0);
  CHECK(fs::exists(dir.path() / "hist" / "histogram.csv"));
}

TEST_CASE("gradcheck subcommand") {
  ScratchDir dir("cli_gradcheck");
  const Result r = bowda_cli("gradcheck --op conv3d --op dist_loss --seeds 2 --out " + dir.path().string(), dir.path());
  CHECK(r.code == 0);
  CHECK(r.out.find("conv3d") != std::string::npos);
  CHECK(r.out.find("dist_loss") != std::string::npos);
  CHECK(r.out.find("FAIL") == std::string::npos);
  CHECK(slurp(dir.path() / "gradcheck.txt") == r.out);
}

TEST_CASE("run-strategy reproduces the golden outputs") {
  ScratchDir dir("cli_golden");
  const fs::path out = dir.path() / "run";
  const Result r = bowda_cli("run-strategy --spec " + (kSource / "tests/data/tiny_spec.json").string() + " --out " +
                                 out.string(),
                             dir.path());
  REQUIRE(r.code == 0);
  CHECK(r.out.find("adapt_bowda best validation DSC") != std::string::npos);
  for (const char* f : {"metrics.csv", "val_log.csv", "train_log.csv"}) {
    INFO(f);
    CHECK(slurp(out / f) == slurp(kSource / "tests/golden" / f));
  }

  // The network it wrote drives inference.
  bowda::DomainSpec t = bowda::DomainSpec::target_preset();
  t.dims = {12, 16, 16};
  t.radius_min = 3;
  t.radius_max = 4.5;
  const bowda::Phantom p = bowda::gen_phantom(t, 0);
  bowda::write_metaimage(p.image, dir.path() / "img.mhd");
  const Result inf = bowda_cli("infer --checkpoint " + (out / "best.bwck").string() + " --image " +
                                   (dir.path() / "img.mhd").string() + " --window 8 16 16 --out " +
                                   (dir.path() / "pred").string(),
                               dir.path());
  CHECK(inf.code == 0);
  const bowda::Mask seg = bowda::read_mask(dir.path() / "pred" / "segmentation.mhd");
  CHECK(seg.dims() == t.dims);
  CHECK(seg.spacing() == t.spacing);

  // Split phases: train-source then train-adapt equals the single run.
  const fs::path split = dir.path() / "split";
  REQUIRE(bowda_cli("train-source --spec " + (kSource / "tests/data/tiny_spec.json").string() + " --out " +
                        (dir.path() / "src").string(),
                    dir.path())
              .code == 0);
  REQUIRE(bowda_cli("train-adapt --spec " + (kSource / "tests/data/tiny_spec.json").string() +
                        " --source-checkpoint " + (dir.path() / "src" / "snet_s.bwck").string() + " --out " +
                        split.string(),
                    dir.path())
              .code == 0);
  CHECK(slurp(split / "final.bwck") == slurp(out / "final.bwck"));
  CHECK(slurp(split / "metrics.csv") == slurp(out / "metrics.csv"));
}
