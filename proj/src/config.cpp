#include "bowda/config.hpp"

#include <cstdio>
#include <stdexcept>

namespace bowda {

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string json_digest(const Json& j) { return fnv1a_hex(j.dump()); }

void require_known_keys(const Json& j, std::initializer_list<const char*> allowed, const char* what) {
  if (!j.is_object()) throw std::invalid_argument(std::string(what) + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw std::invalid_argument(std::string(what) + ": unknown key '" + key + "'");
  }
}

namespace {

template <typename T>
void read(const Json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

void to_json(Json& j, const Dims& d) { j = Json::array({d.depth, d.height, d.width}); }
void from_json(const Json& j, Dims& d) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("dims: expected [depth, height, width]");
  d = Dims{j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

void to_json(Json& j, const Spacing& s) { j = Json::array({s.depth, s.height, s.width}); }
void from_json(const Json& j, Spacing& s) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("spacing: expected [depth, height, width]");
  s = Spacing{j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

void to_json(Json& j, const LossConfig& c) {
  j = Json{{"alpha", c.alpha}, {"beta", c.beta}, {"epsilon", c.epsilon}, {"threshold", c.threshold}};
}
void from_json(const Json& j, LossConfig& c) {
  require_known_keys(j, {"alpha", "beta", "epsilon", "threshold"}, "loss");
  read(j, "alpha", c.alpha);
  read(j, "beta", c.beta);
  read(j, "epsilon", c.epsilon);
  read(j, "threshold", c.threshold);
  c.validate();
}

void to_json(Json& j, const DRBConfig& c) {
  j = Json{{"input_channels", c.input_channels},
           {"layers", c.layers},
           {"growth", c.growth},
           {"dropout", c.dropout},
           {"bottleneck", c.bottleneck}};
}
void from_json(const Json& j, DRBConfig& c) {
  require_known_keys(j, {"input_channels", "layers", "growth", "dropout", "bottleneck"}, "drb");
  read(j, "input_channels", c.input_channels);
  read(j, "layers", c.layers);
  read(j, "growth", c.growth);
  read(j, "dropout", c.dropout);
  read(j, "bottleneck", c.bottleneck);
}

void to_json(Json& j, const SNetFlags& c) {
  j = Json{{"dense_connections", c.dense_connections},
           {"residual_connections", c.residual_connections},
           {"long_connections", c.long_connections},
           {"normalization", c.normalization}};
}
void from_json(const Json& j, SNetFlags& c) {
  require_known_keys(j, {"dense_connections", "residual_connections", "long_connections", "normalization"},
                     "snet.flags");
  read(j, "dense_connections", c.dense_connections);
  read(j, "residual_connections", c.residual_connections);
  read(j, "long_connections", c.long_connections);
  read(j, "normalization", c.normalization);
}

void to_json(Json& j, const SNetConfig& c) {
  j = Json{{"input_channels", c.input_channels},
           {"base_width", c.base_width},
           {"down", c.down},
           {"up", c.up},
           {"flags", c.flags}};
}

// Accepts either explicit block lists or the shorthand
// {"preset": "desk"|"paper", "layers_down": [...], "layers_up": [...], "growth", "dropout", ...}
// from which block input widths are derived.
void from_json(const Json& j, SNetConfig& c) {
  require_known_keys(j,
                     {"preset", "input_channels", "base_width", "down", "up", "flags", "layers_down", "layers_up",
                      "growth", "dropout"},
                     "snet");
  if (j.contains("down") || j.contains("up")) {
    for (const char* k : {"preset", "layers_down", "layers_up", "growth", "dropout"}) {
      if (j.contains(k)) throw std::invalid_argument(std::string("snet: '") + k + "' conflicts with explicit blocks");
    }
    read(j, "input_channels", c.input_channels);
    read(j, "base_width", c.base_width);
    read(j, "flags", c.flags);
    read(j, "down", c.down);
    read(j, "up", c.up);
    c.validate();
    return;
  }
  const std::string preset = j.value("preset", std::string("desk"));
  SNetConfig base;
  if (preset == "desk") {
    base = SNetConfig::desk();
  } else if (preset == "paper") {
    base = SNetConfig::paper();
  } else {
    throw std::invalid_argument("snet: unknown preset '" + preset + "'");
  }
  std::vector<int> down, up;
  for (const auto& b : base.down) down.push_back(b.layers);
  for (const auto& b : base.up) up.push_back(b.layers);
  int base_width = base.base_width, growth = base.down[0].growth;
  double dropout = base.down[0].dropout;
  SNetFlags flags = base.flags;
  read(j, "base_width", base_width);
  read(j, "layers_down", down);
  read(j, "layers_up", up);
  read(j, "growth", growth);
  read(j, "dropout", dropout);
  read(j, "flags", flags);
  c = SNetConfig::make(base_width, down, up, growth, dropout, flags);
  read(j, "input_channels", c.input_channels);
  c.validate();
}

void to_json(Json& j, const DiscriminatorConfig& c) {
  j = Json{{"widths", c.widths}, {"leaky_slope", c.leaky_slope}, {"normalization", c.normalization}};
}
void from_json(const Json& j, DiscriminatorConfig& c) {
  require_known_keys(j, {"widths", "leaky_slope", "normalization"}, "discriminator");
  read(j, "widths", c.widths);
  read(j, "leaky_slope", c.leaky_slope);
  read(j, "normalization", c.normalization);
  c.validate();
}

void to_json(Json& j, const DomainSpec& c) {
  j = Json{{"dims", c.dims},
           {"spacing", c.spacing},
           {"count", c.count},
           {"radius_min", c.radius_min},
           {"radius_max", c.radius_max},
           {"deformation", c.deformation},
           {"blur_sigma", c.blur_sigma},
           {"noise_sigma", c.noise_sigma},
           {"foreground_level", c.foreground_level},
           {"background_level", c.background_level},
           {"texture_amplitude", c.texture_amplitude},
           {"seed", c.seed}};
}

// {"preset": "source"|"target"} selects the starting values; other keys override.
void from_json(const Json& j, DomainSpec& c) {
  require_known_keys(j,
                     {"preset", "dims", "spacing", "count", "radius_min", "radius_max", "deformation", "blur_sigma",
                      "noise_sigma", "foreground_level", "background_level", "texture_amplitude", "seed"},
                     "domain");
  if (j.contains("preset")) {
    const std::string p = j.at("preset").get<std::string>();
    if (p == "source") {
      c = DomainSpec::source_preset();
    } else if (p == "target") {
      c = DomainSpec::target_preset();
    } else {
      throw std::invalid_argument("domain: unknown preset '" + p + "'");
    }
  }
  read(j, "dims", c.dims);
  read(j, "spacing", c.spacing);
  read(j, "count", c.count);
  read(j, "radius_min", c.radius_min);
  read(j, "radius_max", c.radius_max);
  read(j, "deformation", c.deformation);
  read(j, "blur_sigma", c.blur_sigma);
  read(j, "noise_sigma", c.noise_sigma);
  read(j, "foreground_level", c.foreground_level);
  read(j, "background_level", c.background_level);
  read(j, "texture_amplitude", c.texture_amplitude);
  read(j, "seed", c.seed);
  c.validate();
}

void to_json(Json& j, const WindowSpec& c) { j = Json{{"window", c.window}, {"stride", c.stride}}; }
void from_json(const Json& j, WindowSpec& c) {
  require_known_keys(j, {"window", "stride"}, "window");
  read(j, "window", c.window);
  if (j.contains("stride")) {
    j.at("stride").get_to(c.stride);
  } else {
    c = WindowSpec::half_overlap(c.window);
  }
  c.validate();
}

void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("--set expects dotted.key=value, got '" + assignment + "'");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::parse_error&) {
    value = text;
  }
  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw std::invalid_argument("--set: empty key segment in '" + path + "'");
    if (dot == std::string::npos) {
      if (!node->is_object()) throw std::invalid_argument("--set: '" + path + "' does not name an object member");
      (*node)[key] = value;
      return;
    }
    if (!node->is_object()) throw std::invalid_argument("--set: '" + path + "' does not name an object member");
    if (!node->contains(key)) (*node)[key] = Json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace bowda
