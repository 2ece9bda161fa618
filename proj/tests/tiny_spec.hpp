#pragma once

#include "bowda/trainer.hpp"

// A strategy run small enough for unit tests: a few tiny phantoms, a
// width-4 network and two short epochs per phase.
inline bowda::ExperimentSpec tiny_spec(bowda::Strategy strategy, std::uint64_t seed = 0) {
  using namespace bowda;
  ExperimentSpec s;
  s.strategy = strategy;
  s.seed = seed;

  DomainSpec src = DomainSpec::source_preset();
  src.dims = {12, 24, 24};
  src.radius_min = 4;
  src.radius_max = 6;
  src.count = 3;
  DomainSpec tgt = DomainSpec::target_preset();
  tgt.dims = {12, 16, 16};
  tgt.radius_min = 3;
  tgt.radius_max = 4.5;
  tgt.count = 4;
  s.source.phantom = src;
  s.target.phantom = tgt;
  s.target.val_count = 2;

  s.sgd = {0.01, 0.9, 1e-6, 2};
  s.discriminator_sgd = s.sgd;
  s.snet = SNetConfig::make(4, {1, 1, 1}, {1, 1, 1}, 2, 0.0);
  s.discriminator.widths = {4, 4, 4};
  s.epochs = {2, 2, 2, 2};
  s.steps_per_epoch = 2;
  s.crop = {{8, 16, 16}};
  s.window = {{8, 16, 16}, {4, 8, 8}};
  s.validate_every = 1;
  return s;
}
