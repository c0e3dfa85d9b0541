#pragma once

#include "nptt/data.hpp"
#include "nptt/trainer.hpp"

// Small four-class task shared by the module tests.
namespace toy {

inline nptt::SyntheticOptions data_options(std::uint64_t seed = 1) {
  nptt::SyntheticOptions o;
  o.num_classes = 4;
  o.train_per_class = 80;
  o.test_per_class = 100;
  o.side = 64;
  o.seed = seed;
  return o;
}

inline nptt::TrainConfig config(std::uint64_t seed = 1) {
  nptt::TrainConfig c;
  c.height = 3;
  c.epochs = 30;
  c.batch_size = 16;
  c.seed = seed;
  c.backbone.input_side = 64;
  return c;
}

}  // namespace toy
