// Copyright (c) 2026, The mlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Generate a small four-domain click log, train plain, mlora and moe models on
// it, and print each model's test WAUC.

#include <cstdio>

#include "mlora/mlora.hpp"

int main() {
  mlora::SyntheticSpec spec;
  spec.users = 600;
  spec.items = 600;
  spec.interactions_per_domain = {3000};
  spec.divergence = 0.8;
  spec.latent_dim = 2;
  spec.noise = 0.1;
  spec.factor_mean = 1.0;
  spec.popularity_skew = 0.9;
  const mlora::Dataset data = mlora::generate_synthetic(spec);
  const mlora::Splits splits = mlora::split_dataset(data, {}, 1);

  mlora::TrainConfig train;
  train.lr = 3e-3;
  train.gate_lr = 0.2;
  train.epochs = {4, 4, 4};

  for (auto mode : {mlora::Mode::kPlain, mlora::Mode::kMlora, mlora::Mode::kMoe}) {
    mlora::ModelConfig model;
    model.mode = mode;
    const auto result = mlora::train_pipeline(train, splits, model);
    std::printf("%-6s wauc %.4f\n", mlora::to_string(mode).c_str(), result.test.wauc);
  }
}
