#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "blocklm/config.hpp"
#include "blocklm/data.hpp"
#include "blocklm/model.hpp"

namespace blocklm {

// Learning rate at 0-based step s: linear warmup reaching the peak at
// s = warmup_steps, then cosine decay to min_lr_ratio * peak at total_steps
// (or flat with lr_schedule "constant").
double learning_rate_at(const TrainConfig& cfg, int64_t step);

// AdamW with decoupled weight decay applied to matrices only.
class AdamW {
 public:
  AdamW(const ParamList& params, const TrainConfig& cfg);

  // Applies one update with the given learning rate to grads currently held.
  void step(ParamList& params, double lr);
  int64_t steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  int64_t t_ = 0;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepMetrics {
  int64_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
  double lr = 0.0;
  int64_t tokens_seen = 0;
};

class Trainer {
 public:
  Trainer(Model& model, const TrainConfig& cfg);

  StepMetrics train_step(const PackedBatch& batch);
  int64_t step() const { return step_; }
  int64_t tokens_seen() const { return tokens_; }

 private:
  Model* model_;
  TrainConfig cfg_;
  AdamW opt_;
  int64_t step_ = 0;
  int64_t tokens_ = 0;
};

// Runs `steps` train steps over epoch-shuffled batches of `corpus` (batch
// order seeded from cfg.seed). on_step sees every step's metrics.
std::vector<StepMetrics> train_model(Model& model, const PackedCorpus& corpus, const TrainConfig& cfg, int64_t steps,
                                     const std::function<void(const StepMetrics&)>& on_step = {});

// The first `max_batches` batches of `corpus` in row order.
std::vector<PackedBatch> sequential_batches(const PackedCorpus& corpus, int64_t batch_size, int64_t max_batches);

// Mean lm_loss over the given batches (no gradient).
double evaluate_loss(const Model& model, const std::vector<PackedBatch>& batches);

}  // namespace blocklm
