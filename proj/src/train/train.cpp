#include "blocklm/train.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace blocklm {

double learning_rate_at(const TrainConfig& cfg, int64_t step) {
  const double peak = cfg.learning_rate;
  if (step < cfg.warmup_steps) return peak * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps + 1);
  if (cfg.lr_schedule == "constant") return peak;
  const double span = static_cast<double>(std::max<int64_t>(cfg.total_steps - cfg.warmup_steps, 1));
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span);
  const double floor = cfg.min_lr_ratio * peak;
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(const ParamList& params, const TrainConfig& cfg) : cfg_(cfg) {
  for (const auto& [name, t] : params.items()) {
    m_.emplace_back(static_cast<size_t>(t.numel()), 0.0f);
    v_.emplace_back(static_cast<size_t>(t.numel()), 0.0f);
  }
}

void AdamW::step(ParamList& params, double lr) {
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  auto& items = params.items();
  for (size_t i = 0; i < items.size(); ++i) {
    Tensor& p = items[i].second;
    if (!p.has_grad()) continue;
    auto w = p.values();
    auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const float decay = p.rank() >= 2 ? static_cast<float>(1.0 - lr * cfg_.weight_decay) : 1.0f;
    for (size_t k = 0; k < w.size(); ++k) {
      m[k] = static_cast<float>(b1 * m[k] + (1.0 - b1) * g[k]);
      v[k] = static_cast<float>(b2 * v[k] + (1.0 - b2) * g[k] * g[k]);
      const double mh = m[k] / c1, vh = v[k] / c2;
      w[k] = static_cast<float>(w[k] * decay - lr * mh / (std::sqrt(vh) + cfg_.eps));
    }
  }
}

Trainer::Trainer(Model& model, const TrainConfig& cfg) : model_(&model), cfg_(cfg), opt_(model.params(), cfg) {
  if (auto problems = validate(cfg); !problems.empty()) throw ConfigError(std::move(problems));
}

StepMetrics Trainer::train_step(const PackedBatch& batch) {
  ParamList& params = model_->params();
  params.zero_grad();
  LossResult res = model_->lm_loss(batch);
  if (!std::isfinite(res.mean)) {
    std::ostringstream msg;
    msg << "non-finite loss " << res.mean << " at step " << step_ << " (lr " << learning_rate_at(cfg_, step_)
        << ", " << res.count << " masked-in positions)";
    throw NonFiniteLossError(msg.str());
  }
  backward(res.loss);

  double sq = 0.0;
  for (auto& [name, t] : params.items()) {
    if (!t.has_grad()) continue;
    for (float g : t.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NonFiniteLossError("non-finite gradient norm at step " + std::to_string(step_));
  if (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) {
    const auto f = static_cast<float>(cfg_.grad_clip / norm);
    for (auto& [name, t] : params.items()) {
      if (!t.has_grad()) continue;
      for (float& g : t.mutable_grad()) g *= f;
    }
  }
  const double lr = learning_rate_at(cfg_, step_);
  opt_.step(params, lr);

  tokens_ += batch.tokens();
  StepMetrics m{step_, res.mean, norm, lr, tokens_};
  ++step_;
  return m;
}

std::vector<StepMetrics> train_model(Model& model, const PackedCorpus& corpus, const TrainConfig& cfg, int64_t steps,
                                     const std::function<void(const StepMetrics&)>& on_step) {
  Trainer trainer(model, cfg);
  BatchIterator it(corpus, cfg.batch_size, derive_seed(cfg.seed, "batches"));
  std::vector<StepMetrics> log;
  for (int64_t s = 0; s < steps; ++s) {
    PackedBatch b = it.next();
    log.push_back(trainer.train_step(b));
    if (on_step) on_step(log.back());
  }
  return log;
}

std::vector<PackedBatch> sequential_batches(const PackedCorpus& corpus, int64_t batch_size, int64_t max_batches) {
  std::vector<PackedBatch> out;
  for (int64_t start = 0; start < corpus.rows && static_cast<int64_t>(out.size()) < max_batches; start += batch_size) {
    std::vector<int64_t> rows;
    for (int64_t r = start; r < std::min(corpus.rows, start + batch_size); ++r) rows.push_back(r);
    out.push_back(rows_to_batch(corpus, rows));
  }
  return out;
}

double evaluate_loss(const Model& model, const std::vector<PackedBatch>& batches) {
  NoGradGuard guard;
  double sum = 0.0;
  int64_t count = 0;
  for (const auto& b : batches) {
    LossResult r = model.lm_loss(b);
    sum += r.mean * static_cast<double>(r.count);
    count += r.count;
  }
  if (count == 0) throw std::invalid_argument("evaluate_loss: no masked-in positions");
  return sum / static_cast<double>(count);
}

}  // namespace blocklm
