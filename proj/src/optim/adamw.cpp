#include <algorithm>
#include <cmath>
#include <numbers>

#include "patchrot/optim.hpp"

namespace patchrot::optim {

AdamW::AdamW(nn::ParameterList params, AdamWOptions options) : options_(options) {
  if (!(options.lr >= 0) || !(options.weight_decay >= 0) || !(options.eps > 0) || !(options.beta1 >= 0 && options.beta1 < 1) ||
      !(options.beta2 >= 0 && options.beta2 < 1)) {
    throw std::invalid_argument("adamw: invalid hyperparameters");
  }
  slots_.reserve(params.size());
  for (auto& p : params) {
    const auto n = static_cast<std::size_t>(p.tensor.numel());
    slots_.push_back({std::move(p), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
  }
}

void AdamW::zero_grad() {
  for (auto& s : slots_) {
    if (s.param.trainable()) s.param.tensor.zero_grad();
  }
}

void AdamW::step() {
  for (const auto& s : slots_) {
    if (s.param.trainable() && !s.param.tensor.has_grad()) {
      throw std::logic_error("adamw: trainable parameter '" + s.param.name + "' has no gradient");
    }
  }
  ++t_;
  const double lr = options_.lr;
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double decay = lr * options_.weight_decay;
  for (auto& s : slots_) {
    if (!s.param.trainable()) continue;
    Tensor& p = s.param.tensor;
    const std::vector<double> g = p.grad().to_vector();
    auto update = [&]<class T>(std::span<T> w) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
        s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
        const double step = lr * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + options_.eps);
        const double old = static_cast<double>(w[i]);
        w[i] = static_cast<T>(old - decay * old - step);
      }
    };
    if (p.dtype() == DType::f32) {
      update(p.data<float>());
    } else {
      update(p.data<double>());
    }
  }
}

void AdamW::load_state(std::int64_t step, const std::map<std::string, std::pair<Tensor, Tensor>>& moments) {
  if (step < 0) throw std::invalid_argument("adamw: negative step count");
  for (auto& s : slots_) {
    auto it = moments.find(s.param.name);
    if (it == moments.end()) continue;
    const auto& [m, v] = it->second;
    if (m.numel() != s.param.tensor.numel() || v.numel() != s.param.tensor.numel()) {
      throw ShapeError("adamw: moment size mismatch for '" + s.param.name + "'");
    }
    s.m = m.to_vector();
    s.v = v.to_vector();
  }
  t_ = step;
}

double lr_at(const LrSchedule& schedule, std::int64_t step, std::int64_t steps_per_epoch) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  if (steps_per_epoch < 1 || schedule.total_epochs < 1) throw std::invalid_argument("lr_at: empty schedule");
  const std::int64_t total = static_cast<std::int64_t>(schedule.total_epochs) * steps_per_epoch;
  const std::int64_t warmup =
      static_cast<std::int64_t>(std::clamp(schedule.warmup_epochs, 0, schedule.total_epochs)) * steps_per_epoch;
  if (step >= total) return schedule.min_lr;
  if (step < warmup) return schedule.base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  // Cosine anchored at the last warmup step so the two pieces meet.
  const std::int64_t anchor = std::max<std::int64_t>(warmup - 1, 0);
  const std::int64_t span = total - 1 - anchor;
  if (span <= 0) return schedule.base_lr;
  const double progress = static_cast<double>(step - anchor) / static_cast<double>(span);
  return schedule.min_lr +
         (schedule.base_lr - schedule.min_lr) * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

}  // namespace patchrot::optim
