#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "emac/tensor.hpp"

namespace emac {

// decoupled weight decay adaptive-moment optimizer; lr_scales, when given,
// multiplies the learning rate per parameter tensor (layer-wise lr decay)
class AdamW {
 public:
  explicit AdamW(std::vector<Tensor> params, double weight_decay = 0.05,
                 double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                 std::vector<double> lr_scales = {})
      : params_(std::move(params)), scales_(std::move(lr_scales)), wd_(weight_decay),
        b1_(beta1), b2_(beta2), eps_(eps) {
    if (!scales_.empty() && scales_.size() != params_.size())
      throw std::invalid_argument("adamw: lr_scales length must match params");
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& data = params_[i].data();
      const auto& grad = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      const double plr = scales_.empty() ? lr : lr * scales_[i];
      for (size_t k = 0; k < data.size(); ++k) {
        m[k] = b1_ * m[k] + (1.0 - b1_) * grad[k];
        v[k] = b2_ * v[k] + (1.0 - b2_) * grad[k] * grad[k];
        const double mhat = m[k] / bc1;
        const double vhat = v[k] / bc2;
        data[k] -= plr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * data[k]);
      }
    }
  }

  int64_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<double> scales_;
  std::vector<std::vector<double>> m_, v_;
  double wd_, b1_, b2_, eps_;
  int64_t t_ = 0;
};

// Layer-wise lr multipliers keyed on parameter names: the patch/modality
// embeddings sit at depth 0, encoder block i at depth i+1, everything after
// the encoder (decoder, heads, TCF) at full rate. decay 1.0 disables.
inline std::vector<double> layer_lr_scales(
    const std::vector<std::pair<std::string, Tensor>>& named, int encoder_depth,
    double decay) {
  std::vector<double> scales;
  scales.reserve(named.size());
  for (const auto& [name, t] : named) {
    int layer = encoder_depth + 1;
    if (name.rfind("embed_", 0) == 0 || name.rfind("mod_", 0) == 0) {
      layer = 0;
    } else if (name.rfind("enc.", 0) == 0) {
      layer = 1 + std::stoi(name.substr(4, name.find('.', 4) - 4));
    }
    scales.push_back(std::pow(decay, encoder_depth + 1 - layer));
  }
  return scales;
}

// linear warm-up then cosine decay; warm-up capped at a quarter of the run so
// short runs are not all warm-up
struct LrSchedule {
  double base_lr = 1.5e-3;
  double warmup_epochs = 15.0;
  double total_epochs = 30.0;

  static LrSchedule make(double base_lr, int warmup_epochs, int total_epochs) {
    LrSchedule s;
    s.base_lr = base_lr;
    s.total_epochs = total_epochs;
    s.warmup_epochs = std::min(static_cast<double>(warmup_epochs), total_epochs / 4.0);
    return s;
  }

  // epoch_frac advances continuously over the run, in [0, total_epochs]
  double at(double epoch_frac) const {
    if (total_epochs <= 0.0) throw std::invalid_argument("lr schedule: no epochs");
    if (warmup_epochs > 0.0 && epoch_frac < warmup_epochs)
      return base_lr * epoch_frac / warmup_epochs;
    const double span = std::max(total_epochs - warmup_epochs, 1e-12);
    const double t = std::min((epoch_frac - warmup_epochs) / span, 1.0);
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
  }
};

}  // namespace emac
