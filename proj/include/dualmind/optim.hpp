#pragma once
// AdamW with decoupled weight decay and bias correction:
//   m <- b1 m + (1-b1) g        v <- b2 v + (1-b2) g^2
//   theta -= lr * ( m/(1-b1^t) / (sqrt(v/(1-b2^t)) + eps) + wd * theta )
// The step counter advances by exactly 1 per apply(). A parameter whose
// gradient contains a non-finite value is skipped for that apply (moments
// untouched) and counted; a parameter with no gradient allocated at all is
// left alone entirely. Internal arithmetic runs in double regardless of S.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dualmind/autodiff.hpp"

namespace dm {

struct adamw_config {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <class S>
class adamw {
 public:
  adamw(std::vector<std::pair<std::string, tensor<S>>> params, adamw_config cfg)
      : params_(std::move(params)), cfg_(cfg) {
    slots_.reserve(params_.size());
    for (auto& [name, p] : params_) {
      (void)name;
      slots_.push_back(slot{std::vector<double>(std::size_t(p.numel()), 0.0),
                            std::vector<double>(std::size_t(p.numel()), 0.0)});
    }
  }

  void apply() {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      tensor<S>& p = params_[k].second;
      if (!p.has_grad()) continue;
      const auto& g = p.grad_view();
      bool finite = true;
      for (S v : g)
        if (!std::isfinite(double(v))) {
          finite = false;
          break;
        }
      if (!finite) {
        ++skipped_;
        continue;
      }
      auto& m = slots_[k].m;
      auto& v = slots_[k].v;
      auto& val = p.value();
      for (std::size_t i = 0; i < val.size(); ++i) {
        const double gi = double(g[i]);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        const double theta = double(val[i]);
        val[i] = S(theta - cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                      cfg_.weight_decay * theta));
      }
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) {
      (void)name;
      p.clear_grad();
    }
  }

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  std::int64_t step_count() const { return step_; }
  std::int64_t skipped() const { return skipped_; }
  std::size_t group_count() const { return params_.size(); }
  const std::string& name_of(std::size_t k) const { return params_[k].first; }

  // Moment access for checkpointing (values copied through the S dtype).
  tensor<S> moment_m(std::size_t k) const { return to_tensor(slots_[k].m, params_[k].second); }
  tensor<S> moment_v(std::size_t k) const { return to_tensor(slots_[k].v, params_[k].second); }
  void restore(std::size_t k, const tensor<S>& m, const tensor<S>& v) {
    check(m.numel() == params_[k].second.numel() && v.numel() == params_[k].second.numel(),
          "adamw::restore: moment size mismatch for " + params_[k].first);
    for (std::size_t i = 0; i < slots_[k].m.size(); ++i) {
      slots_[k].m[i] = double(m.value()[i]);
      slots_[k].v[i] = double(v.value()[i]);
    }
  }
  void set_step_count(std::int64_t t) { step_ = t; }

 private:
  struct slot {
    std::vector<double> m, v;
  };
  static tensor<S> to_tensor(const std::vector<double>& src, const tensor<S>& like) {
    std::vector<S> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = S(src[i]);
    return tensor<S>::from(like.shape(), std::move(out));
  }

  std::vector<std::pair<std::string, tensor<S>>> params_;
  std::vector<slot> slots_;
  adamw_config cfg_;
  std::int64_t step_ = 0;
  std::int64_t skipped_ = 0;
};

}  // namespace dm
