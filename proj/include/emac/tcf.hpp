#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "emac/demo.hpp"
#include "emac/flow.hpp"
#include "emac/tensor.hpp"

namespace emac {

struct TcfConfig {
  int fusion_patch = 8;   // p_f
  int channels = 64;      // C_f, single-head attention width
  bool query_warped = false;  // alternative reading of the cross-attention args

  void validate() const {
    if (fusion_patch <= 0 || channels <= 0)
      throw std::invalid_argument("tcf config: sizes must be positive");
  }
};

// Single-head cross-attention over density patches. The output projection is
// zero-initialized, so fusion starts as the identity skip connection.
class TcfHead {
 public:
  TcfHead() = default;

  TcfHead(const TcfConfig& cfg, RngStream& rng) : cfg_(cfg) {
    cfg_.validate();
    const int pin = cfg_.fusion_patch * cfg_.fusion_patch;
    wq_.init(pin, cfg_.channels, rng);
    wk_.init(pin, cfg_.channels, rng);
    wv_.init(pin, cfg_.channels, rng);
    out_.init_zero(cfg_.channels, pin);
  }

  const TcfConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    nn::collect(out, "tcf.q", wq_);
    nn::collect(out, "tcf.k", wk_);
    nn::collect(out, "tcf.v", wv_);
    nn::collect(out, "tcf.out", out_);
    return out;
  }

  std::vector<Tensor> params() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  // temporal density residual: queries from the current prediction, keys and
  // values from the warped previous one
  Tensor residual(const Tensor& d_warp, const Tensor& d_cur) const {
    if (d_warp.shape() != d_cur.shape())
      throw std::invalid_argument("tcf residual: map shapes differ");
    const int h = d_cur.dim(0), w = d_cur.dim(1), p = cfg_.fusion_patch;
    if (h % p != 0 || w % p != 0)
      throw std::invalid_argument("tcf residual: " + std::to_string(h) + "x" +
                                  std::to_string(w) + " not tileable by patch " +
                                  std::to_string(p));
    Tensor cur_tok = patchify_op(d_cur, p);
    Tensor warp_tok = patchify_op(d_warp, p);
    const Tensor& q_src = cfg_.query_warped ? warp_tok : cur_tok;
    const Tensor& kv_src = cfg_.query_warped ? cur_tok : warp_tok;
    Tensor q = wq_(q_src), k = wk_(kv_src), v = wv_(kv_src);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.channels));
    Tensor attn = softmax_lastdim(mul_scalar(matmul(q, transpose(k)), scale));
    Tensor patches = out_(matmul(attn, v));
    return unpatchify_op(patches, h / p, w / p, p);
  }

  // Eq-style fusion: warp the previous prediction, compute the residual,
  // add it to the current prediction
  Tensor fuse(const Tensor& d_cur, const Tensor& d_prev, const FlowField& flow) const {
    Tensor warped = warp_bilinear(d_prev, flow);
    return add(residual(warped, d_cur), d_cur);
  }

 private:
  TcfConfig cfg_;
  nn::Linear wq_, wk_, wv_, out_;
};

}  // namespace emac
