#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "emac/density.hpp"
#include "emac/plane.hpp"
#include "emac/rng.hpp"
#include "emac/sam.hpp"
#include "emac/tensor.hpp"
#include "emac/tokens.hpp"

namespace emac {

struct DemoConfig {
  int patch = 8;       // p
  int channels = 64;   // C; divisible by 4 (pos embed) and by heads
  int depth = 4;       // encoder blocks
  int heads = 4;
  int mlp_ratio = 4;
  int in_channels = 1;  // grayscale; 3 switches the image projection to 3p^2

  void validate() const {
    if (patch <= 0 || channels <= 0 || depth <= 0 || heads <= 0 || mlp_ratio <= 0)
      throw std::invalid_argument("demo config: all sizes must be positive");
    if (channels % 4 != 0)
      throw std::invalid_argument("demo config: channels must be divisible by 4");
    if (channels % heads != 0)
      throw std::invalid_argument("demo config: channels must be divisible by heads");
    if (in_channels != 1 && in_channels != 3)
      throw std::invalid_argument("demo config: in_channels must be 1 or 3");
  }
};

struct SamConfig {
  double mask_ratio = 0.72;
  double brp = 0.2;        // P
  double alpha = 1.0;      // Dirichlet concentration
  bool per_modality = false;
  bool random_image_masking = false;  // ablation baseline
  // probability of drawing the inference-time budget (all image tokens kept,
  // all density tokens masked) instead of the Dirichlet split, so the path
  // used at inference is also supervised during training
  double infer_budget_prob = 0.25;
};

// fixed 2-d sin-cos positional embedding, rows first then columns
inline Tensor sincos_pos_embed(int grid_rows, int grid_cols, int channels) {
  if (channels % 4 != 0)
    throw std::invalid_argument("pos embed: channels must be divisible by 4");
  const int q = channels / 4;
  std::vector<double> omega(q);
  for (int i = 0; i < q; ++i)
    omega[i] = std::pow(10000.0, -static_cast<double>(i) / q);
  Tensor pe = Tensor::zeros({grid_rows * grid_cols, channels});
  for (int t = 0; t < grid_rows * grid_cols; ++t) {
    const double r = t / grid_cols, c = t % grid_cols;
    double* row = pe.data().data() + static_cast<int64_t>(t) * channels;
    for (int i = 0; i < q; ++i) {
      row[i] = std::sin(r * omega[i]);
      row[q + i] = std::cos(r * omega[i]);
      row[2 * q + i] = std::sin(c * omega[i]);
      row[3 * q + i] = std::cos(c * omega[i]);
    }
  }
  return pe;
}

namespace nn {

struct Linear {
  Tensor w, b;

  void init(int in, int out, RngStream& rng, double stddev = 0.02) {
    w = Tensor::randn({in, out}, rng, stddev, true);
    b = Tensor::zeros({1, out}, true);
  }

  void init_zero(int in, int out) {
    w = Tensor::zeros({in, out}, true);
    b = Tensor::zeros({1, out}, true);
  }

  Tensor operator()(const Tensor& x) const { return add_row(matmul(x, w), b); }
};

struct LayerNorm {
  Tensor g, b;
  double eps = 1e-5;

  void init(int d) {
    g = Tensor::full({d}, 1.0, true);
    b = Tensor::zeros({d}, true);
  }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, g, b, eps); }
};

struct Attention {
  Linear q, k, v, proj;
  int heads = 1;

  void init(int dim, int heads_, RngStream& rng) {
    heads = heads_;
    q.init(dim, dim, rng);
    k.init(dim, dim, rng);
    v.init(dim, dim, rng);
    proj.init(dim, dim, rng);
  }

  Tensor operator()(const Tensor& q_in, const Tensor& kv_in) const {
    Tensor Q = q(q_in), K = k(kv_in), V = v(kv_in);
    const int d = Q.cols() / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    auto qs = split(Q, heads, 1);
    auto ks = split(K, heads, 1);
    auto vs = split(V, heads, 1);
    std::vector<Tensor> outs;
    for (int h = 0; h < heads; ++h) {
      Tensor scores = mul_scalar(matmul(qs[h], transpose(ks[h])), scale);
      outs.push_back(matmul(softmax_lastdim(scores), vs[h]));
    }
    return proj(heads == 1 ? outs[0] : concat(outs, 1));
  }
};

struct Mlp {
  Linear fc1, fc2;

  void init(int dim, int hidden, RngStream& rng) {
    fc1.init(dim, hidden, rng);
    fc2.init(hidden, dim, rng);
  }

  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
};

// pre-norm transformer block
struct Block {
  LayerNorm ln1, ln2;
  Attention attn;
  Mlp mlp;

  void init(int dim, int heads, int mlp_ratio, RngStream& rng) {
    ln1.init(dim);
    ln2.init(dim);
    attn.init(dim, heads, rng);
    mlp.init(dim, dim * mlp_ratio, rng);
  }

  Tensor operator()(const Tensor& x) const {
    Tensor n = ln1(x);
    Tensor y = add(x, attn(n, n));
    return add(y, mlp(ln2(y)));
  }
};

// cross-attention block: queries attend over a separate key/value sequence
struct CrossBlock {
  LayerNorm ln_q, ln_kv, ln2;
  Attention attn;
  Mlp mlp;

  void init(int dim, int heads, int mlp_ratio, RngStream& rng) {
    ln_q.init(dim);
    ln_kv.init(dim);
    ln2.init(dim);
    attn.init(dim, heads, rng);
    mlp.init(dim, dim * mlp_ratio, rng);
  }

  Tensor operator()(const Tensor& q, const Tensor& kv) const {
    Tensor y = add(q, attn(ln_q(q), ln_kv(kv)));
    return add(y, mlp(ln2(y)));
  }
};

inline void collect(std::vector<std::pair<std::string, Tensor>>& out,
                    const std::string& prefix, const Linear& l) {
  out.emplace_back(prefix + ".w", l.w);
  out.emplace_back(prefix + ".b", l.b);
}

inline void collect(std::vector<std::pair<std::string, Tensor>>& out,
                    const std::string& prefix, const LayerNorm& l) {
  out.emplace_back(prefix + ".g", l.g);
  out.emplace_back(prefix + ".b", l.b);
}

inline void collect(std::vector<std::pair<std::string, Tensor>>& out,
                    const std::string& prefix, const Attention& a) {
  collect(out, prefix + ".q", a.q);
  collect(out, prefix + ".k", a.k);
  collect(out, prefix + ".v", a.v);
  collect(out, prefix + ".proj", a.proj);
}

inline void collect(std::vector<std::pair<std::string, Tensor>>& out,
                    const std::string& prefix, const Mlp& m) {
  collect(out, prefix + ".fc1", m.fc1);
  collect(out, prefix + ".fc2", m.fc2);
}

inline void collect(std::vector<std::pair<std::string, Tensor>>& out,
                    const std::string& prefix, const Block& b) {
  collect(out, prefix + ".ln1", b.ln1);
  collect(out, prefix + ".attn", b.attn);
  collect(out, prefix + ".ln2", b.ln2);
  collect(out, prefix + ".mlp", b.mlp);
}

inline void collect(std::vector<std::pair<std::string, Tensor>>& out,
                    const std::string& prefix, const CrossBlock& b) {
  collect(out, prefix + ".ln_q", b.ln_q);
  collect(out, prefix + ".ln_kv", b.ln_kv);
  collect(out, prefix + ".attn", b.attn);
  collect(out, prefix + ".ln2", b.ln2);
  collect(out, prefix + ".mlp", b.mlp);
}

}  // namespace nn

struct ForwardTrainResult {
  Tensor pred_std;  // h x w, standardized units
  MaskPlan plan;
};

// The masked autoencoder: joint image+density tokenization, transformer
// encoding of the retained tokens, mask-token filling and cross-attention
// decoding back to a density map.
class DemoModel {
 public:
  DemoModel() = default;

  explicit DemoModel(const DemoConfig& cfg, RngStream& rng) : cfg_(cfg) {
    cfg_.validate();
    const int c = cfg_.channels;
    const int pin = cfg_.in_channels * cfg_.patch * cfg_.patch;
    embed_img_.init(pin, c, rng);
    embed_den_.init(cfg_.patch * cfg_.patch, c, rng);
    mod_img_ = Tensor::randn({1, c}, rng, 0.02, true);
    mod_den_ = Tensor::randn({1, c}, rng, 0.02, true);
    mask_token_ = Tensor::randn({1, c}, rng, 0.02, true);
    enc_.resize(cfg_.depth);
    for (auto& b : enc_) b.init(c, cfg_.heads, cfg_.mlp_ratio, rng);
    dec_cross_.init(c, cfg_.heads, cfg_.mlp_ratio, rng);
    dec_blocks_.resize(2);
    for (auto& b : dec_blocks_) b.init(c, cfg_.heads, cfg_.mlp_ratio, rng);
    dec_norm_.init(c);
    head_.init_zero(c, cfg_.patch * cfg_.patch);  // zero head: initial map is zero
  }

  const DemoConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    nn::collect(out, "embed_img", embed_img_);
    nn::collect(out, "embed_den", embed_den_);
    out.emplace_back("mod_img", mod_img_);
    out.emplace_back("mod_den", mod_den_);
    out.emplace_back("mask_token", mask_token_);
    for (size_t i = 0; i < enc_.size(); ++i)
      nn::collect(out, "enc." + std::to_string(i), enc_[i]);
    nn::collect(out, "dec.cross", dec_cross_);
    for (size_t i = 0; i < dec_blocks_.size(); ++i)
      nn::collect(out, "dec." + std::to_string(i), dec_blocks_[i]);
    nn::collect(out, "dec.norm", dec_norm_);
    nn::collect(out, "head", head_);
    return out;
  }

  std::vector<Tensor> params() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  // image channels -> N_I x C tokens with positional and modality embeddings
  Tensor embed_image_tokens(const std::vector<Plane>& channels) const {
    if (static_cast<int>(channels.size()) != cfg_.in_channels)
      throw std::invalid_argument("embed: expected " +
                                  std::to_string(cfg_.in_channels) +
                                  " image channels, got " +
                                  std::to_string(channels.size()));
    check_tileable(channels[0]);
    std::vector<Tensor> per_channel;
    for (const auto& ch : channels) {
      if (!ch.same_size(channels[0]))
        throw std::invalid_argument("embed: image channels differ in size");
      per_channel.push_back(patchify_op(to_tensor(ch), cfg_.patch));
    }
    Tensor patches =
        per_channel.size() == 1 ? per_channel[0] : concat(per_channel, 1);
    const int gr = channels[0].h / cfg_.patch, gc = channels[0].w / cfg_.patch;
    Tensor tok = embed_img_(patches);
    tok = add(tok, sincos_pos_embed(gr, gc, cfg_.channels));
    return add_row(tok, mod_img_);
  }

  Tensor embed_density_tokens(const Plane& density_std) const {
    check_tileable(density_std);
    Tensor patches = patchify_op(to_tensor(density_std), cfg_.patch);
    const int gr = density_std.h / cfg_.patch, gc = density_std.w / cfg_.patch;
    Tensor tok = embed_den_(patches);
    tok = add(tok, sincos_pos_embed(gr, gc, cfg_.channels));
    return add_row(tok, mod_den_);
  }

  // image tokens first, density tokens second, each row-major
  TokenSequence patchify_embed(const std::vector<Plane>& image,
                               const Plane& density_std) const {
    if (!image.at(0).same_size(density_std))
      throw std::invalid_argument("patchify_embed: image and density sizes differ");
    TokenSequence ts;
    ts.patch = cfg_.patch;
    ts.grid_rows = image[0].h / cfg_.patch;
    ts.grid_cols = image[0].w / cfg_.patch;
    Tensor ti = embed_image_tokens(image);
    Tensor td = embed_density_tokens(density_std);
    ts.tokens = concat({ti, td}, 0);
    const int n = ts.grid_rows * ts.grid_cols;
    for (int i = 0; i < n; ++i) {
      ts.modality.push_back(Modality::image);
      ts.position.push_back(i);
    }
    for (int i = 0; i < n; ++i) {
      ts.modality.push_back(Modality::density);
      ts.position.push_back(i);
    }
    return ts;
  }

  // retained tokens, in restored original order, through the encoder stack
  Tensor encode(const Tensor& retained) const {
    if (retained.shape().size() != 2 || retained.dim(0) < 1)
      throw std::invalid_argument("encode: empty retained sequence");
    if (retained.dim(1) != cfg_.channels)
      throw std::invalid_argument("encode: token width " +
                                  std::to_string(retained.dim(1)) + " != C " +
                                  std::to_string(cfg_.channels));
    Tensor x = retained;
    for (const auto& b : enc_) x = b(x);
    return x;
  }

  // Fill every masked density position with (mask token + positional
  // embedding), cross-attend over the full retained sequence, run the
  // two-block decoder and unpatchify the head output.
  Tensor decode(const Tensor& encoded, const MaskPlan& plan, int grid_rows,
                int grid_cols) const {
    plan.validate();
    const int kept = plan.n_image_ret + plan.n_density_ret;
    if (encoded.dim(0) != kept)
      throw std::invalid_argument("decode: encoded length " +
                                  std::to_string(encoded.dim(0)) +
                                  " inconsistent with plan budget " +
                                  std::to_string(kept));
    const int n_density = plan.n_density;
    if (n_density != grid_rows * grid_cols)
      throw std::invalid_argument("decode: plan density count does not match grid");
    Tensor pos = sincos_pos_embed(grid_rows, grid_cols, cfg_.channels);

    std::vector<int> kept_den, masked_den;
    for (int j = 0; j < n_density; ++j)
      (plan.mask_random[j] == 0 ? kept_den : masked_den).push_back(j);

    Tensor filled;  // N_D x C
    {
      Tensor masked_part;
      if (!masked_den.empty()) {
        Tensor rows = broadcast_rows(mask_token_, static_cast<int>(masked_den.size()));
        rows = add(rows, gather_rows(pos, masked_den));
        masked_part = scatter_rows(rows, masked_den, n_density);
      }
      if (!kept_den.empty()) {
        // retained density tokens sit after the image tokens in the
        // restored-order encoding
        Tensor enc_den = slice2d(encoded, plan.n_image_ret, kept, 0, cfg_.channels);
        Tensor kept_part = scatter_rows(enc_den, kept_den, n_density);
        filled = masked_den.empty() ? kept_part : add(kept_part, masked_part);
      } else {
        filled = masked_part;
      }
    }

    Tensor x = dec_cross_(filled, encoded);
    for (const auto& b : dec_blocks_) x = b(x);
    Tensor patches = head_(dec_norm_(x));
    return unpatchify_op(patches, grid_rows, grid_cols, cfg_.patch);
  }

  // Training-phase forward: patchify/embed both modalities, draw the token
  // budgets, mask, encode the survivors, decode the full density map.
  // forced_budget, when set, bypasses the Dirichlet draw (used by the
  // inference-equivalence checks).
  ForwardTrainResult forward_train(const std::vector<Plane>& image,
                                   const DensityMap& density_raw,
                                   const Standardizer& z, const SamConfig& sam,
                                   RngStream& rng,
                                   const std::pair<int, int>* forced_budget =
                                       nullptr) const {
    if (!image.at(0).same_size(density_raw))
      throw std::invalid_argument("forward_train: image and density sizes differ");
    TokenSequence ts = patchify_embed(image, z.standardize(density_raw));
    const int n = ts.grid_rows * ts.grid_cols;

    std::vector<double> v_d = patch_counts(density_raw, cfg_.patch);
    int ni_ret, nd_ret;
    if (forced_budget) {
      ni_ret = forced_budget->first;
      nd_ret = forced_budget->second;
    } else if (sam.infer_budget_prob > 0.0 && rng.uniform() < sam.infer_budget_prob) {
      ni_ret = n;
      nd_ret = 0;
    } else if (sam.per_modality) {
      std::tie(ni_ret, nd_ret) = per_modality_budget(n, n, sam.mask_ratio);
    } else {
      std::tie(ni_ret, nd_ret) =
          sample_token_budget(n, n, sam.mask_ratio, sam.alpha, rng);
    }

    MaskPlan plan = sam.random_image_masking
                        ? random_image_mask(n, ni_ret, rng)
                        : adaptive_mask(v_d, ni_ret, sam.brp, rng);
    plan.n_density = n;
    plan.n_density_ret = nd_ret;
    plan.mask_random = random_density_mask(n, nd_ret, rng);

    SelectedTokens sel = select_and_restore(ts, plan);
    Tensor enc = encode(sel.retained.tokens);
    Tensor pred = decode(enc, plan, ts.grid_rows, ts.grid_cols);
    return {pred, plan};
  }

  // Inference: density tokens fully masked and removed; all image tokens kept.
  Tensor forward_infer(const std::vector<Plane>& image) const {
    Tensor tokens = embed_image_tokens(image);
    const int gr = image[0].h / cfg_.patch, gc = image[0].w / cfg_.patch;
    const int n = gr * gc;
    MaskPlan plan;
    plan.n_image = n;
    plan.n_density = n;
    plan.n_image_ret = n;
    plan.n_density_ret = 0;
    plan.mask_adaptive.assign(n, 0);
    plan.mask_random.assign(n, 1);
    for (int i = 0; i < n; ++i) plan.keep_set.push_back(i);
    Tensor enc = encode(tokens);
    return decode(enc, plan, gr, gc);
  }

 private:
  void check_tileable(const Plane& p) const {
    if (p.h % cfg_.patch != 0 || p.w % cfg_.patch != 0)
      throw std::invalid_argument("patchify: " + std::to_string(p.h) + "x" +
                                  std::to_string(p.w) + " not tileable by patch " +
                                  std::to_string(cfg_.patch));
  }

  DemoConfig cfg_;
  nn::Linear embed_img_, embed_den_;
  Tensor mod_img_, mod_den_, mask_token_;
  std::vector<nn::Block> enc_;
  nn::CrossBlock dec_cross_;
  std::vector<nn::Block> dec_blocks_;
  nn::LayerNorm dec_norm_;
  nn::Linear head_;
};

}  // namespace emac
