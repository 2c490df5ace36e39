#pragma once

// Multi-head attention and deformable grid attention. Both are composed
// from tape primitives, so gradients flow through queries, values, learned
// offsets and weights without bespoke backward code.

#include "bevflow/core/nn.hpp"
#include "bevflow/core/sampling.hpp"
#include "bevflow/core/tensor.hpp"

namespace bevflow {

struct AttentionConfig {
  int heads = 4;
  int head_dim = 8;
  int mlp_dim = 64;
  int depth = 1;

  int embed_dim() const { return heads * head_dim; }
  void validate() const {
    if (heads < 1 || head_dim < 1 || mlp_dim < 1 || depth < 1)
      throw std::invalid_argument("attention config: all fields must be positive");
  }
};

struct DeformableConfig {
  int n_points = 4;
  double offset_scale = 2.0;  // cells

  void validate() const {
    if (n_points < 1) throw std::invalid_argument("deformable config: n_points must be >= 1");
  }
};

inline AttentionConfig make_attention_config(int embed_dim, int heads, int mlp_dim = 64, int depth = 1) {
  if (heads < 1 || embed_dim % heads != 0)
    throw std::invalid_argument("attention config: embed dim " + std::to_string(embed_dim) +
                                " not divisible by " + std::to_string(heads) + " heads");
  return AttentionConfig{heads, embed_dim / heads, mlp_dim, depth};
}

template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& store, const std::string& prefix, const AttentionConfig& cfg, Rng& rng)
      : cfg_(cfg),
        wq_(store, prefix + ".q", cfg.embed_dim(), cfg.embed_dim(), rng),
        wk_(store, prefix + ".k", cfg.embed_dim(), cfg.embed_dim(), rng),
        wv_(store, prefix + ".v", cfg.embed_dim(), cfg.embed_dim(), rng),
        wo_(store, prefix + ".o", cfg.embed_dim(), cfg.embed_dim(), rng) {
    cfg_.validate();
  }

  // q: MxD, k: NxD, v: NxD -> MxD
  Tensor<T> operator()(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) const {
    const int D = cfg_.embed_dim();
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != D || k.dim(1) != D || v.dim(1) != D)
      throw std::invalid_argument("attention: expected MxD/NxD/NxD with D=" + std::to_string(D));
    if (k.dim(0) != v.dim(0)) throw std::invalid_argument("attention: key/value row counts differ");
    Tensor<T> qp = wq_(q), kp = wk_(k), vp = wv_(v);
    const int hd = cfg_.head_dim;
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    std::vector<Tensor<T>> heads;
    heads.reserve(static_cast<size_t>(cfg_.heads));
    for (int h = 0; h < cfg_.heads; ++h) {
      Tensor<T> qh = slice_lastdim(qp, h * hd, hd);
      Tensor<T> kh = slice_lastdim(kp, h * hd, hd);
      Tensor<T> vh = slice_lastdim(vp, h * hd, hd);
      Tensor<T> attn = softmax_lastdim(scale(matmul(qh, transpose(kh)), inv_sqrt));
      heads.push_back(matmul(attn, vh));
    }
    return wo_(concat_lastdim(heads));
  }

  const AttentionConfig& config() const { return cfg_; }
  Linear<T>& q_proj() { return wq_; }
  Linear<T>& k_proj() { return wk_; }
  Linear<T>& v_proj() { return wv_; }
  Linear<T>& out_proj() { return wo_; }

 private:
  AttentionConfig cfg_;
  Linear<T> wq_, wk_, wv_, wo_;
};

// Deformable attention into an H x W x D value grid. Per head, n_points
// sampling locations around each query's reference cell; offsets come from
// a tanh-bounded linear map of the query, mixing weights from a
// softmax-per-head linear map.
template <typename T>
class DeformableAttention {
 public:
  DeformableAttention() = default;
  DeformableAttention(ParamStore<T>& store, const std::string& prefix, int heads, int head_dim,
                      const DeformableConfig& cfg, Rng& rng)
      : heads_(heads),
        head_dim_(head_dim),
        cfg_(cfg),
        offset_(store, prefix + ".off", heads * head_dim, heads * cfg.n_points * 2, rng),
        weight_(store, prefix + ".wgt", heads * head_dim, heads * cfg.n_points, rng),
        value_(store, prefix + ".val", heads * head_dim, heads * head_dim, rng),
        out_(store, prefix + ".out", heads * head_dim, heads * head_dim, rng) {
    cfg_.validate();
    if (heads < 1 || head_dim < 1) throw std::invalid_argument("deformable: heads/head_dim must be positive");
  }

  // queries: RxD, ref_pts: Rx2 continuous (row, col) in grid cells,
  // value H x W x D -> RxD
  Tensor<T> operator()(const Tensor<T>& queries, const Tensor<T>& ref_pts, const Tensor<T>& value) const {
    const int D = heads_ * head_dim_;
    if (queries.rank() != 2 || queries.dim(1) != D)
      throw std::invalid_argument("deformable: queries must be RxD, got " + shape_str(queries.shape()));
    if (ref_pts.rank() != 2 || ref_pts.dim(1) != 2 || ref_pts.dim(0) != queries.dim(0))
      throw std::invalid_argument("deformable: ref_pts must be Rx2 matching queries");
    if (value.rank() != 3 || value.dim(2) != D)
      throw std::invalid_argument("deformable: value must be HxWxD, got " + shape_str(value.shape()));
    const int R = queries.dim(0), H = value.dim(0), W = value.dim(1);
    const int K = cfg_.n_points;

    Tensor<T> offsets = scale(bevflow::tanh(offset_(queries)), static_cast<T>(cfg_.offset_scale));
    Tensor<T> weights = attention_weights(queries);  // Rx(heads*K)
    Tensor<T> v = value_(value.reshaped({H * W, D}));

    // each query's reference repeated K times
    std::vector<int64_t> rep(static_cast<size_t>(R) * K);
    for (int r = 0; r < R; ++r)
      for (int k = 0; k < K; ++k) rep[static_cast<size_t>(r) * K + k] = r;
    Tensor<T> ref_rep = gather_rows(ref_pts, rep);

    std::vector<Tensor<T>> head_outs;
    head_outs.reserve(static_cast<size_t>(heads_));
    for (int h = 0; h < heads_; ++h) {
      Tensor<T> off_h = slice_lastdim(offsets, h * K * 2, K * 2).reshaped({R * K, 2});
      Tensor<T> pts_h = add(ref_rep, off_h);
      Tensor<T> grid_h = slice_lastdim(v, h * head_dim_, head_dim_).reshaped({H, W, head_dim_});
      Tensor<T> samples = bilinear_sample(grid_h, pts_h);
      Tensor<T> w_h = slice_lastdim(weights, h * K, K).reshaped({R * K});
      head_outs.push_back(group_sum_rows(scale_rows(samples, w_h), K));
    }
    return out_(concat_lastdim(head_outs));
  }

  // softmax-per-head mixing weights, exposed for inspection: Rx(heads*K)
  Tensor<T> attention_weights(const Tensor<T>& queries) const {
    const int R = queries.dim(0), K = cfg_.n_points;
    Tensor<T> logits = weight_(queries).reshaped({R * heads_, K});
    return softmax_lastdim(logits).reshaped({R, heads_ * K});
  }

  int heads() const { return heads_; }
  int head_dim() const { return head_dim_; }
  const DeformableConfig& config() const { return cfg_; }
  Linear<T>& offset_proj() { return offset_; }
  Linear<T>& weight_proj() { return weight_; }
  Linear<T>& value_proj() { return value_; }
  Linear<T>& out_proj() { return out_; }

 private:
  int heads_ = 0, head_dim_ = 0;
  DeformableConfig cfg_;
  Linear<T> offset_, weight_, value_, out_;
};

// Single-query form: q is a D-vector attending into value at grid point p.
// p must lie inside the grid; sampling offsets may still leave it, in which
// case those samples read zero.
template <typename T>
Tensor<T> deformable_attention(const DeformableAttention<T>& attn, const Tensor<T>& q, double row, double col,
                               const Tensor<T>& value) {
  if (value.rank() != 3) throw std::invalid_argument("deformable: value must be HxWxD");
  if (row < 0 || row > value.dim(0) - 1 || col < 0 || col > value.dim(1) - 1)
    throw std::invalid_argument("deformable: reference point (" + std::to_string(row) + "," + std::to_string(col) +
                                ") outside grid " + shape_str(value.shape()));
  Tensor<T> ref = Tensor<T>::from_data({1, 2}, {static_cast<T>(row), static_cast<T>(col)});
  const int d = static_cast<int>(q.numel());
  return attn(q.reshaped({1, d}), ref, value).reshaped({d});
}

namespace testing {

// identity weight helpers for the degenerate-configuration checks
template <typename T>
void set_identity(Tensor<T>& w) {
  if (w.rank() != 2 || w.dim(0) != w.dim(1)) throw std::invalid_argument("set_identity: need square matrix");
  const int n = w.dim(0);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) w[static_cast<int64_t>(r) * n + c] = r == c ? T(1) : T(0);
}

template <typename T>
void set_zero(Tensor<T>& w) {
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = T(0);
}

}  // namespace testing

}  // namespace bevflow
