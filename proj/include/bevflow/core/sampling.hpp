#pragma once

// Grid sampling and pooling ops. Coordinates are continuous (row, col) cell
// indices; everything outside the grid reads as zero and receives no
// gradient mass.

#include "bevflow/core/tensor.hpp"

namespace bevflow {

// 4-corner bilinear interpolation of a H x W x C grid at P continuous
// (row, col) points. Differentiable in both the grid and the points.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& grid, const Tensor<T>& pts) {
  if (grid.rank() != 3)
    throw std::invalid_argument("bilinear_sample: grid must be HxWxC, got " + shape_str(grid.shape()));
  if (pts.rank() != 2 || pts.dim(1) != 2)
    throw std::invalid_argument("bilinear_sample: pts must be Px2, got " + shape_str(pts.shape()));
  const int H = grid.dim(0), W = grid.dim(1), C = grid.dim(2), P = pts.dim(0);
  Tensor<T> out = Tensor<T>::zeros({P, C});

  auto corner = [&](int r, int c) -> const T* {
    if (r < 0 || r >= H || c < 0 || c >= W) return nullptr;
    return grid.data() + (static_cast<int64_t>(r) * W + c) * C;
  };

  for (int p = 0; p < P; ++p) {
    const T row = pts[2 * p], col = pts[2 * p + 1];
    if (!std::isfinite(row) || !std::isfinite(col))
      throw std::invalid_argument("bilinear_sample: non-finite point " + std::to_string(p));
    const int r0 = static_cast<int>(std::floor(row)), c0 = static_cast<int>(std::floor(col));
    const T fr = row - static_cast<T>(r0), fc = col - static_cast<T>(c0);
    const T w00 = (T(1) - fr) * (T(1) - fc), w01 = (T(1) - fr) * fc;
    const T w10 = fr * (T(1) - fc), w11 = fr * fc;
    const T* g00 = corner(r0, c0);
    const T* g01 = corner(r0, c0 + 1);
    const T* g10 = corner(r0 + 1, c0);
    const T* g11 = corner(r0 + 1, c0 + 1);
    T* o = out.data() + static_cast<int64_t>(p) * C;
    for (int ch = 0; ch < C; ++ch) {
      T v = T(0);
      if (g00) v += w00 * g00[ch];
      if (g01) v += w01 * g01[ch];
      if (g10) v += w10 * g10[ch];
      if (g11) v += w11 * g11[ch];
      o[ch] = v;
    }
  }

  if (detail::any_tracked<T>({&grid, &pts})) {
    auto gg = grid.tracked() ? grid.grad_handle() : nullptr;
    auto gp = pts.tracked() ? pts.grad_handle() : nullptr;
    out.attach_node(
        {grid.node(), pts.node()},
        [gg, gp, dgrid = grid.data_handle(), dpts = pts.data_handle(), H, W, C, P](const std::vector<T>& go) {
          auto in_range = [&](int r, int c) { return r >= 0 && r < H && c >= 0 && c < W; };
          for (int p = 0; p < P; ++p) {
            const T row = (*dpts)[2 * static_cast<size_t>(p)], col = (*dpts)[2 * static_cast<size_t>(p) + 1];
            const int r0 = static_cast<int>(std::floor(row)), c0 = static_cast<int>(std::floor(col));
            const T fr = row - static_cast<T>(r0), fc = col - static_cast<T>(c0);
            const T cw[4] = {(T(1) - fr) * (T(1) - fc), (T(1) - fr) * fc, fr * (T(1) - fc), fr * fc};
            // d(weight)/d(row), d(weight)/d(col) per corner
            const T dwr[4] = {-(T(1) - fc), -fc, (T(1) - fc), fc};
            const T dwc[4] = {-(T(1) - fr), (T(1) - fr), -fr, fr};
            const int rr[4] = {r0, r0, r0 + 1, r0 + 1};
            const int cc[4] = {c0, c0 + 1, c0, c0 + 1};
            T grow = T(0), gcol = T(0);
            for (int k = 0; k < 4; ++k) {
              if (!in_range(rr[k], cc[k])) continue;
              const size_t gbase = (static_cast<size_t>(rr[k]) * W + cc[k]) * C;
              for (int ch = 0; ch < C; ++ch) {
                const T gout = go[static_cast<size_t>(p) * C + ch];
                if (gg) (*gg)[gbase + ch] += gout * cw[k];
                const T gv = (*dgrid)[gbase + ch];
                grow += gout * dwr[k] * gv;
                gcol += gout * dwc[k] * gv;
              }
            }
            if (gp) {
              (*gp)[2 * static_cast<size_t>(p)] += grow;
              (*gp)[2 * static_cast<size_t>(p) + 1] += gcol;
            }
          }
        });
  }
  return out;
}

template <typename T>
struct PoolResult {
  Tensor<T> grid;    // H x W x C
  int64_t dropped;   // points whose cell index was out of range
};

// Sums point features into their BEV cells. cells[k] is the linear cell
// index row*W+col, or any negative/out-of-range value to drop the point.
template <typename T>
PoolResult<T> scatter_add_pool(const Tensor<T>& feats, const std::vector<int64_t>& cells, int H, int W) {
  if (feats.rank() != 2 || feats.dim(0) != static_cast<int>(cells.size()))
    throw std::invalid_argument("scatter_add_pool: feats " + shape_str(feats.shape()) + " vs " +
                                std::to_string(cells.size()) + " cell indices");
  const int C = feats.dim(1);
  const int64_t ncell = static_cast<int64_t>(H) * W;
  Tensor<T> grid = Tensor<T>::zeros({H, W, C});
  int64_t dropped = 0;
  for (size_t k = 0; k < cells.size(); ++k) {
    const int64_t cell = cells[k];
    if (cell < 0 || cell >= ncell) {
      ++dropped;
      continue;
    }
    T* dst = grid.data() + cell * C;
    const T* src = feats.data() + static_cast<int64_t>(k) * C;
    for (int ch = 0; ch < C; ++ch) dst[ch] += src[ch];
  }
  if (feats.tracked()) {
    auto ix = std::make_shared<std::vector<int64_t>>(cells);
    grid.attach_node({feats.node()}, [gf = feats.grad_handle(), ix, C, ncell](const std::vector<T>& go) {
      for (size_t k = 0; k < ix->size(); ++k) {
        const int64_t cell = (*ix)[k];
        if (cell < 0 || cell >= ncell) continue;
        for (int ch = 0; ch < C; ++ch)
          (*gf)[k * static_cast<size_t>(C) + ch] += go[static_cast<size_t>(cell * C + ch)];
      }
    });
  }
  return {grid, dropped};
}

namespace detail {

// gather map for unfold ops: out element i copies input element map[i],
// or 0 when map[i] < 0 (zero padding)
template <typename T>
Tensor<T> gather_flat(const Tensor<T>& a, const std::shared_ptr<std::vector<int64_t>>& map, Shape out_shape) {
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) {
    const int64_t j = (*map)[static_cast<size_t>(i)];
    out[i] = j >= 0 ? a[j] : T(0);
  }
  if (a.tracked()) {
    out.attach_node({a.node()}, [ga = a.grad_handle(), map, n](const std::vector<T>& go) {
      for (int64_t i = 0; i < n; ++i) {
        const int64_t j = (*map)[static_cast<size_t>(i)];
        if (j >= 0) (*ga)[static_cast<size_t>(j)] += go[static_cast<size_t>(i)];
      }
    });
  }
  return out;
}

}  // namespace detail

// im2col for a H x W x C image: rows are output pixels in row-major order,
// columns are the k*k*C receptive field (zero padded).
template <typename T>
Tensor<T> unfold2d(const Tensor<T>& img, int k, int stride, int pad) {
  if (img.rank() != 3) throw std::invalid_argument("unfold2d: image must be HxWxC, got " + shape_str(img.shape()));
  const int H = img.dim(0), W = img.dim(1), C = img.dim(2);
  const int OH = (H + 2 * pad - k) / stride + 1;
  const int OW = (W + 2 * pad - k) / stride + 1;
  if (OH <= 0 || OW <= 0) throw std::invalid_argument("unfold2d: kernel larger than padded image");
  auto map = std::make_shared<std::vector<int64_t>>();
  map->reserve(static_cast<size_t>(OH) * OW * k * k * C);
  for (int oy = 0; oy < OH; ++oy)
    for (int ox = 0; ox < OW; ++ox)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
          const bool ok = iy >= 0 && iy < H && ix >= 0 && ix < W;
          for (int c = 0; c < C; ++c)
            map->push_back(ok ? (static_cast<int64_t>(iy) * W + ix) * C + c : -1);
        }
  return detail::gather_flat(img, map, {OH * OW, k * k * C});
}

// unfold along a sequence: rows are positions, columns the k*C window
// (zero padded so the output length matches the input).
template <typename T>
Tensor<T> unfold1d(const Tensor<T>& seq, int k) {
  if (seq.rank() != 2) throw std::invalid_argument("unfold1d: sequence must be LxC, got " + shape_str(seq.shape()));
  if (k % 2 == 0) throw std::invalid_argument("unfold1d: kernel size must be odd");
  const int L = seq.dim(0), C = seq.dim(1), half = k / 2;
  auto map = std::make_shared<std::vector<int64_t>>();
  map->reserve(static_cast<size_t>(L) * k * C);
  for (int i = 0; i < L; ++i)
    for (int j = -half; j <= half; ++j) {
      const int s = i + j;
      const bool ok = s >= 0 && s < L;
      for (int c = 0; c < C; ++c) map->push_back(ok ? static_cast<int64_t>(s) * C + c : -1);
    }
  return detail::gather_flat(seq, map, {L, k * C});
}

}  // namespace bevflow
