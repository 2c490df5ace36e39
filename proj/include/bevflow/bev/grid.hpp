#pragma once

// Ego-centric BEV feature grid. Rows sweep y (forward), columns sweep x
// (right); cell (0,0) sits at the rear-left corner of the perception range.

#include <fstream>

#include "bevflow/core/blob.hpp"
#include "bevflow/core/tensor.hpp"
#include "bevflow/scene/geometry.hpp"

namespace bevflow::bev {

struct BEVGridMeta {
  int rows = 100, cols = 50;  // desk default; paper scale is 200 x 100
  int embed = 32;
  scene::Range2 range;

  double cell_h() const { return range.height() / rows; }
  double cell_w() const { return range.width() / cols; }

  void validate() const {
    if (rows < 1 || cols < 1 || embed < 1)
      throw std::invalid_argument("bev meta: non-positive dimension");
  }

  // continuous grid coords for bilinear sampling; integers at cell centers
  void to_continuous(scene::Vec2 p, double& row, double& col) const {
    row = (p.y - range.y_min) / cell_h() - 0.5;
    col = (p.x - range.x_min) / cell_w() - 0.5;
  }
  scene::Vec2 cell_center(int row, int col) const {
    return {range.x_min + (col + 0.5) * cell_w(), range.y_min + (row + 0.5) * cell_h()};
  }
  // integer cell containing p, or -1 when outside the range
  int64_t cell_index(scene::Vec2 p) const {
    const int col = static_cast<int>(std::floor((p.x - range.x_min) / cell_w()));
    const int row = static_cast<int>(std::floor((p.y - range.y_min) / cell_h()));
    if (row < 0 || row >= rows || col < 0 || col >= cols) return -1;
    return static_cast<int64_t>(row) * cols + col;
  }
  bool operator==(const BEVGridMeta& o) const {
    return rows == o.rows && cols == o.cols && embed == o.embed;
  }
};

template <typename T>
struct BEVGrid {
  BEVGridMeta meta;
  Tensor<T> features;  // rows x cols x embed
  int frame = 0;
  bool temporal = false;

  void check() const {
    meta.validate();
    if (features.shape() != Shape{meta.rows, meta.cols, meta.embed})
      throw std::invalid_argument("bev grid: features " + shape_str(features.shape()) + " do not match meta");
  }
};

// Blob plus one-line meta sidecar: "H W D cell_size frame temporal_flag".
template <typename T>
void write_bev_dump(const std::string& blob_path, const BEVGrid<T>& grid) {
  write_bevt_file(blob_path, grid.features);
  std::ofstream meta(blob_path + ".meta");
  if (!meta) throw std::runtime_error("bev dump: cannot write " + blob_path + ".meta");
  meta << grid.meta.rows << " " << grid.meta.cols << " " << grid.meta.embed << " " << grid.meta.cell_h() << " "
       << grid.frame << " " << (grid.temporal ? 1 : 0) << "\n";
}

template <typename T>
BEVGrid<T> read_bev_dump(const std::string& blob_path) {
  BEVGrid<T> grid;
  grid.features = read_bevt_file<T>(blob_path);
  if (grid.features.rank() != 3)
    throw std::runtime_error("bev dump: expected a 3-D blob, got " + shape_str(grid.features.shape()));
  grid.meta.rows = grid.features.dim(0);
  grid.meta.cols = grid.features.dim(1);
  grid.meta.embed = grid.features.dim(2);
  std::ifstream meta(blob_path + ".meta");
  if (meta) {
    double cell = 0;
    int temporal = 0;
    BEVGridMeta m = grid.meta;
    if (meta >> m.rows >> m.cols >> m.embed >> cell >> grid.frame >> temporal) {
      grid.temporal = temporal != 0;
      if (m.rows != grid.meta.rows || m.cols != grid.meta.cols || m.embed != grid.meta.embed)
        throw std::runtime_error("bev dump: sidecar disagrees with blob shape");
    }
  }
  return grid;
}

}  // namespace bevflow::bev
