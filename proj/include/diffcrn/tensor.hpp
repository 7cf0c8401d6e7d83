#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace diffcrn {

/// Activations are stored token-major: one row per spatial position of every
/// instance in the batch (instance-major, then row-major over the patch), one
/// column per channel.
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Spatial layout of a token-major activation matrix.
struct Geometry {
  int batch = 1;
  int height = 1;
  int width = 1;

  int tokens() const { return height * width; }
  int rows() const { return batch * tokens(); }
  bool operator==(const Geometry&) const = default;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

template <typename S>
void require_shape(const Mat<S>& m, Eigen::Index rows, Eigen::Index cols, const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw Error(what + ": shape mismatch, expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                ", got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

}  // namespace diffcrn
