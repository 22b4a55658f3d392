#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace ere {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType { f32, f16 };

inline const char* dtype_name(DType t) { return t == DType::f32 ? "f32" : "f16"; }

inline std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 2; }

inline DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f16") return DType::f16;
  throw Error("unknown dtype '" + s + "'");
}

using Shape = std::vector<std::uint64_t>;

inline std::uint64_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::uint64_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major tensor. Values are held as float regardless of the
/// storage dtype; f16 tensors only ever hold binary16-representable values.
struct Tensor {
  DType dtype = DType::f32;
  Shape shape;
  std::vector<float> values;

  Tensor() = default;
  Tensor(DType t, Shape s, std::vector<float> v)
      : dtype(t), shape(std::move(s)), values(std::move(v)) {
    if (values.size() != element_count(shape))
      throw Error("tensor value count does not match shape " +
                  shape_string(shape));
  }

  std::size_t rank() const { return shape.size(); }
  bool is_matrix() const { return shape.size() == 2; }
  std::uint64_t rows() const { return shape.at(0); }
  std::uint64_t cols() const { return shape.at(1); }
  std::uint64_t nbytes() const { return element_count(shape) * dtype_size(dtype); }

  bool all_finite() const {
    for (float v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Named tensor collection, iterated in lexicographic name order.
struct TensorMap {
  std::map<std::string, Tensor> entries;
  bool allow_nonfinite = false;

  bool contains(const std::string& name) const { return entries.count(name) > 0; }
  const Tensor& at(const std::string& name) const { return entries.at(name); }
  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }

  void insert(std::string name, Tensor t) {
    auto [it, inserted] = entries.emplace(std::move(name), std::move(t));
    if (!inserted) throw Error("duplicate tensor name '" + it->first + "'");
  }

  auto begin() const { return entries.begin(); }
  auto end() const { return entries.end(); }

  friend bool operator==(const TensorMap&, const TensorMap&) = default;
};

inline Eigen::MatrixXd to_matrix(const Tensor& t) {
  if (!t.is_matrix()) throw Error("tensor is not 2-D: " + shape_string(t.shape));
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic,
                                 Eigen::RowMajor>>
      m(t.values.data(), static_cast<Eigen::Index>(t.rows()),
        static_cast<Eigen::Index>(t.cols()));
  return m.cast<double>();
}

inline std::vector<float> to_row_major(const Eigen::MatrixXd& m) {
  std::vector<float> out(static_cast<std::size_t>(m.size()));
  Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      out.data(), m.rows(), m.cols()) = m.cast<float>();
  return out;
}

inline Tensor from_matrix(const Eigen::MatrixXd& m, DType dtype = DType::f32) {
  return Tensor(dtype,
                {static_cast<std::uint64_t>(m.rows()),
                 static_cast<std::uint64_t>(m.cols())},
                to_row_major(m));
}

}  // namespace ere
