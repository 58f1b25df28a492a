#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

namespace unlearn {

// Dense f32 tensor with a name and a fixed shape. Shapes never change after
// construction; serialization is raw little-endian element order.
struct Tensor {
  std::string name;
  std::vector<uint32_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::string n, std::vector<uint32_t> s) : name(std::move(n)), shape(std::move(s)) {
    data.assign(element_count(), 0.0f);
  }

  size_t element_count() const {
    size_t n = 1;
    for (uint32_t d : shape) n *= d;
    return n;
  }
  size_t byte_count() const { return element_count() * sizeof(float); }

  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }

  void fill(float v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  bool operator==(const Tensor& other) const = default;
};

}  // namespace unlearn
