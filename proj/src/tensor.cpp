#include "kdmt/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <unordered_map>

#include "kdmt/error.hpp"

namespace kdmt {
namespace detail {
namespace {

constexpr std::size_t kPoolMin = 1024;
constexpr std::size_t kPoolDepth = 64;
// Eigen peels unaligned heads off vectorized loops, so a buffer's address
// would otherwise leak into the rounding of reductions.
constexpr std::align_val_t kAlign{64};

struct BufferPool {
  std::unordered_map<std::size_t, std::vector<double*>> free;
  ~BufferPool();
};

thread_local bool pool_gone = false;

BufferPool::~BufferPool() {
  for (auto& [n, list] : free)
    for (double* p : list) ::operator delete(p, kAlign);
  pool_gone = true;
}

BufferPool& pool() {
  thread_local BufferPool instance;
  return instance;
}

}  // namespace

double* acquire_buffer(std::size_t n) {
  if (n >= kPoolMin && !pool_gone) {
    auto& list = pool().free[n];
    if (!list.empty()) {
      double* p = list.back();
      list.pop_back();
      return p;
    }
  }
  return static_cast<double*>(::operator new(n * sizeof(double), kAlign));
}

void release_buffer(double* p, std::size_t n) noexcept {
  if (n >= kPoolMin && !pool_gone) {
    try {
      auto& list = pool().free[n];
      if (list.size() < kPoolDepth) {
        list.push_back(p);
        return;
      }
    } catch (...) {
    }
  }
  ::operator delete(p, kAlign);
}

}  // namespace detail

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

static void check_extents(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (auto e : shape)
    if (e == 0)
      throw DimensionError("tensor extents must be positive, got " +
                           to_string(shape));
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  check_extents(shape_);
}

Tensor Tensor::uninitialized(Shape shape) {
  check_extents(shape);
  Tensor t;
  t.data_.resize(shape_size(shape));
  t.shape_ = std::move(shape);
  return t;
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  check_extents(shape_);
  if (shape_size(shape_) != data_.size())
    throw DimensionError("shape " + to_string(shape_) + " holds " +
                         std::to_string(shape_size(shape_)) +
                         " values, got " + std::to_string(data_.size()));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

double Tensor::item() const {
  if (data_.size() != 1)
    throw ContractError("item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

}  // namespace kdmt
