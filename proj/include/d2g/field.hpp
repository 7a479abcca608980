#pragma once

#include <algorithm>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace d2g {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

// A well-formed file written by an incompatible format version.
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

struct Cell {
  int i = 0;
  int j = 0;
  auto operator<=>(const Cell&) const = default;
};

// Dense row-major H x W array.
template <typename T>
class Field {
 public:
  Field() = default;
  Field(int height, int width, T fill = T{})
      : height_(height), width_(width),
        data_(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill) {
    if (height < 0 || width < 0) throw ShapeError("Field: negative extent");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int i, int j) { return data_[index(i, j)]; }
  const T& operator()(int i, int j) const { return data_[index(i, j)]; }
  T& operator[](Cell c) { return (*this)(c.i, c.j); }
  const T& operator[](Cell c) const { return (*this)(c.i, c.j); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Field& o) const { return height_ == o.height_ && width_ == o.width_; }

  template <typename U>
  bool same_shape(const Field<U>& o) const {
    return height_ == o.height() && width_ == o.width();
  }

  bool operator==(const Field&) const = default;

 private:
  std::size_t index(int i, int j) const {
    return static_cast<std::size_t>(i) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(j);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

using Mask = Field<std::uint8_t>;

inline std::vector<Cell> cells_of(const Mask& m) {
  std::vector<Cell> out;
  for (int i = 0; i < m.height(); ++i)
    for (int j = 0; j < m.width(); ++j)
      if (m(i, j)) out.push_back({i, j});
  return out;
}

inline std::size_t count(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.data().begin(), m.data().end(), [](std::uint8_t v) { return v != 0; }));
}

}  // namespace d2g
