#pragma once

#include <cstddef>
#include <new>
#include <vector>

// The differentiable part of the library is compiled twice: a float build for
// training and inference and a double build for finite-difference and
// equivariance checks. Each build lives in its own inline namespace so both
// can be linked into one binary.
#if defined(D2G_NN_DOUBLE)
#define D2G_NN_ABI f64
#else
#define D2G_NN_ABI f32
#endif

#define D2G_NN_BEGIN \
  namespace d2g {    \
  inline namespace D2G_NN_ABI {
#define D2G_NN_END \
  }                \
  }

D2G_NN_BEGIN
#if defined(D2G_NN_DOUBLE)
using Scalar = double;
inline constexpr const char* kScalarName = "float64";
#else
using Scalar = float;
inline constexpr const char* kScalarName = "float32";
#endif

// Storage for tensor values and gradients. Every buffer starts on a 64-byte
// boundary, so vectorised reductions split their work identically on every
// run and results do not depend on where the heap places an allocation.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<Scalar, AlignedAllocator<Scalar>>;
D2G_NN_END
