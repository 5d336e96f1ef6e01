#pragma once

#include "air/ir.hpp"

#include <cstdint>
#include <vector>

namespace air {

// Storage width in the simulated memory image; bf16 is held as f32.
int storage_width(ElemKind k);

// A buffer view resolved to concrete offsets/sizes/strides over raw storage.
struct ResolvedView {
  std::uint8_t *data = nullptr; // buffer base
  ElemKind elem = ElemKind::I32;
  std::int64_t buffer_elems = 0;
  std::vector<std::int64_t> offsets, sizes, strides;

  std::int64_t rank() const { return static_cast<std::int64_t>(sizes.size()); }
  std::int64_t num_elements() const {
    std::int64_t n = 1;
    for (auto s : sizes)
      n *= s;
    return n;
  }
  // Flat element index of a point in the view; throws Error("OutOfBounds").
  std::int64_t flat(const std::vector<std::int64_t> &idx) const;

  double get_f(const std::vector<std::int64_t> &idx) const;
  std::int64_t get_i(const std::vector<std::int64_t> &idx) const;
  void set_f(const std::vector<std::int64_t> &idx, double v);
  void set_i(const std::vector<std::int64_t> &idx, std::int64_t v);

  // Enumerates flat element indices in row-major pattern order.
  std::vector<std::int64_t> enumerate() const;
};

double load_elem_f(const std::uint8_t *base, ElemKind k, std::int64_t flat_idx);
std::int64_t load_elem_i(const std::uint8_t *base, ElemKind k, std::int64_t flat_idx);
void store_elem_f(std::uint8_t *base, ElemKind k, std::int64_t flat_idx, double v);
void store_elem_i(std::uint8_t *base, ElemKind k, std::int64_t flat_idx, std::int64_t v);

struct KernelIO {
  std::vector<ResolvedView> reads, writes;
  const Operation *op = nullptr; // for attrs
};

/// Executes the named microkernel; throws Error("UnknownKernel") for names
/// not in the registry and Error("KernelShape") on operand shape mismatch.
void run_kernel(const std::string &name, KernelIO &io);

/// Work units (MAC-equivalents) for the cost model when the op carries no
/// `ops`/`cycles` override.
std::int64_t kernel_default_ops(const std::string &name, const Operation &op);

} // namespace air
