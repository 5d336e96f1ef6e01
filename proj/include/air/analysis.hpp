#pragma once

#include "air/ir.hpp"

#include <map>
#include <optional>

namespace air {

// Interval ranges for every index-typed value in the module, derived from
// static loop bounds and spatial extents.
std::map<int, Interval> compute_index_ranges(const Operation &root);

// Conservative flat-element footprint of a view: inclusive element interval
// within the buffer, plus per-dimension index intervals when the pattern has
// literal sizes/strides. `exact` is true when offsets were constants.
struct Footprint {
  Interval flat{0, 0};
  bool exact = false;
  bool whole = false;
  std::vector<Interval> dim_index;     // offset_d + i_d ranges
  std::vector<std::int64_t> dim_stride; // literal strides, empty if dynamic
  std::vector<std::int64_t> dim_size;
};

Footprint view_footprint(const BufferView &v, const std::map<int, Interval> &ranges);

// Number of elements a patterned view covers; whole-buffer views use the
// memref element count. Returns nullopt when sizes are not literal.
std::optional<std::int64_t> view_element_count(const BufferView &v);

// Conservative may-overlap test for two views of the same buffer.
bool footprints_may_overlap(const Footprint &a, const Footprint &b);

// Memory effects of one op (not recursing into regions unless `recurse`).
struct EffectSet {
  std::vector<BufferView> reads, writes;
  // Channel pseudo-resources this op touches: symbol plus whether it's the
  // producing (put) side. Channel ordering edges derive from these.
  struct ChannelEffect {
    std::string symbol;
    bool is_put = false;
  };
  std::vector<ChannelEffect> channels;
};

EffectSet infer_effects(const Operation &op, bool recurse = true);

} // namespace air
