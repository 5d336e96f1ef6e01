#pragma once

#include "air/ir.hpp"

#include <map>

namespace air {

// Rewrites every value use in `op` through `vals` where present, optionally
// recursing into regions.
void remap_uses(Operation &op, const std::map<int, Value> &vals, bool recurse);

// Deep clone with fresh result/region-arg values allocated from `p`; uses of
// old values are redirected through `vmap` (extended as definitions are
// cloned). Uses of values not in the map are kept as-is (outer references).
std::unique_ptr<Operation> clone_remap(const Operation &op, Program &p,
                                       std::map<int, Value> &vmap);

// Collects, in program order, the transitive backward slice of index/scalar
// computations within `r` needed by the given values.
std::vector<const Operation *> index_slice(const Region &r,
                                           const std::vector<Value> &needed);

} // namespace air
