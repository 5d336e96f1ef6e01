#pragma once

#include "air/ir.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace air {

using Bytes = std::vector<std::uint8_t>;
using BufferBindings = std::map<std::string, Bytes>;

// Optional per-region execution order override (ops of that region in the
// order to run). Regions not listed run in program order.
using RegionSchedule = std::map<const Region *, std::vector<const Operation *>>;

/// Sequential big-step interpretation of a Program on flat memory. Tokens
/// are ignored; program order (or the supplied schedule) is obeyed. Returns
/// the final images of the entry func's L3 arguments keyed by arg name.
/// Missing input bindings are zero-initialized.
/// Throws Error("OutOfBounds") / Error("ChannelProtocol") on faults.
BufferBindings reference_execute(const Program &p, const BufferBindings &inputs,
                                 const RegionSchedule *schedule = nullptr);

} // namespace air
