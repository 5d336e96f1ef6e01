#pragma once

#include "air/interp.hpp"
#include "air/lowering.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace air {

struct TraceEvent {
  std::string pid; // tile
  std::string tid; // port name or "core"
  std::string name;
  std::string cat;
  std::int64_t ts = 0;
  std::int64_t dur = 0;
};

struct SimStats {
  std::int64_t makespan = 0;
  // pid -> tid -> busy cycles
  std::map<std::string, std::map<std::string, std::int64_t>> busy;
  std::map<std::string, std::int64_t> core_busy, core_stall;
  std::map<std::string, std::int64_t> route_bytes_in, route_bytes_out;
  int dispatch_count = 0;
};

struct SimResult {
  BufferBindings memory; // final L3 images
  std::vector<TraceEvent> trace;
  SimStats stats;
  // per-op execution intervals and resources, for constraint checking
  std::map<const Operation *, std::vector<std::array<std::int64_t, 2>>> op_intervals;
  std::map<const Operation *, std::set<std::string>> op_resources;
};

/// Deterministic discrete-event simulation of a placed program. Inputs bind
/// the entry func's L3 buffers by name; missing ones are zero-filled.
/// Throws Error("Deadlock") with a blocked-actor report when the event
/// queue drains before every program completes.
SimResult simulate(const PlacedProgram &pp, const BufferBindings &inputs);

/// Chrome-tracing JSON array: {name, cat, ph:"X", ts, dur, pid, tid}
/// objects plus metadata events declaring cycle units. Stable ordering.
std::string trace_json(const SimResult &r);
void export_trace(const SimResult &r, const std::string &path);

/// Stats JSON: {makespan, per_actor: {busy, stall}, routes: {bytes}}.
std::string stats_json(const SimResult &r);

struct Violation {
  std::string kind; // ConcurrencyViolation | AffinityViolation | DependencyViolation
  std::string message;
};

/// Validates concurrency lists (co-scheduled on distinct resources),
/// affinity lists (same resource, disjoint slots), and dependency edges
/// (happens-before) against the trace.
std::vector<Violation> check_schedule_constraints(const SimResult &result,
                                                  const Program &p);

} // namespace air
