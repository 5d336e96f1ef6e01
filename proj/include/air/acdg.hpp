#pragma once

#include "air/interp.hpp"
#include "air/ir.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace air {

enum class EdgeKind { RAW, WAR, WAW, LoopCarried, Structural };
std::string to_string(EdgeKind k);

// The asynchronous control and dataflow graph over a Program's operations.
// Nodes reference ops owned by the annotated Program.
struct AsyncGraph {
  struct Node {
    const Operation *op = nullptr;
    int id = 0;
  };
  struct Edge {
    int src = 0, dst = 0;
    EdgeKind kind = EdgeKind::RAW;
  };
  std::vector<Node> nodes;
  std::vector<Edge> edges;
  std::map<const Operation *, int> node_of;

  int id_of(const Operation *op) const {
    auto it = node_of.find(op);
    return it == node_of.end() ? -1 : it->second;
  }
  bool has_edge(const Operation *a, const Operation *b) const;
  std::string to_dot() const;
};

/// Converts a synchronous program into async form: effectful ops gain fresh
/// tokens, RAW/WAR/WAW edges fill dependency lists, scf.for loops carry one
/// token per disjoint buffer group, scf.parallel bodies take an init token
/// and terminate through wait_all barriers, and spatial region ops release
/// their token when the whole body completes.
std::pair<Program, AsyncGraph> build_acdg(const Program &p);

/// Graph of an already-annotated program, derived from its token uses and
/// effect analysis (used after structural passes).
AsyncGraph graph_from_tokens(const Program &p);

/// Splits multi-token loop nests into one independent nest per buffer group.
/// Programs without splittable nests are returned unchanged.
Program split_loop_nests(const Program &p, const AsyncGraph &g);

/// `count` random schedules: per-region topological orders respecting all
/// dependency, SSA, and channel-order edges, distinct-seeded. Throws
/// Error("CycleDetected").
std::vector<RegionSchedule> legal_schedules(const Program &p, const AsyncGraph &g,
                                            std::uint64_t seed, int count);

// Utilities shared with the structural passes.

/// Adds effect-derived dependency tokens among `r`'s sibling ops (only for
/// ops already carrying tokens); existing deps are kept.
void add_effect_deps(Program &p, Region &r);

/// Threads carried tokens through an already-async loop whose body ops carry
/// tokens: one token per buffer/channel group, plus intra-body effect deps.
/// Emits init wait_alls followed by the loop into `out`.
void thread_loop_tokens(Program &p, std::vector<std::unique_ptr<Operation>> &out,
                        std::unique_ptr<Operation> loop);

} // namespace air
