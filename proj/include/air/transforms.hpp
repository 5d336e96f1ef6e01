#pragma once

#include "air/ir.hpp"

#include <map>
#include <string>
#include <vector>

namespace air {

struct TileSpec {
  std::int64_t t_i = 64, t_j = 64, t_k = 64;
  std::int64_t herd_rows = 1, herd_cols = 1;
};

/// Maps the loop-nest family onto spatial constructs: an optional outer
/// parallel pair becomes the launch grid, the inner pair the herd (sized by
/// `t`, block-distributed when dims divide the extents); staging between
/// the pairs lands in the segment. Throws Error("ShapeMismatch").
Program map_hierarchy(const Program &p, const TileSpec &t);

/// Replaces space-crossing memcpys by channel put/get pairs hoisted to their
/// memory's region, wrapping hoisted sides in replicas of the loop and
/// parallel structure they crossed. Intra-space copies are left alone.
Program decouple_memcpy(const Program &p);

/// Collapses put bundles whose payload is invariant along herd dimensions to
/// a single put annotated with a broadcast integer set.
Program detect_broadcast(const Program &p);

/// Two-stage (or deeper) pipelining: duplicates the streamed buffer, unrolls
/// the loop by `depth`, and rewires carried tokens to the
/// producer/consumer + contention pattern. Throws Error("NotPipelinable") /
/// Error("IndivisibleTripCount").
Program pingpong(const Program &p, int depth = 2);

/// Greedy pairwise fusion of same-domain channels at `space` onto shared
/// channels, interleaving their transfers in one loop.
Program merge_channels(const Program &p, MemorySpace space);

/// Partitions a split-accessible buffer at `space` into per-class
/// sub-buffers with transformed maps; puts/gets are retargeted. Throws
/// Error("NotSplittable") via the affine layer when classes overlap.
Program split_memrefs(const Program &p, MemorySpace space);

struct PipelineSpec {
  struct Pass {
    std::string name;
    std::map<std::string, std::string> options;
  };
  std::vector<Pass> passes;

  /// Parses "pass1{k=v,k2=v2},pass2" syntax. Throws Error("UnknownPass").
  static PipelineSpec parse(const std::string &text);
};

/// Applies passes in order; every intermediate must re-verify. The optional
/// callback observes each intermediate ("after <pass>", program).
Program run_pipeline(const Program &p, const PipelineSpec &spec,
                     const std::function<void(const std::string &, const Program &)>
                         &after_each = nullptr);

} // namespace air
