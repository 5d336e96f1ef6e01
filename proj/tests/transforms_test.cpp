#include <doctest.h>

#include "air/acdg.hpp"
#include "air/error.hpp"
#include "air/interp.hpp"
#include "air/kernels.hpp"
#include "air/transforms.hpp"

#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

using namespace air;

namespace {

Program load_corpus(const std::string &name) {
  std::ifstream in(std::string(AIR_CORPUS_DIR) + "/" + name);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return parse_program(os.str(), name);
}

BufferBindings random_inputs(const Program &p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  BufferBindings in;
  const Operation *f = p.funcs()[0];
  for (std::size_t i = 0; i < f->regions[0].args.size(); ++i) {
    const auto &arg = f->regions[0].args[i];
    if (arg.type.kind != TypeKind::MemRef)
      continue;
    auto n = static_cast<std::size_t>(arg.type.memref.num_elements());
    Bytes b;
    if (is_float(arg.type.memref.elem)) {
      b.resize(n * 4);
      for (std::size_t j = 0; j < n; ++j) {
        float v = static_cast<float>(static_cast<double>(rng() % 2000) / 1000.0 - 1.0);
        std::memcpy(b.data() + j * 4, &v, 4);
      }
    } else {
      b.resize(n * static_cast<std::size_t>(storage_width(arg.type.memref.elem)));
      for (auto &x : b)
        x = static_cast<std::uint8_t>(rng());
    }
    in[f->arg_names[i]] = b;
  }
  return in;
}

bool same_memory(const BufferBindings &a, const BufferBindings &b) {
  if (a.size() != b.size())
    return false;
  for (const auto &[k, v] : a)
    if (!b.count(k) || b.at(k) != v)
      return false;
  return true;
}

void check_preserves(const Program &before, const Program &after, std::uint64_t seed) {
  auto in = random_inputs(before, seed);
  CHECK(same_memory(reference_execute(before, in), reference_execute(after, in)));
}

int count_kind(const Program &p, OpKind k) {
  int n = 0;
  walk(*p.module, [&](const Operation &op) { n += op.kind == k; });
  return n;
}

const Operation *first_kind(const Program &p, OpKind k) {
  const Operation *found = nullptr;
  walk(*p.module, [&](const Operation &op) {
    if (!found && op.kind == k)
      found = &op;
  });
  return found;
}

} // namespace

TEST_CASE("map_hierarchy: herd [2,2] with per-core accumulation loop") {
  Program p = load_corpus("matmul_256.air");
  Program m = map_hierarchy(p, TileSpec{64, 64, 64, 2, 2});
  REQUIRE(verify_program(m).empty());
  const Operation *herd = first_kind(m, OpKind::Herd);
  REQUIRE(herd);
  CHECK(herd->extents == std::vector<std::int64_t>{2, 2});
  // The k accumulation loop lives inside the herd.
  bool k_loop_inside = false;
  walk(*herd, [&](const Operation &op) {
    if (op.kind == OpKind::ScfFor && op.ub == 4) {
      bool has_matmul = false;
      walk(op, [&](const Operation &o) { has_matmul |= o.kind == OpKind::KernelCall &&
                                                       o.symbol == "matmul"; });
      k_loop_inside |= has_matmul;
    }
  });
  CHECK(k_loop_inside);
  CHECK(count_kind(m, OpKind::Launch) == 1);
  CHECK(count_kind(m, OpKind::Segment) == 1);
  check_preserves(p, m, 1);
}

TEST_CASE("map_hierarchy: unit herd keeps the body up to index rewrite") {
  Program p = load_corpus("vecadd.air");
  Program m = map_hierarchy(p, TileSpec{64, 64, 64, 1, 2});
  REQUIRE(verify_program(m).empty());
  const Operation *herd = first_kind(m, OpKind::Herd);
  REQUIRE(herd);
  CHECK(herd->extents == std::vector<std::int64_t>{1, 2});
  // Same op inventory inside the herd as in the original parallel body.
  CHECK(count_kind(m, OpKind::Memcpy) == 3);
  check_preserves(p, m, 2);
}

TEST_CASE("map_hierarchy: 1x4 vs 4x1 transpose on the same nest") {
  Program p = load_corpus("matmul_256.air");
  Program a = map_hierarchy(p, TileSpec{64, 64, 64, 1, 4});
  Program b = map_hierarchy(p, TileSpec{64, 64, 64, 4, 1});
  const Operation *ha = first_kind(a, OpKind::Herd);
  const Operation *hb = first_kind(b, OpKind::Herd);
  CHECK(ha->extents[0] == hb->extents[1]);
  CHECK(ha->extents[1] == hb->extents[0]);
  check_preserves(p, a, 3);
  check_preserves(p, b, 4);
}

TEST_CASE("map_hierarchy: shape mismatch") {
  Program p = load_corpus("matmul_256.air");
  CHECK_THROWS_WITH_AS(map_hierarchy(p, TileSpec{64, 64, 64, 3, 2}),
                       doctest::Contains("ShapeMismatch"), Error);
  // No parallel pair at all.
  Program q = parse_program("module { func @f() { } }");
  CHECK_THROWS_WITH_AS(map_hierarchy(q, TileSpec{}),
                       doctest::Contains("ShapeMismatch"), Error);
}

TEST_CASE("decouple_memcpy: vecadd becomes the three-channel design") {
  Program p = load_corpus("vecadd.air");
  Program m = map_hierarchy(p, TileSpec{64, 64, 64, 1, 2});
  auto [a, g] = build_acdg(m);
  Program d = decouple_memcpy(a);
  REQUIRE(verify_program(d).empty());
  CHECK(count_kind(d, OpKind::ChannelDecl) == 3);
  CHECK(count_kind(d, OpKind::Memcpy) == 0);
  // Channel bundles take the herd shape.
  for (const auto &op : d.body().ops)
    if (op->kind == OpKind::ChannelDecl)
      CHECK(op->extents == std::vector<std::int64_t>{1, 2});
  // Puts for inputs hoisted under a parallel replica at launch level.
  const Operation *launch = first_kind(d, OpKind::Launch);
  bool put_under_parallel = false;
  for (const auto &op : launch->regions[0].ops)
    if (op->kind == OpKind::ScfParallel)
      walk(*op, [&](const Operation &o) {
        put_under_parallel |= o.kind == OpKind::ChannelPut;
      });
  CHECK(put_under_parallel);
  check_preserves(p, d, 5);
}

TEST_CASE("decouple_memcpy: intra-space copies stay") {
  const char *text = R"(module {
  func @f() {
    air.launch {
      air.segment {
        air.herd tile (%tx, %ty) in [1, 1] {
          %a = air.alloc : memref<16xi32, L1>
          %b = air.alloc : memref<16xi32, L1>
          air.kernel @zero reads() writes(%a)
          air.memcpy (%b, %a)
          air.dealloc %a
          air.dealloc %b
        }
      }
    }
  }
})";
  auto [a, g] = build_acdg(parse_program(text));
  Program d = decouple_memcpy(a);
  CHECK(count_kind(d, OpKind::Memcpy) == 1);
  CHECK(count_kind(d, OpKind::ChannelDecl) == 0);
}

TEST_CASE("decouple idempotence") {
  Program p = load_corpus("vecadd.air");
  Program m = map_hierarchy(p, TileSpec{64, 64, 64, 1, 2});
  auto [a, g] = build_acdg(m);
  Program d1 = decouple_memcpy(a);
  Program d2 = decouple_memcpy(d1);
  CHECK(print_program(d1) == print_program(d2));
}

TEST_CASE("detect_broadcast: 1x4 matmul collapses the A puts") {
  Program p = load_corpus("matmul_256.air");
  Program m = map_hierarchy(p, TileSpec{64, 64, 64, 1, 4});
  auto [a, g] = build_acdg(m);
  Program d = decouple_memcpy(a);
  Program b = detect_broadcast(d);
  REQUIRE(verify_program(b).empty());

  // Exactly one put carries a broadcast set with 4 destinations per source.
  int annotated = 0;
  walk(*b.module, [&](const Operation &op) {
    if (op.kind != OpKind::ChannelPut || !op.has_attr("broadcast"))
      return;
    ++annotated;
    const auto &set = std::get<IntegerSet>(op.attrs.at("broadcast"));
    auto dests = broadcast_destinations(set, {0}, {1, 4});
    CHECK(dests.size() == 4);
  });
  CHECK(annotated == 1);
  check_preserves(p, b, 6);
}

TEST_CASE("detect_broadcast: unit herd stays unannotated") {
  Program p = load_corpus("vecadd.air");
  Program m = map_hierarchy(p, TileSpec{64, 64, 64, 1, 2});
  auto [a, g] = build_acdg(m);
  Program d = decouple_memcpy(a);
  Program b = detect_broadcast(d);
  int annotated = 0;
  walk(*b.module, [&](const Operation &op) {
    annotated += op.kind == OpKind::ChannelPut && op.has_attr("broadcast");
  });
  CHECK(annotated == 0); // a/b/c all vary along ty
  CHECK(print_program(b) == print_program(detect_broadcast(b))); // idempotent
}

TEST_CASE("detect_broadcast: 2x2 dual broadcast on complementary dims") {
  Program p = load_corpus("matmul_256.air");
  Program m = map_hierarchy(p, TileSpec{64, 64, 64, 2, 2});
  auto [a, g] = build_acdg(m);
  Program d = decouple_memcpy(a);
  Program b = detect_broadcast(d);
  std::vector<std::int64_t> masks;
  walk(*b.module, [&](const Operation &op) {
    if (op.kind == OpKind::ChannelPut && op.has_attr("broadcast"))
      masks.push_back(op.int_attr("broadcast_src_dims"));
  });
  REQUIRE(masks.size() == 2);
  // A broadcasts along one herd dim, B along the other.
  CHECK(masks[0] + masks[1] == 3);
  CHECK(masks[0] != masks[1]);
  check_preserves(p, b, 7);
}

TEST_CASE("broadcast byte accounting drops by the fan-out") {
  // Puts-before / puts-after: the annotated channel sees 1/4 of the sends.
  Program p = load_corpus("matmul_256.air");
  Program m = map_hierarchy(p, TileSpec{64, 64, 64, 1, 4});
  auto [a, g] = build_acdg(m);
  Program d = decouple_memcpy(a);
  Program b = detect_broadcast(d);
  auto count_put_instances = [](const Program &prog, const std::string &sym) {
    // instances = product of enclosing static extents / trip counts
    std::int64_t total = 0;
    std::function<void(const Operation &, std::int64_t)> rec =
        [&](const Operation &op, std::int64_t mult) {
          std::int64_t my = mult;
          if (op.kind == OpKind::ScfFor)
            my *= (op.ub - op.lb) / op.step;
          if (op.kind == OpKind::ScfParallel || op.kind == OpKind::Herd ||
              op.kind == OpKind::Launch)
            for (auto e : op.extents)
              my *= e;
          if (op.kind == OpKind::ChannelPut && op.symbol == sym)
            total += my;
          for (const auto &r : op.regions)
            for (const auto &o : r.ops)
              rec(*o, my);
        };
    rec(*prog.module, 1);
    return total;
  };
  std::string sym;
  walk(*b.module, [&](const Operation &op) {
    if (op.kind == OpKind::ChannelPut && op.has_attr("broadcast"))
      sym = op.symbol;
  });
  REQUIRE_FALSE(sym.empty());
  CHECK(count_put_instances(d, sym) == 4 * count_put_instances(b, sym));
}

TEST_CASE("pingpong: buffer duplication and body doubling") {
  Program p = load_corpus("streaming.air");
  auto [a, g] = build_acdg(p);
  Program d = decouple_memcpy(a);
  Program pp = pingpong(d, 2);
  REQUIRE(verify_program(pp).empty());
  // exactly 2 allocations for the pipelined buffer
  CHECK(count_kind(pp, OpKind::Alloc) == 2 * count_kind(d, OpKind::Alloc));
  // grouped allocs share a group attr
  std::map<std::int64_t, int> groups;
  walk(*pp.module, [&](const Operation &op) {
    if (op.kind == OpKind::Alloc && op.has_attr("group"))
      groups[op.int_attr("group")]++;
  });
  REQUIRE(groups.size() == 1);
  CHECK(groups.begin()->second == 2);
  // the streaming loop unrolled by 2: step doubled, body token pattern is
  // the four-token shape
  bool found = false;
  walk(*pp.module, [&](const Operation &op) {
    if (op.kind == OpKind::ScfFor && op.step == 2 && op.iter_init.size() == 4)
      found = true;
  });
  CHECK(found);
  check_preserves(p, pp, 8);
}

TEST_CASE("pingpong: depth 1 is identity") {
  Program p = load_corpus("streaming.air");
  auto [a, g] = build_acdg(p);
  Program d = decouple_memcpy(a);
  CHECK(print_program(pingpong(d, 1)) == print_program(d));
}

TEST_CASE("pingpong: indivisible trip count") {
  const char *text = R"(module {
  func @f(%src: memref<3x64xi32, L3>, %dst: memref<3x64xi32, L3>) {
    air.launch {
      air.segment @s {
        %buf = air.alloc : memref<64xi32, L2>
        scf.for %i = 0 to 3 step 1 {
          air.memcpy (%buf, %src [%i, 0] [1, 64] [64, 1])
          air.memcpy (%dst [%i, 0] [1, 64] [64, 1], %buf)
        }
        air.dealloc %buf
      }
    }
  }
})";
  auto [a, g] = build_acdg(parse_program(text));
  Program d = decouple_memcpy(a);
  CHECK_THROWS_WITH_AS(pingpong(d, 2), doctest::Contains("IndivisibleTripCount"),
                       Error);
}

TEST_CASE("pingpong: no streaming shape") {
  Program p = load_corpus("vecadd.air");
  Program m = map_hierarchy(p, TileSpec{64, 64, 64, 1, 2});
  auto [a, g] = build_acdg(m);
  Program d = decouple_memcpy(a);
  CHECK_THROWS_WITH_AS(pingpong(d, 2), doctest::Contains("NotPipelinable"), Error);
}

TEST_CASE("merge_channels: channel count halves, never increases") {
  Program p = load_corpus("merge.air");
  auto [a, g] = build_acdg(p);
  Program d = decouple_memcpy(a);
  int before = count_kind(d, OpKind::ChannelDecl);
  Program mg = merge_channels(d, MemorySpace::L2);
  REQUIRE(verify_program(mg).empty());
  int after = count_kind(mg, OpKind::ChannelDecl);
  CHECK(after < before);
  CHECK(after == before - 2); // two L2 pairs fused
  check_preserves(p, mg, 9);
  // Idempotence.
  Program mg2 = merge_channels(mg, MemorySpace::L2);
  CHECK(count_kind(mg2, OpKind::ChannelDecl) == after);
  CHECK(print_program(mg2) == print_program(mg));
}

TEST_CASE("merge_channels: single channel in scope unchanged") {
  Program p = load_corpus("streaming.air");
  auto [a, g] = build_acdg(p);
  Program d = decouple_memcpy(a);
  Program mg = merge_channels(d, MemorySpace::L2);
  CHECK(count_kind(mg, OpKind::ChannelDecl) == count_kind(d, OpKind::ChannelDecl));
}

TEST_CASE("split_memrefs: mod-2 interleave splits into half-extent buffers") {
  Program p = load_corpus("split.air");
  auto [a, g] = build_acdg(p);
  Program d = decouple_memcpy(a);
  int chans_before = count_kind(d, OpKind::ChannelDecl);
  Program sp = split_memrefs(d, MemorySpace::L2);
  REQUIRE(verify_program(sp).empty());
  CHECK(count_kind(sp, OpKind::ChannelDecl) > chans_before); // never decreases
  // two L2 allocs of half extent
  std::vector<std::int64_t> l2rows;
  walk(*sp.module, [&](const Operation &op) {
    if (op.kind == OpKind::Alloc && op.alloc_type.space == MemorySpace::L2)
      l2rows.push_back(op.alloc_type.shape[0]);
  });
  REQUIRE(l2rows.size() == 2);
  CHECK(l2rows[0] == 4);
  CHECK(l2rows[1] == 4);
  check_preserves(p, sp, 10);
}

TEST_CASE("split_memrefs: one consumer stays unchanged") {
  Program p = load_corpus("streaming.air");
  auto [a, g] = build_acdg(p);
  Program d = decouple_memcpy(a);
  Program sp = split_memrefs(d, MemorySpace::L2);
  CHECK(print_program(sp) == print_program(d));
}

TEST_CASE("split_memrefs: floordiv sharing is not splittable") {
  // Both workers read the same rows (u floordiv 1... overlapping classes).
  const char *text = R"(module {
  func @f(%src: memref<8x64xi32, L3>, %dst: memref<8x64xi32, L3>) {
    air.launch {
      air.segment @s {
        %buf = air.alloc : memref<8x64xi32, L2>
        scf.for %i = 0 to 8 step 1 {
          air.memcpy (%buf [%i, 0] [1, 64] [64, 1], %src [%i, 0] [1, 64] [64, 1])
        }
        air.herd @h tile (%tx, %ty) in [1, 2] {
          scf.for %u = 0 to 8 step 1 {
            %a1 = air.alloc : memref<64xi32, L1>
            %row = affine.apply affine_map<(d0) -> (d0 floordiv 2)> (%u)
            air.memcpy (%a1, %buf [%row, 0] [1, 64] [64, 1])
            air.kernel @scale reads(%a1) writes(%a1) attrs {factor = 2}
            air.dealloc %a1
          }
        }
        air.dealloc %buf
      }
    }
  }
})";
  auto [a, g] = build_acdg(parse_program(text));
  Program d = decouple_memcpy(a);
  CHECK_THROWS_WITH_AS(split_memrefs(d, MemorySpace::L2),
                       doctest::Contains("NotSplittable"), Error);
}

TEST_CASE("run_pipeline: empty spec reprints identically") {
  Program p = load_corpus("vecadd.air");
  Program q = run_pipeline(p, PipelineSpec::parse(""));
  CHECK(print_program(q) == print_program(p));
}

TEST_CASE("run_pipeline: unknown pass rejected before any transformation") {
  CHECK_THROWS_WITH_AS(PipelineSpec::parse("map-hierarchy,bogus-pass"),
                       doctest::Contains("UnknownPass"), Error);
}

TEST_CASE("run_pipeline: matmul default pipeline reaches the channel design") {
  Program p = load_corpus("matmul_256.air");
  Program q = run_pipeline(
      p, PipelineSpec::parse(
             "map-hierarchy{herd_rows=2,herd_cols=2},build-acdg,decouple-memcpy,"
             "detect-broadcast"));
  CHECK(count_kind(q, OpKind::Launch) == 1);
  CHECK(count_kind(q, OpKind::Herd) == 1);
  CHECK(count_kind(q, OpKind::ChannelDecl) >= 5);
  CHECK(count_kind(q, OpKind::Memcpy) == 0);
  check_preserves(p, q, 11);
}

TEST_CASE("semantic preservation across every corpus pipeline") {
  struct Entry {
    const char *file;
    const char *pipe;
  };
  const Entry entries[] = {
      {"vecadd.air",
       "map-hierarchy{herd_rows=1,herd_cols=2},build-acdg,decouple-memcpy,detect-broadcast"},
      {"matmul_256.air",
       "map-hierarchy{herd_rows=1,herd_cols=4},build-acdg,decouple-memcpy,detect-broadcast"},
      {"matmul_256.air",
       "map-hierarchy{herd_rows=4,herd_cols=1},build-acdg,decouple-memcpy,detect-broadcast"},
      {"streaming.air", "build-acdg,decouple-memcpy,pingpong{depth=2}"},
      {"merge.air",
       "build-acdg,decouple-memcpy,merge-channels{space=L2},pingpong{depth=2}"},
      {"split.air", "build-acdg,decouple-memcpy,split-memrefs{space=L2}"},
      {"mha_fused.air", "build-acdg,decouple-memcpy"},
      {"mha_stages.air", "build-acdg,decouple-memcpy"},
  };
  std::uint64_t seed = 100;
  for (const auto &e : entries) {
    Program p = load_corpus(e.file);
    Program q = run_pipeline(p, PipelineSpec::parse(e.pipe));
    REQUIRE(verify_program(q).empty());
    check_preserves(p, q, seed++);
  }
}
