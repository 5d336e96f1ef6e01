#include <doctest.h>

#include "air/affine.hpp"
#include "air/error.hpp"

#include <cstdint>
#include <random>

using namespace air;

namespace {

// Independent tree interpreter used as the differential oracle for eval.
std::int64_t naive_eval(const AffineExpr &e, const std::vector<std::int64_t> &d,
                        const std::vector<std::int64_t> &s) {
  switch (e->kind) {
  case AffineKind::Dim:
    return d.at(static_cast<std::size_t>(e->value));
  case AffineKind::Sym:
    return s.at(static_cast<std::size_t>(e->value));
  case AffineKind::Const:
    return e->value;
  case AffineKind::Add:
    return naive_eval(e->lhs, d, s) + naive_eval(e->rhs, d, s);
  case AffineKind::MulConst:
    return naive_eval(e->lhs, d, s) * e->value;
  case AffineKind::Mod: {
    std::int64_t v = naive_eval(e->lhs, d, s) % e->value;
    return v < 0 ? v + e->value : v;
  }
  case AffineKind::FloorDiv: {
    std::int64_t a = naive_eval(e->lhs, d, s);
    std::int64_t q = a / e->value;
    if (a % e->value != 0 && a < 0)
      --q;
    return q;
  }
  }
  return 0;
}

// The broadcast set of the paper's 4x1 -> 4x4 example:
// {(d0, d1) : d0 = s0, 0 <= s0 <= 3, 0 <= d1 <= 3}
IntegerSet paper_broadcast_set() {
  return parse_affine_set(
      "affine_set<(d0, d1)[s0] : (d0 - s0 == 0, s0 >= 0, 3 - s0 >= 0, "
      "d1 >= 0, 3 - d1 >= 0)>");
}

AffineExpr random_expr(std::mt19937_64 &rng, int depth, int nd, int ns) {
  std::uniform_int_distribution<int> kind(0, depth <= 0 ? 2 : 6);
  std::uniform_int_distribution<std::int64_t> small(-4, 4);
  std::uniform_int_distribution<std::int64_t> pos(1, 5);
  switch (kind(rng)) {
  case 0:
    return AffineExprNode::constant(small(rng));
  case 1:
    return nd > 0 ? AffineExprNode::dim(static_cast<int>(pos(rng)) % nd)
                  : AffineExprNode::constant(small(rng));
  case 2:
    return ns > 0 ? AffineExprNode::sym(0) : AffineExprNode::constant(small(rng));
  case 3:
    return AffineExprNode::add(random_expr(rng, depth - 1, nd, ns),
                               random_expr(rng, depth - 1, nd, ns));
  case 4:
    return AffineExprNode::mul(random_expr(rng, depth - 1, nd, ns), small(rng));
  case 5:
    return AffineExprNode::mod(random_expr(rng, depth - 1, nd, ns), pos(rng));
  default:
    return AffineExprNode::floordiv(random_expr(rng, depth - 1, nd, ns), pos(rng));
  }
}

} // namespace

TEST_CASE("eval_map offset map") {
  // offset = s0 + s1 * 8
  AffineMap m = parse_affine_map("affine_map<()[s0, s1] -> (s0 + s1 * 8)>");
  CHECK(eval_map(m, {}, {16, 2}) == std::vector<std::int64_t>{32});
}

TEST_CASE("eval_map identity") {
  AffineMap m = parse_affine_map("affine_map<(d0) -> (d0)>");
  CHECK(eval_map(m, {7}) == std::vector<std::int64_t>{7});
}

TEST_CASE("eval_map mathematical mod convention") {
  AffineMap m = parse_affine_map("affine_map<(d0) -> (d0 mod 2)>");
  // Frozen from the enumerated table for d0 in [-4, 4]: mathematical mod is
  // non-negative.
  const std::int64_t expected[] = {0, 1, 0, 1, 0, 1, 0, 1, 0};
  for (std::int64_t d = -4; d <= 4; ++d)
    CHECK(eval_map(m, {d})[0] == expected[d + 4]);
  CHECK(eval_map(m, {-3}) == std::vector<std::int64_t>{1});
}

TEST_CASE("eval_map arity mismatch") {
  AffineMap m = parse_affine_map("affine_map<(d0)[s0] -> (d0 + s0)>");
  CHECK_THROWS_WITH_AS(eval_map(m, {1}), doctest::Contains("ArityMismatch"), Error);
}

TEST_CASE("eval agrees with naive interpreter on random exprs") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::int64_t> val(-10, 10);
  for (int t = 0; t < 500; ++t) {
    AffineExpr e = random_expr(rng, 4, 2, 1);
    std::vector<std::int64_t> d = {val(rng), val(rng)};
    std::vector<std::int64_t> s = {val(rng)};
    CHECK(eval_expr(e, d, s) == naive_eval(e, d, s));
    // simplify preserves semantics
    CHECK(eval_expr(simplify(e), d, s) == naive_eval(e, d, s));
  }
}

TEST_CASE("set_contains on the paper broadcast set") {
  IntegerSet s = paper_broadcast_set();
  CHECK(set_contains(s, {2, 3}, {2}));
  CHECK_FALSE(set_contains(s, {4, 0}, {4}));
}

TEST_CASE("set_contains vacuous conjunction") {
  IntegerSet s;
  s.num_dims = 2;
  CHECK(set_contains(s, {123, -5}));
}

TEST_CASE("broadcast_destinations on the paper set") {
  IntegerSet s = paper_broadcast_set();
  auto dests = broadcast_destinations(s, {1}, {4, 4});
  std::vector<std::vector<std::int64_t>> want = {{1, 0}, {1, 1}, {1, 2}, {1, 3}};
  CHECK(dests == want);
}

TEST_CASE("broadcast_destinations single point") {
  IntegerSet s = parse_affine_set(
      "affine_set<(d0, d1)[s0] : (d0 - s0 == 0, d1 >= 0, 0 - d1 >= 0)>");
  auto dests = broadcast_destinations(s, {2}, {4, 1});
  CHECK(dests == std::vector<std::vector<std::int64_t>>{{2, 0}});
}

TEST_CASE("broadcast_destinations equals brute-force filter") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::int64_t> b(1, 6);
  for (int t = 0; t < 100; ++t) {
    IntegerSet s;
    s.num_dims = 2;
    s.num_syms = 1;
    int nc = static_cast<int>(b(rng)) % 4;
    for (int i = 0; i < nc; ++i) {
      AffineExpr e = random_expr(rng, 3, 2, 1);
      s.constraints.push_back(
          {e, b(rng) % 2 ? AffineRelation::Eq : AffineRelation::Ge});
    }
    std::vector<std::int64_t> src = {b(rng) % 4};
    std::vector<std::int64_t> bounds = {b(rng), b(rng)};
    auto dests = broadcast_destinations(s, src, bounds);
    // Exhaustive enumeration oracle.
    std::vector<std::vector<std::int64_t>> want;
    for (std::int64_t x = 0; x < bounds[0]; ++x)
      for (std::int64_t y = 0; y < bounds[1]; ++y)
        if (set_contains(s, {x, y}, src))
          want.push_back({x, y});
    CHECK(dests == want);
  }
}

TEST_CASE("split_access_map mod-2 polyhedron") {
  AffineMap m = parse_affine_map("affine_map<(d0) -> (d0 mod 2)>");
  auto maps = split_access_map(m, 4, 2);
  REQUIRE(maps.size() == 2);
  // Class k is the constant-k map over the dense subdomain.
  for (std::int64_t j = 0; j < 2; ++j) {
    CHECK(eval_map(maps[0], {j})[0] == 0);
    CHECK(eval_map(maps[1], {j})[0] == 1);
  }
  CHECK(maps[0].results[0]->kind == AffineKind::Const);
  CHECK(maps[1].results[0]->kind == AffineKind::Const);
}

TEST_CASE("split_access_map identity interleave") {
  AffineMap m = parse_affine_map("affine_map<(d0) -> (d0)>");
  auto maps = split_access_map(m, 4, 2);
  REQUIRE(maps.size() == 2);
  for (std::int64_t j = 0; j < 2; ++j) {
    CHECK(eval_map(maps[0], {j})[0] == 2 * j);
    CHECK(eval_map(maps[1], {j})[0] == 2 * j + 1);
  }
}

TEST_CASE("split_access_map floordiv not splittable") {
  // Images per class both {0,1,2,3}: enumerated {0,0,1,1,2,2,3,3}, classes
  // intersect.
  AffineMap m = parse_affine_map("affine_map<(d0) -> (d0 floordiv 2)>");
  CHECK_THROWS_WITH_AS(split_access_map(m, 8, 2), doctest::Contains("NotSplittable"),
                       Error);
}

TEST_CASE("split_access_map reproduces original pointwise") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::int64_t> coef(1, 3);
  for (int t = 0; t < 50; ++t) {
    // a*i + b is always splittable when a != 0 mod parts... use odd a.
    std::int64_t a = 2 * coef(rng) - 1, b = coef(rng);
    AffineMap m;
    m.num_dims = 1;
    m.results.push_back(
        AffineExprNode::add(AffineExprNode::mul(AffineExprNode::dim(0), a), b));
    std::int64_t extent = 8;
    int parts = 2;
    auto maps = split_access_map(m, extent, parts);
    for (std::int64_t i = 0; i < extent; ++i) {
      auto k = static_cast<std::size_t>(i % parts);
      CHECK(eval_map(maps[k], {i / parts})[0] == eval_map(m, {i})[0]);
    }
  }
}

TEST_CASE("affine map/set textual round trip") {
  const char *texts[] = {
      "affine_map<(d0)[s0] -> (d0 + s0 * 8)>",
      "affine_map<(d0) -> (d0 mod 2)>",
      "affine_map<(d0, d1) -> (d0 * 2 + d1, d1 floordiv 4)>",
      "affine_map<()[s0, s1] -> (s0 + s1 * 128)>",
  };
  for (const char *t : texts) {
    AffineMap m = parse_affine_map(t);
    CHECK(to_string(m) == t);
    CHECK(map_equal(parse_affine_map(to_string(m)), m));
  }
  IntegerSet s = paper_broadcast_set();
  CHECK(set_equal(parse_affine_set(to_string(s)), s));
}

TEST_CASE("interval arithmetic is conservative") {
  std::mt19937_64 rng(19);
  std::uniform_int_distribution<std::int64_t> v(-6, 6);
  for (int t = 0; t < 200; ++t) {
    AffineExpr e = random_expr(rng, 4, 1, 0);
    std::int64_t lo = v(rng), hi = v(rng);
    if (lo > hi)
      std::swap(lo, hi);
    Interval iv = eval_expr_interval(e, {{lo, hi}}, {});
    for (std::int64_t d = lo; d <= hi; ++d) {
      std::int64_t x = eval_expr(e, {d}, {});
      CHECK(x >= iv.lo);
      CHECK(x <= iv.hi);
    }
  }
}

TEST_CASE("simplify resolves divisible mod and floordiv") {
  // (2j + k) mod 2 == k, (2j) floordiv 2 == j
  AffineExpr j2 = AffineExprNode::mul(AffineExprNode::dim(0), 2);
  AffineExpr e = simplify(AffineExprNode::mod(AffineExprNode::add(j2, 1), 2));
  CHECK(e->kind == AffineKind::Const);
  CHECK(e->value == 1);
  AffineExpr f = simplify(AffineExprNode::floordiv(j2, 2));
  CHECK(expr_equal(f, AffineExprNode::dim(0)));
}
