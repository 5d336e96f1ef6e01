#include <doctest.h>

#include "air/error.hpp"
#include "air/ir.hpp"

#include <fstream>
#include <random>
#include <sstream>

using namespace air;

namespace {

std::string slurp(const std::string &path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string corpus(const std::string &name) {
  return slurp(std::string(AIR_CORPUS_DIR) + "/" + name);
}

int count_ops(const Program &p, OpKind k) {
  int n = 0;
  walk(*p.module, [&](const Operation &op) { n += op.kind == k; });
  return n;
}

} // namespace

TEST_CASE("parse vecadd corpus") {
  Program p = parse_program(corpus("vecadd.air"), "vecadd.air");
  CHECK(p.funcs().size() == 1);
  CHECK(count_ops(p, OpKind::ScfParallel) == 1);
  CHECK(count_ops(p, OpKind::ScfFor) == 2);
  CHECK(count_ops(p, OpKind::Memcpy) == 3);
  CHECK(verify_program(p).empty());
}

TEST_CASE("parse empty module") {
  Program p = parse_program("module {}");
  CHECK(p.funcs().empty());
  CHECK(verify_program(p).empty());
}

TEST_CASE("undeclared channel symbol") {
  const char *text = R"(module {
  func @f(%a: memref<16xi32, L3>) {
    air.channel.put @chan1 (%a)
  }
})";
  CHECK_THROWS_WITH_AS(parse_program(text), doctest::Contains("UnknownSymbol"), Error);
}

TEST_CASE("syntax error carries location") {
  try {
    parse_program("module {\n  func @f() {\n    air.bogus\n  }\n}", "t.air");
    FAIL("expected throw");
  } catch (const Error &e) {
    CHECK(e.code() == "SyntaxError");
    CHECK(std::string(e.what()).find("t.air:3:") != std::string::npos);
  }
}

TEST_CASE("print round trip on vecadd") {
  Program p = parse_program(corpus("vecadd.air"), "vecadd.air");
  std::string once = print_program(p);
  Program p2 = parse_program(once);
  CHECK(structural_equal(p, p2));
  // Fixpoint after one cycle.
  CHECK(print_program(p2) == once);
}

TEST_CASE("printer emits herd size attribute") {
  const char *text = R"(module {
  air.channel @channel_0 [1, 2]
  func @f() {
    air.herd @herd_0 tile (%tx, %ty) in [1, 2] {
    }
  }
})";
  Program p = parse_program(text);
  std::string printed = print_program(p);
  CHECK(printed.find("air.herd") != std::string::npos);
  CHECK(printed.find("[1, 2]") != std::string::npos);
  CHECK(printed.find("air.channel @channel_0 [1, 2]") != std::string::npos);
}

TEST_CASE("verifier: dominance violation") {
  // Build by API: a herd body using a value defined after it.
  Program p;
  auto func = make_op(OpKind::Func);
  func->symbol = "f";
  func->regions.emplace_back();

  auto use_before_def = make_op(OpKind::Dealloc);
  auto alloc = make_op(OpKind::Alloc);
  alloc->alloc_type = MemRefType{{16}, ElemKind::I32, MemorySpace::L3};
  Value buf = p.new_value(Type::memref_of(alloc->alloc_type));
  alloc->results.push_back(buf);
  use_before_def->buffer = buf;

  func->regions[0].ops.push_back(std::move(use_before_def));
  func->regions[0].ops.push_back(std::move(alloc));
  p.body().ops.push_back(std::move(func));

  auto diags = verify_program(p);
  REQUIRE_FALSE(diags.empty());
  CHECK(diags[0].code == "DominanceViolation");
}

TEST_CASE("verifier: nesting order never inverted") {
  const char *text = R"(module {
  func @f() {
    air.herd tile (%tx, %ty) in [1, 1] {
      air.segment {
      }
    }
  }
})";
  Program p = parse_program(text);
  auto diags = verify_program(p);
  REQUIRE_FALSE(diags.empty());
  CHECK(diags[0].code == "InvalidNesting");
}

TEST_CASE("verifier: oversized L1 alloc passes verify (capacity is a lowering concern)") {
  const char *text = R"(module {
  func @f() {
    air.launch {
      air.segment {
        air.herd tile (%tx, %ty) in [1, 1] {
          %b = air.alloc : memref<70000xi8, L1>
          air.dealloc %b
        }
      }
    }
  }
})";
  Program p = parse_program(text);
  CHECK(verify_program(p).empty());
}

TEST_CASE("verifier: L1 alloc outside herd flagged when spatial constructs exist") {
  const char *text = R"(module {
  func @f() {
    air.launch {
      air.segment {
        %b = air.alloc : memref<16xi32, L1>
        air.dealloc %b
      }
    }
  }
})";
  Program p = parse_program(text);
  auto diags = verify_program(p);
  REQUIRE_FALSE(diags.empty());
  CHECK(diags[0].code == "InvalidPlacement");
}

TEST_CASE("verifier: access pattern bounds") {
  const char *text = R"(module {
  func @f(%a: memref<64xi32, L3>) {
    %b = air.alloc : memref<128xi32, L3>
    air.memcpy (%b [0] [128] [1], %a [0] [128] [1])
  }
})";
  Program p = parse_program(text);
  auto diags = verify_program(p);
  REQUIRE_FALSE(diags.empty());
  CHECK(diags[0].code == "OutOfBounds");
}

TEST_CASE("verifier: diagnostic format file:line:col") {
  const char *text = R"(module {
  func @f(%a: memref<64xi32, L3>) {
    air.memcpy (%a [0] [65] [1], %a [0] [65] [1])
  }
})";
  Program p = parse_program(text, "x.air");
  auto diags = verify_program(p);
  REQUIRE_FALSE(diags.empty());
  std::string s = diags[0].str();
  CHECK(s.find("x.air:3:") == 0);
  CHECK(s.find("error:") != std::string::npos);
}

TEST_CASE("async ops produce trailing token results") {
  const char *text = R"(module {
  func @f(%a: memref<16xi32, L3>) {
    %b, %t0 = air.alloc async : memref<16xi32, L3>
    %t1 = air.memcpy async deps(%t0) (%b, %a)
    %t2 = air.wait_all async deps(%t0, %t1)
    air.dealloc deps(%t2) %b
  }
})";
  Program p = parse_program(text);
  CHECK(verify_program(p).empty());
  int tokens = 0;
  walk(*p.module, [&](const Operation &op) {
    if (op.is_async) {
      CHECK(op.token().valid());
      ++tokens;
    }
    for (const auto &d : op.deps)
      CHECK(d.type.kind == TypeKind::Token);
  });
  CHECK(tokens == 3);
}

namespace {

// Random program generator for the round-trip property. Programs are valid
// by construction: every generated op only uses values already in scope.
struct Gen {
  std::mt19937_64 rng;
  Program p;
  int op_budget = 50;

  explicit Gen(std::uint64_t seed) : rng(seed) {}

  std::int64_t pick(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
  }

  Program run() {
    auto func = make_op(OpKind::Func);
    func->symbol = "gen";
    func->regions.emplace_back();
    std::vector<Value> bufs, tokens, indices;
    for (int i = 0; i < 3; ++i) {
      MemRefType mt{{64}, ElemKind::I32, MemorySpace::L3};
      Value v = p.new_value(Type::memref_of(mt));
      func->regions[0].args.push_back(v);
      bufs.push_back(v);
    }
    fill_region(func->regions[0], bufs, tokens, indices, 0);
    p.body().ops.push_back(std::move(func));
    return std::move(p);
  }

  void fill_region(Region &r, std::vector<Value> bufs, std::vector<Value> tokens,
                   std::vector<Value> indices, int depth) {
    int n = static_cast<int>(pick(3, 8));
    for (int i = 0; i < n && op_budget > 0; ++i) {
      --op_budget;
      switch (pick(0, depth < 2 ? 6 : 4)) {
      case 0: { // alloc
        auto op = make_op(OpKind::Alloc);
        op->alloc_type = MemRefType{{static_cast<std::int64_t>(pick(8, 64))},
                                    ElemKind::I32, MemorySpace::L3};
        op->is_async = pick(0, 1) == 1;
        Value v = p.new_value(Type::memref_of(op->alloc_type));
        op->results.push_back(v);
        if (op->is_async) {
          Value t = p.new_value(Type::token());
          op->results.push_back(t);
          tokens.push_back(t);
        }
        bufs.push_back(v);
        r.ops.push_back(std::move(op));
        break;
      }
      case 1: { // memcpy between same-size prefixes
        if (bufs.size() < 2)
          break;
        auto op = make_op(OpKind::Memcpy);
        const Value &a = bufs[static_cast<std::size_t>(pick(0, static_cast<std::int64_t>(bufs.size()) - 1))];
        const Value &b = bufs[static_cast<std::size_t>(pick(0, static_cast<std::int64_t>(bufs.size()) - 1))];
        std::int64_t n2 = std::min(a.type.memref.shape[0], b.type.memref.shape[0]);
        BufferView dst{a, {IndexExpr(std::int64_t{0})}, {IndexExpr(n2)}, {IndexExpr(std::int64_t{1})}};
        BufferView src{b, {IndexExpr(std::int64_t{0})}, {IndexExpr(n2)}, {IndexExpr(std::int64_t{1})}};
        op->views = {dst, src};
        if (pick(0, 1)) {
          op->is_async = true;
          Value t = p.new_value(Type::token());
          op->results.push_back(t);
          if (!tokens.empty() && pick(0, 1))
            op->deps.push_back(tokens[static_cast<std::size_t>(pick(0, static_cast<std::int64_t>(tokens.size()) - 1))]);
          tokens.push_back(t);
        }
        r.ops.push_back(std::move(op));
        break;
      }
      case 2: { // wait_all
        auto op = make_op(OpKind::WaitAll);
        op->is_async = true;
        for (const auto &t : tokens)
          if (pick(0, 2) == 0)
            op->deps.push_back(t);
        Value t = p.new_value(Type::token());
        op->results.push_back(t);
        tokens.push_back(t);
        r.ops.push_back(std::move(op));
        break;
      }
      case 3: { // arith.const index
        auto op = make_op(OpKind::ArithConst);
        op->const_value = pick(0, 32);
        op->const_type = Type::index();
        Value v = p.new_value(Type::index());
        op->results.push_back(v);
        indices.push_back(v);
        r.ops.push_back(std::move(op));
        break;
      }
      case 4: { // kernel call
        if (bufs.empty())
          break;
        auto op = make_op(OpKind::KernelCall);
        op->symbol = "zero_i32";
        op->writes.push_back(BufferView{bufs[static_cast<std::size_t>(pick(0, static_cast<std::int64_t>(bufs.size()) - 1))], {}, {}, {}});
        op->attrs["cycles"] = static_cast<std::int64_t>(pick(1, 100));
        r.ops.push_back(std::move(op));
        break;
      }
      case 5: { // scf.for with a nested region
        auto op = make_op(OpKind::ScfFor);
        op->lb = 0;
        op->ub = pick(1, 4);
        op->step = 1;
        op->regions.emplace_back();
        Value iv = p.new_value(Type::index());
        op->regions[0].args.push_back(iv);
        auto inner_indices = indices;
        inner_indices.push_back(iv);
        fill_region(op->regions[0], bufs, tokens, inner_indices, depth + 1);
        r.ops.push_back(std::move(op));
        break;
      }
      default: { // herd at depth 0 only
        if (depth != 0)
          break;
        auto op = make_op(OpKind::Herd);
        op->symbol = "h" + std::to_string(pick(0, 9));
        op->extents = {pick(1, 2), pick(1, 2)};
        op->regions.emplace_back();
        Value tx = p.new_value(Type::index());
        Value ty = p.new_value(Type::index());
        op->regions[0].args = {tx, ty};
        auto inner = indices;
        inner.push_back(tx);
        inner.push_back(ty);
        fill_region(op->regions[0], bufs, tokens, inner, depth + 2);
        r.ops.push_back(std::move(op));
        break;
      }
      }
    }
  }
};

} // namespace

TEST_CASE("round trip fixpoint on random programs") {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    Gen g(seed * 7919 + 1);
    Program p = g.run();
    std::string once = print_program(p);
    Program p1 = parse_program(once);
    CHECK(structural_equal(p, p1));
    std::string twice = print_program(p1);
    CHECK(once == twice);
    Program p2 = parse_program(twice);
    CHECK(structural_equal(p1, p2));
  }
}

TEST_CASE("clone preserves structure") {
  Program p = parse_program(corpus("vecadd.air"));
  Program q = p.clone();
  CHECK(structural_equal(p, q));
  CHECK(print_program(p) == print_program(q));
}
