#include <doctest.h>

#include "air/error.hpp"
#include "air/interp.hpp"
#include "air/ir.hpp"

#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

using namespace air;

namespace {

std::string corpus(const std::string &name) {
  std::ifstream in(std::string(AIR_CORPUS_DIR) + "/" + name);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Bytes i32_bytes(const std::vector<std::int32_t> &v) {
  Bytes out(v.size() * 4);
  std::memcpy(out.data(), v.data(), out.size());
  return out;
}

std::vector<std::int32_t> as_i32(const Bytes &b) {
  std::vector<std::int32_t> out(b.size() / 4);
  std::memcpy(out.data(), b.data(), b.size());
  return out;
}

Bytes i16_bytes(const std::vector<std::int16_t> &v) {
  Bytes out(v.size() * 2);
  std::memcpy(out.data(), v.data(), out.size());
  return out;
}

} // namespace

TEST_CASE("reference_execute vecadd") {
  Program p = parse_program(corpus("vecadd.air"), "vecadd.air");
  REQUIRE(verify_program(p).empty());
  std::vector<std::int32_t> a(512), b(512, 2);
  for (int i = 0; i < 512; ++i)
    a[static_cast<std::size_t>(i)] = i + 1;
  BufferBindings in;
  in["a"] = i32_bytes(a);
  in["b"] = i32_bytes(b);
  auto out = reference_execute(p, in);
  auto c = as_i32(out.at("c"));
  REQUIRE(c.size() == 512);
  for (int i = 0; i < 512; ++i)
    CHECK(c[static_cast<std::size_t>(i)] == i + 3); // 3, 4, ..., N+2
}

TEST_CASE("reference_execute small matmul against independent triple loop") {
  // A tiled output-stationary nest at M=N=K=8, i16 inputs, i32 accumulator.
  const char *text = R"(module {
  func @mm(%A: memref<8x8xi16, L3>, %B: memref<8x8xi16, L3>, %C: memref<8x8xi32, L3>) {
    scf.parallel (%i, %j) in (2, 2) {
      %c1 = air.alloc : memref<4x4xi32, L1>
      air.kernel @zero reads() writes(%c1)
      scf.for %k = 0 to 2 step 1 {
        %a1 = air.alloc : memref<4x4xi16, L1>
        %b1 = air.alloc : memref<4x4xi16, L1>
        %ro = affine.apply affine_map<(d0) -> (d0 * 4)> (%i)
        %ko = affine.apply affine_map<(d0) -> (d0 * 4)> (%k)
        %co = affine.apply affine_map<(d0) -> (d0 * 4)> (%j)
        air.memcpy (%a1, %A [%ro, %ko] [4, 4] [8, 1])
        air.memcpy (%b1, %B [%ko, %co] [4, 4] [8, 1])
        air.kernel @matmul reads(%a1, %b1, %c1) writes(%c1)
        air.dealloc %a1
        air.dealloc %b1
      }
      %ro2 = affine.apply affine_map<(d0) -> (d0 * 4)> (%i)
      %co2 = affine.apply affine_map<(d0) -> (d0 * 4)> (%j)
      air.memcpy (%C [%ro2, %co2] [4, 4] [8, 1], %c1)
      air.dealloc %c1
    }
  }
})";
  Program p = parse_program(text);
  REQUIRE(verify_program(p).empty());

  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::int16_t> d(-50, 50);
  std::vector<std::int16_t> A(64), B(64);
  for (auto &x : A)
    x = d(rng);
  for (auto &x : B)
    x = d(rng);

  BufferBindings in;
  in["A"] = i16_bytes(A);
  in["B"] = i16_bytes(B);
  auto out = reference_execute(p, in);
  auto C = as_i32(out.at("C"));

  // Independent oracle: naive triple loop.
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      std::int32_t acc = 0;
      for (int k = 0; k < 8; ++k)
        acc += static_cast<std::int32_t>(A[static_cast<std::size_t>(i * 8 + k)]) *
               B[static_cast<std::size_t>(k * 8 + j)];
      CHECK(C[static_cast<std::size_t>(i * 8 + j)] == acc);
    }
}

TEST_CASE("reference_execute store past extent") {
  const char *text = R"(module {
  func @f(%a: memref<4xi32, L3>) {
    %c = arith.const 9 : i32
    %i = arith.const 7 : index
    memref.store %c, %a[%i]
  }
})";
  Program p = parse_program(text);
  CHECK_THROWS_WITH_AS(reference_execute(p, {}), doctest::Contains("OutOfBounds"),
                       Error);
}

TEST_CASE("reference_execute decoupled channels FIFO semantics") {
  const char *text = R"(module {
  air.channel @ch [1, 2]
  func @f(%a: memref<8xi32, L3>, %c: memref<8xi32, L3>) {
    air.launch {
      scf.parallel (%x, %y) in (1, 2) {
        %o = affine.apply affine_map<(d0) -> (d0 * 4)> (%y)
        air.channel.put @ch[%x, %y] (%a [%o] [4] [1])
      }
      air.segment {
        air.herd tile (%tx, %ty) in [1, 2] {
          %b = air.alloc : memref<4xi32, L1>
          air.channel.get @ch[%tx, %ty] (%b)
          %o2 = affine.apply affine_map<(d0) -> (d0 * 4)> (%ty)
          air.memcpy (%c [%o2] [4] [1], %b)
          air.dealloc %b
        }
      }
    }
  }
})";
  Program p = parse_program(text);
  REQUIRE(verify_program(p).empty());
  std::vector<std::int32_t> a = {1, 2, 3, 4, 5, 6, 7, 8};
  BufferBindings in;
  in["a"] = i32_bytes(a);
  auto out = reference_execute(p, in);
  CHECK(as_i32(out.at("c")) == a);
}
