#pragma once

#include "air/affine.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace air {

// ---------------------------------------------------------------------------
// Types

enum class ElemKind { I8, I16, I32, F32, BF16 };

int width_bytes(ElemKind k);
bool is_float(ElemKind k);
std::string to_string(ElemKind k);
std::optional<ElemKind> parse_elem_kind(std::string_view s);

enum class MemorySpace { L3, L2, L1 };
std::string to_string(MemorySpace s);

struct MemRefType {
  std::vector<std::int64_t> shape;
  ElemKind elem = ElemKind::I32;
  MemorySpace space = MemorySpace::L3;

  std::int64_t num_elements() const {
    std::int64_t n = 1;
    for (auto d : shape)
      n *= d;
    return n;
  }
  std::int64_t byte_size() const { return num_elements() * width_bytes(elem); }
  bool operator==(const MemRefType &o) const {
    return shape == o.shape && elem == o.elem && space == o.space;
  }
};

enum class TypeKind { MemRef, Token, Index, Scalar };

struct Type {
  TypeKind kind = TypeKind::Index;
  MemRefType memref; // valid when kind == MemRef
  ElemKind scalar = ElemKind::I32; // valid when kind == Scalar

  static Type token() { return {TypeKind::Token, {}, ElemKind::I32}; }
  static Type index() { return {TypeKind::Index, {}, ElemKind::I32}; }
  static Type scalar_of(ElemKind k) { return {TypeKind::Scalar, {}, k}; }
  static Type memref_of(MemRefType m) { return {TypeKind::MemRef, std::move(m), ElemKind::I32}; }

  bool operator==(const Type &o) const {
    if (kind != o.kind)
      return false;
    if (kind == TypeKind::MemRef)
      return memref == o.memref;
    if (kind == TypeKind::Scalar)
      return scalar == o.scalar;
    return true;
  }
};

std::string to_string(const Type &t);

// SSA value: identified by program-unique id.
struct Value {
  int id = -1;
  Type type;

  bool valid() const { return id >= 0; }
  bool operator==(const Value &o) const { return id == o.id; }
  bool operator<(const Value &o) const { return id < o.id; }
};

// Access-pattern entry: integer literal or an index-typed SSA value.
struct IndexExpr {
  std::int64_t literal = 0;
  Value value; // when valid(), overrides literal

  IndexExpr() = default;
  IndexExpr(std::int64_t c) : literal(c) {}
  IndexExpr(Value v) : value(v) {}
  bool is_literal() const { return !value.valid(); }
  bool operator==(const IndexExpr &o) const {
    return is_literal() == o.is_literal() &&
           (is_literal() ? literal == o.literal : value == o.value);
  }
};

// A strided view on a memref operand; empty lists mean the whole buffer.
struct BufferView {
  Value buffer;
  std::vector<IndexExpr> offsets, sizes, strides;

  bool whole() const { return offsets.empty() && sizes.empty() && strides.empty(); }
};

// ---------------------------------------------------------------------------
// Operations

enum class OpKind {
  Module,
  Func,
  Launch,
  Segment,
  Herd,
  ScfFor,
  ScfParallel,
  ScfYield,
  ChannelDecl,
  ChannelPut,
  ChannelGet,
  Memcpy,
  Alloc,
  Dealloc,
  WaitAll,
  KernelCall,
  AffineApply,
  ArithConst,
  ArithAdd,
  ArithMul,
  Load,
  Store,
};

std::string op_name(OpKind k);

using Attr = std::variant<std::int64_t, double, std::string, AffineMap, IntegerSet>;

struct SrcLoc {
  int line = 0;
  int col = 0;
};

struct Operation;

struct Region {
  std::vector<Value> args;
  std::vector<std::unique_ptr<Operation>> ops;
};

struct Operation {
  OpKind kind;
  SrcLoc loc;

  bool is_async = false;
  std::vector<Value> deps;       // dependency list (tokens)
  std::vector<Value> concurs;    // concurrency list
  std::vector<Value> affinities; // affinity list
  std::vector<Value> results;    // async token is the last result

  // Kind-specific payloads; unused fields stay empty.
  std::string symbol;                   // func/herd/segment name, channel, kernel
  std::vector<std::string> arg_names;   // func argument names (binding metadata)
  std::vector<std::int64_t> extents;    // launch/segment/herd/parallel sizes,
                                        // channel bundle shape
  std::vector<IndexExpr> bundle_index;  // channel put/get bundle selector
  std::vector<BufferView> views;        // memcpy [dst, src]; put [src]; get [dst]
  std::vector<BufferView> reads, writes; // kernel_call effect sets
  std::int64_t lb = 0, ub = 0, step = 1; // scf.for bounds (static)
  std::vector<Value> iter_init;         // scf.for iter_args initials / parallel init
  std::vector<Value> operands;          // yield values, arith operands, store value
  MemRefType alloc_type;                // alloc
  AffineMap map;                        // affine_apply
  std::vector<Value> apply_dims, apply_syms; // affine_apply operands
  Value buffer;                         // load/store target
  std::vector<IndexExpr> indices;       // load/store indices
  std::int64_t const_value = 0;         // arith.const
  Type const_type = Type::index();      // arith.const / arith result type
  std::map<std::string, Attr> attrs;

  std::vector<Region> regions;

  Value token() const {
    if (is_async && !results.empty() && results.back().type.kind == TypeKind::Token)
      return results.back();
    return {};
  }
  bool has_attr(const std::string &k) const { return attrs.count(k) != 0; }
  std::int64_t int_attr(const std::string &k, std::int64_t dflt = 0) const {
    auto it = attrs.find(k);
    if (it == attrs.end())
      return dflt;
    if (auto *v = std::get_if<std::int64_t>(&it->second))
      return *v;
    return dflt;
  }

  std::unique_ptr<Operation> clone() const;
};

std::unique_ptr<Operation> make_op(OpKind kind);

// ---------------------------------------------------------------------------
// Program

struct Program {
  std::unique_ptr<Operation> module; // OpKind::Module
  int next_value_id = 0;
  std::string source_name = "<memory>";

  Program();
  Program(Program &&) = default;
  Program &operator=(Program &&) = default;
  Program clone() const;

  Value new_value(Type t) { return Value{next_value_id++, std::move(t)}; }

  Region &body() { return module->regions[0]; }
  const Region &body() const { return module->regions[0]; }

  Operation *find_channel(const std::string &sym) const;
  std::vector<Operation *> funcs() const;
};

// Pre-order walk over every op in the module (including nested regions).
void walk(Operation &op, const std::function<void(Operation &)> &fn);
void walk(const Operation &op, const std::function<void(const Operation &)> &fn);
// Post-order variant.
void walk_post(Operation &op, const std::function<void(Operation &)> &fn);

// Structural equality modulo SSA ids (positional matching of definitions).
bool structural_equal(const Program &a, const Program &b);

// ---------------------------------------------------------------------------
// Diagnostics

enum class Severity { Error, Warning };

struct Diagnostic {
  std::string file;
  int line = 0;
  int col = 0;
  Severity severity = Severity::Error;
  std::string code; // e.g. "DominanceViolation"
  std::string message;

  std::string str() const;
};

// ---------------------------------------------------------------------------
// Parser / printer / verifier

/// Parses textual IR. Throws Error("SyntaxError"|"UnknownSymbol"|
/// "TypeMismatch") carrying file:line:col context in the message.
Program parse_program(const std::string &text, const std::string &filename = "<memory>");

/// Deterministic form; parse(print(p)) is structurally equal to p.
std::string print_program(const Program &p);

/// Collects diagnostics; never throws for verification failures.
std::vector<Diagnostic> verify_program(const Program &p);

} // namespace air
