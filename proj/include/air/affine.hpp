#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace air {

// Quasi-affine expressions over dimensions d0..dN and symbols s0..sM.
// Multiplication requires a constant factor; mod/floordiv divisors are
// positive constants. Nodes are immutable and shared.

class AffineExprNode;
using AffineExpr = std::shared_ptr<const AffineExprNode>;

enum class AffineKind { Dim, Sym, Const, Add, MulConst, Mod, FloorDiv };

class AffineExprNode {
public:
  AffineKind kind;
  std::int64_t value = 0; // Dim/Sym index, Const value, Mod/FloorDiv divisor,
                          // MulConst factor
  AffineExpr lhs, rhs;    // Add uses both; MulConst/Mod/FloorDiv use lhs

  static AffineExpr dim(int i);
  static AffineExpr sym(int i);
  static AffineExpr constant(std::int64_t c);
  static AffineExpr add(AffineExpr a, AffineExpr b);
  static AffineExpr add(AffineExpr a, std::int64_t c);
  static AffineExpr mul(AffineExpr a, std::int64_t factor);
  static AffineExpr mod(AffineExpr a, std::int64_t divisor);
  static AffineExpr floordiv(AffineExpr a, std::int64_t divisor);
};

bool expr_equal(const AffineExpr &a, const AffineExpr &b);
std::string to_string(const AffineExpr &e);

// Mathematical mod (result in [0, m)) and floor division.
std::int64_t math_mod(std::int64_t a, std::int64_t m);
std::int64_t floor_div(std::int64_t a, std::int64_t b);

std::int64_t eval_expr(const AffineExpr &e, const std::vector<std::int64_t> &dims,
                       const std::vector<std::int64_t> &syms);

struct AffineMap {
  int num_dims = 0;
  int num_syms = 0;
  std::vector<AffineExpr> results;

  static AffineMap identity(int rank);
  static AffineMap constant(std::int64_t c);
};

bool map_equal(const AffineMap &a, const AffineMap &b);
std::string to_string(const AffineMap &m);

/// Evaluates every result with floor semantics for floordiv and
/// mathematical mod. Throws Error("ArityMismatch") on length mismatch.
std::vector<std::int64_t> eval_map(const AffineMap &m,
                                   const std::vector<std::int64_t> &dims,
                                   const std::vector<std::int64_t> &syms = {});

enum class AffineRelation { Eq, Ge }; // expr == 0, expr >= 0

struct AffineConstraint {
  AffineExpr expr;
  AffineRelation rel;
};

struct IntegerSet {
  int num_dims = 0;
  int num_syms = 0;
  std::vector<AffineConstraint> constraints;
};

bool set_equal(const IntegerSet &a, const IntegerSet &b);
std::string to_string(const IntegerSet &s);

bool set_contains(const IntegerSet &s, const std::vector<std::int64_t> &dims,
                  const std::vector<std::int64_t> &syms = {});

/// Enumerates, in lexicographic order, every dim point inside dest_bounds
/// (a box [0,b0) x [0,b1) x ...) contained in `s` with symbols bound to
/// `source`.
std::vector<std::vector<std::int64_t>>
broadcast_destinations(const IntegerSet &s, const std::vector<std::int64_t> &source,
                       const std::vector<std::int64_t> &dest_bounds);

/// Replaces dims/syms in `e` by the given expressions (index i replaced by
/// dims[i] / syms[i]); lists may be shorter than the referenced indices only
/// if those indices never occur.
AffineExpr substitute(const AffineExpr &e, const std::vector<AffineExpr> &dims,
                      const std::vector<AffineExpr> &syms = {});

/// Constant-folds and flattens into linear normal form where possible;
/// resolves mod/floordiv of linear expressions whose variable coefficients
/// are divisible by the divisor.
AffineExpr simplify(const AffineExpr &e);

/// Splits a 1-d access map into `parts` maps, one per domain residue class.
/// Map k reproduces m on the subdomain {i | i == k (mod parts)}, reindexed
/// dense: map_k(j) = m(parts*j + k). Requires the classes' image sets to be
/// pairwise disjoint; throws Error("NotSplittable") otherwise.
std::vector<AffineMap> split_access_map(const AffineMap &m, std::int64_t domain_extent,
                                        int parts);

// Interval arithmetic over expressions, used by the verifier and the
// dependence overlap test. Intervals are inclusive.
struct Interval {
  std::int64_t lo = 0;
  std::int64_t hi = 0;
};

Interval eval_expr_interval(const AffineExpr &e, const std::vector<Interval> &dims,
                            const std::vector<Interval> &syms);

// Textual forms: affine_map<(d0, d1)[s0] -> (d0 + s0 * 8)> and
// affine_set<(d0)[s0] : (d0 - s0 == 0, s0 >= 0)>.
AffineMap parse_affine_map(std::string_view text);
IntegerSet parse_affine_set(std::string_view text);

} // namespace air
