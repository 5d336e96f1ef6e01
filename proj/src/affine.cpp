#include "air/affine.hpp"

#include "air/error.hpp"

#include <algorithm>
#include <cctype>
#include <limits>
#include <sstream>

namespace air {

namespace {

AffineExpr make(AffineKind k, std::int64_t v, AffineExpr l = nullptr,
                AffineExpr r = nullptr) {
  auto n = std::make_shared<AffineExprNode>();
  n->kind = k;
  n->value = v;
  n->lhs = std::move(l);
  n->rhs = std::move(r);
  return n;
}

} // namespace

AffineExpr AffineExprNode::dim(int i) { return make(AffineKind::Dim, i); }
AffineExpr AffineExprNode::sym(int i) { return make(AffineKind::Sym, i); }
AffineExpr AffineExprNode::constant(std::int64_t c) {
  return make(AffineKind::Const, c);
}

AffineExpr AffineExprNode::add(AffineExpr a, AffineExpr b) {
  if (a->kind == AffineKind::Const && b->kind == AffineKind::Const)
    return constant(a->value + b->value);
  if (b->kind == AffineKind::Const && b->value == 0)
    return a;
  if (a->kind == AffineKind::Const && a->value == 0)
    return b;
  return make(AffineKind::Add, 0, std::move(a), std::move(b));
}

AffineExpr AffineExprNode::add(AffineExpr a, std::int64_t c) {
  return add(std::move(a), constant(c));
}

AffineExpr AffineExprNode::mul(AffineExpr a, std::int64_t factor) {
  if (a->kind == AffineKind::Const)
    return constant(a->value * factor);
  if (factor == 1)
    return a;
  return make(AffineKind::MulConst, factor, std::move(a));
}

AffineExpr AffineExprNode::mod(AffineExpr a, std::int64_t divisor) {
  if (divisor <= 0)
    throw Error("InvalidAffineExpr", "mod divisor must be positive");
  if (a->kind == AffineKind::Const)
    return constant(math_mod(a->value, divisor));
  return make(AffineKind::Mod, divisor, std::move(a));
}

AffineExpr AffineExprNode::floordiv(AffineExpr a, std::int64_t divisor) {
  if (divisor <= 0)
    throw Error("InvalidAffineExpr", "floordiv divisor must be positive");
  if (a->kind == AffineKind::Const)
    return constant(floor_div(a->value, divisor));
  return make(AffineKind::FloorDiv, divisor, std::move(a));
}

bool expr_equal(const AffineExpr &a, const AffineExpr &b) {
  if (a.get() == b.get())
    return true;
  if (!a || !b || a->kind != b->kind || a->value != b->value)
    return false;
  switch (a->kind) {
  case AffineKind::Dim:
  case AffineKind::Sym:
  case AffineKind::Const:
    return true;
  case AffineKind::Add:
    return expr_equal(a->lhs, b->lhs) && expr_equal(a->rhs, b->rhs);
  default:
    return expr_equal(a->lhs, b->lhs);
  }
}

std::int64_t math_mod(std::int64_t a, std::int64_t m) {
  std::int64_t r = a % m;
  return r < 0 ? r + m : r;
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0)))
    --q;
  return q;
}

std::int64_t eval_expr(const AffineExpr &e, const std::vector<std::int64_t> &dims,
                       const std::vector<std::int64_t> &syms) {
  switch (e->kind) {
  case AffineKind::Dim:
    if (e->value >= static_cast<std::int64_t>(dims.size()))
      throw Error("ArityMismatch", "dim index " + std::to_string(e->value) +
                                       " out of range");
    return dims[static_cast<std::size_t>(e->value)];
  case AffineKind::Sym:
    if (e->value >= static_cast<std::int64_t>(syms.size()))
      throw Error("ArityMismatch", "symbol index " + std::to_string(e->value) +
                                       " out of range");
    return syms[static_cast<std::size_t>(e->value)];
  case AffineKind::Const:
    return e->value;
  case AffineKind::Add:
    return eval_expr(e->lhs, dims, syms) + eval_expr(e->rhs, dims, syms);
  case AffineKind::MulConst:
    return eval_expr(e->lhs, dims, syms) * e->value;
  case AffineKind::Mod:
    return math_mod(eval_expr(e->lhs, dims, syms), e->value);
  case AffineKind::FloorDiv:
    return floor_div(eval_expr(e->lhs, dims, syms), e->value);
  }
  throw Error("InvalidAffineExpr", "unreachable kind");
}

namespace {

// Printing follows the grammar: add binds loosest, mul/mod/floordiv one
// level tighter, left-associative.
void print_expr(std::ostream &os, const AffineExpr &e, bool parenthesize_add) {
  switch (e->kind) {
  case AffineKind::Dim:
    os << "d" << e->value;
    return;
  case AffineKind::Sym:
    os << "s" << e->value;
    return;
  case AffineKind::Const:
    os << e->value;
    return;
  case AffineKind::Add: {
    if (parenthesize_add)
      os << "(";
    print_expr(os, e->lhs, false);
    if (e->rhs->kind == AffineKind::Const && e->rhs->value < 0)
      os << " - " << -e->rhs->value;
    else if (e->rhs->kind == AffineKind::MulConst && e->rhs->value == -1) {
      os << " - ";
      print_expr(os, e->rhs->lhs, true);
    } else {
      os << " + ";
      print_expr(os, e->rhs, false);
    }
    if (parenthesize_add)
      os << ")";
    return;
  }
  case AffineKind::MulConst:
    print_expr(os, e->lhs, true);
    os << " * " << e->value;
    return;
  case AffineKind::Mod:
    print_expr(os, e->lhs, true);
    os << " mod " << e->value;
    return;
  case AffineKind::FloorDiv:
    print_expr(os, e->lhs, true);
    os << " floordiv " << e->value;
    return;
  }
}

void print_dims_syms(std::ostream &os, int nd, int ns) {
  os << "(";
  for (int i = 0; i < nd; ++i)
    os << (i ? ", " : "") << "d" << i;
  os << ")";
  if (ns > 0) {
    os << "[";
    for (int i = 0; i < ns; ++i)
      os << (i ? ", " : "") << "s" << i;
    os << "]";
  }
}

} // namespace

std::string to_string(const AffineExpr &e) {
  std::ostringstream os;
  print_expr(os, e, false);
  return os.str();
}

AffineMap AffineMap::identity(int rank) {
  AffineMap m;
  m.num_dims = rank;
  for (int i = 0; i < rank; ++i)
    m.results.push_back(AffineExprNode::dim(i));
  return m;
}

AffineMap AffineMap::constant(std::int64_t c) {
  AffineMap m;
  m.num_dims = 1; // domain is still 1-d
  m.results.push_back(AffineExprNode::constant(c));
  return m;
}

bool map_equal(const AffineMap &a, const AffineMap &b) {
  if (a.num_dims != b.num_dims || a.num_syms != b.num_syms ||
      a.results.size() != b.results.size())
    return false;
  for (std::size_t i = 0; i < a.results.size(); ++i)
    if (!expr_equal(a.results[i], b.results[i]))
      return false;
  return true;
}

std::string to_string(const AffineMap &m) {
  std::ostringstream os;
  os << "affine_map<";
  print_dims_syms(os, m.num_dims, m.num_syms);
  os << " -> (";
  for (std::size_t i = 0; i < m.results.size(); ++i) {
    if (i)
      os << ", ";
    print_expr(os, m.results[i], false);
  }
  os << ")>";
  return os.str();
}

std::vector<std::int64_t> eval_map(const AffineMap &m,
                                   const std::vector<std::int64_t> &dims,
                                   const std::vector<std::int64_t> &syms) {
  if (static_cast<int>(dims.size()) != m.num_dims ||
      static_cast<int>(syms.size()) != m.num_syms)
    throw Error("ArityMismatch",
                "map expects " + std::to_string(m.num_dims) + " dims, " +
                    std::to_string(m.num_syms) + " syms; got " +
                    std::to_string(dims.size()) + "/" + std::to_string(syms.size()));
  std::vector<std::int64_t> out;
  out.reserve(m.results.size());
  for (const auto &r : m.results)
    out.push_back(eval_expr(r, dims, syms));
  return out;
}

bool set_equal(const IntegerSet &a, const IntegerSet &b) {
  if (a.num_dims != b.num_dims || a.num_syms != b.num_syms ||
      a.constraints.size() != b.constraints.size())
    return false;
  for (std::size_t i = 0; i < a.constraints.size(); ++i)
    if (a.constraints[i].rel != b.constraints[i].rel ||
        !expr_equal(a.constraints[i].expr, b.constraints[i].expr))
      return false;
  return true;
}

std::string to_string(const IntegerSet &s) {
  std::ostringstream os;
  os << "affine_set<";
  print_dims_syms(os, s.num_dims, s.num_syms);
  os << " : (";
  for (std::size_t i = 0; i < s.constraints.size(); ++i) {
    if (i)
      os << ", ";
    print_expr(os, s.constraints[i].expr, false);
    os << (s.constraints[i].rel == AffineRelation::Eq ? " == 0" : " >= 0");
  }
  os << ")>";
  return os.str();
}

bool set_contains(const IntegerSet &s, const std::vector<std::int64_t> &dims,
                  const std::vector<std::int64_t> &syms) {
  if (static_cast<int>(dims.size()) != s.num_dims ||
      static_cast<int>(syms.size()) != s.num_syms)
    throw Error("ArityMismatch", "set arity mismatch");
  for (const auto &c : s.constraints) {
    std::int64_t v = eval_expr(c.expr, dims, syms);
    if (c.rel == AffineRelation::Eq ? v != 0 : v < 0)
      return false;
  }
  return true;
}

std::vector<std::vector<std::int64_t>>
broadcast_destinations(const IntegerSet &s, const std::vector<std::int64_t> &source,
                       const std::vector<std::int64_t> &dest_bounds) {
  if (static_cast<int>(source.size()) != s.num_syms ||
      static_cast<int>(dest_bounds.size()) != s.num_dims)
    throw Error("ArityMismatch", "broadcast_destinations arity mismatch");
  std::vector<std::vector<std::int64_t>> out;
  std::vector<std::int64_t> point(dest_bounds.size(), 0);
  // Lexicographic walk over the bounds box.
  while (true) {
    if (set_contains(s, point, source))
      out.push_back(point);
    int d = static_cast<int>(point.size()) - 1;
    while (d >= 0) {
      if (++point[static_cast<std::size_t>(d)] <
          dest_bounds[static_cast<std::size_t>(d)])
        break;
      point[static_cast<std::size_t>(d)] = 0;
      --d;
    }
    if (d < 0)
      break;
  }
  return out;
}

AffineExpr substitute(const AffineExpr &e, const std::vector<AffineExpr> &dims,
                      const std::vector<AffineExpr> &syms) {
  switch (e->kind) {
  case AffineKind::Dim:
    if (e->value < static_cast<std::int64_t>(dims.size()) &&
        dims[static_cast<std::size_t>(e->value)])
      return dims[static_cast<std::size_t>(e->value)];
    return e;
  case AffineKind::Sym:
    if (e->value < static_cast<std::int64_t>(syms.size()) &&
        syms[static_cast<std::size_t>(e->value)])
      return syms[static_cast<std::size_t>(e->value)];
    return e;
  case AffineKind::Const:
    return e;
  case AffineKind::Add:
    return AffineExprNode::add(substitute(e->lhs, dims, syms),
                               substitute(e->rhs, dims, syms));
  case AffineKind::MulConst:
    return AffineExprNode::mul(substitute(e->lhs, dims, syms), e->value);
  case AffineKind::Mod:
    return AffineExprNode::mod(substitute(e->lhs, dims, syms), e->value);
  case AffineKind::FloorDiv:
    return AffineExprNode::floordiv(substitute(e->lhs, dims, syms), e->value);
  }
  throw Error("InvalidAffineExpr", "unreachable kind");
}

namespace {

// Linear normal form: constant + sum(coefficient * atom), where atoms are
// dims, syms, or irreducible mod/floordiv subtrees.
struct LinearForm {
  std::int64_t constant = 0;
  std::vector<std::pair<AffineExpr, std::int64_t>> terms; // atom, coeff

  void add_term(const AffineExpr &atom, std::int64_t coeff) {
    if (coeff == 0)
      return;
    for (auto &t : terms)
      if (expr_equal(t.first, atom)) {
        t.second += coeff;
        return;
      }
    terms.emplace_back(atom, coeff);
  }

  void prune() {
    terms.erase(std::remove_if(terms.begin(), terms.end(),
                               [](const auto &t) { return t.second == 0; }),
                terms.end());
  }

  AffineExpr to_expr() const {
    AffineExpr e = nullptr;
    for (const auto &[atom, coeff] : terms) {
      AffineExpr t = AffineExprNode::mul(atom, coeff);
      e = e ? AffineExprNode::add(e, t) : t;
    }
    if (!e)
      return AffineExprNode::constant(constant);
    if (constant != 0)
      e = AffineExprNode::add(e, constant);
    return e;
  }
};

LinearForm linearize(const AffineExpr &e);

AffineExpr simplify_impl(const AffineExpr &e) { return linearize(e).to_expr(); }

LinearForm linearize(const AffineExpr &e) {
  LinearForm lf;
  switch (e->kind) {
  case AffineKind::Const:
    lf.constant = e->value;
    return lf;
  case AffineKind::Dim:
  case AffineKind::Sym:
    lf.add_term(e, 1);
    return lf;
  case AffineKind::Add: {
    lf = linearize(e->lhs);
    LinearForm r = linearize(e->rhs);
    lf.constant += r.constant;
    for (const auto &[atom, coeff] : r.terms)
      lf.add_term(atom, coeff);
    lf.prune();
    return lf;
  }
  case AffineKind::MulConst: {
    lf = linearize(e->lhs);
    lf.constant *= e->value;
    for (auto &t : lf.terms)
      t.second *= e->value;
    lf.prune();
    return lf;
  }
  case AffineKind::Mod:
  case AffineKind::FloorDiv: {
    LinearForm inner = linearize(e->lhs);
    inner.prune();
    std::int64_t c = e->value;
    bool all_divisible = std::all_of(inner.terms.begin(), inner.terms.end(),
                                     [&](const auto &t) { return t.second % c == 0; });
    if (all_divisible) {
      if (e->kind == AffineKind::Mod) {
        lf.constant = math_mod(inner.constant, c);
        return lf;
      }
      // floor((c*X + b)/c) = X + floor(b/c), exact for integer X.
      for (const auto &[atom, coeff] : inner.terms)
        lf.add_term(atom, coeff / c);
      lf.constant = floor_div(inner.constant, c);
      return lf;
    }
    AffineExpr atom = e->kind == AffineKind::Mod
                          ? AffineExprNode::mod(inner.to_expr(), c)
                          : AffineExprNode::floordiv(inner.to_expr(), c);
    if (atom->kind == AffineKind::Const) {
      lf.constant = atom->value;
      return lf;
    }
    lf.add_term(atom, 1);
    return lf;
  }
  }
  throw Error("InvalidAffineExpr", "unreachable kind");
}

} // namespace

AffineExpr simplify(const AffineExpr &e) { return simplify_impl(e); }

std::vector<AffineMap> split_access_map(const AffineMap &m, std::int64_t domain_extent,
                                        int parts) {
  if (m.num_dims != 1 || m.results.size() != 1)
    throw Error("NotSplittable", "only 1-d maps with one result are splittable");
  if (parts < 2)
    throw Error("NotSplittable", "parts must be >= 2");
  if (domain_extent % parts != 0)
    throw Error("NotSplittable", "domain extent not divisible by parts");

  // Image set per domain residue class; classes must be pairwise disjoint.
  std::vector<std::vector<std::int64_t>> images(static_cast<std::size_t>(parts));
  for (std::int64_t i = 0; i < domain_extent; ++i) {
    std::int64_t v = eval_map(m, {i})[0];
    images[static_cast<std::size_t>(math_mod(i, parts))].push_back(v);
  }
  for (auto &img : images) {
    std::sort(img.begin(), img.end());
    img.erase(std::unique(img.begin(), img.end()), img.end());
  }
  for (int a = 0; a < parts; ++a)
    for (int b = a + 1; b < parts; ++b) {
      std::vector<std::int64_t> inter;
      std::set_intersection(images[static_cast<std::size_t>(a)].begin(),
                            images[static_cast<std::size_t>(a)].end(),
                            images[static_cast<std::size_t>(b)].begin(),
                            images[static_cast<std::size_t>(b)].end(),
                            std::back_inserter(inter));
      if (!inter.empty())
        throw Error("NotSplittable", "image classes overlap");
    }

  // map_k(j) = m(parts*j + k), simplified; exact by substitution.
  std::vector<AffineMap> out;
  for (int k = 0; k < parts; ++k) {
    AffineExpr reindex = AffineExprNode::add(
        AffineExprNode::mul(AffineExprNode::dim(0), parts), k);
    AffineMap cm;
    cm.num_dims = 1;
    cm.num_syms = m.num_syms;
    cm.results.push_back(simplify(substitute(m.results[0], {reindex})));
    out.push_back(std::move(cm));
  }
  return out;
}

Interval eval_expr_interval(const AffineExpr &e, const std::vector<Interval> &dims,
                            const std::vector<Interval> &syms) {
  switch (e->kind) {
  case AffineKind::Dim:
    if (e->value >= static_cast<std::int64_t>(dims.size()))
      throw Error("ArityMismatch", "dim interval out of range");
    return dims[static_cast<std::size_t>(e->value)];
  case AffineKind::Sym:
    if (e->value >= static_cast<std::int64_t>(syms.size()))
      throw Error("ArityMismatch", "sym interval out of range");
    return syms[static_cast<std::size_t>(e->value)];
  case AffineKind::Const:
    return {e->value, e->value};
  case AffineKind::Add: {
    Interval a = eval_expr_interval(e->lhs, dims, syms);
    Interval b = eval_expr_interval(e->rhs, dims, syms);
    return {a.lo + b.lo, a.hi + b.hi};
  }
  case AffineKind::MulConst: {
    Interval a = eval_expr_interval(e->lhs, dims, syms);
    if (e->value >= 0)
      return {a.lo * e->value, a.hi * e->value};
    return {a.hi * e->value, a.lo * e->value};
  }
  case AffineKind::Mod: {
    Interval a = eval_expr_interval(e->lhs, dims, syms);
    if (floor_div(a.lo, e->value) == floor_div(a.hi, e->value))
      return {math_mod(a.lo, e->value), math_mod(a.hi, e->value)};
    return {0, e->value - 1};
  }
  case AffineKind::FloorDiv: {
    Interval a = eval_expr_interval(e->lhs, dims, syms);
    return {floor_div(a.lo, e->value), floor_div(a.hi, e->value)};
  }
  }
  throw Error("InvalidAffineExpr", "unreachable kind");
}

// ---------------------------------------------------------------------------
// Textual parsing.

namespace {

struct AffineParser {
  std::string_view text;
  std::size_t pos = 0;
  int num_dims = 0;
  int num_syms = 0;

  void skip_ws() {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos])))
      ++pos;
  }

  bool eat(char c) {
    skip_ws();
    if (pos < text.size() && text[pos] == c) {
      ++pos;
      return true;
    }
    return false;
  }

  void expect(char c) {
    if (!eat(c))
      throw Error("AffineSyntax", std::string("expected '") + c + "' in affine text at offset " +
                                      std::to_string(pos) + ": " + std::string(text));
  }

  bool eat_word(std::string_view w) {
    skip_ws();
    if (text.substr(pos, w.size()) == w) {
      // Word boundary check for identifiers.
      std::size_t end = pos + w.size();
      if (end >= text.size() ||
          !(std::isalnum(static_cast<unsigned char>(text[end])) || text[end] == '_')) {
        pos = end;
        return true;
      }
    }
    return false;
  }

  std::int64_t parse_int() {
    skip_ws();
    std::size_t start = pos;
    if (pos < text.size() && (text[pos] == '-' || text[pos] == '+'))
      ++pos;
    while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos])))
      ++pos;
    if (start == pos)
      throw Error("AffineSyntax", "expected integer in affine text");
    return std::stoll(std::string(text.substr(start, pos - start)));
  }

  AffineExpr parse_atom() {
    skip_ws();
    if (eat('(')) {
      AffineExpr e = parse_add();
      expect(')');
      return e;
    }
    if (pos < text.size() && (text[pos] == 'd' || text[pos] == 's') &&
        pos + 1 < text.size() && std::isdigit(static_cast<unsigned char>(text[pos + 1]))) {
      char c = text[pos];
      ++pos;
      std::int64_t idx = parse_int();
      if (c == 'd') {
        if (idx >= num_dims)
          throw Error("AffineSyntax", "dim index exceeds declared dims");
        return AffineExprNode::dim(static_cast<int>(idx));
      }
      if (idx >= num_syms)
        throw Error("AffineSyntax", "symbol index exceeds declared symbols");
      return AffineExprNode::sym(static_cast<int>(idx));
    }
    if (pos < text.size() && text[pos] == '-' && pos + 1 < text.size() &&
        !std::isdigit(static_cast<unsigned char>(text[pos + 1]))) {
      ++pos; // unary minus over a non-literal atom
      return AffineExprNode::mul(parse_atom(), -1);
    }
    return AffineExprNode::constant(parse_int());
  }

  AffineExpr parse_mul() {
    AffineExpr e = parse_atom();
    while (true) {
      skip_ws();
      if (eat('*')) {
        AffineExpr r = parse_atom();
        if (r->kind == AffineKind::Const)
          e = AffineExprNode::mul(e, r->value);
        else if (e->kind == AffineKind::Const)
          e = AffineExprNode::mul(r, e->value);
        else
          throw Error("AffineSyntax", "multiplication needs a constant factor");
      } else if (eat_word("mod")) {
        e = AffineExprNode::mod(e, parse_int());
      } else if (eat_word("floordiv")) {
        e = AffineExprNode::floordiv(e, parse_int());
      } else {
        return e;
      }
    }
  }

  AffineExpr parse_add() {
    AffineExpr e = parse_mul();
    while (true) {
      skip_ws();
      if (eat('+')) {
        e = AffineExprNode::add(e, parse_mul());
      } else if (pos < text.size() && text[pos] == '-') {
        ++pos;
        AffineExpr r = parse_mul();
        e = AffineExprNode::add(e, AffineExprNode::mul(r, -1));
      } else {
        return e;
      }
    }
  }

  void parse_dims_syms() {
    expect('(');
    skip_ws();
    if (!eat(')')) {
      do {
        skip_ws();
        if (pos >= text.size() || text[pos] != 'd')
          throw Error("AffineSyntax", "expected dim identifier");
        ++pos;
        parse_int();
        ++num_dims;
      } while (eat(','));
      expect(')');
    }
    skip_ws();
    if (eat('[')) {
      if (!eat(']')) {
        do {
          skip_ws();
          if (pos >= text.size() || text[pos] != 's')
            throw Error("AffineSyntax", "expected symbol identifier");
          ++pos;
          parse_int();
          ++num_syms;
        } while (eat(','));
        expect(']');
      }
    }
  }
};

std::string_view strip_wrapper(std::string_view text, std::string_view keyword) {
  // Accepts either the bare body or keyword<...>.
  std::size_t i = 0;
  while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i])))
    ++i;
  if (text.substr(i, keyword.size()) == keyword) {
    i += keyword.size();
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i])))
      ++i;
    if (i < text.size() && text[i] == '<') {
      std::size_t close = text.rfind('>');
      if (close == std::string_view::npos || close <= i)
        throw Error("AffineSyntax", "unbalanced angle brackets");
      return text.substr(i + 1, close - i - 1);
    }
  }
  return text;
}

} // namespace

AffineMap parse_affine_map(std::string_view text) {
  AffineParser p;
  p.text = strip_wrapper(text, "affine_map");
  p.parse_dims_syms();
  p.skip_ws();
  if (!p.eat('-') || !p.eat('>'))
    throw Error("AffineSyntax", "expected '->' in affine map");
  p.expect('(');
  AffineMap m;
  m.num_dims = p.num_dims;
  m.num_syms = p.num_syms;
  p.skip_ws();
  if (!p.eat(')')) {
    do {
      m.results.push_back(p.parse_add());
    } while (p.eat(','));
    p.expect(')');
  }
  return m;
}

IntegerSet parse_affine_set(std::string_view text) {
  AffineParser p;
  p.text = strip_wrapper(text, "affine_set");
  p.parse_dims_syms();
  if (!p.eat(':'))
    throw Error("AffineSyntax", "expected ':' in affine set");
  p.expect('(');
  IntegerSet s;
  s.num_dims = p.num_dims;
  s.num_syms = p.num_syms;
  p.skip_ws();
  if (!p.eat(')')) {
    do {
      AffineExpr e = p.parse_add();
      p.skip_ws();
      AffineRelation rel;
      if (p.eat('=')) {
        p.expect('=');
        rel = AffineRelation::Eq;
      } else if (p.eat('>')) {
        p.expect('=');
        rel = AffineRelation::Ge;
      } else if (p.eat('<')) {
        // a <= b normalizes to b - a >= 0; only "expr <= const" appears.
        p.expect('=');
        std::int64_t rhs = p.parse_int();
        s.constraints.push_back(
            {AffineExprNode::add(AffineExprNode::mul(e, -1), rhs), AffineRelation::Ge});
        continue;
      } else {
        throw Error("AffineSyntax", "expected relation in affine set");
      }
      std::int64_t rhs = p.parse_int();
      if (rhs != 0)
        e = AffineExprNode::add(e, -rhs);
      s.constraints.push_back({e, rel});
    } while (p.eat(','));
    p.expect(')');
  }
  return s;
}

} // namespace air
