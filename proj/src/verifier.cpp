#include "air/analysis.hpp"
#include "air/ir.hpp"

#include <set>
#include <sstream>

namespace air {

namespace {

enum class Nest { None, Launch, Segment, Herd };

class Verifier {
public:
  Verifier(const Program &p) : program_(p) {}

  std::vector<Diagnostic> run() {
    ranges_ = compute_index_ranges(*program_.module);
    std::set<std::string> channels;
    for (const auto &op : program_.body().ops) {
      if (op->kind == OpKind::ChannelDecl) {
        if (!channels.insert(op->symbol).second)
          report(*op, "DuplicateChannel", "channel @" + op->symbol + " declared twice");
        for (auto e : op->extents)
          if (e < 1)
            report(*op, "InvalidExtent", "channel bundle extents must be positive");
      } else if (op->kind == OpKind::Func) {
        scopes_.clear();
        scopes_.emplace_back();
        for (const auto &a : op->regions[0].args)
          define(*op, a);
        verify_region(op->regions[0], *op, Nest::None, false);
        scopes_.pop_back();
      } else {
        report(*op, "InvalidNesting", "only channel declarations and funcs at module scope");
      }
    }
    return std::move(diags_);
  }

private:
  void report(const Operation &op, const std::string &code, const std::string &msg) {
    Diagnostic d;
    d.file = program_.source_name;
    d.line = op.loc.line;
    d.col = op.loc.col;
    d.severity = Severity::Error;
    d.code = code;
    d.message = msg + " [" + code + "]";
    diags_.push_back(std::move(d));
  }

  void define(const Operation &op, const Value &v) {
    if (!defined_ids_.insert(v.id).second)
      report(op, "DominanceViolation", "value defined more than once");
    scopes_.back().insert(v.id);
  }

  bool in_scope(int id) const {
    for (const auto &s : scopes_)
      if (s.count(id))
        return true;
    return false;
  }

  void check_use(const Operation &op, const Value &v, const char *what) {
    if (!v.valid()) {
      report(op, "InvalidOperand", std::string(what) + " missing");
      return;
    }
    if (!in_scope(v.id))
      report(op, "DominanceViolation",
             std::string(what) + " uses a value not dominated by its definition");
  }

  void check_token_list(const Operation &op, const std::vector<Value> &vs,
                        const char *what) {
    for (const auto &v : vs) {
      check_use(op, v, what);
      if (v.type.kind != TypeKind::Token)
        report(op, "TypeMismatch", std::string(what) + " entries must be token-typed");
    }
  }

  void check_index_expr(const Operation &op, const IndexExpr &e, const char *what) {
    if (!e.is_literal()) {
      check_use(op, e.value, what);
      if (e.value.type.kind != TypeKind::Index)
        report(op, "TypeMismatch", std::string(what) + " must be index-typed");
    }
  }

  void check_view(const Operation &op, const BufferView &v) {
    check_use(op, v.buffer, "view base");
    if (v.buffer.type.kind != TypeKind::MemRef) {
      report(op, "TypeMismatch", "view base must be a memref");
      return;
    }
    if (v.whole())
      return;
    if (v.offsets.size() != v.sizes.size() || v.sizes.size() != v.strides.size()) {
      report(op, "InvalidAccessPattern", "offsets/sizes/strides lengths differ");
      return;
    }
    for (const auto &e : v.offsets)
      check_index_expr(op, e, "offset");
    for (const auto &e : v.sizes) {
      check_index_expr(op, e, "size");
      if (e.is_literal() && e.literal < 1)
        report(op, "InvalidAccessPattern", "sizes must be >= 1");
    }
    for (const auto &e : v.strides) {
      check_index_expr(op, e, "stride");
      if (e.is_literal() && e.literal < 1)
        report(op, "InvalidAccessPattern", "strides must be >= 1");
    }
    // Bounds: max addressed flat element must stay inside the memref.
    Footprint fp = view_footprint(v, ranges_);
    std::int64_t limit = v.buffer.type.memref.num_elements();
    if (!fp.whole && (fp.flat.hi >= limit || fp.flat.lo < 0))
      report(op, "OutOfBounds",
             "access pattern reaches element " + std::to_string(fp.flat.hi) +
                 " of a " + std::to_string(limit) + "-element buffer");
  }

  void verify_region(const Region &r, const Operation &parent, Nest nest,
                     bool in_loop_under_spatial) {
    (void)in_loop_under_spatial;
    for (const auto &op : r.ops)
      verify_op(*op, nest, parent);
  }

  void verify_op(const Operation &op, Nest nest, const Operation &parent) {
    // Non-region operand checks first.
    check_token_list(op, op.deps, "deps");
    check_token_list(op, op.concurs, "concur");
    check_token_list(op, op.affinities, "affinity");

    if (op.is_async) {
      if (!op.token().valid())
        report(op, "TypeMismatch", "async op must produce a trailing token result");
    } else if (!op.deps.empty() && op.kind != OpKind::WaitAll) {
      // sync ops with deps are allowed (deps gate start) — no error.
    }

    switch (op.kind) {
    case OpKind::Launch:
    case OpKind::Segment:
    case OpKind::Herd: {
      Nest mine = op.kind == OpKind::Launch    ? Nest::Launch
                  : op.kind == OpKind::Segment ? Nest::Segment
                                               : Nest::Herd;
      if (static_cast<int>(mine) <= static_cast<int>(nest))
        report(op, "InvalidNesting",
               op_name(op.kind) + " may not nest inside " +
                   (nest == Nest::Herd      ? "a herd"
                    : nest == Nest::Segment ? "a segment"
                                            : "a launch"));
      for (auto e : op.extents)
        if (e < 1)
          report(op, "InvalidExtent", "extents must be positive");
      if (op.kind == OpKind::Herd && op.extents.size() != 2)
        report(op, "InvalidExtent", "herds are 2-D");
      if (op.kind == OpKind::Launch && op.extents.size() > 2)
        report(op, "InvalidExtent", "launch iteration space is at most 2-D");
      enter_region(op, 0, mine);
      return;
    }
    case OpKind::ScfFor: {
      if (op.step < 1)
        report(op, "InvalidExtent", "scf.for step must be >= 1");
      if (op.ub < op.lb)
        report(op, "InvalidExtent", "scf.for upper bound below lower bound");
      for (const auto &v : op.iter_init) {
        check_use(op, v, "iter_args init");
        if (v.type.kind != TypeKind::Token)
          report(op, "TypeMismatch", "iter_args carry tokens");
      }
      const auto &ops = op.regions[0].ops;
      if (!op.iter_init.empty()) {
        if (ops.empty() || ops.back()->kind != OpKind::ScfYield ||
            ops.back()->operands.size() != op.iter_init.size())
          report(op, "TypeMismatch", "loop with iter_args must end in a matching scf.yield");
      }
      enter_region(op, 0, nest);
      return;
    }
    case OpKind::ScfParallel: {
      for (auto e : op.extents)
        if (e < 1)
          report(op, "InvalidExtent", "extents must be positive");
      if (!op.iter_init.empty()) {
        check_use(op, op.iter_init[0], "init");
        const auto &ops = op.regions[0].ops;
        if (ops.empty() || ops.back()->kind != OpKind::ScfYield ||
            ops.back()->operands.size() != 1)
          report(op, "TypeMismatch", "parallel with init must end in scf.reduce of one token");
      }
      enter_region(op, 0, nest);
      return;
    }
    case OpKind::ScfYield:
      for (const auto &v : op.operands) {
        check_use(op, v, "yield operand");
        if (v.type.kind != TypeKind::Token)
          report(op, "TypeMismatch", "yield carries tokens");
      }
      break;
    case OpKind::ChannelPut:
    case OpKind::ChannelGet: {
      const Operation *decl = program_.find_channel(op.symbol);
      if (!decl) {
        report(op, "UnknownSymbol", "channel @" + op.symbol + " is not declared");
      } else {
        if (!op.bundle_index.empty() &&
            op.bundle_index.size() != decl->extents.size())
          report(op, "InvalidExtent", "bundle index arity differs from channel shape");
        bool scalar = true;
        for (auto e : decl->extents)
          scalar &= e == 1;
        if (op.bundle_index.empty() && !scalar)
          report(op, "InvalidExtent", "non-unit channel requires a bundle index");
        for (const auto &e : op.bundle_index)
          check_index_expr(op, e, "bundle index");
      }
      check_view(op, op.views[0]);
      break;
    }
    case OpKind::Memcpy:
      check_view(op, op.views[0]);
      check_view(op, op.views[1]);
      break;
    case OpKind::Alloc: {
      if (op.alloc_type.shape.empty())
        report(op, "TypeMismatch", "alloc needs a shaped memref");
      for (auto d : op.alloc_type.shape)
        if (d < 1)
          report(op, "InvalidExtent", "memref dims must be >= 1");
      // Placement rules apply once spatial constructs are present.
      if (op.alloc_type.space == MemorySpace::L1 && nest != Nest::None &&
          nest != Nest::Herd)
        report(op, "InvalidPlacement", "L1 allocations live inside herd bodies");
      if (op.alloc_type.space == MemorySpace::L2 && nest != Nest::None &&
          nest != Nest::Segment)
        report(op, "InvalidPlacement", "L2 allocations live inside segments");
      break;
    }
    case OpKind::Dealloc:
      check_use(op, op.buffer, "dealloc operand");
      break;
    case OpKind::WaitAll:
      break;
    case OpKind::KernelCall:
      for (const auto &v : op.reads)
        check_view(op, v);
      for (const auto &v : op.writes)
        check_view(op, v);
      break;
    case OpKind::AffineApply:
      for (const auto &v : op.apply_dims)
        check_use(op, v, "apply operand");
      for (const auto &v : op.apply_syms)
        check_use(op, v, "apply operand");
      break;
    case OpKind::ArithConst:
      break;
    case OpKind::ArithAdd:
    case OpKind::ArithMul:
      for (const auto &v : op.operands)
        check_use(op, v, "arith operand");
      break;
    case OpKind::Load:
      check_use(op, op.buffer, "load base");
      check_load_store_bounds(op);
      break;
    case OpKind::Store:
      check_use(op, op.operands[0], "stored value");
      check_use(op, op.buffer, "store base");
      check_load_store_bounds(op);
      if (op.operands[0].type.kind == TypeKind::Scalar &&
          op.buffer.type.kind == TypeKind::MemRef &&
          op.operands[0].type.scalar != op.buffer.type.memref.elem)
        report(op, "TypeMismatch", "stored scalar type differs from buffer element");
      break;
    case OpKind::Module:
    case OpKind::Func:
    case OpKind::ChannelDecl:
      report(op, "InvalidNesting", op_name(op.kind) + " not allowed here");
      break;
    }

    for (const auto &res : op.results)
      define(op, res);
    (void)parent;
  }

  void check_load_store_bounds(const Operation &op) {
    if (op.buffer.type.kind != TypeKind::MemRef)
      return;
    const auto &shape = op.buffer.type.memref.shape;
    if (op.indices.size() != shape.size()) {
      report(op, "InvalidAccessPattern", "index count differs from memref rank");
      return;
    }
    for (std::size_t d = 0; d < op.indices.size(); ++d) {
      check_index_expr(op, op.indices[d], "index");
      Interval iv = op.indices[d].is_literal()
                        ? Interval{op.indices[d].literal, op.indices[d].literal}
                        : [&] {
                            auto it = ranges_.find(op.indices[d].value.id);
                            return it != ranges_.end()
                                       ? it->second
                                       : Interval{0, shape[d] - 1};
                          }();
      if (iv.lo < 0 || iv.hi >= shape[d])
        report(op, "OutOfBounds", "load/store index may leave the buffer");
    }
  }

  void enter_region(const Operation &op, std::size_t idx, Nest nest) {
    scopes_.emplace_back();
    for (const auto &a : op.regions[idx].args)
      define(op, a);
    verify_region(op.regions[idx], op, nest, false);
    scopes_.pop_back();
    // Results become visible in the enclosing scope after the region.
    for (const auto &res : op.results)
      define(op, res);
  }

  const Program &program_;
  std::vector<Diagnostic> diags_;
  std::vector<std::set<int>> scopes_;
  std::set<int> defined_ids_;
  std::map<int, Interval> ranges_;
};

} // namespace

std::vector<Diagnostic> verify_program(const Program &p) { return Verifier(p).run(); }

} // namespace air
