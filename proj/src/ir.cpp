#include "air/ir.hpp"

#include "air/error.hpp"

#include <sstream>

namespace air {

int width_bytes(ElemKind k) {
  switch (k) {
  case ElemKind::I8:
    return 1;
  case ElemKind::I16:
    return 2;
  case ElemKind::I32:
    return 4;
  case ElemKind::F32:
    return 4;
  case ElemKind::BF16:
    return 2; // stored/computed as f32, accounted as 2 bytes
  }
  return 0;
}

bool is_float(ElemKind k) { return k == ElemKind::F32 || k == ElemKind::BF16; }

std::string to_string(ElemKind k) {
  switch (k) {
  case ElemKind::I8:
    return "i8";
  case ElemKind::I16:
    return "i16";
  case ElemKind::I32:
    return "i32";
  case ElemKind::F32:
    return "f32";
  case ElemKind::BF16:
    return "bf16";
  }
  return "?";
}

std::optional<ElemKind> parse_elem_kind(std::string_view s) {
  if (s == "i8")
    return ElemKind::I8;
  if (s == "i16")
    return ElemKind::I16;
  if (s == "i32")
    return ElemKind::I32;
  if (s == "f32")
    return ElemKind::F32;
  if (s == "bf16")
    return ElemKind::BF16;
  return std::nullopt;
}

std::string to_string(MemorySpace s) {
  switch (s) {
  case MemorySpace::L3:
    return "L3";
  case MemorySpace::L2:
    return "L2";
  case MemorySpace::L1:
    return "L1";
  }
  return "?";
}

std::string to_string(const Type &t) {
  switch (t.kind) {
  case TypeKind::Token:
    return "token";
  case TypeKind::Index:
    return "index";
  case TypeKind::Scalar:
    return to_string(t.scalar);
  case TypeKind::MemRef: {
    std::ostringstream os;
    os << "memref<";
    for (auto d : t.memref.shape)
      os << d << "x";
    os << to_string(t.memref.elem) << ", " << to_string(t.memref.space) << ">";
    return os.str();
  }
  }
  return "?";
}

std::string op_name(OpKind k) {
  switch (k) {
  case OpKind::Module:
    return "module";
  case OpKind::Func:
    return "func";
  case OpKind::Launch:
    return "air.launch";
  case OpKind::Segment:
    return "air.segment";
  case OpKind::Herd:
    return "air.herd";
  case OpKind::ScfFor:
    return "scf.for";
  case OpKind::ScfParallel:
    return "scf.parallel";
  case OpKind::ScfYield:
    return "scf.yield";
  case OpKind::ChannelDecl:
    return "air.channel";
  case OpKind::ChannelPut:
    return "air.channel.put";
  case OpKind::ChannelGet:
    return "air.channel.get";
  case OpKind::Memcpy:
    return "air.memcpy";
  case OpKind::Alloc:
    return "air.alloc";
  case OpKind::Dealloc:
    return "air.dealloc";
  case OpKind::WaitAll:
    return "air.wait_all";
  case OpKind::KernelCall:
    return "air.kernel";
  case OpKind::AffineApply:
    return "affine.apply";
  case OpKind::ArithConst:
    return "arith.const";
  case OpKind::ArithAdd:
    return "arith.add";
  case OpKind::ArithMul:
    return "arith.mul";
  case OpKind::Load:
    return "memref.load";
  case OpKind::Store:
    return "memref.store";
  }
  return "?";
}

std::unique_ptr<Operation> make_op(OpKind kind) {
  auto op = std::make_unique<Operation>();
  op->kind = kind;
  return op;
}

std::unique_ptr<Operation> Operation::clone() const {
  auto op = std::make_unique<Operation>();
  *op = Operation{}; // reset
  op->kind = kind;
  op->loc = loc;
  op->is_async = is_async;
  op->deps = deps;
  op->concurs = concurs;
  op->affinities = affinities;
  op->results = results;
  op->symbol = symbol;
  op->arg_names = arg_names;
  op->extents = extents;
  op->bundle_index = bundle_index;
  op->views = views;
  op->reads = reads;
  op->writes = writes;
  op->lb = lb;
  op->ub = ub;
  op->step = step;
  op->iter_init = iter_init;
  op->operands = operands;
  op->alloc_type = alloc_type;
  op->map = map;
  op->apply_dims = apply_dims;
  op->apply_syms = apply_syms;
  op->buffer = buffer;
  op->indices = indices;
  op->const_value = const_value;
  op->const_type = const_type;
  op->attrs = attrs;
  for (const auto &r : regions) {
    Region nr;
    nr.args = r.args;
    for (const auto &o : r.ops)
      nr.ops.push_back(o->clone());
    op->regions.push_back(std::move(nr));
  }
  return op;
}

Program::Program() {
  module = make_op(OpKind::Module);
  module->regions.emplace_back();
}

Program Program::clone() const {
  Program p;
  p.module = module->clone();
  p.next_value_id = next_value_id;
  p.source_name = source_name;
  return p;
}

Operation *Program::find_channel(const std::string &sym) const {
  for (const auto &op : body().ops)
    if (op->kind == OpKind::ChannelDecl && op->symbol == sym)
      return op.get();
  return nullptr;
}

std::vector<Operation *> Program::funcs() const {
  std::vector<Operation *> out;
  for (const auto &op : body().ops)
    if (op->kind == OpKind::Func)
      out.push_back(op.get());
  return out;
}

void walk(Operation &op, const std::function<void(Operation &)> &fn) {
  fn(op);
  for (auto &r : op.regions)
    for (auto &o : r.ops)
      if (o)
        walk(*o, fn);
}

void walk(const Operation &op, const std::function<void(const Operation &)> &fn) {
  fn(op);
  for (const auto &r : op.regions)
    for (const auto &o : r.ops)
      if (o)
        walk(static_cast<const Operation &>(*o), fn);
}

void walk_post(Operation &op, const std::function<void(Operation &)> &fn) {
  for (auto &r : op.regions)
    for (auto &o : r.ops)
      if (o)
        walk_post(*o, fn);
  fn(op);
}

namespace {

bool attr_equal(const Attr &a, const Attr &b) {
  if (a.index() != b.index())
    return false;
  if (auto *m = std::get_if<AffineMap>(&a))
    return map_equal(*m, std::get<AffineMap>(b));
  if (auto *s = std::get_if<IntegerSet>(&a))
    return set_equal(*s, std::get<IntegerSet>(b));
  if (auto *i = std::get_if<std::int64_t>(&a))
    return *i == std::get<std::int64_t>(b);
  if (auto *d = std::get_if<double>(&a))
    return *d == std::get<double>(b);
  return std::get<std::string>(a) == std::get<std::string>(b);
}

struct Matcher {
  std::map<int, int> map_ab; // value id in a -> value id in b

  bool match_value(const Value &a, const Value &b, bool defining) {
    if (a.valid() != b.valid())
      return false;
    if (!a.valid())
      return true;
    if (!(a.type == b.type))
      return false;
    auto it = map_ab.find(a.id);
    if (it != map_ab.end())
      return it->second == b.id;
    if (!defining)
      return false; // use before positional definition
    map_ab[a.id] = b.id;
    return true;
  }

  bool match_values(const std::vector<Value> &a, const std::vector<Value> &b,
                    bool defining) {
    if (a.size() != b.size())
      return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!match_value(a[i], b[i], defining))
        return false;
    return true;
  }

  bool match_index(const IndexExpr &a, const IndexExpr &b) {
    if (a.is_literal() != b.is_literal())
      return false;
    return a.is_literal() ? a.literal == b.literal
                          : match_value(a.value, b.value, false);
  }

  bool match_indices(const std::vector<IndexExpr> &a, const std::vector<IndexExpr> &b) {
    if (a.size() != b.size())
      return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!match_index(a[i], b[i]))
        return false;
    return true;
  }

  bool match_view(const BufferView &a, const BufferView &b) {
    return match_value(a.buffer, b.buffer, false) &&
           match_indices(a.offsets, b.offsets) && match_indices(a.sizes, b.sizes) &&
           match_indices(a.strides, b.strides);
  }

  bool match_views(const std::vector<BufferView> &a, const std::vector<BufferView> &b) {
    if (a.size() != b.size())
      return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!match_view(a[i], b[i]))
        return false;
    return true;
  }

  bool match_op(const Operation &a, const Operation &b) {
    if (a.kind != b.kind || a.is_async != b.is_async || a.symbol != b.symbol ||
        a.extents != b.extents || a.lb != b.lb || a.ub != b.ub || a.step != b.step ||
        a.const_value != b.const_value || !(a.const_type == b.const_type) ||
        !(a.alloc_type == b.alloc_type))
      return false;
    if (!match_values(a.deps, b.deps, false) ||
        !match_values(a.concurs, b.concurs, false) ||
        !match_values(a.affinities, b.affinities, false) ||
        !match_values(a.iter_init, b.iter_init, false) ||
        !match_values(a.operands, b.operands, false) ||
        !match_values(a.apply_dims, b.apply_dims, false) ||
        !match_values(a.apply_syms, b.apply_syms, false) ||
        !match_value(a.buffer, b.buffer, false) || !match_indices(a.indices, b.indices) ||
        !match_indices(a.bundle_index, b.bundle_index) || !match_views(a.views, b.views) ||
        !match_views(a.reads, b.reads) || !match_views(a.writes, b.writes))
      return false;
    if (!map_equal(a.map, b.map))
      return false;
    if (a.attrs.size() != b.attrs.size())
      return false;
    for (auto ita = a.attrs.begin(), itb = b.attrs.begin(); ita != a.attrs.end();
         ++ita, ++itb)
      if (ita->first != itb->first || !attr_equal(ita->second, itb->second))
        return false;
    if (!match_values(a.results, b.results, true))
      return false;
    if (a.regions.size() != b.regions.size())
      return false;
    for (std::size_t i = 0; i < a.regions.size(); ++i) {
      if (!match_values(a.regions[i].args, b.regions[i].args, true))
        return false;
      if (a.regions[i].ops.size() != b.regions[i].ops.size())
        return false;
      for (std::size_t j = 0; j < a.regions[i].ops.size(); ++j)
        if (!match_op(*a.regions[i].ops[j], *b.regions[i].ops[j]))
          return false;
    }
    return true;
  }
};

} // namespace

bool structural_equal(const Program &a, const Program &b) {
  Matcher m;
  return m.match_op(*a.module, *b.module);
}

std::string Diagnostic::str() const {
  std::ostringstream os;
  os << file << ":" << line << ":" << col << ": "
     << (severity == Severity::Error ? "error" : "warning") << ": " << message;
  return os.str();
}

} // namespace air
