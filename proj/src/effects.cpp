#include "air/analysis.hpp"

#include <algorithm>
#include <limits>

namespace air {

namespace {

constexpr std::int64_t kUnknownLo = std::numeric_limits<std::int32_t>::min();
constexpr std::int64_t kUnknownHi = std::numeric_limits<std::int32_t>::max();

// Elementwise load/store views use the buffer's canonical row-major strides.
void set_canonical_strides(BufferView &v) {
  const auto &shape = v.buffer.type.memref.shape;
  std::int64_t stride = 1;
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (std::size_t d = shape.size(); d-- > 0;) {
    strides[d] = stride;
    stride *= shape[d];
  }
  for (std::size_t d = 0; d < v.strides.size() && d < strides.size(); ++d)
    v.strides[d] = IndexExpr(strides[d]);
}

Interval range_of(const std::map<int, Interval> &env, const Value &v) {
  auto it = env.find(v.id);
  if (it != env.end())
    return it->second;
  return {kUnknownLo, kUnknownHi};
}

Interval range_of(const std::map<int, Interval> &env, const IndexExpr &e) {
  if (e.is_literal())
    return {e.literal, e.literal};
  return range_of(env, e.value);
}

void visit_ranges(const Operation &op, std::map<int, Interval> &env) {
  switch (op.kind) {
  case OpKind::Launch:
  case OpKind::ScfParallel: {
    const auto &args = op.regions.empty() ? std::vector<Value>{} : op.regions[0].args;
    for (std::size_t i = 0; i < args.size() && i < op.extents.size(); ++i)
      env[args[i].id] = {0, op.extents[i] - 1};
    break;
  }
  case OpKind::Herd: {
    const auto &args = op.regions[0].args;
    for (std::size_t i = 0; i < args.size() && i < 2; ++i)
      env[args[i].id] = {0, op.extents[i] - 1};
    break;
  }
  case OpKind::ScfFor: {
    std::int64_t trips = op.step > 0 ? (op.ub - op.lb + op.step - 1) / op.step : 0;
    std::int64_t last = trips > 0 ? op.lb + op.step * (trips - 1) : op.lb;
    env[op.regions[0].args[0].id] = {op.lb, std::max(op.lb, last)};
    break;
  }
  case OpKind::ArithConst:
    if (!op.results.empty())
      env[op.results[0].id] = {op.const_value, op.const_value};
    break;
  case OpKind::AffineApply: {
    std::vector<Interval> dims, syms;
    for (const auto &v : op.apply_dims)
      dims.push_back(range_of(env, v));
    for (const auto &v : op.apply_syms)
      syms.push_back(range_of(env, v));
    if (!op.results.empty() && !op.map.results.empty())
      env[op.results[0].id] = eval_expr_interval(op.map.results[0], dims, syms);
    break;
  }
  case OpKind::ArithAdd: {
    if (!op.results.empty() && op.results[0].type.kind == TypeKind::Index) {
      Interval a = range_of(env, op.operands[0]);
      Interval b = range_of(env, op.operands[1]);
      env[op.results[0].id] = {a.lo + b.lo, a.hi + b.hi};
    }
    break;
  }
  case OpKind::ArithMul: {
    if (!op.results.empty() && op.results[0].type.kind == TypeKind::Index) {
      Interval a = range_of(env, op.operands[0]);
      Interval b = range_of(env, op.operands[1]);
      std::int64_t c[4] = {a.lo * b.lo, a.lo * b.hi, a.hi * b.lo, a.hi * b.hi};
      env[op.results[0].id] = {*std::min_element(c, c + 4), *std::max_element(c, c + 4)};
    }
    break;
  }
  default:
    break;
  }
  for (const auto &r : op.regions)
    for (const auto &o : r.ops)
      if (o)
        visit_ranges(*o, env);
}

} // namespace

std::map<int, Interval> compute_index_ranges(const Operation &root) {
  std::map<int, Interval> env;
  visit_ranges(root, env);
  return env;
}

Footprint view_footprint(const BufferView &v, const std::map<int, Interval> &ranges) {
  Footprint fp;
  const MemRefType &mt = v.buffer.type.memref;
  if (v.whole()) {
    fp.whole = true;
    fp.exact = true;
    fp.flat = {0, std::max<std::int64_t>(0, mt.num_elements() - 1)};
    return fp;
  }
  fp.exact = true;
  std::int64_t lo = 0, hi = 0;
  for (std::size_t d = 0; d < v.offsets.size(); ++d) {
    Interval off = range_of(ranges, v.offsets[d]);
    if (!v.offsets[d].is_literal())
      fp.exact = false;
    std::int64_t size = 1, stride = 1;
    bool lit = v.sizes[d].is_literal() && v.strides[d].is_literal();
    if (lit) {
      size = v.sizes[d].literal;
      stride = v.strides[d].literal;
      fp.dim_index.push_back({off.lo, off.hi + size - 1});
      fp.dim_stride.push_back(stride);
      fp.dim_size.push_back(size);
    } else {
      fp.exact = false;
      fp.flat = {0, std::max<std::int64_t>(0, mt.num_elements() - 1)};
      fp.whole = true;
      return fp;
    }
    // addr contribution: (off_d + i_d) * stride_d, i_d in [0, size)
    lo += off.lo * stride;
    hi += (off.hi + size - 1) * stride;
  }
  fp.flat = {lo, hi};
  return fp;
}

std::optional<std::int64_t> view_element_count(const BufferView &v) {
  if (v.whole())
    return v.buffer.type.memref.num_elements();
  std::int64_t n = 1;
  for (const auto &s : v.sizes) {
    if (!s.is_literal())
      return std::nullopt;
    n *= s.literal;
  }
  return n;
}

bool footprints_may_overlap(const Footprint &a, const Footprint &b) {
  if (a.whole || b.whole)
    return true;
  // Per-dimension separation is decisive only for identically-strided
  // patterns of the same rank.
  if (!a.dim_index.empty() && a.dim_index.size() == b.dim_index.size() &&
      a.dim_stride == b.dim_stride) {
    for (std::size_t d = 0; d < a.dim_index.size(); ++d)
      if (a.dim_index[d].hi < b.dim_index[d].lo || b.dim_index[d].hi < a.dim_index[d].lo)
        return false;
  }
  return !(a.flat.hi < b.flat.lo || b.flat.hi < a.flat.lo);
}

EffectSet infer_effects(const Operation &op, bool recurse) {
  EffectSet es;
  auto add_view_read = [&](const BufferView &v) { es.reads.push_back(v); };
  auto add_view_write = [&](const BufferView &v) { es.writes.push_back(v); };

  switch (op.kind) {
  case OpKind::Memcpy:
    add_view_write(op.views[0]);
    add_view_read(op.views[1]);
    break;
  case OpKind::ChannelPut:
    add_view_read(op.views[0]);
    es.channels.push_back({op.symbol, true});
    break;
  case OpKind::ChannelGet:
    add_view_write(op.views[0]);
    es.channels.push_back({op.symbol, false});
    break;
  case OpKind::KernelCall:
    for (const auto &v : op.reads)
      add_view_read(v);
    for (const auto &v : op.writes)
      add_view_write(v);
    break;
  case OpKind::Alloc:
    // Definition counts as a write of the whole buffer.
    if (!op.results.empty())
      add_view_write(BufferView{op.results[0], {}, {}, {}});
    break;
  case OpKind::Dealloc:
    // Last use counts as a read.
    add_view_read(BufferView{op.buffer, {}, {}, {}});
    break;
  case OpKind::Load: {
    BufferView v;
    v.buffer = op.buffer;
    for (const auto &i : op.indices) {
      v.offsets.push_back(i);
      v.sizes.push_back(IndexExpr(std::int64_t{1}));
      v.strides.push_back(IndexExpr(std::int64_t{1}));
    }
    set_canonical_strides(v);
    add_view_read(v);
    break;
  }
  case OpKind::Store: {
    BufferView v;
    v.buffer = op.buffer;
    for (const auto &i : op.indices) {
      v.offsets.push_back(i);
      v.sizes.push_back(IndexExpr(std::int64_t{1}));
      v.strides.push_back(IndexExpr(std::int64_t{1}));
    }
    set_canonical_strides(v);
    add_view_write(v);
    break;
  }
  case OpKind::WaitAll:
    break; // pure synchronization
  default:
    break;
  }

  if (recurse)
    for (const auto &r : op.regions)
      for (const auto &o : r.ops) {
        if (!o)
          continue;
        EffectSet sub = infer_effects(*o, true);
        es.reads.insert(es.reads.end(), sub.reads.begin(), sub.reads.end());
        es.writes.insert(es.writes.end(), sub.writes.begin(), sub.writes.end());
        es.channels.insert(es.channels.end(), sub.channels.begin(),
                           sub.channels.end());
      }
  return es;
}

} // namespace air
