#include "air/rewrite.hpp"

#include <algorithm>
#include <functional>
#include <set>

namespace air {

namespace {

void remap_value(Value &v, const std::map<int, Value> &vals) {
  if (!v.valid())
    return;
  auto it = vals.find(v.id);
  if (it != vals.end())
    v = it->second;
}

void remap_index(IndexExpr &e, const std::map<int, Value> &vals) {
  if (!e.is_literal())
    remap_value(e.value, vals);
}

void remap_view(BufferView &v, const std::map<int, Value> &vals) {
  remap_value(v.buffer, vals);
  for (auto &e : v.offsets)
    remap_index(e, vals);
  for (auto &e : v.sizes)
    remap_index(e, vals);
  for (auto &e : v.strides)
    remap_index(e, vals);
}

void remap_op_uses(Operation &op, const std::map<int, Value> &vals) {
  for (auto &v : op.deps)
    remap_value(v, vals);
  for (auto &v : op.concurs)
    remap_value(v, vals);
  for (auto &v : op.affinities)
    remap_value(v, vals);
  for (auto &v : op.iter_init)
    remap_value(v, vals);
  for (auto &v : op.operands)
    remap_value(v, vals);
  for (auto &v : op.apply_dims)
    remap_value(v, vals);
  for (auto &v : op.apply_syms)
    remap_value(v, vals);
  remap_value(op.buffer, vals);
  for (auto &e : op.indices)
    remap_index(e, vals);
  for (auto &e : op.bundle_index)
    remap_index(e, vals);
  for (auto &v : op.views)
    remap_view(v, vals);
  for (auto &v : op.reads)
    remap_view(v, vals);
  for (auto &v : op.writes)
    remap_view(v, vals);
}

} // namespace

void remap_uses(Operation &op, const std::map<int, Value> &vals, bool recurse) {
  remap_op_uses(op, vals);
  if (recurse)
    for (auto &r : op.regions)
      for (auto &o : r.ops)
        remap_uses(*o, vals, true);
}

std::unique_ptr<Operation> clone_remap(const Operation &op, Program &p,
                                       std::map<int, Value> &vmap) {
  auto n = op.clone();
  // Fresh definitions first (results bind after regions in SSA order, but a
  // single pre-pass is fine because ids are unique).
  std::function<void(Operation &)> fresh = [&](Operation &o) {
    for (auto &res : o.results) {
      Value nv = p.new_value(res.type);
      vmap[res.id] = nv;
      res = nv;
    }
    for (auto &r : o.regions) {
      for (auto &a : r.args) {
        Value nv = p.new_value(a.type);
        vmap[a.id] = nv;
        a = nv;
      }
      for (auto &child : r.ops)
        fresh(*child);
    }
  };
  fresh(*n);
  std::function<void(Operation &)> redirect = [&](Operation &o) {
    remap_op_uses(o, vmap);
    for (auto &r : o.regions)
      for (auto &child : r.ops)
        redirect(*child);
  };
  redirect(*n);
  return n;
}

namespace {

void collect_uses(const Operation &op, std::set<int> &used) {
  auto use = [&](const Value &v) {
    if (v.valid())
      used.insert(v.id);
  };
  auto use_idx = [&](const IndexExpr &e) {
    if (!e.is_literal())
      used.insert(e.value.id);
  };
  auto use_view = [&](const BufferView &v) {
    use(v.buffer);
    for (const auto &e : v.offsets)
      use_idx(e);
    for (const auto &e : v.sizes)
      use_idx(e);
    for (const auto &e : v.strides)
      use_idx(e);
  };
  for (const auto &v : op.deps)
    use(v);
  for (const auto &v : op.iter_init)
    use(v);
  for (const auto &v : op.operands)
    use(v);
  for (const auto &v : op.apply_dims)
    use(v);
  for (const auto &v : op.apply_syms)
    use(v);
  use(op.buffer);
  for (const auto &e : op.indices)
    use_idx(e);
  for (const auto &e : op.bundle_index)
    use_idx(e);
  for (const auto &v : op.views)
    use_view(v);
  for (const auto &v : op.reads)
    use_view(v);
  for (const auto &v : op.writes)
    use_view(v);
  for (const auto &r : op.regions)
    for (const auto &o : r.ops)
      collect_uses(*o, used);
}

bool is_index_compute(const Operation &op) {
  return op.kind == OpKind::AffineApply || op.kind == OpKind::ArithConst ||
         (op.kind == OpKind::ArithAdd && !op.results.empty() &&
          op.results[0].type.kind == TypeKind::Index) ||
         (op.kind == OpKind::ArithMul && !op.results.empty() &&
          op.results[0].type.kind == TypeKind::Index);
}

} // namespace

std::vector<const Operation *> index_slice(const Region &r,
                                           const std::vector<Value> &needed) {
  std::set<int> want;
  for (const auto &v : needed)
    if (v.valid())
      want.insert(v.id);
  // Walk backwards so transitive operands get pulled in.
  std::vector<const Operation *> picked;
  for (auto it = r.ops.rbegin(); it != r.ops.rend(); ++it) {
    const Operation &op = **it;
    if (!is_index_compute(op))
      continue;
    bool hit = false;
    for (const auto &res : op.results)
      hit |= want.count(res.id) != 0;
    if (!hit)
      continue;
    picked.push_back(&op);
    std::set<int> used;
    collect_uses(op, used);
    want.insert(used.begin(), used.end());
  }
  std::reverse(picked.begin(), picked.end());
  return picked;
}

} // namespace air
