#include "air/transforms.hpp"

#include "air/acdg.hpp"
#include "air/analysis.hpp"
#include "air/error.hpp"
#include "air/rewrite.hpp"

#include <algorithm>
#include <functional>
#include <set>
#include <sstream>

namespace air {

namespace {

Operation *single_func(Program &p) {
  auto funcs = p.funcs();
  if (funcs.size() != 1)
    throw Error("ShapeMismatch", "expected exactly one func");
  return funcs[0];
}

bool is_parallel_pair(const Operation &op) {
  return op.kind == OpKind::ScfParallel && op.extents.size() == 2;
}

int next_channel_number(const Program &p) {
  int n = 0;
  for (const auto &op : p.body().ops)
    if (op->kind == OpKind::ChannelDecl) {
      const std::string &s = op->symbol;
      auto pos = s.find_last_of('_');
      if (pos != std::string::npos) {
        bool digits = pos + 1 < s.size() &&
                      s.find_first_not_of("0123456789", pos + 1) == std::string::npos;
        if (digits)
          n = std::max(n, static_cast<int>(std::stol(s.substr(pos + 1))) + 1);
      }
    }
  return n;
}

} // namespace

// ---------------------------------------------------------------------------
// map-hierarchy

Program map_hierarchy(const Program &p, const TileSpec &t) {
  if (t.herd_rows < 1 || t.herd_cols < 1 || t.t_i < 1 || t.t_j < 1 || t.t_k < 1)
    throw Error("ShapeMismatch", "tile spec entries must be positive");
  Program out = p.clone();
  Operation *func = single_func(out);
  Region &fbody = func->regions[0];

  // Locate the outer parallel pair.
  std::size_t outer_pos = fbody.ops.size();
  for (std::size_t i = 0; i < fbody.ops.size(); ++i)
    if (is_parallel_pair(*fbody.ops[i])) {
      outer_pos = i;
      break;
    }
  if (outer_pos == fbody.ops.size())
    throw Error("ShapeMismatch", "no parallel loop pair to map");
  Operation *outer = fbody.ops[outer_pos].get();

  // Optional inner pair somewhere in the outer body (staging in between).
  Region &obody = outer->regions[0];
  std::size_t inner_pos = obody.ops.size();
  for (std::size_t i = 0; i < obody.ops.size(); ++i)
    if (is_parallel_pair(*obody.ops[i])) {
      inner_pos = i;
      break;
    }
  bool two_level = inner_pos != obody.ops.size();
  Operation *inner = two_level ? obody.ops[inner_pos].get() : outer;

  if (inner->extents[0] % t.herd_rows != 0 || inner->extents[1] % t.herd_cols != 0)
    throw Error("ShapeMismatch",
                "herd dims do not divide the parallel extents " +
                    std::to_string(inner->extents[0]) + "x" +
                    std::to_string(inner->extents[1]));
  std::int64_t q0 = inner->extents[0] / t.herd_rows;
  std::int64_t q1 = inner->extents[1] / t.herd_cols;

  // Tile-size sanity against matmul-style kernels in the worker body.
  walk(*inner, [&](const Operation &op) {
    if (op.kind != OpKind::KernelCall || op.symbol.rfind("matmul", 0) != 0)
      return;
    if (op.reads.size() < 2)
      return;
    const BufferView &a = op.reads[0];
    if (!a.whole() && a.sizes.size() == 2 && a.sizes[0].is_literal() &&
        a.sizes[1].is_literal() &&
        (a.sizes[0].literal != t.t_i || a.sizes[1].literal != t.t_k))
      throw Error("ShapeMismatch", "kernel tile sizes disagree with the tile spec");
  });

  // Build launch { segment { herd } }.
  auto launch = make_op(OpKind::Launch);
  launch->loc = outer->loc;
  launch->regions.emplace_back();
  auto segment = make_op(OpKind::Segment);
  segment->symbol = "segment_0";
  segment->regions.emplace_back();
  auto herd = make_op(OpKind::Herd);
  herd->symbol = "herd_0";
  herd->extents = {t.herd_rows, t.herd_cols};
  herd->regions.emplace_back();

  std::map<int, Value> vmap;

  if (two_level) {
    launch->extents = outer->extents;
    Value lx = out.new_value(Type::index());
    Value ly = out.new_value(Type::index());
    launch->regions[0].args = {lx, ly};
    vmap[obody.args[0].id] = lx;
    vmap[obody.args[1].id] = ly;
  }

  Value tx = out.new_value(Type::index());
  Value ty = out.new_value(Type::index());
  herd->regions[0].args = {tx, ty};

  // Worker block loops cover the quotient; indices are rebuilt as
  // i = tx * q + u.
  Region &ibody = inner->regions[0];
  Region *emit_into = &herd->regions[0];
  std::vector<std::unique_ptr<Operation>> block_loops;
  Value i0, i1;
  if (q0 == 1 && q1 == 1) {
    i0 = tx;
    i1 = ty;
  } else {
    auto mk_loop = [&](std::int64_t trip) {
      auto l = make_op(OpKind::ScfFor);
      l->lb = 0;
      l->ub = trip;
      l->step = 1;
      l->regions.emplace_back();
      Value iv = out.new_value(Type::index());
      l->regions[0].args.push_back(iv);
      return l;
    };
    auto l0 = mk_loop(q0);
    auto l1 = mk_loop(q1);
    Value u = l0->regions[0].args[0];
    Value v = l1->regions[0].args[0];
    // i = t * q + u
    auto mk_apply = [&](Value a, std::int64_t scale, Value b) {
      auto ap = make_op(OpKind::AffineApply);
      AffineMap m;
      m.num_dims = 2;
      m.results.push_back(AffineExprNode::add(
          AffineExprNode::mul(AffineExprNode::dim(0), scale), AffineExprNode::dim(1)));
      ap->map = m;
      ap->apply_dims = {a, b};
      Value r = out.new_value(Type::index());
      ap->results.push_back(r);
      return std::pair<std::unique_ptr<Operation>, Value>(std::move(ap), r);
    };
    auto [a0, r0] = mk_apply(tx, q0, u);
    auto [a1, r1] = mk_apply(ty, q1, v);
    i0 = r0;
    i1 = r1;
    Region &l1b = l1->regions[0];
    l1b.ops.push_back(std::move(a0));
    l1b.ops.push_back(std::move(a1));
    emit_into = &l1->regions[0];
    l0->regions[0].ops.push_back(std::move(l1));
    block_loops.push_back(std::move(l0));
  }
  vmap[ibody.args[0].id] = i0;
  vmap[ibody.args[1].id] = i1;

  // Move the worker body.
  for (auto &op : ibody.ops) {
    if (op->kind == OpKind::ScfYield)
      continue;
    remap_uses(*op, vmap, true);
    emit_into->ops.push_back(std::move(op));
  }
  if (!block_loops.empty())
    herd->regions[0].ops.push_back(std::move(block_loops[0]));

  // Staging around the inner pair lands in the segment.
  if (two_level) {
    for (std::size_t i = 0; i < obody.ops.size(); ++i) {
      if (i == inner_pos) {
        segment->regions[0].ops.push_back(std::move(herd));
        continue;
      }
      if (obody.ops[i]->kind == OpKind::ScfYield)
        continue;
      remap_uses(*obody.ops[i], vmap, true);
      segment->regions[0].ops.push_back(std::move(obody.ops[i]));
    }
  } else {
    segment->regions[0].ops.push_back(std::move(herd));
  }
  launch->regions[0].ops.push_back(std::move(segment));
  fbody.ops[outer_pos] = std::move(launch);
  return out;
}

// ---------------------------------------------------------------------------
// decouple-memcpy

namespace {

MemorySpace space_of_view(const BufferView &v) { return v.buffer.type.memref.space; }

// Path of region-bearing ops from the func down to (and excluding) `target`.
struct PathEntry {
  Operation *op;
  Region *region; // region of `op` that the path descends into
};

bool find_path(Region &r, const Operation *target, std::vector<PathEntry> &path,
               Region **direct) {
  for (auto &op : r.ops) {
    if (op.get() == target) {
      *direct = &r;
      return true;
    }
    for (auto &reg : op->regions) {
      path.push_back({op.get(), &reg});
      if (find_path(reg, target, path, direct))
        return true;
      path.pop_back();
    }
  }
  return false;
}

// Deepest region along the path suitable for a given memory space, plus
// whether any spatial construct sits between it and the op (only then does
// the side hoist; loops alone keep the op in place).
struct SideTarget {
  Region *region = nullptr;
  std::size_t depth = 0; // path entries above the target
  bool in_place = true;
};

SideTarget side_target(std::vector<PathEntry> &path, Region *func_body,
                       MemorySpace space) {
  SideTarget st;
  st.region = func_body;
  st.depth = 0;
  for (std::size_t i = 0; i < path.size(); ++i) {
    OpKind k = path[i].op->kind;
    bool take = false;
    switch (space) {
    case MemorySpace::L3:
      take = k == OpKind::Launch;
      break;
    case MemorySpace::L2:
      take = k == OpKind::Launch || k == OpKind::Segment;
      break;
    case MemorySpace::L1:
      take = k == OpKind::Launch || k == OpKind::Segment || k == OpKind::Herd;
      break;
    }
    if (take) {
      st.region = path[i].region;
      st.depth = i + 1;
    }
  }
  st.in_place = true;
  for (std::size_t i = st.depth; i < path.size(); ++i) {
    OpKind k = path[i].op->kind;
    if (k == OpKind::Launch || k == OpKind::Segment || k == OpKind::Herd ||
        k == OpKind::ScfParallel)
      st.in_place = false;
  }
  return st;
}

struct HoistItem {
  Operation *memcpy_op;
  bool is_put;      // side being hoisted
  BufferView view;  // payload view of the hoisted side
  std::string channel;
  std::vector<IndexExpr> bundle; // bundle index in original coordinates
};

// Replica of the loop/parallel context between the target region and the
// memcpy; all hoisted items of one anchor share it.
struct ReplicaPlan {
  Region *target = nullptr;
  Operation *anchor = nullptr; // insert before/after this op in target
  bool after = false;
  std::vector<PathEntry> tail; // structure to replicate, outermost first
  std::vector<HoistItem> items;
};

} // namespace

Program decouple_memcpy(const Program &p) {
  Program out = p.clone();
  Operation *func = single_func(out);
  Region *fbody = &func->regions[0];

  // Collect space-crossing memcpys.
  std::vector<Operation *> targets;
  walk(*func, [&](Operation &op) {
    if (op.kind == OpKind::Memcpy &&
        space_of_view(op.views[0]) != space_of_view(op.views[1]))
      targets.push_back(&op);
  });

  int chan_no = next_channel_number(out);
  std::vector<ReplicaPlan> plans;

  for (Operation *cpy : targets) {
    std::vector<PathEntry> path;
    Region *direct = nullptr;
    if (!find_path(*fbody, cpy, path, &direct))
      continue;

    const BufferView dst = cpy->views[0];
    const BufferView src = cpy->views[1];
    SideTarget put_t = side_target(path, fbody, space_of_view(src));
    SideTarget get_t = side_target(path, fbody, space_of_view(dst));

    // Herd dims crossed on the deeper path: they shape the channel bundle.
    std::vector<std::int64_t> bundle_shape = {1};
    std::vector<Value> herd_coords;
    for (const auto &pe : path)
      if (pe.op->kind == OpKind::Herd || (pe.op->kind == OpKind::ScfParallel &&
                                          pe.op->extents.size() == 2)) {
        bundle_shape = pe.op->extents;
        herd_coords = {pe.op->regions[0].args[0], pe.op->regions[0].args[1]};
      }

    auto decl = make_op(OpKind::ChannelDecl);
    decl->symbol = "channel_" + std::to_string(chan_no++);
    decl->extents = bundle_shape;
    {
      std::size_t at = 0;
      while (at < out.body().ops.size() &&
             out.body().ops[at]->kind == OpKind::ChannelDecl)
        ++at;
      out.body().ops.insert(out.body().ops.begin() + static_cast<std::ptrdiff_t>(at),
                            std::move(decl));
    }
    std::string sym = "channel_" + std::to_string(chan_no - 1);

    std::vector<IndexExpr> bundle;
    for (const auto &c : herd_coords)
      bundle.push_back(IndexExpr(c));

    auto schedule_side = [&](bool is_put, const SideTarget &st, bool after,
                             const BufferView &view) {
      Region *target = st.region;
      std::size_t depth = st.depth;
      if (st.in_place) {
        // Replace in place.
        auto op = make_op(is_put ? OpKind::ChannelPut : OpKind::ChannelGet);
        op->loc = cpy->loc;
        op->symbol = sym;
        op->views.push_back(view);
        op->bundle_index = bundle;
        op->is_async = true;
        // Keep the memcpy token so downstream deps stay valid; filter deps
        // to the ones related to this side's buffer.
        op->results.push_back(cpy->token());
        for (const auto &d : cpy->deps) {
          const Operation *def = nullptr;
          walk(*func, [&](const Operation &o) {
            for (const auto &res : o.results)
              if (res.id == d.id)
                def = &o;
          });
          bool related = !def;
          if (def) {
            EffectSet es = infer_effects(*def, true);
            for (const auto &x : es.reads)
              related |= x.buffer.id == view.buffer.id;
            for (const auto &x : es.writes)
              related |= x.buffer.id == view.buffer.id;
            if (def->kind == OpKind::WaitAll)
              related = true; // carried-token glue
          }
          if (related)
            op->deps.push_back(d);
        }
        // Swap the memcpy out (the second side may still need its data).
        for (auto &slot : direct->ops)
          if (slot.get() == cpy) {
            slot = std::move(op);
            break;
          }
        return;
      }
      // Hoisted: find or create the replica plan for (target, anchor, side).
      Operation *anchor = path[depth].op; // op containing the memcpy at target level
      for (auto &plan : plans)
        if (plan.target == target && plan.anchor == anchor && plan.after == after) {
          plan.items.push_back({cpy, is_put, view, sym, bundle});
          return;
        }
      ReplicaPlan plan;
      plan.target = target;
      plan.anchor = anchor;
      plan.after = after;
      for (std::size_t i = depth; i < path.size(); ++i)
        plan.tail.push_back(path[i]);
      plan.items.push_back({cpy, is_put, view, sym, bundle});
      plans.push_back(std::move(plan));
    };

    bool put_in_place = put_t.in_place;
    bool get_in_place = get_t.in_place;
    if (put_in_place && get_in_place) {
      // Both already local (no spatial boundary between the endpoints):
      // replace with a put/get pair in place so the copy is decoupled but
      // stays in its loop context; put first, then get.
      auto putop = make_op(OpKind::ChannelPut);
      putop->loc = cpy->loc;
      putop->symbol = sym;
      putop->views.push_back(src);
      putop->bundle_index = bundle;
      putop->is_async = true;
      putop->results.push_back(out.new_value(Type::token()));
      putop->deps = cpy->deps;
      auto getop = make_op(OpKind::ChannelGet);
      getop->loc = cpy->loc;
      getop->symbol = sym;
      getop->views.push_back(dst);
      getop->bundle_index = bundle;
      getop->is_async = true;
      getop->results.push_back(cpy->token());
      for (std::size_t i = 0; i < direct->ops.size(); ++i)
        if (direct->ops[i].get() == cpy) {
          direct->ops[i] = std::move(getop);
          direct->ops.insert(direct->ops.begin() + static_cast<std::ptrdiff_t>(i),
                             std::move(putop));
          break;
        }
      continue;
    }
    // Puts always feed in before their anchor. A hoisted get drains after
    // its anchor only when the data is produced inside it (output flow);
    // input flows (put side higher up) must fill before the anchor runs.
    bool get_after = put_t.in_place || put_t.depth >= get_t.depth;
    schedule_side(true, put_t, false, src);
    schedule_side(false, get_t, get_after, dst);
    if (!put_in_place && !get_in_place) {
      // Neither side stays: drop the memcpy op itself.
      for (auto &slot : direct->ops)
        if (slot.get() == cpy) {
          // Keep downstream tokens alive through a wait_all carrying the old
          // token value.
          auto glue = make_op(OpKind::WaitAll);
          glue->is_async = true;
          glue->deps = cpy->deps;
          glue->results.push_back(cpy->token());
          slot = std::move(glue);
          break;
        }
    }
  }

  // Materialize replicas.
  for (auto &plan : plans) {
    // Clone the loop/parallel chain (structure only). Sequential loops wrap
    // outside and the worker-replicating parallel sits innermost, so bundle
    // element streams interleave phase by phase at the ports.
    std::map<int, Value> vmap;
    std::unique_ptr<Operation> root;
    Region *emit = nullptr;
    Region flat_region; // ops emitted without any surrounding structure
    std::vector<PathEntry> loops, parallels;
    std::vector<Value> unit_args; // args of skipped all-ones parallels
    for (const auto &pe : plan.tail) {
      if (pe.op->kind == OpKind::ScfFor) {
        loops.push_back(pe);
      } else if (pe.op->kind == OpKind::Herd || pe.op->kind == OpKind::ScfParallel) {
        bool unit = true;
        for (auto e : pe.op->extents)
          unit &= e == 1;
        if (unit) {
          for (const auto &a : pe.op->regions[0].args)
            unit_args.push_back(a);
        } else {
          parallels.push_back(pe);
        }
      }
    }
    std::vector<PathEntry> ordered = loops;
    ordered.insert(ordered.end(), parallels.begin(), parallels.end());
    for (const auto &pe : ordered) {
      std::unique_ptr<Operation> rep;
      if (pe.op->kind == OpKind::ScfFor) {
        rep = make_op(OpKind::ScfFor);
        rep->lb = pe.op->lb;
        rep->ub = pe.op->ub;
        rep->step = pe.op->step;
        rep->regions.emplace_back();
        Value iv = out.new_value(Type::index());
        rep->regions[0].args.push_back(iv);
        vmap[pe.op->regions[0].args[0].id] = iv;
      } else {
        rep = make_op(OpKind::ScfParallel);
        rep->extents = pe.op->extents;
        rep->regions.emplace_back();
        for (std::size_t ai = 0; ai < pe.op->extents.size(); ++ai) {
          Value iv = out.new_value(Type::index());
          rep->regions[0].args.push_back(iv);
          if (ai < pe.op->regions[0].args.size())
            vmap[pe.op->regions[0].args[ai].id] = iv;
        }
      }
      Region *next = &rep->regions[0];
      if (!root) {
        root = std::move(rep);
        emit = next;
      } else {
        emit->ops.push_back(std::move(rep));
        emit = next;
      }
    }

    // Degenerate parallel coordinates pin to zero.
    {
      Region *body0 = emit ? emit : &flat_region;
      for (const auto &a : unit_args) {
        auto cst = make_op(OpKind::ArithConst);
        cst->const_value = 0;
        cst->const_type = Type::index();
        Value v = out.new_value(Type::index());
        cst->results.push_back(v);
        vmap[a.id] = v;
        body0->ops.push_back(std::move(cst));
      }
    }

    // Emit items in original program order: index slices + channel ops.
    std::sort(plan.items.begin(), plan.items.end(),
              [&](const HoistItem &a, const HoistItem &b) {
                if (a.memcpy_op == b.memcpy_op)
                  return a.is_put && !b.is_put;
                // program order: position in the original direct region
                return a.memcpy_op->loc.line < b.memcpy_op->loc.line;
              });
    for (const auto &item : plan.items) {
      // Clone the view's index slice from the memcpy's region.
      std::vector<Value> needed;
      auto add_needed = [&](const std::vector<IndexExpr> &l) {
        for (const auto &e : l)
          if (!e.is_literal())
            needed.push_back(e.value);
      };
      add_needed(item.view.offsets);
      add_needed(item.view.sizes);
      add_needed(item.view.strides);
      add_needed(item.bundle);
      // Slice ops come from every region along the tail (typically the
      // innermost loop body).
      std::vector<const Operation *> slice;
      {
        // Innermost regions first for discovery; emit outermost-first with
        // in-region program order preserved so defs precede uses.
        std::set<const Operation *> seen;
        std::vector<std::vector<const Operation *>> parts;
        for (auto it = plan.tail.rbegin(); it != plan.tail.rend(); ++it) {
          auto part = index_slice(*it->region, needed);
          std::vector<const Operation *> fresh;
          for (const auto *o : part)
            if (seen.insert(o).second)
              fresh.push_back(o);
          for (const auto *o : fresh) {
            std::vector<Value> more;
            for (const auto &v : o->apply_dims)
              more.push_back(v);
            for (const auto &v : o->apply_syms)
              more.push_back(v);
            for (const auto &v : o->operands)
              more.push_back(v);
            needed.insert(needed.end(), more.begin(), more.end());
          }
          parts.push_back(std::move(fresh));
        }
        for (auto it = parts.rbegin(); it != parts.rend(); ++it)
          slice.insert(slice.end(), it->begin(), it->end());
      }
      Region *body = emit ? emit : &flat_region;
      for (const auto *o : slice) {
        if (vmap.count(o->results[0].id))
          continue; // already cloned for an earlier item
        body->ops.push_back(clone_remap(*o, out, vmap));
      }
      auto op = make_op(item.is_put ? OpKind::ChannelPut : OpKind::ChannelGet);
      op->symbol = item.channel;
      op->is_async = true;
      op->results.push_back(out.new_value(Type::token()));
      BufferView v = item.view;
      auto rm = [&](std::vector<IndexExpr> &l) {
        for (auto &e : l)
          if (!e.is_literal()) {
            auto it = vmap.find(e.value.id);
            if (it != vmap.end())
              e.value = it->second;
          }
      };
      rm(v.offsets);
      rm(v.sizes);
      rm(v.strides);
      op->views.push_back(v);
      op->bundle_index = item.bundle;
      rm(op->bundle_index);
      body->ops.push_back(std::move(op));
    }

    // Thread carried tokens through replica loops (innermost first) and add
    // intra-body effect deps.
    std::vector<std::unique_ptr<Operation>> emitted;
    if (root) {
      std::function<void(Region &)> thread_rec = [&](Region &reg) {
        for (auto &slot : reg.ops)
          if (slot)
            for (auto &r2 : slot->regions)
              thread_rec(r2);
        bool changed2 = true;
        while (changed2) {
          changed2 = false;
          for (auto &slot : reg.ops) {
            if (!slot || slot->kind != OpKind::ScfFor || !slot->iter_init.empty())
              continue;
            bool has_tokens = false;
            for (const auto &o : slot->regions[0].ops)
              for (const auto &res : o->results)
                has_tokens |= res.type.kind == TypeKind::Token;
            if (!has_tokens)
              continue;
            std::vector<std::unique_ptr<Operation>> tmp;
            thread_loop_tokens(out, tmp, std::move(slot));
            std::vector<std::unique_ptr<Operation>> rebuilt;
            for (auto &s : reg.ops) {
              if (!s) {
                for (auto &tp : tmp)
                  rebuilt.push_back(std::move(tp));
                tmp.clear();
              } else {
                rebuilt.push_back(std::move(s));
              }
            }
            reg.ops = std::move(rebuilt);
            changed2 = true;
            break;
          }
        }
        // effect deps among this region's token-bearers
        add_effect_deps(out, reg);
      };
      for (auto &r2 : root->regions)
        thread_rec(r2);
      if (root->kind == OpKind::ScfFor && root->iter_init.empty()) {
        thread_loop_tokens(out, emitted, std::move(root));
      } else {
        emitted.push_back(std::move(root));
      }
    } else {
      for (auto &o : flat_region.ops)
        emitted.push_back(std::move(o));
    }

    // Insert at the anchor.
    Region *target = plan.target;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < target->ops.size(); ++i)
      if (target->ops[i].get() == plan.anchor) {
        pos = plan.after ? i + 1 : i;
        break;
      }
    for (std::size_t i = 0; i < emitted.size(); ++i)
      target->ops.insert(target->ops.begin() + static_cast<std::ptrdiff_t>(pos + i),
                         std::move(emitted[i]));
  }

  // Hoisting introduced new producer/consumer siblings; complete their
  // dependency lists from effects.
  std::function<void(Region &)> sweep = [&](Region &r) {
    for (auto &op : r.ops)
      for (auto &reg : op->regions)
        sweep(reg);
    add_effect_deps(out, r);
  };
  sweep(func->regions[0]);

  return out;
}


// ---------------------------------------------------------------------------
// shared utilities for the channel passes

namespace {

// Evaluates an index value from its def chain under `env` (iv -> value).
std::int64_t eval_index_value(const Region &scope_root, const Value &v,
                              const std::map<int, std::int64_t> &env);

const Operation *find_def(const Region &r, int id) {
  for (const auto &op : r.ops) {
    for (const auto &res : op->results)
      if (res.id == id)
        return op.get();
    for (const auto &reg : op->regions)
      if (const Operation *f = find_def(reg, id))
        return f;
  }
  return nullptr;
}

std::int64_t eval_index_value(const Region &scope_root, const Value &v,
                              const std::map<int, std::int64_t> &env) {
  auto it = env.find(v.id);
  if (it != env.end())
    return it->second;
  const Operation *def = find_def(scope_root, v.id);
  if (!def)
    throw Error("ShapeMismatch", "index value not statically evaluable");
  switch (def->kind) {
  case OpKind::ArithConst:
    return def->const_value;
  case OpKind::AffineApply: {
    std::vector<std::int64_t> dims, syms;
    for (const auto &d : def->apply_dims)
      dims.push_back(eval_index_value(scope_root, d, env));
    for (const auto &s : def->apply_syms)
      syms.push_back(eval_index_value(scope_root, s, env));
    return eval_map(def->map, dims, syms)[0];
  }
  case OpKind::ArithAdd:
    return eval_index_value(scope_root, def->operands[0], env) +
           eval_index_value(scope_root, def->operands[1], env);
  case OpKind::ArithMul:
    return eval_index_value(scope_root, def->operands[0], env) *
           eval_index_value(scope_root, def->operands[1], env);
  default:
    throw Error("ShapeMismatch", "index value not statically evaluable");
  }
}

// Rebuilds an index value's def chain as an affine expression over the given
// base values (id -> dim index). Throws when the chain leaves affine land.
AffineExpr index_value_to_affine(const Region &scope_root, const Value &v,
                                 const std::map<int, int> &dims) {
  auto it = dims.find(v.id);
  if (it != dims.end())
    return AffineExprNode::dim(it->second);
  const Operation *def = find_def(scope_root, v.id);
  if (!def)
    throw Error("NotSplittable", "access is not affine in the loop indices");
  switch (def->kind) {
  case OpKind::ArithConst:
    return AffineExprNode::constant(def->const_value);
  case OpKind::AffineApply: {
    std::vector<AffineExpr> dsub, ssub;
    for (const auto &d : def->apply_dims)
      dsub.push_back(index_value_to_affine(scope_root, d, dims));
    for (const auto &s : def->apply_syms)
      ssub.push_back(index_value_to_affine(scope_root, s, dims));
    AffineExpr e = def->map.results[0];
    // substitute dims then syms
    std::vector<AffineExpr> dmap(dsub.begin(), dsub.end());
    AffineExpr body = substitute(e, dmap, ssub);
    return body;
  }
  case OpKind::ArithAdd:
    return AffineExprNode::add(index_value_to_affine(scope_root, def->operands[0], dims),
                               index_value_to_affine(scope_root, def->operands[1], dims));
  case OpKind::ArithMul: {
    AffineExpr a = index_value_to_affine(scope_root, def->operands[0], dims);
    AffineExpr b = index_value_to_affine(scope_root, def->operands[1], dims);
    if (a->kind == AffineKind::Const)
      return AffineExprNode::mul(b, a->value);
    if (b->kind == AffineKind::Const)
      return AffineExprNode::mul(a, b->value);
    throw Error("NotSplittable", "non-affine multiplication in access chain");
  }
  default:
    throw Error("NotSplittable", "access is not affine in the loop indices");
  }
}

// Values an iv depends on transitively (for invariance testing): returns the
// set of region-arg ids the value's chain references.
void collect_arg_deps(const Region &scope_root, const Value &v, std::set<int> &out) {
  const Operation *def = find_def(scope_root, v.id);
  if (!def) {
    out.insert(v.id); // region arg or outer value
    return;
  }
  auto rec = [&](const Value &x) { collect_arg_deps(scope_root, x, out); };
  for (const auto &d : def->apply_dims)
    rec(d);
  for (const auto &s : def->apply_syms)
    rec(s);
  for (const auto &o : def->operands)
    rec(o);
}

// Strips all carried-token plumbing from a loop: iter args, yields, results,
// and deps on the stripped args. Downstream users of the old results must be
// remapped by the caller (returns the old result tokens).
std::vector<Value> strip_loop_tokens(Operation &loop) {
  std::vector<Value> old_results = loop.results;
  Region &body = loop.regions[0];
  std::set<int> stripped;
  for (std::size_t i = 1; i < body.args.size(); ++i)
    stripped.insert(body.args[i].id);
  body.args.resize(1);
  loop.iter_init.clear();
  loop.results.clear();
  if (!body.ops.empty() && body.ops.back()->kind == OpKind::ScfYield)
    body.ops.pop_back();
  for (auto &op : body.ops) {
    auto &d = op->deps;
    d.erase(std::remove_if(d.begin(), d.end(),
                           [&](const Value &v) { return stripped.count(v.id) != 0; }),
            d.end());
  }
  return old_results;
}

// Removes effect-free wait_all glue whose token is never used in the func.
void drop_unused_glue(Operation &func) {
  std::set<int> used;
  walk(func, [&](const Operation &op) {
    for (const auto &d : op.deps)
      used.insert(d.id);
    for (const auto &v : op.iter_init)
      used.insert(v.id);
    for (const auto &v : op.operands)
      used.insert(v.id);
    for (const auto &v : op.concurs)
      used.insert(v.id);
    for (const auto &v : op.affinities)
      used.insert(v.id);
  });
  std::function<void(Region &)> visit = [&](Region &r) {
    for (auto &op : r.ops)
      for (auto &reg : op->regions)
        visit(reg);
    r.ops.erase(std::remove_if(r.ops.begin(), r.ops.end(),
                               [&](const std::unique_ptr<Operation> &op) {
                                 if (op->kind != OpKind::WaitAll || !op->deps.empty())
                                   return false;
                                 for (const auto &res : op->results)
                                   if (used.count(res.id))
                                     return false;
                                 return true;
                               }),
                r.ops.end());
  };
  visit(func.regions[0]);
}

} // namespace

// ---------------------------------------------------------------------------
// detect-broadcast

namespace {

struct PutSite {
  Operation *put = nullptr;
  Operation *parallel = nullptr; // wrapping replica parallel (2-D)
  Region *host = nullptr;        // region containing the parallel
  std::size_t host_pos = 0;
  std::vector<int> invariant_dims;
};

} // namespace

Program detect_broadcast(const Program &p) {
  Program out = p.clone();
  Operation *func = single_func(out);

  // Collect put sites: 2-D parallel-wrapped puts with herd-shaped bundles.
  std::vector<PutSite> sites;
  std::function<void(Region &)> scan = [&](Region &r) {
    for (std::size_t i = 0; i < r.ops.size(); ++i) {
      Operation &op = *r.ops[i];
      for (auto &reg : op.regions)
        scan(reg);
      if (op.kind != OpKind::ScfParallel || op.extents.size() != 2)
        continue;
      walk(op, [&](Operation &inner) {
        if (inner.kind != OpKind::ChannelPut || inner.has_attr("broadcast"))
          return;
        PutSite s;
        s.put = &inner;
        s.parallel = &op;
        s.host = &r;
        s.host_pos = i;
        sites.push_back(s);
      });
    }
  };
  scan(func->regions[0]);

  for (auto &site : sites) {
    Operation &par = *site.parallel;
    if (par.extents.size() != 2)
      continue;
    const Operation *decl = out.find_channel(site.put->symbol);
    if (!decl || decl->extents.size() != 2)
      continue;
    // The payload's dependence on the parallel ivs.
    std::set<int> deps_on;
    auto add_list = [&](const std::vector<IndexExpr> &l) {
      for (const auto &e : l)
        if (!e.is_literal())
          collect_arg_deps(par.regions[0], e.value, deps_on);
    };
    add_list(site.put->views[0].offsets);
    add_list(site.put->views[0].sizes);
    add_list(site.put->views[0].strides);
    std::vector<int> inv;
    for (int d = 0; d < 2; ++d) {
      if (par.extents[static_cast<std::size_t>(d)] < 2)
        continue; // fan-out 1: nothing to collapse
      if (!deps_on.count(par.regions[0].args[static_cast<std::size_t>(d)].id))
        inv.push_back(d);
    }
    if (inv.empty())
      continue;
    site.invariant_dims = inv;
  }
  sites.erase(std::remove_if(sites.begin(), sites.end(),
                             [](const PutSite &s) { return s.invariant_dims.empty(); }),
              sites.end());

  // Process one site at a time; re-clone semantics keep this simple. Sites
  // sharing a parallel with differently-invariant puts get their own clone.
  for (auto &site : sites) {
    Operation &par = *site.parallel;
    // Other channel ops under the same parallel with a different signature?
    std::vector<Operation *> others;
    walk(par, [&](Operation &o) {
      if ((o.kind == OpKind::ChannelPut || o.kind == OpKind::ChannelGet) &&
          &o != site.put)
        others.push_back(&o);
    });
    Operation *target_put = site.put;
    if (!others.empty()) {
      // Clone the parallel for this put; erase this put from the original
      // and the others from the clone.
      std::map<int, Value> vmap;
      auto clone = clone_remap(par, out, vmap);
      // erase others (by symbol+view buffer id mapping through vmap).
      std::function<void(Region &)> erase_others = [&](Region &r) {
        for (auto &op : r.ops)
          for (auto &reg : op->regions)
            erase_others(reg);
        r.ops.erase(std::remove_if(r.ops.begin(), r.ops.end(),
                                   [&](const std::unique_ptr<Operation> &op) {
                                     if (op->kind != OpKind::ChannelPut &&
                                         op->kind != OpKind::ChannelGet)
                                       return false;
                                     // Keep only the clone of site.put.
                                     return !(op->kind == site.put->kind &&
                                              op->symbol == site.put->symbol);
                                   }),
                    r.ops.end());
      };
      erase_others(clone->regions[0]);
      // Remove the original put from the original parallel.
      std::function<void(Region &)> erase_self = [&](Region &r) {
        for (auto &op : r.ops)
          for (auto &reg : op->regions)
            erase_self(reg);
        r.ops.erase(std::remove_if(r.ops.begin(), r.ops.end(),
                                   [&](const std::unique_ptr<Operation> &op) {
                                     return op.get() == site.put;
                                   }),
                    r.ops.end());
      };
      erase_self(par.regions[0]);
      // Rebuild token plumbing in both loop nests: strip everything
      // post-order, then re-thread innermost-first.
      auto rethread = [&](Operation &parallel_op) {
        std::function<void(Region &)> strip_rec = [&](Region &r) {
          for (auto &slot : r.ops)
            if (slot)
              for (auto &reg : slot->regions)
                strip_rec(reg);
          for (auto &slot : r.ops)
            if (slot && slot->kind == OpKind::ScfFor && !slot->iter_init.empty())
              strip_loop_tokens(*slot);
        };
        std::function<void(Region &)> thread_rec = [&](Region &r) {
          for (auto &slot : r.ops)
            if (slot)
              for (auto &reg : slot->regions)
                thread_rec(reg);
          bool again = true;
          while (again) {
            again = false;
            for (auto &slot : r.ops) {
              if (!slot || slot->kind != OpKind::ScfFor || !slot->iter_init.empty())
                continue;
              bool has_tokens = false;
              for (const auto &o : slot->regions[0].ops)
                if (o)
                  for (const auto &res : o->results)
                    has_tokens |= res.type.kind == TypeKind::Token;
              if (!has_tokens)
                continue;
              std::vector<std::unique_ptr<Operation>> tmp;
              thread_loop_tokens(out, tmp, std::move(slot));
              std::vector<std::unique_ptr<Operation>> rebuilt;
              for (auto &s : r.ops) {
                if (!s) {
                  for (auto &tp : tmp)
                    rebuilt.push_back(std::move(tp));
                  tmp.clear();
                } else {
                  rebuilt.push_back(std::move(s));
                }
              }
              r.ops = std::move(rebuilt);
              again = true;
              break;
            }
          }
        };
        strip_rec(parallel_op.regions[0]);
        thread_rec(parallel_op.regions[0]);
      };
      // locate the cloned put
      Operation *cloned_put = nullptr;
      walk(*clone, [&](Operation &o) {
        if (o.kind == OpKind::ChannelPut && o.symbol == site.put->symbol)
          cloned_put = &o;
      });
      rethread(*clone);
      rethread(par);
      target_put = cloned_put;
      Operation *clone_ptr = clone.get();
      site.host->ops.insert(site.host->ops.begin() +
                                static_cast<std::ptrdiff_t>(site.host_pos),
                            std::move(clone));
      site.parallel = clone_ptr;
    }

    // Shrink the invariant dims and attach the broadcast set.
    Operation &tpar = *site.parallel;
    const Operation *decl = out.find_channel(target_put->symbol);
    std::vector<std::int64_t> full = decl->extents;
    std::int64_t src_mask = 0;
    IntegerSet set;
    set.num_dims = 2;
    int nsyms = 0;
    for (int d = 0; d < 2; ++d)
      if (std::find(site.invariant_dims.begin(), site.invariant_dims.end(), d) ==
          site.invariant_dims.end()) {
        src_mask |= std::int64_t{1} << d;
        ++nsyms;
      }
    set.num_syms = nsyms;
    int sym = 0;
    for (int d = 0; d < 2; ++d) {
      bool invariant = std::find(site.invariant_dims.begin(), site.invariant_dims.end(),
                                 d) != site.invariant_dims.end();
      if (invariant) {
        // 0 <= d_d <= ext-1
        set.constraints.push_back({AffineExprNode::dim(d), AffineRelation::Ge});
        set.constraints.push_back(
            {AffineExprNode::add(AffineExprNode::mul(AffineExprNode::dim(d), -1),
                                 full[static_cast<std::size_t>(d)] - 1),
             AffineRelation::Ge});
      } else {
        // d_d == s_j, 0 <= s_j <= ext-1
        set.constraints.push_back(
            {AffineExprNode::add(AffineExprNode::dim(d),
                                 AffineExprNode::mul(AffineExprNode::sym(sym), -1)),
             AffineRelation::Eq});
        set.constraints.push_back({AffineExprNode::sym(sym), AffineRelation::Ge});
        set.constraints.push_back(
            {AffineExprNode::add(AffineExprNode::mul(AffineExprNode::sym(sym), -1),
                                 full[static_cast<std::size_t>(d)] - 1),
             AffineRelation::Ge});
        ++sym;
      }
    }
    target_put->attrs["broadcast"] = set;
    target_put->attrs["broadcast_src_dims"] = src_mask;
    for (int d : site.invariant_dims) {
      tpar.extents[static_cast<std::size_t>(d)] = 1;
      if (static_cast<std::size_t>(d) < target_put->bundle_index.size())
        target_put->bundle_index[static_cast<std::size_t>(d)] =
            IndexExpr(std::int64_t{0});
    }
  }

  drop_unused_glue(*func);
  return out;
}

// ---------------------------------------------------------------------------
// pingpong

Program pingpong(const Program &p, int depth) {
  if (depth == 1)
    return p.clone();
  if (depth < 1)
    throw Error("NotPipelinable", "depth must be >= 1");
  Program out = p.clone();
  Operation *func = single_func(out);

  struct Candidate {
    Region *host = nullptr;
    std::size_t pos = 0;
    Operation *loop = nullptr;
    // per buffer: producer op, consumer op, alloc op
    struct Buf {
      int buffer_id;
      Operation *alloc;
      Operation *dealloc; // may be null
    };
    std::vector<Buf> bufs;
  };
  std::vector<Candidate> candidates;

  std::function<void(Region &)> scan = [&](Region &r) {
    for (std::size_t i = 0; i < r.ops.size(); ++i) {
      Operation &op = *r.ops[i];
      for (auto &reg : op.regions)
        scan(reg);
      if (op.kind != OpKind::ScfFor)
        continue;
      // innermost loops only
      bool has_inner_loop = false;
      for (const auto &o : op.regions[0].ops)
        has_inner_loop |= o->kind == OpKind::ScfFor && !o->regions[0].ops.empty() &&
                          o->regions[0].ops[0]->kind != OpKind::Load;
      Region &body = op.regions[0];
      // producer/consumer per buffer allocated outside the loop
      std::map<int, std::vector<Operation *>> writers, readers;
      std::vector<Operation *> async_ops;
      for (auto &o : body.ops) {
        if (o->kind == OpKind::ScfYield || (o->kind == OpKind::WaitAll))
          continue;
        if (!o->is_async && o->kind != OpKind::ScfFor)
          continue;
        async_ops.push_back(o.get());
        EffectSet es = infer_effects(*o, true);
        for (const auto &v : es.writes)
          writers[v.buffer.id].push_back(o.get());
        for (const auto &v : es.reads)
          readers[v.buffer.id].push_back(o.get());
      }
      Candidate c;
      c.host = &r;
      c.pos = i;
      c.loop = &op;
      std::set<Operation *> in_pairs;
      for (auto &[buf, ws] : writers) {
        auto rit = readers.find(buf);
        if (rit == readers.end() || ws.size() != 1 || rit->second.size() != 1)
          continue;
        // buffer must be allocated outside the loop at L1/L2
        Operation *alloc = nullptr, *dealloc = nullptr;
        walk(*func, [&](Operation &a) {
          if (a.kind == OpKind::Alloc && !a.results.empty() && a.results[0].id == buf)
            alloc = &a;
          if (a.kind == OpKind::Dealloc && a.buffer.id == buf)
            dealloc = &a;
        });
        bool alloc_inside = false;
        walk(op, [&](Operation &a) { alloc_inside |= &a == alloc; });
        if (!alloc || alloc_inside)
          continue;
        MemorySpace sp = alloc->alloc_type.space;
        if (sp == MemorySpace::L3)
          continue;
        if (ws[0] == rit->second[0])
          continue; // same op both sides: not a pipeline pair
        c.bufs.push_back({buf, alloc, dealloc});
        in_pairs.insert(ws[0]);
        in_pairs.insert(rit->second[0]);
      }
      if (c.bufs.empty())
        continue;
      // every async op must belong to a pair (plus glue)
      bool leftovers = false;
      for (auto *o : async_ops)
        if (!in_pairs.count(o))
          leftovers = true;
      if (leftovers || has_inner_loop)
        continue;
      candidates.push_back(std::move(c));
    }
  };
  scan(func->regions[0]);

  if (candidates.empty())
    throw Error("NotPipelinable", "no producer->consumer streaming loop found");

  for (auto &cand : candidates) {
    Operation &loop = *cand.loop;
    std::int64_t trips = (loop.ub - loop.lb) / loop.step;
    if (trips % depth != 0)
      throw Error("IndivisibleTripCount",
                  "trip count " + std::to_string(trips) + " not divisible by depth " +
                      std::to_string(depth));

    // Duplicate each pipelined buffer depth-1 more times.
    static int group_counter = 0;
    std::map<int, std::vector<Value>> stage_buf; // buffer id -> per-stage value
    for (auto &b : cand.bufs) {
      int gid = group_counter++;
      b.alloc->attrs["group"] = static_cast<std::int64_t>(gid);
      std::vector<Value> stages = {b.alloc->results[0]};
      for (int s = 1; s < depth; ++s) {
        std::map<int, Value> vmap;
        auto dup = clone_remap(*b.alloc, out, vmap);
        dup->attrs["group"] = static_cast<std::int64_t>(gid);
        stages.push_back(dup->results[0]);
        // insert right after the original alloc
        std::function<bool(Region &)> ins = [&](Region &r) {
          for (std::size_t i = 0; i < r.ops.size(); ++i) {
            if (r.ops[i].get() == b.alloc) {
              r.ops.insert(r.ops.begin() + static_cast<std::ptrdiff_t>(i + 1 +
                                                                       static_cast<std::size_t>(s - 1)),
                           std::move(dup));
              return true;
            }
            for (auto &reg : r.ops[i]->regions)
              if (ins(reg))
                return true;
          }
          return false;
        };
        ins(func->regions[0]);
        if (b.dealloc) {
          auto ddup = make_op(OpKind::Dealloc);
          ddup->buffer = stages.back();
          ddup->is_async = b.dealloc->is_async;
          if (ddup->is_async)
            ddup->results.push_back(out.new_value(Type::token()));
          std::function<bool(Region &)> insd = [&](Region &r) {
            for (std::size_t i = 0; i < r.ops.size(); ++i) {
              if (r.ops[i].get() == b.dealloc) {
                r.ops.insert(r.ops.begin() + static_cast<std::ptrdiff_t>(i + 1),
                             std::move(ddup));
                return true;
              }
              for (auto &reg : r.ops[i]->regions)
                if (insd(reg))
                  return true;
            }
            return false;
          };
          insd(func->regions[0]);
        }
      }
      stage_buf[b.buffer_id] = stages;
    }

    // New unrolled loop.
    auto nl = make_op(OpKind::ScfFor);
    nl->loc = loop.loc;
    nl->lb = loop.lb;
    nl->ub = loop.ub;
    nl->step = loop.step * depth;
    nl->regions.emplace_back();
    Region &nb = nl->regions[0];
    Value iv = out.new_value(Type::index());
    nb.args.push_back(iv);

    Region &oldb = loop.regions[0];
    std::set<int> old_args;
    for (std::size_t i = 1; i < oldb.args.size(); ++i)
      old_args.insert(oldb.args[i].id);

    // One data token per (buffer, stage) + producer/consumer contention.
    struct Chain {
      Value arg;     // carried token arg
      Value initial; // init wait_all token
      Value yielded; // filled during wiring
    };
    std::map<int, std::vector<Chain>> data_chains; // per buffer
    std::map<int, Chain> prod_chain, cons_chain;   // per buffer
    std::vector<std::unique_ptr<Operation>> chain_inits;
    auto mk_chain = [&]() {
      Chain ch;
      auto init = make_op(OpKind::WaitAll);
      init->is_async = true;
      ch.initial = out.new_value(Type::token());
      init->results.push_back(ch.initial);
      chain_inits.push_back(std::move(init));
      ch.arg = out.new_value(Type::token());
      nb.args.push_back(ch.arg);
      nl->iter_init.push_back(ch.initial);
      nl->results.push_back(out.new_value(Type::token()));
      return ch;
    };
    for (const auto &b : cand.bufs) {
      for (int s = 0; s < depth; ++s)
        data_chains[b.buffer_id].push_back(mk_chain());
      prod_chain[b.buffer_id] = mk_chain();
      cons_chain[b.buffer_id] = mk_chain();
    }

    // Stage clones.
    std::map<int, std::vector<Operation *>> stage_prod, stage_cons; // buffer -> per-stage op
    for (int s = 0; s < depth; ++s) {
      std::map<int, Value> vmap;
      // iv' = iv + s*step
      Value ivs = iv;
      if (s > 0) {
        auto ap = make_op(OpKind::AffineApply);
        AffineMap m;
        m.num_dims = 1;
        m.results.push_back(
            AffineExprNode::add(AffineExprNode::dim(0), s * loop.step));
        ap->map = m;
        ap->apply_dims = {iv};
        ivs = out.new_value(Type::index());
        ap->results.push_back(ivs);
        nb.ops.push_back(std::move(ap));
      }
      vmap[oldb.args[0].id] = ivs;
      for (const auto &[buf, stages] : stage_buf)
        if (s > 0)
          vmap[buf] = stages[static_cast<std::size_t>(s)];
      for (const auto &o : oldb.ops) {
        if (o->kind == OpKind::ScfYield)
          continue;
        auto cl = clone_remap(*o, out, vmap);
        // strip deps on old carried args
        auto &d = cl->deps;
        d.erase(std::remove_if(d.begin(), d.end(),
                               [&](const Value &v) { return old_args.count(v.id) != 0; }),
                d.end());
        Operation *raw = cl.get();
        nb.ops.push_back(std::move(cl));
        EffectSet es = infer_effects(*raw, true);
        for (const auto &b : cand.bufs) {
          for (const auto &v : es.writes)
            if (v.buffer.id == b.buffer_id ||
                (s > 0 && v.buffer.id == stage_buf[b.buffer_id][static_cast<std::size_t>(s)].id)) {
              stage_prod[b.buffer_id].resize(static_cast<std::size_t>(depth), nullptr);
              stage_prod[b.buffer_id][static_cast<std::size_t>(s)] = raw;
            }
          for (const auto &v : es.reads)
            if (v.buffer.id == b.buffer_id ||
                (s > 0 && v.buffer.id == stage_buf[b.buffer_id][static_cast<std::size_t>(s)].id)) {
              stage_cons[b.buffer_id].resize(static_cast<std::size_t>(depth), nullptr);
              stage_cons[b.buffer_id][static_cast<std::size_t>(s)] = raw;
            }
        }
      }
    }

    // Token wiring: the four-token pattern per buffer (d+2 chains for
    // general depth).
    auto token_of = [](Operation *o) { return o->token(); };
    auto add_dep = [](Operation *o, Value t) {
      for (const auto &d : o->deps)
        if (d.id == t.id)
          return;
      o->deps.push_back(t);
    };
    auto yield = make_op(OpKind::ScfYield);
    for (const auto &b : cand.bufs) {
      auto &prods = stage_prod[b.buffer_id];
      auto &conss = stage_cons[b.buffer_id];
      auto &data = data_chains[b.buffer_id];
      for (int s = 0; s < depth; ++s) {
        Operation *P = prods[static_cast<std::size_t>(s)];
        Operation *C = conss[static_cast<std::size_t>(s)];
        // data chain: producer waits for last iteration's consumer (WAR)
        add_dep(P, data[static_cast<std::size_t>(s)].arg);
        add_dep(C, token_of(P)); // RAW within the stage
        data[static_cast<std::size_t>(s)].yielded = token_of(C);
        // producer-side contention
        if (s == 0)
          add_dep(P, prod_chain[b.buffer_id].arg);
        else
          add_dep(P, token_of(prods[static_cast<std::size_t>(s - 1)]));
        // consumer-side contention
        if (s == 0)
          add_dep(C, cons_chain[b.buffer_id].arg);
        else
          add_dep(C, token_of(conss[static_cast<std::size_t>(s - 1)]));
      }
      prod_chain[b.buffer_id].yielded = token_of(prods[static_cast<std::size_t>(depth - 1)]);
      cons_chain[b.buffer_id].yielded = token_of(conss[static_cast<std::size_t>(depth - 1)]);
      for (int s = 0; s < depth; ++s)
        yield->operands.push_back(data[static_cast<std::size_t>(s)].yielded);
      yield->operands.push_back(prod_chain[b.buffer_id].yielded);
      yield->operands.push_back(cons_chain[b.buffer_id].yielded);
    }
    nb.ops.push_back(std::move(yield));

    // Old results remap: a wait_all over all new results.
    std::vector<Value> old_res = loop.results;
    auto join = make_op(OpKind::WaitAll);
    join->is_async = true;
    join->deps = nl->results;
    std::map<int, Value> res_remap;
    if (!old_res.empty()) {
      // reuse the first old result id so downstream deps survive
      join->results.push_back(old_res[0]);
      for (std::size_t i = 1; i < old_res.size(); ++i)
        res_remap[old_res[i].id] = old_res[0];
    } else {
      join->results.push_back(out.new_value(Type::token()));
    }

    // Positions shifted while buffers were duplicated: locate the loop now.
    std::size_t at = cand.host->ops.size();
    for (std::size_t i2 = 0; i2 < cand.host->ops.size(); ++i2)
      if (cand.host->ops[i2].get() == cand.loop) {
        at = i2;
        break;
      }
    cand.host->ops[at] = std::move(nl);
    cand.host->ops.insert(cand.host->ops.begin() + static_cast<std::ptrdiff_t>(at + 1),
                          std::move(join));
    for (std::size_t i2 = 0; i2 < chain_inits.size(); ++i2)
      cand.host->ops.insert(cand.host->ops.begin() +
                                static_cast<std::ptrdiff_t>(at + i2),
                            std::move(chain_inits[i2]));
    if (!res_remap.empty())
      for (auto &slot : cand.host->ops)
        remap_uses(*slot, res_remap, true);
  }

  drop_unused_glue(*func);
  return out;
}

// ---------------------------------------------------------------------------
// merge-channels

namespace {

struct ChannelSide {
  std::vector<Operation *> ops;          // put or get ops of the symbol
  Operation *loop = nullptr;             // innermost enclosing scf.for
  Region *host = nullptr;                // region containing that loop
  std::vector<std::int64_t> domain;      // (lb, ub, step) chain + parallel extents
};

// Innermost loop and iteration-domain signature of an op.
ChannelSide side_of(Operation *func, Operation *target) {
  ChannelSide s;
  std::function<bool(Region &, std::vector<Operation *> &)> path =
      [&](Region &r, std::vector<Operation *> &stack) {
        for (auto &op : r.ops) {
          if (op.get() == target)
            return true;
          for (auto &reg : op->regions) {
            stack.push_back(op.get());
            if (path(reg, stack))
              return true;
            stack.pop_back();
          }
        }
        return false;
      };
  std::vector<Operation *> stack;
  if (!path(func->regions[0], stack))
    return s;
  s.ops.push_back(target);
  for (Operation *op : stack) {
    if (op->kind == OpKind::ScfFor) {
      s.loop = op;
      s.domain.push_back(op->lb);
      s.domain.push_back(op->ub);
      s.domain.push_back(op->step);
    } else if (op->kind == OpKind::ScfParallel || op->kind == OpKind::Herd) {
      for (auto e : op->extents)
        s.domain.push_back(e);
    }
  }
  // host region of the innermost loop
  if (s.loop) {
    std::function<Region *(Region &)> find_host = [&](Region &r) -> Region * {
      for (auto &op : r.ops) {
        if (op.get() == s.loop)
          return &r;
        for (auto &reg : op->regions)
          if (Region *h = find_host(reg))
            return h;
      }
      return nullptr;
    };
    s.host = find_host(func->regions[0]);
  }
  return s;
}

bool touches_space(const Program &p, const std::string &sym, MemorySpace space) {
  bool hit = false;
  walk(*p.module, [&](const Operation &op) {
    if ((op.kind == OpKind::ChannelPut || op.kind == OpKind::ChannelGet) &&
        op.symbol == sym && !op.views.empty() &&
        op.views[0].buffer.type.memref.space == space)
      hit = true;
  });
  return hit;
}

// Which endpoint kind a channel has at the given space: +1 put, -1 get,
// 0 none/mixed. Only put/put and get/get pairs merge.
int space_side_kind(const Program &p, const std::string &sym, MemorySpace space) {
  int kind = 0;
  bool mixed = false;
  walk(*p.module, [&](const Operation &op) {
    if ((op.kind != OpKind::ChannelPut && op.kind != OpKind::ChannelGet) ||
        op.symbol != sym || op.views.empty() ||
        op.views[0].buffer.type.memref.space != space)
      return;
    int k = op.kind == OpKind::ChannelPut ? 1 : -1;
    if (kind != 0 && kind != k)
      mixed = true;
    kind = k;
  });
  return mixed ? 0 : kind;
}

} // namespace

Program merge_channels(const Program &p, MemorySpace space) {
  Program out = p.clone();
  Operation *func = single_func(out);

  bool merged_any = true;
  while (merged_any) {
    merged_any = false;
    // Channels at the requested space, in declaration order.
    std::vector<std::string> syms;
    for (const auto &op : out.body().ops)
      if (op->kind == OpKind::ChannelDecl && touches_space(out, op->symbol, space))
        syms.push_back(op->symbol);
    if (syms.size() < 2)
      break;

    for (std::size_t a = 0; a < syms.size() && !merged_any; ++a) {
      for (std::size_t b = a + 1; b < syms.size() && !merged_any; ++b) {
        // Gather each channel's puts/gets.
        std::vector<Operation *> puts_a, gets_a, puts_b, gets_b;
        walk(*func, [&](Operation &op) {
          if (op.kind == OpKind::ChannelPut && op.symbol == syms[a])
            puts_a.push_back(&op);
          if (op.kind == OpKind::ChannelGet && op.symbol == syms[a])
            gets_a.push_back(&op);
          if (op.kind == OpKind::ChannelPut && op.symbol == syms[b])
            puts_b.push_back(&op);
          if (op.kind == OpKind::ChannelGet && op.symbol == syms[b])
            gets_b.push_back(&op);
        });
        if (puts_a.size() != 1 || gets_a.size() != 1 || puts_b.size() != 1 ||
            gets_b.size() != 1)
          continue;
        ChannelSide pa = side_of(func, puts_a[0]);
        ChannelSide pb = side_of(func, puts_b[0]);
        ChannelSide ga = side_of(func, gets_a[0]);
        ChannelSide gb = side_of(func, gets_b[0]);
        if (pa.domain != pb.domain || ga.domain != gb.domain)
          continue; // iteration domains must match
        int ka = space_side_kind(out, syms[a], space);
        int kb = space_side_kind(out, syms[b], space);
        if (ka == 0 || ka != kb)
          continue; // only put/put and get/get pairs at the space merge
        // Broadcast-annotated puts keep their own channel.
        if (puts_a[0]->has_attr("broadcast") || puts_b[0]->has_attr("broadcast"))
          continue;

        // Relocate b's ops next to a's when they live in different loops.
        auto relocate = [&](Operation *src_op, ChannelSide &from, ChannelSide &to) {
          if (!from.loop || !to.loop || from.loop == to.loop)
            return true;
          // Move the op (plus its index slice) after the `to`-side op of a.
          Region &fb = from.loop->regions[0];
          Region &tb = to.loop->regions[0];
          std::map<int, Value> vmap;
          if (!fb.args.empty() && !tb.args.empty())
            vmap[fb.args[0].id] = tb.args[0];
          std::vector<Value> needed;
          auto need = [&](const std::vector<IndexExpr> &l) {
            for (const auto &e : l)
              if (!e.is_literal())
                needed.push_back(e.value);
          };
          need(src_op->views[0].offsets);
          need(src_op->views[0].sizes);
          need(src_op->views[0].strides);
          need(src_op->bundle_index);
          auto slice = index_slice(fb, needed);
          std::vector<std::unique_ptr<Operation>> moved;
          for (const auto *o : slice)
            moved.push_back(clone_remap(*o, out, vmap));
          auto cl = clone_remap(*src_op, out, vmap);
          cl->deps.clear(); // re-threaded below
          moved.push_back(std::move(cl));
          // insert after the matching op of `to`
          Operation *anchor = to.ops[0];
          for (std::size_t i = 0; i < tb.ops.size(); ++i)
            if (tb.ops[i].get() == anchor) {
              for (std::size_t k = 0; k < moved.size(); ++k)
                tb.ops.insert(tb.ops.begin() +
                                  static_cast<std::ptrdiff_t>(i + 1 + k),
                              std::move(moved[k]));
              break;
            }
          // delete the original op from its loop
          fb.ops.erase(std::remove_if(fb.ops.begin(), fb.ops.end(),
                                      [&](const std::unique_ptr<Operation> &o) {
                                        return o.get() == src_op;
                                      }),
                       fb.ops.end());
          return true;
        };
        relocate(puts_b[0], pb, pa);
        relocate(gets_b[0], gb, ga);

        // Rename channel b -> a everywhere; drop b's declaration.
        walk(*func, [&](Operation &op) {
          if ((op.kind == OpKind::ChannelPut || op.kind == OpKind::ChannelGet) &&
              op.symbol == syms[b])
            op.symbol = syms[a];
        });
        auto &mops = out.body().ops;
        mops.erase(std::remove_if(mops.begin(), mops.end(),
                                  [&](const std::unique_ptr<Operation> &op) {
                                    return op->kind == OpKind::ChannelDecl &&
                                           op->symbol == syms[b];
                                  }),
                   mops.end());

        // Re-thread every loop that hosts the merged ops.
        auto rethread_loop = [&](Operation *loop, Region *host) {
          if (!loop || !host)
            return;
          for (auto &slot : host->ops) {
            if (slot.get() != loop)
              continue;
            std::map<int, Value> res_remap;
            std::vector<Value> old = strip_loop_tokens(*slot);
            std::vector<std::unique_ptr<Operation>> tmp;
            thread_loop_tokens(out, tmp, std::move(slot));
            Value fresh = tmp.back()->results.empty() ? Value{}
                                                      : tmp.back()->results[0];
            for (const auto &o : old)
              if (fresh.valid())
                res_remap[o.id] = fresh;
            std::vector<std::unique_ptr<Operation>> rebuilt;
            for (auto &s : host->ops) {
              if (!s) {
                for (auto &tp : tmp)
                  rebuilt.push_back(std::move(tp));
                tmp.clear();
              } else {
                rebuilt.push_back(std::move(s));
              }
            }
            host->ops = std::move(rebuilt);
            if (!res_remap.empty())
              for (auto &s : host->ops)
                remap_uses(*s, res_remap, true);
            break;
          }
        };
        rethread_loop(pa.loop, pa.host);
        if (ga.loop != pa.loop)
          rethread_loop(ga.loop, ga.host);
        // Empty leftover loops from relocation get dropped.
        std::function<void(Region &)> prune = [&](Region &r) {
          for (auto &op : r.ops)
            for (auto &reg : op->regions)
              prune(reg);
          r.ops.erase(std::remove_if(r.ops.begin(), r.ops.end(),
                                     [&](const std::unique_ptr<Operation> &op) {
                                       if (op->kind != OpKind::ScfFor)
                                         return false;
                                       for (const auto &o : op->regions[0].ops)
                                         if (o->kind != OpKind::ScfYield &&
                                             !(o->kind == OpKind::AffineApply ||
                                               o->kind == OpKind::ArithConst))
                                           return false;
                                       return true;
                                     }),
                     r.ops.end());
        };
        prune(func->regions[0]);
        merged_any = true;
      }
    }
  }

  drop_unused_glue(*func);
  return out;
}

// ---------------------------------------------------------------------------
// split-memrefs

Program split_memrefs(const Program &p, MemorySpace space) {
  Program out = p.clone();
  Operation *func = single_func(out);

  // Find a splittable buffer: one get-producer filling rows in order, one
  // parallel-wrapped put-consumer reading interleaved classes.
  struct Site {
    Operation *alloc = nullptr;
    Operation *dealloc = nullptr;
    Operation *producer = nullptr; // channel get writing the buffer
    Operation *consumer = nullptr; // channel put reading the buffer
  };
  std::vector<Site> sites;
  walk(*func, [&](Operation &op) {
    if (op.kind != OpKind::Alloc || op.alloc_type.space != space)
      return;
    Site s;
    s.alloc = &op;
    int buf = op.results[0].id;
    walk(*func, [&](Operation &o) {
      if (o.kind == OpKind::Dealloc && o.buffer.id == buf)
        s.dealloc = &o;
      if (o.kind == OpKind::ChannelGet && o.views[0].buffer.id == buf)
        s.producer = s.producer ? s.producer : &o;
      if (o.kind == OpKind::ChannelPut && o.views[0].buffer.id == buf)
        s.consumer = s.consumer ? s.consumer : &o;
    });
    if (s.producer && s.consumer)
      sites.push_back(s);
  });

  bool changed = false;
  for (auto &site : sites) {
    // Consumer context: scf.for (dense index) under an scf.parallel whose
    // last extent >= 2 supplies the class coordinate.
    ChannelSide cons = side_of(func, site.consumer);
    if (!cons.loop)
      continue;
    Operation *par = nullptr;
    walk(*func, [&](Operation &op) {
      if (op.kind != OpKind::ScfParallel && op.kind != OpKind::Herd)
        return;
      walk(op, [&](Operation &o) {
        if (&o == site.consumer && !par)
          par = &op;
      });
    });
    if (!par || par->extents.size() != 2)
      continue;
    int parts = static_cast<int>(par->extents[1]);
    if (parts < 2)
      continue;
    std::int64_t rows = site.alloc->alloc_type.shape[0];
    if (rows % parts != 0)
      continue;

    // Combined access map over the flattened read sequence.
    const BufferView &cv = site.consumer->views[0];
    if (cv.whole() || cv.offsets.empty() || cv.offsets[0].is_literal())
      continue;
    std::map<int, int> dim_ids;
    dim_ids[cons.loop->regions[0].args[0].id] = 0; // u
    dim_ids[par->regions[0].args[1].id] = 1;       // class coordinate
    AffineExpr g = index_value_to_affine(func->regions[0], cv.offsets[0].value, dim_ids);
    AffineExpr m = simplify(substitute(
        g, {AffineExprNode::floordiv(AffineExprNode::dim(0), parts),
            AffineExprNode::mod(AffineExprNode::dim(0), parts)}));
    AffineMap comb;
    comb.num_dims = 1;
    comb.results.push_back(m);
    auto class_maps = split_access_map(comb, rows, parts); // throws NotSplittable

    changed = true;
    std::int64_t per = rows / parts;

    // Sub-buffers.
    std::vector<Value> subs;
    {
      Region *host = nullptr;
      std::size_t pos = 0;
      std::function<bool(Region &)> find = [&](Region &r) {
        for (std::size_t i = 0; i < r.ops.size(); ++i) {
          if (r.ops[i].get() == site.alloc) {
            host = &r;
            pos = i;
            return true;
          }
          for (auto &reg : r.ops[i]->regions)
            if (find(reg))
              return true;
        }
        return false;
      };
      find(func->regions[0]);
      for (int k = 0; k < parts; ++k) {
        auto al = make_op(OpKind::Alloc);
        al->alloc_type = site.alloc->alloc_type;
        al->alloc_type.shape[0] = per;
        al->is_async = site.alloc->is_async;
        Value bv = out.new_value(Type::memref_of(al->alloc_type));
        al->results.push_back(bv);
        if (al->is_async)
          al->results.push_back(k == 0 && site.alloc->token().valid()
                                    ? site.alloc->token()
                                    : out.new_value(Type::token()));
        subs.push_back(bv);
        host->ops.insert(host->ops.begin() + static_cast<std::ptrdiff_t>(pos + 1 +
                                                                         static_cast<std::size_t>(k)),
                         std::move(al));
      }
      if (site.dealloc) {
        // replace dealloc of the old buffer with per-part deallocs
        std::function<bool(Region &)> findd = [&](Region &r) {
          for (std::size_t i = 0; i < r.ops.size(); ++i) {
            if (r.ops[i].get() == site.dealloc) {
              std::vector<std::unique_ptr<Operation>> repl;
              for (int k = 0; k < parts; ++k) {
                auto dd = make_op(OpKind::Dealloc);
                dd->buffer = subs[static_cast<std::size_t>(k)];
                dd->is_async = site.dealloc->is_async;
                dd->deps = site.dealloc->deps;
                if (dd->is_async)
                  dd->results.push_back(k == 0 && site.dealloc->token().valid()
                                            ? site.dealloc->token()
                                            : out.new_value(Type::token()));
                repl.push_back(std::move(dd));
              }
              r.ops.erase(r.ops.begin() + static_cast<std::ptrdiff_t>(i));
              for (std::size_t k2 = 0; k2 < repl.size(); ++k2)
                r.ops.insert(r.ops.begin() + static_cast<std::ptrdiff_t>(i + k2),
                             std::move(repl[k2]));
              return true;
            }
            for (auto &reg : r.ops[i]->regions)
              if (findd(reg))
                return true;
          }
          return false;
        };
        findd(func->regions[0]);
      }
    }

    // Channel split: one channel per class on the producer's symbol.
    std::string fill_sym = site.producer->symbol;
    const Operation *fill_decl = out.find_channel(fill_sym);
    std::vector<std::string> fill_syms;
    {
      std::size_t at = 0;
      auto &mops = out.body().ops;
      for (std::size_t i = 0; i < mops.size(); ++i)
        if (mops[i]->kind == OpKind::ChannelDecl && mops[i]->symbol == fill_sym)
          at = i;
      for (int k = 0; k < parts; ++k) {
        auto decl = make_op(OpKind::ChannelDecl);
        decl->symbol = fill_sym + "_" + std::to_string(k);
        decl->extents = fill_decl->extents;
        fill_syms.push_back(decl->symbol);
        mops.insert(mops.begin() + static_cast<std::ptrdiff_t>(at + 1 +
                                                               static_cast<std::size_t>(k)),
                    std::move(decl));
      }
      mops.erase(std::remove_if(mops.begin(), mops.end(),
                                [&](const std::unique_ptr<Operation> &op) {
                                  return op->kind == OpKind::ChannelDecl &&
                                         op->symbol == fill_sym;
                                }),
                 mops.end());
    }

    // Rewrite the producer loop and the matching L3-side put loop: iterate
    // the dense index and emit one transfer per class.
    Operation *l3_put = nullptr;
    walk(*func, [&](Operation &op) {
      if (op.kind == OpKind::ChannelPut && op.symbol == fill_sym && &op != site.consumer)
        l3_put = &op;
    });
    auto rewrite_fill = [&](Operation *op, bool is_producer) {
      ChannelSide sd = side_of(func, op);
      if (!sd.loop)
        throw Error("NotSplittable", "fill side is not loop-shaped");
      Operation &loop = *sd.loop;
      std::vector<Value> old_results = strip_loop_tokens(loop);
      Region &body = loop.regions[0];
      Value iv = body.args[0];
      std::int64_t trips = (loop.ub - loop.lb) / loop.step;
      if (trips != rows)
        throw Error("NotSplittable", "fill loop does not cover the buffer rows");
      loop.ub = loop.lb + per * loop.step;

      std::vector<std::unique_ptr<Operation>> nops;
      for (int k = 0; k < parts; ++k) {
        // original row for class k at dense j: f_k(j)
        auto ap = make_op(OpKind::AffineApply);
        AffineMap fm;
        fm.num_dims = 1;
        fm.results.push_back(class_maps[static_cast<std::size_t>(k)].results[0]);
        ap->map = fm;
        ap->apply_dims = {iv};
        Value row = out.new_value(Type::index());
        ap->results.push_back(row);

        std::map<int, Value> vmap;
        vmap[iv.id] = row; // original body indexed rows by iv
        // clone slice + the channel op
        std::vector<Value> needed;
        auto need = [&](const std::vector<IndexExpr> &l) {
          for (const auto &e : l)
            if (!e.is_literal())
              needed.push_back(e.value);
        };
        need(op->views[0].offsets);
        auto slice = index_slice(body, needed);
        nops.push_back(std::move(ap));
        for (const auto *o : slice)
          if (o != op)
            nops.push_back(clone_remap(*o, out, vmap));
        auto cl = clone_remap(*op, out, vmap);
        cl->symbol = fill_syms[static_cast<std::size_t>(k)];
        cl->deps.clear();
        if (is_producer) {
          // dst view: sub-buffer row j
          BufferView v;
          v.buffer = subs[static_cast<std::size_t>(k)];
          v.offsets = cl->views[0].offsets;
          v.sizes = cl->views[0].sizes;
          v.strides = cl->views[0].strides;
          if (!v.offsets.empty())
            v.offsets[0] = IndexExpr(iv);
          cl->views[0] = v;
        }
        nops.push_back(std::move(cl));
      }
      body.ops.clear();
      for (auto &o : nops)
        body.ops.push_back(std::move(o));
      // Old loop deps may reference the removed alloc token; drop stale ones
      // and gate on the sub-buffer definitions instead.
      loop.deps.clear();
      if (is_producer)
        for (int k = 0; k < parts; ++k) {
          // token result of the k-th sub alloc, if async
          const Operation *sub_alloc = find_def(func->regions[0], subs[static_cast<std::size_t>(k)].id);
          if (sub_alloc && sub_alloc->is_async && sub_alloc->token().valid())
            loop.deps.push_back(sub_alloc->token());
        }
      // re-thread the rewritten loop
      if (!sd.host)
        return;
      for (auto &slot : sd.host->ops) {
        if (slot.get() != &loop)
          continue;
        std::vector<Value> olds = strip_loop_tokens(*slot);
        (void)olds;
        std::vector<std::unique_ptr<Operation>> tmp;
        Operation *fresh_loop = nullptr;
        thread_loop_tokens(out, tmp, std::move(slot));
        fresh_loop = tmp.back().get();
        std::vector<std::unique_ptr<Operation>> rebuilt;
        for (auto &s : sd.host->ops) {
          if (!s) {
            for (auto &tp : tmp)
              rebuilt.push_back(std::move(tp));
            tmp.clear();
          } else {
            rebuilt.push_back(std::move(s));
          }
        }
        sd.host->ops = std::move(rebuilt);
        // Remap downstream uses of the stripped results.
        if (!old_results.empty() && fresh_loop && !fresh_loop->results.empty()) {
          std::map<int, Value> rr;
          for (const auto &o : old_results)
            rr[o.id] = fresh_loop->results[0];
          for (auto &fo : func->regions[0].ops)
            remap_uses(*fo, rr, true);
        }
        break;
      }
    };
    rewrite_fill(site.producer, true);
    if (l3_put)
      rewrite_fill(l3_put, false);

    // Consumer: one parallel clone per class with the coordinate pinned.
    {
      Region *host = nullptr;
      std::size_t pos = 0;
      std::function<bool(Region &)> find = [&](Region &r) {
        for (std::size_t i = 0; i < r.ops.size(); ++i) {
          if (r.ops[i].get() == par) {
            host = &r;
            pos = i;
            return true;
          }
          for (auto &reg : r.ops[i]->regions)
            if (find(reg))
              return true;
        }
        return false;
      };
      find(func->regions[0]);
      std::vector<std::unique_ptr<Operation>> clones;
      for (int k = 0; k < parts; ++k) {
        std::map<int, Value> vmap;
        auto cl = clone_remap(*par, out, vmap);
        cl->extents[1] = 1;
        // pin the class coordinate inside the clone
        auto cst = make_op(OpKind::ArithConst);
        cst->const_value = k;
        cst->const_type = Type::index();
        Value kv = out.new_value(Type::index());
        cst->results.push_back(kv);
        std::map<int, Value> pin;
        pin[cl->regions[0].args[1].id] = kv;
        for (auto &o : cl->regions[0].ops)
          remap_uses(*o, pin, true);
        cl->regions[0].ops.insert(cl->regions[0].ops.begin(), std::move(cst));
        // retarget the consumer put inside the clone
        walk(*cl, [&](Operation &o) {
          if (o.kind != OpKind::ChannelPut || o.symbol != site.consumer->symbol)
            return;
          o.views[0].buffer = subs[static_cast<std::size_t>(k)];
          // dense row index: the innermost loop iv (inside the clone when
          // present, otherwise the shared loop around it)
          bool rewrote = false;
          walk(*cl, [&](Operation &lp) {
            if (lp.kind == OpKind::ScfFor && !lp.regions[0].ops.empty()) {
              bool contains = false;
              walk(lp, [&](Operation &x) { contains |= &x == &o; });
              if (contains && !o.views[0].offsets.empty()) {
                o.views[0].offsets[0] = IndexExpr(lp.regions[0].args[0]);
                rewrote = true;
              }
            }
          });
          if (!rewrote && cons.loop && !o.views[0].offsets.empty())
            o.views[0].offsets[0] = IndexExpr(cons.loop->regions[0].args[0]);
          // bundle index: pin the class coordinate
          if (o.bundle_index.size() == 2)
            o.bundle_index[1] = IndexExpr(static_cast<std::int64_t>(k));
        });
        clones.push_back(std::move(cl));
      }
      host->ops.erase(host->ops.begin() + static_cast<std::ptrdiff_t>(pos));
      for (std::size_t k = 0; k < clones.size(); ++k)
        host->ops.insert(host->ops.begin() + static_cast<std::ptrdiff_t>(pos + k),
                         std::move(clones[k]));
    }

    // Old alloc removed.
    std::function<void(Region &)> rmalloc = [&](Region &r) {
      for (auto &op : r.ops)
        for (auto &reg : op->regions)
          rmalloc(reg);
      r.ops.erase(std::remove_if(r.ops.begin(), r.ops.end(),
                                 [&](const std::unique_ptr<Operation> &op) {
                                   return op.get() == site.alloc;
                                 }),
                  r.ops.end());
    };
    rmalloc(func->regions[0]);
    break; // one site per invocation keeps the pass predictable
  }

  (void)changed;
  drop_unused_glue(*func);
  return out;
}

// ---------------------------------------------------------------------------
// pipeline driver

PipelineSpec PipelineSpec::parse(const std::string &text) {
  static const std::set<std::string> known = {
      "map-hierarchy",  "build-acdg", "split-nests",   "decouple-memcpy",
      "detect-broadcast", "pingpong", "merge-channels", "split-memrefs"};
  PipelineSpec spec;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t j = i;
    while (j < text.size() && text[j] != ',' && text[j] != '{')
      ++j;
    Pass pass;
    pass.name = text.substr(i, j - i);
    // trim
    while (!pass.name.empty() && std::isspace(static_cast<unsigned char>(pass.name.front())))
      pass.name.erase(pass.name.begin());
    while (!pass.name.empty() && std::isspace(static_cast<unsigned char>(pass.name.back())))
      pass.name.pop_back();
    if (j < text.size() && text[j] == '{') {
      std::size_t close = text.find('}', j);
      if (close == std::string::npos)
        throw Error("UnknownPass", "unterminated pass options in pipeline");
      std::string opts = text.substr(j + 1, close - j - 1);
      std::size_t k = 0;
      while (k < opts.size()) {
        std::size_t e = opts.find(',', k);
        if (e == std::string::npos)
          e = opts.size();
        std::string kv = opts.substr(k, e - k);
        auto eq = kv.find('=');
        if (eq != std::string::npos)
          pass.options[kv.substr(0, eq)] = kv.substr(eq + 1);
        k = e + 1;
      }
      j = close + 1;
    }
    if (!pass.name.empty()) {
      if (!known.count(pass.name))
        throw Error("UnknownPass", "unknown pass '" + pass.name + "' in pipeline");
      spec.passes.push_back(std::move(pass));
    }
    i = j < text.size() && text[j] == ',' ? j + 1 : j;
  }
  return spec;
}

namespace {

MemorySpace parse_space_opt(const std::map<std::string, std::string> &opts) {
  auto it = opts.find("space");
  if (it == opts.end() || it->second == "L2")
    return MemorySpace::L2;
  if (it->second == "L1")
    return MemorySpace::L1;
  if (it->second == "L3")
    return MemorySpace::L3;
  throw Error("UnknownPass", "bad space option: " + it->second);
}

std::int64_t opt_int(const std::map<std::string, std::string> &opts,
                     const std::string &key, std::int64_t dflt) {
  auto it = opts.find(key);
  return it == opts.end() ? dflt : std::stoll(it->second);
}

} // namespace

Program run_pipeline(const Program &p, const PipelineSpec &spec,
                     const std::function<void(const std::string &, const Program &)>
                         &after_each) {
  Program cur = p.clone();
  int position = 0;
  for (const auto &pass : spec.passes) {
    ++position;
    try {
      if (pass.name == "map-hierarchy") {
        TileSpec t;
        t.t_i = opt_int(pass.options, "t_i", 64);
        t.t_j = opt_int(pass.options, "t_j", 64);
        t.t_k = opt_int(pass.options, "t_k", 64);
        t.herd_rows = opt_int(pass.options, "herd_rows", 1);
        t.herd_cols = opt_int(pass.options, "herd_cols", 1);
        cur = map_hierarchy(cur, t);
      } else if (pass.name == "build-acdg") {
        cur = build_acdg(cur).first;
      } else if (pass.name == "split-nests") {
        AsyncGraph g = graph_from_tokens(cur);
        cur = split_loop_nests(cur, g);
      } else if (pass.name == "decouple-memcpy") {
        cur = decouple_memcpy(cur);
      } else if (pass.name == "detect-broadcast") {
        cur = detect_broadcast(cur);
      } else if (pass.name == "pingpong") {
        cur = pingpong(cur, static_cast<int>(opt_int(pass.options, "depth", 2)));
      } else if (pass.name == "merge-channels") {
        cur = merge_channels(cur, parse_space_opt(pass.options));
      } else if (pass.name == "split-memrefs") {
        cur = split_memrefs(cur, parse_space_opt(pass.options));
      } else {
        throw Error("UnknownPass", "unknown pass " + pass.name);
      }
    } catch (const Error &e) {
      throw Error(e.code(), "pipeline position " + std::to_string(position) + " (" +
                                pass.name + "): " + e.what());
    }
    auto diags = verify_program(cur);
    if (!diags.empty()) {
      std::ostringstream os;
      os << "pipeline position " << position << " (" << pass.name
         << ") produced invalid IR: " << diags[0].str();
      throw Error("VerifyFailed", os.str());
    }
    if (after_each)
      after_each(pass.name, cur);
  }
  return cur;
}

} // namespace air
