#include "air/acdg.hpp"

#include "air/analysis.hpp"
#include "air/error.hpp"
#include "air/rewrite.hpp"

#include <algorithm>
#include <random>
#include <set>
#include <sstream>

namespace air {

std::string to_string(EdgeKind k) {
  switch (k) {
  case EdgeKind::RAW:
    return "RAW";
  case EdgeKind::WAR:
    return "WAR";
  case EdgeKind::WAW:
    return "WAW";
  case EdgeKind::LoopCarried:
    return "loop_carried";
  case EdgeKind::Structural:
    return "structural";
  }
  return "?";
}

bool AsyncGraph::has_edge(const Operation *a, const Operation *b) const {
  int ia = id_of(a), ib = id_of(b);
  for (const auto &e : edges)
    if (e.src == ia && e.dst == ib)
      return true;
  return false;
}

std::string AsyncGraph::to_dot() const {
  std::ostringstream os;
  os << "digraph acdg {\n";
  for (const auto &n : nodes)
    os << "  n" << n.id << " [label=\"" << op_name(n.op->kind)
       << (n.op->symbol.empty() ? "" : " @" + n.op->symbol) << " #" << n.id
       << "\"];\n";
  for (const auto &e : edges) {
    const char *style = "solid";
    const char *color = "black";
    switch (e.kind) {
    case EdgeKind::RAW:
      color = "black";
      break;
    case EdgeKind::WAR:
      color = "blue";
      break;
    case EdgeKind::WAW:
      color = "red";
      break;
    case EdgeKind::LoopCarried:
      style = "dashed";
      color = "darkgreen";
      break;
    case EdgeKind::Structural:
      style = "dotted";
      color = "gray";
      break;
    }
    os << "  n" << e.src << " -> n" << e.dst << " [color=" << color
       << " style=" << style << " label=\"" << to_string(e.kind) << "\"];\n";
  }
  os << "}\n";
  return os.str();
}

namespace {

bool is_effectful_leaf(const Operation &op) {
  switch (op.kind) {
  case OpKind::Memcpy:
  case OpKind::ChannelPut:
  case OpKind::ChannelGet:
  case OpKind::KernelCall:
  case OpKind::Alloc:
  case OpKind::Dealloc:
    return true;
  default:
    return false;
  }
}

bool is_scalar_op(const Operation &op) {
  switch (op.kind) {
  case OpKind::AffineApply:
  case OpKind::ArithConst:
  case OpKind::ArithAdd:
  case OpKind::ArithMul:
  case OpKind::Load:
  case OpKind::Store:
  case OpKind::ScfYield:
    return true;
  default:
    return false;
  }
}

// A compute block: an scf.for whose transitive body holds only scalar ops
// (inline loop bodies executed on a core).
bool is_compute_block(const Operation &op) {
  if (op.kind != OpKind::ScfFor)
    return false;
  bool pure = true;
  for (const auto &o : op.regions[0].ops) {
    if (is_scalar_op(*o))
      continue;
    if (is_compute_block(*o))
      continue;
    pure = false;
  }
  return pure;
}

// Buffer ids (plus channel pseudo-resources) an op touches.
struct Touch {
  std::set<int> reads, writes;
  std::set<std::string> chan_put, chan_get;

  bool intersects_raw(const Touch &later) const { // this writes, later reads
    for (int b : writes)
      if (later.reads.count(b))
        return true;
    for (const auto &c : chan_put)
      if (later.chan_get.count(c))
        return true;
    return false;
  }
  bool intersects_war(const Touch &later) const {
    for (int b : reads)
      if (later.writes.count(b))
        return true;
    for (const auto &c : chan_get)
      if (later.chan_put.count(c))
        return true;
    return false;
  }
  bool intersects_waw(const Touch &later) const {
    for (int b : writes)
      if (later.writes.count(b))
        return true;
    for (const auto &c : chan_put)
      if (later.chan_put.count(c))
        return true;
    for (const auto &c : chan_get)
      if (later.chan_get.count(c))
        return true; // gets on one channel stay ordered
    return false;
  }
  std::set<int> all_buffers() const {
    std::set<int> s = reads;
    s.insert(writes.begin(), writes.end());
    return s;
  }
};

class AcdgBuilder {
public:
  explicit AcdgBuilder(Program p) : program_(std::move(p)) {}

  std::pair<Program, AsyncGraph> run() {
    ranges_ = compute_index_ranges(*program_.module);
    for (auto &op : program_.body().ops)
      if (op->kind == OpKind::Func)
        process_region(op->regions[0]);
    build_graph();
    return {std::move(program_), std::move(graph_)};
  }

private:
  // --- effect summaries -----------------------------------------------------

  Touch touch_of(const Operation &op) {
    Touch t;
    EffectSet es = infer_effects(op, true);
    for (const auto &v : es.reads)
      t.reads.insert(v.buffer.id);
    for (const auto &v : es.writes)
      t.writes.insert(v.buffer.id);
    for (const auto &c : es.channels)
      (c.is_put ? t.chan_put : t.chan_get).insert(c.symbol);
    return t;
  }

  // Fine-grained may-overlap test between two ops' effects on shared buffers.
  bool views_overlap(const Operation &a, const Operation &b, bool a_writes,
                     bool b_writes) {
    EffectSet ea = infer_effects(a, true);
    EffectSet eb = infer_effects(b, true);
    const auto &va = a_writes ? ea.writes : ea.reads;
    const auto &vb = b_writes ? eb.writes : eb.reads;
    for (const auto &x : va)
      for (const auto &y : vb) {
        if (x.buffer.id != y.buffer.id)
          continue;
        Footprint fx = view_footprint(x, ranges_);
        Footprint fy = view_footprint(y, ranges_);
        if (footprints_may_overlap(fx, fy))
          return true;
      }
    // Channel backpressure is implicit in the shared symbol; it orders the
    // sequential realization (legal_schedules) but is not a token edge.
    return false;
  }

  // --- async conversion ------------------------------------------------------

  Value fresh_token() { return program_.new_value(Type::token()); }

  void make_async(Operation &op) {
    if (op.is_async)
      return;
    op.is_async = true;
    op.results.push_back(fresh_token());
  }

  // Processes a region bottom-up: first children, then token threading.
  void process_region(Region &r) {
    // Recurse.
    for (auto &op : r.ops) {
      if (op->regions.empty())
        continue;
      if (is_compute_block(*op))
        continue; // executed inline on a core; treated atomically
      if (op->kind == OpKind::ScfFor || op->kind == OpKind::ScfParallel ||
          op->kind == OpKind::Launch || op->kind == OpKind::Segment ||
          op->kind == OpKind::Herd)
        process_region(op->regions[0]);
    }

    // Asyncify leaves and compute blocks in this region.
    std::vector<std::unique_ptr<Operation>> out;
    for (auto &op : r.ops) {
      if (is_effectful_leaf(*op)) {
        make_async(*op);
        out.push_back(std::move(op));
      } else if (is_compute_block(*op)) {
        asyncify_compute_block(out, std::move(op));
      } else if (op->kind == OpKind::ScfFor) {
        asyncify_loop(out, std::move(op));
      } else if (op->kind == OpKind::ScfParallel) {
        asyncify_parallel(out, std::move(op));
      } else if (op->kind == OpKind::Launch || op->kind == OpKind::Segment ||
                 op->kind == OpKind::Herd) {
        make_async(*op);
        out.push_back(std::move(op));
      } else {
        out.push_back(std::move(op));
      }
    }
    r.ops = std::move(out);

    // Dependency lists within this region (program order pairs).
    fill_deps(r);
  }

  // Compute blocks chain across iterations through one carried token.
  void asyncify_compute_block(std::vector<std::unique_ptr<Operation>> &out,
                              std::unique_ptr<Operation> loop) {
    auto init = make_op(OpKind::WaitAll);
    init->is_async = true;
    Value t0 = fresh_token();
    init->results.push_back(t0);
    loop->iter_init.push_back(t0);
    Value iter = fresh_token();
    loop->regions[0].args.push_back(iter);

    auto body_done = make_op(OpKind::WaitAll);
    body_done->is_async = true;
    body_done->deps.push_back(iter);
    Value tb = fresh_token();
    body_done->results.push_back(tb);

    auto yield = make_op(OpKind::ScfYield);
    yield->operands.push_back(tb);
    loop->regions[0].ops.push_back(std::move(body_done));
    loop->regions[0].ops.push_back(std::move(yield));
    loop->results.push_back(fresh_token());

    out.push_back(std::move(init));
    out.push_back(std::move(loop));
  }

  // Loop-carried tokens, one per disjoint buffer group in the body. Units
  // are async leaf ops, compute blocks, parallels, or (nested loop, carried
  // token) pairs; units sharing any buffer or channel fall into one group.
  void asyncify_loop(std::vector<std::unique_ptr<Operation>> &out,
                     std::unique_ptr<Operation> loop) {
    Region &body = loop->regions[0];

    struct Unit {
      Operation *op = nullptr;
      int subgroup = -1; // >= 0: nested loop carried-token index
      Touch touch;
    };
    std::vector<Unit> units;
    for (auto &op : body.ops) {
      if (op->kind == OpKind::ScfFor && loop_group_count_.count(op.get()) &&
          loop_group_count_[op.get()] > 1) {
        // One unit per nested carried token.
        auto &groups = loop_groups_[op.get()];
        int n = loop_group_count_[op.get()];
        for (int g = 0; g < n; ++g) {
          Unit u;
          u.op = op.get();
          u.subgroup = g;
          for (auto &[member, gi] : groups)
            if (gi == g) {
              Touch tm = touch_of(*member);
              u.touch.reads.insert(tm.reads.begin(), tm.reads.end());
              u.touch.writes.insert(tm.writes.begin(), tm.writes.end());
              u.touch.chan_put.insert(tm.chan_put.begin(), tm.chan_put.end());
              u.touch.chan_get.insert(tm.chan_get.begin(), tm.chan_get.end());
            }
          units.push_back(std::move(u));
        }
        continue;
      }
      bool member = op->is_async || op->kind == OpKind::ScfFor ||
                    op->kind == OpKind::ScfParallel;
      if (!member)
        continue;
      Unit u;
      u.op = op.get();
      u.touch = touch_of(*op);
      if (op->kind == OpKind::WaitAll && u.touch.all_buffers().empty() &&
          u.touch.chan_put.empty() && u.touch.chan_get.empty())
        continue; // glue
      units.push_back(std::move(u));
    }
    if (units.empty()) {
      out.push_back(std::move(loop));
      return;
    }

    // Union-find over units sharing state.
    std::vector<int> parent(units.size());
    for (std::size_t i = 0; i < parent.size(); ++i)
      parent[i] = static_cast<int>(i);
    std::function<int(int)> find = [&](int x) {
      while (parent[static_cast<std::size_t>(x)] != x)
        x = parent[static_cast<std::size_t>(x)] =
            parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      return x;
    };
    auto unite = [&](int a, int b) { parent[static_cast<std::size_t>(find(a))] = find(b); };
    auto shares = [](const Touch &a, const Touch &b) {
      for (int x : a.reads)
        if (b.reads.count(x) || b.writes.count(x))
          return true;
      for (int x : a.writes)
        if (b.reads.count(x) || b.writes.count(x))
          return true;
      for (const auto &ch : a.chan_put)
        if (b.chan_put.count(ch) || b.chan_get.count(ch))
          return true;
      for (const auto &ch : a.chan_get)
        if (b.chan_put.count(ch) || b.chan_get.count(ch))
          return true;
      return false;
    };
    for (std::size_t i = 0; i < units.size(); ++i)
      for (std::size_t j = i + 1; j < units.size(); ++j)
        if (shares(units[i].touch, units[j].touch))
          unite(static_cast<int>(i), static_cast<int>(j));

    std::vector<int> group_roots;
    std::vector<int> unit_group(units.size());
    for (std::size_t i = 0; i < units.size(); ++i) {
      int root = find(static_cast<int>(i));
      auto it = std::find(group_roots.begin(), group_roots.end(), root);
      int gi;
      if (it == group_roots.end()) {
        group_roots.push_back(root);
        gi = static_cast<int>(group_roots.size()) - 1;
      } else {
        gi = static_cast<int>(it - group_roots.begin());
      }
      unit_group[i] = gi;
    }
    int ngroups = static_cast<int>(group_roots.size());

    std::map<Operation *, int> group_of;
    for (std::size_t i = 0; i < units.size(); ++i)
      if (units[i].subgroup < 0 || !group_of.count(units[i].op))
        group_of[units[i].op] = unit_group[i];
    loop_groups_[loop.get()] = group_of;
    loop_group_count_[loop.get()] = ngroups;

    // One init wait_all + iter arg + result per group.
    std::vector<Value> iter_args;
    for (int g = 0; g < ngroups; ++g) {
      auto init = make_op(OpKind::WaitAll);
      init->is_async = true;
      Value t0 = fresh_token();
      init->results.push_back(t0);
      out.push_back(std::move(init));
      loop->iter_init.push_back(t0);
      Value iter = fresh_token();
      loop->regions[0].args.push_back(iter);
      iter_args.push_back(iter);
      loop->results.push_back(fresh_token());
    }

    // Token of a unit: leaf token, or the nested loop's g-th token result.
    auto unit_token = [&](const Unit &u) -> Value {
      if (u.subgroup >= 0)
        return loop_result_token(*u.op, u.subgroup);
      Value t = u.op->token();
      return t.valid() ? t : loop_result_token(*u.op, 0);
    };
    // Wire the iter token into a unit's chain start.
    auto gate_unit = [&](const Unit &u, const Value &tok) {
      if (u.subgroup < 0) {
        u.op->deps.push_back(tok);
        return;
      }
      // Nested loop subgroup: gate the matching init wait_all feeding its
      // iter_init slot; fall back to the loop op itself.
      Value init_tok = u.op->iter_init[static_cast<std::size_t>(u.subgroup)];
      for (auto &bo : body.ops)
        if (bo) {
          for (const auto &res : bo->results)
            if (res.id == init_tok.id) {
              bo->deps.push_back(tok);
              return;
            }
        }
      u.op->deps.push_back(tok);
    };

    std::vector<const Unit *> first(static_cast<std::size_t>(ngroups), nullptr);
    std::vector<const Unit *> last(static_cast<std::size_t>(ngroups), nullptr);
    for (std::size_t i = 0; i < units.size(); ++i) {
      auto g = static_cast<std::size_t>(unit_group[i]);
      if (!first[g])
        first[g] = &units[i];
      last[g] = &units[i];
    }
    auto yield = make_op(OpKind::ScfYield);
    for (int g = 0; g < ngroups; ++g) {
      gate_unit(*first[static_cast<std::size_t>(g)], iter_args[static_cast<std::size_t>(g)]);
      yield->operands.push_back(unit_token(*last[static_cast<std::size_t>(g)]));
      carried_pairs_.push_back({last[static_cast<std::size_t>(g)]->op,
                                first[static_cast<std::size_t>(g)]->op});
    }
    body.ops.push_back(std::move(yield));
    out.push_back(std::move(loop));
  }

  Value loop_result_token(const Operation &op, int group) {
    // Nested loops/parallels: use their (group-th) token result.
    for (const auto &res : op.results)
      if (res.type.kind == TypeKind::Token) {
        if (group == 0)
          return res;
        --group;
      }
    return {};
  }

  // scf.parallel: init token in, wait_all reduction at the body end.
  void asyncify_parallel(std::vector<std::unique_ptr<Operation>> &out,
                         std::unique_ptr<Operation> par) {
    auto init = make_op(OpKind::WaitAll);
    init->is_async = true;
    Value t0 = fresh_token();
    init->results.push_back(t0);
    out.push_back(std::move(init));
    par->iter_init.push_back(t0);
    Value init_arg = fresh_token();
    par->regions[0].args.push_back(init_arg);

    Region &body = par->regions[0];
    // Sinks: async body ops whose token no later body op consumes.
    std::set<int> consumed;
    for (const auto &op : body.ops) {
      for (const auto &d : op->deps)
        consumed.insert(d.id);
      for (const auto &v : op->iter_init)
        consumed.insert(v.id);
    }
    std::vector<Value> sinks;
    std::vector<Operation *> sink_ops;
    for (auto &op : body.ops) {
      for (const auto &res : op->results)
        if (res.type.kind == TypeKind::Token && !consumed.count(res.id)) {
          sinks.push_back(res);
          sink_ops.push_back(op.get());
        }
    }
    // Ops with no intra-body token deps start from the init token.
    for (auto &op : body.ops)
      if ((op->is_async || !op->iter_init.empty()) && op->deps.empty() &&
          op->iter_init.empty())
        op->deps.push_back(init_arg);

    auto barrier = make_op(OpKind::WaitAll);
    barrier->is_async = true;
    barrier->attrs["reduce"] = std::string("tree2");
    for (const auto &s : sinks)
      barrier->deps.push_back(s);
    if (sinks.empty())
      barrier->deps.push_back(init_arg);
    Value tb = fresh_token();
    barrier->results.push_back(tb);
    for (auto *s : sink_ops)
      barrier_edges_.push_back({s, nullptr}); // filled after placement
    Operation *barrier_ptr = barrier.get();
    body.ops.push_back(std::move(barrier));
    for (auto &be : barrier_edges_)
      if (!be.second)
        be.second = barrier_ptr;

    auto yield = make_op(OpKind::ScfYield);
    yield->operands.push_back(tb);
    body.ops.push_back(std::move(yield));
    par->results.push_back(fresh_token());
    out.push_back(std::move(par));
  }

  // Effect-intersection dependency lists for ordered sibling pairs.
  void fill_deps(Region &r) {
    std::vector<Operation *> sibs;
    for (auto &op : r.ops)
      if (op->is_async || !op->results.empty())
        sibs.push_back(op.get());
    for (std::size_t j = 0; j < sibs.size(); ++j) {
      for (std::size_t i = 0; i < j; ++i) {
        Operation &a = *sibs[i];
        Operation &b = *sibs[j];
        if (!has_token(a) || !has_token(b))
          continue;
        EdgeKind kind;
        bool dep = false;
        if (views_overlap(a, b, true, false)) {
          kind = EdgeKind::RAW;
          dep = true;
        } else if (views_overlap(a, b, false, true)) {
          kind = EdgeKind::WAR;
          dep = true;
        } else if (views_overlap(a, b, true, true)) {
          kind = EdgeKind::WAW;
          dep = true;
        } else if (b.kind == OpKind::Dealloc || a.kind == OpKind::Dealloc) {
          // A dealloc ends the buffer's lifetime: order it against every
          // other toucher, including read-read pairs.
          const Operation &de = b.kind == OpKind::Dealloc ? b : a;
          const Operation &other = b.kind == OpKind::Dealloc ? a : b;
          Touch t = touch_of(const_cast<Operation &>(other));
          if (t.reads.count(de.buffer.id) || t.writes.count(de.buffer.id)) {
            kind = EdgeKind::WAR;
            dep = true;
          }
        }
        if (!dep)
          continue;
        Value t = pick_token(a, b);
        if (!t.valid())
          continue;
        bool already = false;
        for (const auto &d : b.deps)
          already |= d.id == t.id;
        if (!already)
          b.deps.push_back(t);
        pending_edges_.push_back({&a, &b, kind});
      }
    }
  }

  bool has_token(const Operation &op) {
    for (const auto &res : op.results)
      if (res.type.kind == TypeKind::Token)
        return true;
    return false;
  }

  // Token of `a` guarding the buffers it shares with `b`: for multi-group
  // loops, the group result that intersects; otherwise the op token.
  Value pick_token(Operation &a, Operation &b) {
    auto git = loop_groups_.find(&a);
    if (git == loop_groups_.end())
      return a.token().valid() ? a.token() : loop_result_token(a, 0);
    Touch tb = touch_of(b);
    // Find intersecting group via member touches.
    int ngroups = loop_group_count_[&a];
    std::vector<bool> hits(static_cast<std::size_t>(ngroups), false);
    for (auto &[member, gi] : git->second) {
      Touch tm = touch_of(*member);
      bool share = false;
      for (int x : tm.all_buffers())
        share |= tb.reads.count(x) || tb.writes.count(x);
      for (const auto &c : tm.chan_put)
        share |= tb.chan_put.count(c) || tb.chan_get.count(c);
      for (const auto &c : tm.chan_get)
        share |= tb.chan_put.count(c) || tb.chan_get.count(c);
      if (share)
        hits[static_cast<std::size_t>(gi)] = true;
    }
    for (int g = 0; g < ngroups; ++g)
      if (hits[static_cast<std::size_t>(g)])
        return loop_result_token(a, g);
    return loop_result_token(a, 0);
  }

  // --- graph ------------------------------------------------------------------

  void build_graph() {
    walk(*program_.module, [&](const Operation &op) {
      if (op.is_async || op.kind == OpKind::ScfFor || op.kind == OpKind::ScfParallel) {
        int id = static_cast<int>(graph_.nodes.size());
        graph_.nodes.push_back({&op, id});
        graph_.node_of[&op] = id;
      }
    });
    for (const auto &[a, b, kind] : pending_edges_) {
      int ia = graph_.id_of(a), ib = graph_.id_of(b);
      if (ia >= 0 && ib >= 0)
        graph_.edges.push_back({ia, ib, kind});
    }
    for (const auto &[last, first] : carried_pairs_) {
      int ia = graph_.id_of(last), ib = graph_.id_of(first);
      if (ia >= 0 && ib >= 0 && ia != ib)
        graph_.edges.push_back({ia, ib, EdgeKind::LoopCarried});
    }
    for (const auto &[sink, barrier] : barrier_edges_) {
      int ia = graph_.id_of(sink), ib = graph_.id_of(barrier);
      if (ia >= 0 && ib >= 0)
        graph_.edges.push_back({ia, ib, EdgeKind::Structural});
    }
    // Region completion: body async sinks -> region op.
    walk(*program_.module, [&](const Operation &op) {
      if (op.kind != OpKind::Launch && op.kind != OpKind::Segment &&
          op.kind != OpKind::Herd)
        return;
      int parent = graph_.id_of(&op);
      if (parent < 0)
        return;
      std::set<int> consumed;
      for (const auto &o : op.regions[0].ops) {
        for (const auto &d : o->deps)
          consumed.insert(d.id);
        for (const auto &v : o->iter_init)
          consumed.insert(v.id);
      }
      for (const auto &o : op.regions[0].ops) {
        bool sink = false;
        for (const auto &res : o->results)
          if (res.type.kind == TypeKind::Token && !consumed.count(res.id))
            sink = true;
        int id = graph_.id_of(o.get());
        if (sink && id >= 0)
          graph_.edges.push_back({id, parent, EdgeKind::Structural});
      }
    });
  }

  struct PendingEdge {
    Operation *src;
    Operation *dst;
    EdgeKind kind;
  };

  Program program_;
  AsyncGraph graph_;
  std::map<int, Interval> ranges_;
  std::vector<PendingEdge> pending_edges_;
  std::vector<std::pair<Operation *, Operation *>> carried_pairs_;
  std::vector<std::pair<Operation *, Operation *>> barrier_edges_;
  std::map<Operation *, std::map<Operation *, int>> loop_groups_;
  std::map<Operation *, int> loop_group_count_;
};

} // namespace

std::pair<Program, AsyncGraph> build_acdg(const Program &p) {
  AcdgBuilder b(p.clone());
  return b.run();
}

AsyncGraph graph_from_tokens(const Program &p) {
  AsyncGraph g;
  walk(*p.module, [&](const Operation &op) {
    if (op.is_async || op.kind == OpKind::ScfFor || op.kind == OpKind::ScfParallel) {
      int id = static_cast<int>(g.nodes.size());
      g.nodes.push_back({&op, id});
      g.node_of[&op] = id;
    }
  });
  // token definition -> node
  std::map<int, int> def_node;
  for (const auto &n : g.nodes)
    for (const auto &res : n.op->results)
      if (res.type.kind == TypeKind::Token)
        def_node[res.id] = n.id;
  for (const auto &n : g.nodes)
    for (const auto &d : n.op->deps) {
      auto it = def_node.find(d.id);
      if (it != def_node.end())
        g.edges.push_back({it->second, n.id, EdgeKind::RAW});
    }
  return g;
}

namespace {

// Null-safe def lookup: during splitting some region slots are moved-from.
const Operation *find_def_in(const Operation &root, const Value &v) {
  for (const auto &res : root.results)
    if (res.id == v.id)
      return &root;
  for (const auto &r : root.regions)
    for (const auto &o : r.ops)
      if (o)
        if (const Operation *f = find_def_in(*o, v))
          return f;
  return nullptr;
}

} // namespace

Program split_loop_nests(const Program &p, const AsyncGraph &g) {
  (void)g;
  Program out = p.clone();
  bool changed = false;

  std::function<void(Region &)> visit = [&](Region &r) {
    // Children first so nested multi-token nests are already split.
    for (auto &op : r.ops)
      for (auto &reg : op->regions)
        visit(reg);

    for (std::size_t pos = 0; pos < r.ops.size(); ++pos) {
      Operation *op = r.ops[pos].get();
      if (op->kind != OpKind::ScfFor || op->iter_init.size() < 2)
        continue;
      Region &body = op->regions[0];
      std::size_t ngroups = op->iter_init.size();
      if (body.ops.empty() || body.ops.back()->kind != OpKind::ScfYield ||
          body.ops.back()->operands.size() != ngroups)
        continue;

      // Assign async body ops to groups by walking each yield operand's
      // backward token chain.
      std::map<const Operation *, std::size_t> group_of;
      std::map<int, const Operation *> def_op;
      for (const auto &o : body.ops)
        for (const auto &res : o->results)
          def_op[res.id] = o.get();
      bool conflict = false;
      std::function<void(int, std::size_t)> mark = [&](int token_id, std::size_t grp) {
        auto it = def_op.find(token_id);
        if (it == def_op.end())
          return;
        const Operation *o = it->second;
        int token_results = 0;
        for (const auto &res : o->results)
          token_results += res.type.kind == TypeKind::Token;
        if (token_results > 1) {
          conflict = true; // nested multi-token nest was not split
          return;
        }
        auto found = group_of.find(o);
        if (found != group_of.end()) {
          if (found->second != grp)
            conflict = true; // op feeds two chains: not splittable
          return;
        }
        group_of[o] = grp;
        for (const auto &d : o->deps)
          mark(d.id, grp);
        for (const auto &init : o->iter_init)
          mark(init.id, grp);
      };
      const auto &yield = *body.ops.back();
      for (std::size_t gi = 0; gi < ngroups; ++gi)
        mark(yield.operands[gi].id, gi);
      bool clean = !conflict;
      for (const auto &o : body.ops) {
        if (o->kind == OpKind::ScfYield)
          continue;
        bool is_member = o->is_async || o->kind == OpKind::ScfFor;
        if (is_member && !group_of.count(o.get()))
          clean = false; // op outside every chain: keep the nest fused
      }
      if (!clean)
        continue;

      changed = true;
      std::map<int, Value> result_remap;
      std::vector<std::unique_ptr<Operation>> nests;
      for (std::size_t gi = 0; gi < ngroups; ++gi) {
        auto nest = make_op(OpKind::ScfFor);
        nest->loc = op->loc;
        nest->lb = op->lb;
        nest->ub = op->ub;
        nest->step = op->step;
        nest->iter_init.push_back(op->iter_init[gi]);
        nest->regions.emplace_back();
        Region &nb = nest->regions[0];

        // Buffers this group touches, for dep filtering below.
        std::set<int> group_bufs;
        std::set<std::string> group_chans;
        for (const auto &o : body.ops) {
          auto git2 = group_of.find(o.get());
          if (git2 == group_of.end() || git2->second != gi)
            continue;
          EffectSet es = infer_effects(*o, true);
          for (const auto &v : es.reads)
            group_bufs.insert(v.buffer.id);
          for (const auto &v : es.writes)
            group_bufs.insert(v.buffer.id);
          for (const auto &ce : es.channels)
            group_chans.insert(ce.symbol);
        }
        for (const auto &d : op->deps) {
          const Operation *src = find_def_in(*out.module, d);
          if (!src) {
            nest->deps.push_back(d);
            continue;
          }
          EffectSet es = infer_effects(*src, true);
          bool related = false;
          for (const auto &v : es.reads)
            related |= group_bufs.count(v.buffer.id) != 0;
          for (const auto &v : es.writes)
            related |= group_bufs.count(v.buffer.id) != 0;
          for (const auto &ce : es.channels)
            related |= group_chans.count(ce.symbol) != 0;
          if (related)
            nest->deps.push_back(d);
        }

        // Keep group ops plus the index slice they need.
        std::vector<Value> needed;
        std::vector<const Operation *> kept;
        for (const auto &o : body.ops) {
          auto it = group_of.find(o.get());
          if (it != group_of.end() && it->second == gi)
            kept.push_back(o.get());
        }
        for (const auto *o : kept) {
          std::vector<Value> uses;
          for (const auto &v : o->operands)
            uses.push_back(v);
          for (const auto &v : o->apply_dims)
            uses.push_back(v);
          for (const auto &v : o->apply_syms)
            uses.push_back(v);
          if (o->buffer.valid())
            uses.push_back(o->buffer);
          auto add_view = [&](const BufferView &bv) {
            uses.push_back(bv.buffer);
            for (const auto &e : bv.offsets)
              if (!e.is_literal())
                uses.push_back(e.value);
            for (const auto &e : bv.sizes)
              if (!e.is_literal())
                uses.push_back(e.value);
            for (const auto &e : bv.strides)
              if (!e.is_literal())
                uses.push_back(e.value);
          };
          for (const auto &bv : o->views)
            add_view(bv);
          for (const auto &bv : o->reads)
            add_view(bv);
          for (const auto &bv : o->writes)
            add_view(bv);
          for (const auto &e : o->indices)
            if (!e.is_literal())
              uses.push_back(e.value);
          for (const auto &e : o->bundle_index)
            if (!e.is_literal())
              uses.push_back(e.value);
          needed.insert(needed.end(), uses.begin(), uses.end());
        }
        auto slice = index_slice(body, needed);

        std::map<int, Value> vmap;
        Value iv = out.new_value(Type::index());
        vmap[body.args[0].id] = iv;
        nb.args.push_back(iv);
        Value iter = out.new_value(Type::token());
        vmap[body.args[1 + gi].id] = iter;
        nb.args.push_back(iter);

        for (const auto &o : body.ops) {
          bool take = std::find(kept.begin(), kept.end(), o.get()) != kept.end() ||
                      std::find(slice.begin(), slice.end(), o.get()) != slice.end();
          if (!take)
            continue;
          nb.ops.push_back(clone_remap(*o, out, vmap));
        }
        auto ny = make_op(OpKind::ScfYield);
        Value yv = yield.operands[gi];
        auto itv = vmap.find(yv.id);
        ny->operands.push_back(itv != vmap.end() ? itv->second : yv);
        nb.ops.push_back(std::move(ny));

        Value res = out.new_value(Type::token());
        nest->results.push_back(res);
        result_remap[op->results[gi].id] = res;
        nests.push_back(std::move(nest));
      }

      // Splice the clones in place of the original nest.
      r.ops.erase(r.ops.begin() + static_cast<std::ptrdiff_t>(pos));
      for (std::size_t gi = 0; gi < nests.size(); ++gi)
        r.ops.insert(r.ops.begin() + static_cast<std::ptrdiff_t>(pos + gi),
                     std::move(nests[gi]));
      // Remap downstream uses of the old loop results.
      for (std::size_t j = pos + nests.size(); j < r.ops.size(); ++j)
        remap_uses(*r.ops[j], result_remap, true);
      pos += nests.size() - 1;
    }
  };

  for (auto &op : out.body().ops)
    if (op->kind == OpKind::Func)
      visit(op->regions[0]);

  if (!changed)
    return p.clone();
  return out;
}


std::vector<RegionSchedule> legal_schedules(const Program &p, const AsyncGraph &g,
                                            std::uint64_t seed, int count) {
  (void)g;
  std::vector<RegionSchedule> out;
  for (int c = 0; c < count; ++c) {
    std::mt19937_64 rng(seed + static_cast<std::uint64_t>(c) * 0x9e3779b97f4a7c15ULL);
    RegionSchedule sched;
    std::function<void(const Region &)> visit = [&](const Region &r) {
      // Precedence: SSA defs, token deps, terminator-last.
      std::map<int, std::size_t> def_pos;
      for (std::size_t i = 0; i < r.ops.size(); ++i)
        for (const auto &res : r.ops[i]->results)
          def_pos[res.id] = i;
      auto uses_of = [&](const Operation &op) {
        std::set<int> used;
        std::function<void(const Operation &)> collect = [&](const Operation &o) {
          auto use = [&](const Value &v) {
            if (v.valid())
              used.insert(v.id);
          };
          auto use_idx = [&](const IndexExpr &e) {
            if (!e.is_literal())
              used.insert(e.value.id);
          };
          for (const auto &v : o.deps)
            use(v);
          for (const auto &v : o.concurs)
            use(v);
          for (const auto &v : o.affinities)
            use(v);
          for (const auto &v : o.iter_init)
            use(v);
          for (const auto &v : o.operands)
            use(v);
          for (const auto &v : o.apply_dims)
            use(v);
          for (const auto &v : o.apply_syms)
            use(v);
          use(o.buffer);
          for (const auto &e : o.indices)
            use_idx(e);
          for (const auto &e : o.bundle_index)
            use_idx(e);
          auto use_view = [&](const BufferView &bv) {
            use(bv.buffer);
            for (const auto &e : bv.offsets)
              use_idx(e);
            for (const auto &e : bv.sizes)
              use_idx(e);
            for (const auto &e : bv.strides)
              use_idx(e);
          };
          for (const auto &bv : o.views)
            use_view(bv);
          for (const auto &bv : o.reads)
            use_view(bv);
          for (const auto &bv : o.writes)
            use_view(bv);
          for (const auto &reg : o.regions)
            for (const auto &child : reg.ops)
              collect(*child);
        };
        collect(op);
        return used;
      };

      std::size_t n = r.ops.size();
      std::vector<std::set<std::size_t>> preds(n);
      // Channel symbols each op touches (recursively): ops sharing a symbol
      // keep program order so FIFO pairing survives any sequential
      // realization (backpressure stands in for this on the machine).
      std::vector<std::set<std::string>> chans(n);
      for (std::size_t j = 0; j < n; ++j) {
        EffectSet es = infer_effects(*r.ops[j], true);
        for (const auto &ce : es.channels)
          chans[j].insert(ce.symbol);
      }
      for (std::size_t j = 0; j < n; ++j) {
        for (int u : uses_of(*r.ops[j])) {
          auto it = def_pos.find(u);
          if (it != def_pos.end() && it->second != j)
            preds[j].insert(it->second);
        }
        for (std::size_t i = 0; i < j; ++i)
          for (const auto &sym : chans[i])
            if (chans[j].count(sym))
              preds[j].insert(i);
        if (r.ops[j]->kind == OpKind::ScfYield)
          for (std::size_t i = 0; i < n; ++i)
            if (i != j)
              preds[j].insert(i);
      }
      std::vector<int> indeg(n, 0);
      std::vector<std::vector<std::size_t>> succs(n);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i : preds[j]) {
          succs[i].push_back(j);
          ++indeg[j];
        }
      std::vector<std::size_t> ready;
      for (std::size_t i = 0; i < n; ++i)
        if (indeg[i] == 0)
          ready.push_back(i);
      std::vector<const Operation *> order;
      while (!ready.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, ready.size() - 1);
        std::size_t k = pick(rng);
        std::size_t i = ready[k];
        ready.erase(ready.begin() + static_cast<std::ptrdiff_t>(k));
        order.push_back(r.ops[i].get());
        for (std::size_t s : succs[i])
          if (--indeg[s] == 0)
            ready.push_back(s);
      }
      if (order.size() != n)
        throw Error("CycleDetected", "region precedence graph has a cycle");
      sched[&r] = order;
      for (const auto &op : r.ops)
        for (const auto &reg : op->regions)
          visit(reg);
    };
    for (const auto &op : p.body().ops)
      if (op->kind == OpKind::Func)
        visit(op->regions[0]);
    out.push_back(std::move(sched));
  }
  return out;
}


namespace {

struct MiniTouch {
  std::set<int> reads, writes;
  std::set<std::string> chans;
};

MiniTouch mini_touch(const Operation &op) {
  MiniTouch t;
  EffectSet es = infer_effects(op, true);
  for (const auto &v : es.reads)
    t.reads.insert(v.buffer.id);
  for (const auto &v : es.writes)
    t.writes.insert(v.buffer.id);
  for (const auto &ce : es.channels)
    t.chans.insert(ce.symbol);
  return t;
}

bool mini_overlap(const std::map<int, Interval> &rng, const Operation &a,
                  const Operation &b, bool aw, bool bw) {
  EffectSet ea = infer_effects(a, true);
  EffectSet eb = infer_effects(b, true);
  const auto &va = aw ? ea.writes : ea.reads;
  const auto &vb = bw ? eb.writes : eb.reads;
  for (const auto &x : va)
    for (const auto &y : vb) {
      if (x.buffer.id != y.buffer.id)
        continue;
      if (footprints_may_overlap(view_footprint(x, rng), view_footprint(y, rng)))
        return true;
    }
  return false;
}

bool op_has_token(const Operation &op) {
  for (const auto &res : op.results)
    if (res.type.kind == TypeKind::Token)
      return true;
  return false;
}

Value first_token(const Operation &op) {
  for (const auto &res : op.results)
    if (res.type.kind == TypeKind::Token)
      return res;
  return {};
}

} // namespace

void add_effect_deps(Program &p, Region &r) {
  std::map<int, Interval> rng = compute_index_ranges(*p.module);
  std::vector<Operation *> sibs;
  for (auto &op : r.ops)
    if (op && op_has_token(*op))
      sibs.push_back(op.get());
  for (std::size_t j = 0; j < sibs.size(); ++j)
    for (std::size_t i = 0; i < j; ++i) {
      Operation &a = *sibs[i];
      Operation &b = *sibs[j];
      bool dep = mini_overlap(rng, a, b, true, false) ||
                 mini_overlap(rng, a, b, false, true) ||
                 mini_overlap(rng, a, b, true, true);
      if (!dep && (a.kind == OpKind::Dealloc || b.kind == OpKind::Dealloc)) {
        const Operation &de = b.kind == OpKind::Dealloc ? b : a;
        const Operation &other = b.kind == OpKind::Dealloc ? a : b;
        MiniTouch t = mini_touch(other);
        dep = t.reads.count(de.buffer.id) || t.writes.count(de.buffer.id);
      }
      if (!dep)
        continue;
      Value t = first_token(a);
      bool already = false;
      for (const auto &d : b.deps)
        already |= d.id == t.id;
      if (!already)
        b.deps.push_back(t);
    }
}

void thread_loop_tokens(Program &p, std::vector<std::unique_ptr<Operation>> &out,
                        std::unique_ptr<Operation> loop) {
  Region &body = loop->regions[0];
  add_effect_deps(p, body);

  std::vector<Operation *> members;
  for (auto &op : body.ops)
    if (op_has_token(*op))
      members.push_back(op.get());
  if (members.empty()) {
    out.push_back(std::move(loop));
    return;
  }
  std::map<Operation *, MiniTouch> touches;
  for (auto *m : members)
    touches[m] = mini_touch(*m);
  std::vector<int> parent(members.size());
  for (std::size_t i = 0; i < parent.size(); ++i)
    parent[i] = static_cast<int>(i);
  std::function<int(int)> find = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x)
      x = parent[static_cast<std::size_t>(x)] =
          parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
    return x;
  };
  for (std::size_t i = 0; i < members.size(); ++i)
    for (std::size_t j = i + 1; j < members.size(); ++j) {
      const MiniTouch &a = touches[members[i]];
      const MiniTouch &b = touches[members[j]];
      bool share = false;
      for (int x : a.reads)
        share |= b.reads.count(x) || b.writes.count(x);
      for (int x : a.writes)
        share |= b.reads.count(x) || b.writes.count(x);
      for (const auto &ch : a.chans)
        share |= b.chans.count(ch) != 0;
      if (share)
        parent[static_cast<std::size_t>(find(static_cast<int>(i)))] =
            find(static_cast<int>(j));
    }
  std::vector<int> roots;
  std::map<Operation *, int> group_of;
  for (std::size_t i = 0; i < members.size(); ++i) {
    int root = find(static_cast<int>(i));
    auto it = std::find(roots.begin(), roots.end(), root);
    int gi = it == roots.end() ? (roots.push_back(root),
                                  static_cast<int>(roots.size()) - 1)
                               : static_cast<int>(it - roots.begin());
    group_of[members[i]] = gi;
  }
  int ngroups = static_cast<int>(roots.size());
  std::vector<Operation *> first(static_cast<std::size_t>(ngroups), nullptr);
  std::vector<Operation *> last(static_cast<std::size_t>(ngroups), nullptr);
  for (auto *m : members) {
    auto g = static_cast<std::size_t>(group_of[m]);
    if (!first[g])
      first[g] = m;
    last[g] = m;
  }
  auto yield = make_op(OpKind::ScfYield);
  for (int g = 0; g < ngroups; ++g) {
    auto init = make_op(OpKind::WaitAll);
    init->is_async = true;
    Value t0 = p.new_value(Type::token());
    init->results.push_back(t0);
    out.push_back(std::move(init));
    loop->iter_init.push_back(t0);
    Value iter = p.new_value(Type::token());
    body.args.push_back(iter);
    first[static_cast<std::size_t>(g)]->deps.push_back(iter);
    yield->operands.push_back(first_token(*last[static_cast<std::size_t>(g)]));
    loop->results.push_back(p.new_value(Type::token()));
  }
  body.ops.push_back(std::move(yield));
  out.push_back(std::move(loop));
}

} // namespace air
