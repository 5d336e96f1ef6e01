#include "air/lowering.hpp"

#include "air/analysis.hpp"
#include "air/error.hpp"
#include "air/kernels.hpp"

#include <json.hpp>

#include <algorithm>
#include <functional>
#include <set>
#include <sstream>

namespace air {

using nlohmann::json;

std::string TileId::str() const {
  switch (kind) {
  case Kind::Core:
    return "core_" + std::to_string(row) + "_" + std::to_string(col);
  case Kind::Memtile:
    return "memtile_" + std::to_string(col);
  case Kind::Shim:
    return "shim";
  case Kind::Host:
    return "host";
  }
  return "?";
}

namespace {

std::vector<std::int64_t>
enumerate_dims(const std::vector<std::array<std::int64_t, 3>> &dims) {
  std::vector<std::int64_t> out;
  std::vector<std::int64_t> idx(dims.size(), 0);
  if (dims.empty())
    return out;
  while (true) {
    std::int64_t a = 0;
    for (std::size_t d = 0; d < dims.size(); ++d)
      a += (dims[d][0] + idx[d]) * dims[d][2];
    out.push_back(a);
    std::size_t d = dims.size();
    while (d-- > 0) {
      if (++idx[d] < dims[d][1])
        break;
      idx[d] = 0;
      if (d == 0)
        return out;
    }
  }
}

} // namespace

std::vector<std::int64_t> BufferDescriptor::enumerate() const {
  return enumerate_dims(dims);
}

std::vector<std::int64_t> HostTransfer::enumerate() const {
  return enumerate_dims(dims);
}

// ---------------------------------------------------------------------------
// MachineConfig JSON

std::string MachineConfig::to_json() const {
  json j;
  j["core_grid"] = {core_rows, core_cols};
  j["memtile_count"] = memtile_count;
  j["shim_port_count"] = shim_port_count;
  j["l1_bytes"] = l1_bytes;
  j["l2_bytes_per_memtile"] = l2_bytes_per_memtile;
  j["dma_channels_per_core"] = {dma_in_per_core, dma_out_per_core};
  j["dma_channels_per_memtile"] = {dma_in_per_memtile, dma_out_per_memtile};
  j["stream_bytes_per_cycle"] = stream_bytes_per_cycle;
  j["stream_fifo_words"] = stream_fifo_words;
  json macs;
  for (const auto &[k, v] : macs_per_cycle)
    macs[to_string(k)] = v;
  j["macs_per_cycle_per_core"] = macs;
  j["dispatch_overhead_cycles"] = dispatch_overhead_cycles;
  j["bd_setup_cycles"] = bd_setup_cycles;
  return j.dump(2);
}

MachineConfig MachineConfig::from_json(const std::string &text) {
  MachineConfig c;
  json j = json::parse(text);
  if (j.contains("core_grid")) {
    c.core_rows = j["core_grid"][0];
    c.core_cols = j["core_grid"][1];
  }
  if (j.contains("memtile_count"))
    c.memtile_count = j["memtile_count"];
  if (j.contains("shim_port_count"))
    c.shim_port_count = j["shim_port_count"];
  if (j.contains("l1_bytes"))
    c.l1_bytes = j["l1_bytes"];
  if (j.contains("l2_bytes_per_memtile"))
    c.l2_bytes_per_memtile = j["l2_bytes_per_memtile"];
  if (j.contains("dma_channels_per_core")) {
    c.dma_in_per_core = j["dma_channels_per_core"][0];
    c.dma_out_per_core = j["dma_channels_per_core"][1];
  }
  if (j.contains("dma_channels_per_memtile")) {
    c.dma_in_per_memtile = j["dma_channels_per_memtile"][0];
    c.dma_out_per_memtile = j["dma_channels_per_memtile"][1];
  }
  if (j.contains("stream_bytes_per_cycle"))
    c.stream_bytes_per_cycle = j["stream_bytes_per_cycle"];
  if (j.contains("stream_fifo_words"))
    c.stream_fifo_words = j["stream_fifo_words"];
  if (j.contains("dispatch_overhead_cycles"))
    c.dispatch_overhead_cycles = j["dispatch_overhead_cycles"];
  if (j.contains("bd_setup_cycles"))
    c.bd_setup_cycles = j["bd_setup_cycles"];
  if (j.contains("macs_per_cycle_per_core"))
    for (auto &[k, v] : j["macs_per_cycle_per_core"].items())
      if (auto ek = parse_elem_kind(k))
        c.macs_per_cycle[*ek] = v;
  return c;
}

// ---------------------------------------------------------------------------
// Placement

Placement place_herds(const Program &p, const MachineConfig &cfg) {
  Placement pl;
  for (const auto &top : p.body().ops) {
    if (top->kind != OpKind::Func)
      continue;
    // Each launch places its herds from a fresh grid (launches run
    // sequentially and reuse the fabric).
    std::function<void(const Operation &)> visit_launch = [&](const Operation &launch) {
      std::vector<std::vector<bool>> used(
          static_cast<std::size_t>(cfg.core_rows),
          std::vector<bool>(static_cast<std::size_t>(cfg.core_cols), false));
      walk(launch, [&](const Operation &op) {
        if (op.kind != OpKind::Herd)
          return;
        int hr = static_cast<int>(op.extents[0]);
        int hc = static_cast<int>(op.extents[1]);
        bool placed = false;
        for (int r = 0; r + hr <= cfg.core_rows && !placed; ++r)
          for (int c = 0; c + hc <= cfg.core_cols && !placed; ++c) {
            bool free = true;
            for (int i = 0; i < hr; ++i)
              for (int j = 0; j < hc; ++j)
                free &= !used[static_cast<std::size_t>(r + i)][static_cast<std::size_t>(c + j)];
            if (!free)
              continue;
            for (int i = 0; i < hr; ++i)
              for (int j = 0; j < hc; ++j)
                used[static_cast<std::size_t>(r + i)][static_cast<std::size_t>(c + j)] = true;
            pl.herds[&op] = {r, c};
            placed = true;
          }
        if (!placed)
          throw Error("PlacementFailure",
                      "herd " + std::to_string(hr) + "x" + std::to_string(hc) +
                          " does not fit the " + std::to_string(cfg.core_rows) + "x" +
                          std::to_string(cfg.core_cols) + " core grid");
      });
    };
    bool any_launch = false;
    for (const auto &op : top->regions[0].ops)
      if (op->kind == OpKind::Launch) {
        any_launch = true;
        visit_launch(*op);
      }
    if (!any_launch)
      visit_launch(*top); // spatial constructs without a launch wrapper
  }
  return pl;
}

void allocate_buffers(const Program &p, const MachineConfig &cfg, PlacedProgram &out) {
  int next_memtile = 0;
  int launch_no = 0;
  std::map<std::int64_t, int> group_tile;
  // Per (launch, tile) running offset: sequential launches reuse the fabric.
  std::map<std::pair<int, TileId>, std::int64_t> l1_off;
  std::map<std::pair<int, int>, std::int64_t> l2_off;

  std::function<void(const Operation &, const Operation *)> visit =
      [&](const Operation &op, const Operation *herd) {
        if (op.kind == OpKind::Launch)
          ++launch_no;
        if (op.kind == OpKind::Alloc) {
          MemorySpace sp = op.alloc_type.space;
          std::int64_t bytes = op.alloc_type.num_elements() *
                               width_bytes(op.alloc_type.elem);
          std::int64_t aligned = (bytes + 63) / 64 * 64;
          if (sp == MemorySpace::L2) {
            int m;
            if (op.has_attr("group") && group_tile.count(op.int_attr("group"))) {
              m = group_tile[op.int_attr("group")];
            } else {
              m = next_memtile % std::max(1, cfg.memtile_count);
              next_memtile++;
              if (op.has_attr("group"))
                group_tile[op.int_attr("group")] = m;
            }
            auto key = std::make_pair(launch_no, m);
            if (l2_off[key] + aligned > cfg.l2_bytes_per_memtile)
              throw Error("CapacityExceeded",
                          "memtile " + std::to_string(m) + ": " +
                              std::to_string(l2_off[key] + aligned) + " bytes > " +
                              std::to_string(cfg.l2_bytes_per_memtile));
            out.placement.l2_memtile[&op] = m;
            l2_off[key] += aligned;
          } else if (sp == MemorySpace::L1) {
            if (!herd)
              throw Error("PlacementFailure", "L1 allocation outside any herd");
            auto at = out.placement.herds.at(herd);
            // Account the worst-case per-worker footprint on every worker
            // tile of the herd.
            for (int i = 0; i < herd->extents[0]; ++i)
              for (int j = 0; j < herd->extents[1]; ++j) {
                TileId t{TileId::Kind::Core, at.first + i, at.second + j};
                auto key = std::make_pair(launch_no, t);
                if (l1_off[key] + aligned > cfg.l1_bytes)
                  throw Error("CapacityExceeded",
                              t.str() + ": " + std::to_string(l1_off[key] + aligned) +
                                  " bytes requested > " + std::to_string(cfg.l1_bytes));
                l1_off[key] += aligned;
              }
          }
        }
        const Operation *inner_herd = op.kind == OpKind::Herd ? &op : herd;
        for (const auto &r : op.regions)
          for (const auto &o : r.ops)
            visit(*o, inner_herd);
      };
  for (const auto &top : p.body().ops)
    if (top->kind == OpKind::Func)
      visit(*top, nullptr);
}

// ---------------------------------------------------------------------------
// Compilation: instance expansion

namespace {

bool is_scalar_kind(OpKind k) {
  switch (k) {
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

bool is_compute_block(const Operation &op) {
  if (op.kind != OpKind::ScfFor)
    return false;
  bool any_scalar = false;
  for (const auto &o : op.regions[0].ops) {
    if (o->kind == OpKind::WaitAll || o->kind == OpKind::ScfYield)
      continue; // carried-token glue
    if (is_scalar_kind(o->kind)) {
      any_scalar = true;
      continue;
    }
    if (is_compute_block(*o)) {
      any_scalar = true;
      continue;
    }
    return false;
  }
  return any_scalar;
}

std::int64_t inline_cost(const Operation &loop) {
  std::int64_t per_iter = 0;
  for (const auto &o : loop.regions[0].ops) {
    if (o->kind == OpKind::ScfYield || o->kind == OpKind::WaitAll)
      continue;
    if (is_compute_block(*o))
      per_iter += inline_cost(*o);
    else
      per_iter += 1;
  }
  std::int64_t trips = loop.step > 0 ? (loop.ub - loop.lb) / loop.step : 0;
  return per_iter * trips;
}

struct SideKey {
  std::string channel;
  std::vector<std::int64_t> element;
  bool is_put;
  bool operator<(const SideKey &o) const {
    return std::tie(channel, element, is_put) < std::tie(o.channel, o.element, o.is_put);
  }
};

struct SideInst {
  TransferInst t;
  Port port;
  int seq = 0;      // global walk order
  int launch = 0;
  bool host_side = false;
  // broadcast destinations (element coords) when this is an annotated put
  std::vector<std::vector<std::int64_t>> bcast_dests;
  const Operation *op = nullptr;
};

struct AccessRec {
  std::string buffer;
  bool write = false;
  int seq = 0;
  // where to attach lock actions:
  bool has_side = false;
  SideKey skey{"", {}, false};
  std::size_t sidx = 0;
  std::pair<TileId, std::size_t> core{{}, 0}; // (tile, instr index) when core
  bool is_core = false;
  std::string actor; // for phase analysis
};

class Lowerer {
public:
  Lowerer(const Program &p, const MachineConfig &cfg) : cfg_(cfg) {
    pp_.config = cfg;
    pp_.program = p.clone();
  }

  PlacedProgram run() {
    Program &p = pp_.program;
    pp_.placement = place_herds(p, cfg_);
    allocate_buffers(p, cfg_, pp_);
    assign_l1_offsets();

    for (const auto &top : p.body().ops) {
      if (top->kind != OpKind::Func)
        continue;
      // Bind L3 func args.
      for (std::size_t i = 0; i < top->regions[0].args.size(); ++i) {
        const Value &arg = top->regions[0].args[i];
        if (arg.type.kind != TypeKind::MemRef)
          continue;
        std::string name = i < top->arg_names.size() ? top->arg_names[i]
                                                     : "arg" + std::to_string(i);
        buffer_name_[arg.id] = name;
        pp_.buffer_types[name] = arg.type.memref;
        pp_.buffer_homes[name] = {TileId{TileId::Kind::Host, 0, 0}, 0};
      }
      bool any_launch = false;
      for (const auto &op : top->regions[0].ops)
        if (op->kind == OpKind::Launch)
          any_launch = true;
      if (any_launch) {
        for (const auto &op : top->regions[0].ops)
          if (op->kind == OpKind::Launch)
            visit_launch(*op);
      } else {
        begin_launch();
        walk_region(top->regions[0]);
        end_launch();
      }
    }

    assign_locks();
    build_bds_and_queues();
    build_routes();
    pp_.num_launches = launch_count_;
    return std::move(pp_);
  }

private:
  // --- naming & env ----------------------------------------------------------

  std::string inst_key(int value_id) const {
    auto it = buffer_name_.find(value_id);
    std::string base = it != buffer_name_.end() ? it->second
                                                : "%" + std::to_string(value_id);
    return base;
  }

  std::int64_t env_of(const IndexExpr &e) const {
    if (e.is_literal())
      return e.literal;
    auto it = env_.find(e.value.id);
    if (it == env_.end())
      throw Error("LoweringState", "index value not evaluated during expansion");
    return it->second;
  }

  // Resolved dims of a view under the current env.
  std::vector<std::array<std::int64_t, 3>> resolve_dims(const BufferView &v) const {
    std::vector<std::array<std::int64_t, 3>> dims;
    const MemRefType &mt = v.buffer.type.memref;
    if (v.whole()) {
      std::int64_t stride = 1;
      std::vector<std::int64_t> strides(mt.shape.size(), 1);
      for (std::size_t d = mt.shape.size(); d-- > 0;) {
        strides[d] = stride;
        stride *= mt.shape[d];
      }
      for (std::size_t d = 0; d < mt.shape.size(); ++d)
        dims.push_back({0, mt.shape[d], strides[d]});
      return dims;
    }
    for (std::size_t d = 0; d < v.offsets.size(); ++d)
      dims.push_back({env_of(v.offsets[d]), env_of(v.sizes[d]), env_of(v.strides[d])});
    return dims;
  }

  std::int64_t acct_bytes(const BufferView &v,
                          const std::vector<std::array<std::int64_t, 3>> &dims) const {
    std::int64_t n = 1;
    for (const auto &d : dims)
      n *= d[1];
    return n * width_bytes(v.buffer.type.memref.elem);
  }

  // --- launch walk -----------------------------------------------------------

  void begin_launch() {
    pp_.runtime_sequence.push_back(
        {RuntimeEntry::Kind::Dispatch, launch_count_, cfg_.dispatch_overhead_cycles});
  }

  void end_launch() {
    pp_.runtime_sequence.push_back({RuntimeEntry::Kind::Wait, launch_count_, 0});
    ++launch_count_;
  }

  void visit_launch(Operation &launch) {
    begin_launch();
    const auto &args = launch.regions[0].args;
    std::vector<std::int64_t> exts = launch.extents;
    if (exts.empty()) {
      walk_region(launch.regions[0]);
    } else {
      std::vector<std::int64_t> coord(exts.size(), 0);
      while (true) {
        for (std::size_t i = 0; i < coord.size() && i < args.size(); ++i)
          env_[args[i].id] = coord[i];
        walk_region(launch.regions[0]);
        std::size_t d = coord.size();
        bool done = true;
        while (d-- > 0) {
          if (++coord[d] < exts[d]) {
            done = false;
            break;
          }
          coord[d] = 0;
        }
        if (done)
          break;
      }
    }
    end_launch();
  }

  void walk_region(Region &r) {
    for (auto &op : r.ops)
      visit_op(*op);
  }

  void visit_op(Operation &op) {
    switch (op.kind) {
    case OpKind::Segment:
      walk_region(op.regions[0]);
      return;
    case OpKind::Herd: {
      const Operation *prev = herd_;
      herd_ = &op;
      auto at = pp_.placement.herds.at(&op);
      for (std::int64_t tx = 0; tx < op.extents[0]; ++tx)
        for (std::int64_t ty = 0; ty < op.extents[1]; ++ty) {
          worker_ = TileId{TileId::Kind::Core, at.first + static_cast<int>(tx),
                           at.second + static_cast<int>(ty)};
          env_[op.regions[0].args[0].id] = tx;
          env_[op.regions[0].args[1].id] = ty;
          worker_suffix_ = "/" + std::to_string(tx) + "_" + std::to_string(ty);
          walk_region(op.regions[0]);
        }
      worker_suffix_.clear();
      worker_ = TileId{TileId::Kind::Host, 0, 0};
      herd_ = prev;
      return;
    }
    case OpKind::ScfParallel: {
      const auto &args = op.regions[0].args;
      std::vector<std::int64_t> coord(op.extents.size(), 0);
      while (true) {
        for (std::size_t i = 0; i < coord.size() && i < args.size(); ++i)
          env_[args[i].id] = coord[i];
        walk_region(op.regions[0]);
        std::size_t d = coord.size();
        bool done = true;
        while (d-- > 0) {
          if (++coord[d] < op.extents[d]) {
            done = false;
            break;
          }
          coord[d] = 0;
        }
        if (done)
          return;
      }
    }
    case OpKind::ScfFor: {
      if (is_compute_block(op) && herd_) {
        emit_core_instr(op, CoreInstr::Kind::Inline, inline_cost(op));
        return;
      }
      const Value &iv = op.regions[0].args[0];
      for (std::int64_t i = op.lb; i < op.ub; i += op.step) {
        env_[iv.id] = i;
        walk_region(op.regions[0]);
      }
      return;
    }
    case OpKind::Alloc: {
      std::string key = register_buffer(op);
      (void)key;
      return;
    }
    case OpKind::Dealloc:
      return;
    case OpKind::ArithConst:
      if (op.const_type.kind == TypeKind::Index)
        env_[op.results[0].id] = op.const_value;
      return;
    case OpKind::AffineApply: {
      std::vector<std::int64_t> dims, syms;
      for (const auto &v : op.apply_dims)
        dims.push_back(env_.at(v.id));
      for (const auto &v : op.apply_syms)
        syms.push_back(env_.at(v.id));
      env_[op.results[0].id] = eval_map(op.map, dims, syms)[0];
      return;
    }
    case OpKind::ArithAdd:
    case OpKind::ArithMul: {
      if (!op.results.empty() && op.results[0].type.kind == TypeKind::Index) {
        std::int64_t a = env_.at(op.operands[0].id);
        std::int64_t b = env_.at(op.operands[1].id);
        env_[op.results[0].id] = op.kind == OpKind::ArithAdd ? a + b : a * b;
      }
      return;
    }
    case OpKind::KernelCall: {
      std::int64_t cycles = op.int_attr("cycles", 0);
      if (cycles == 0) {
        std::int64_t ops_n = op.int_attr("ops", 0);
        if (ops_n == 0)
          ops_n = kernel_default_ops(op.symbol, op);
        ElemKind ek = ElemKind::I32;
        if (!op.reads.empty())
          ek = op.reads[0].buffer.type.memref.elem;
        else if (!op.writes.empty())
          ek = op.writes[0].buffer.type.memref.elem;
        std::int64_t macs = cfg_.macs_per_cycle.count(ek) ? cfg_.macs_per_cycle.at(ek) : 1;
        cycles = (ops_n + macs - 1) / macs;
      }
      emit_core_instr(op, CoreInstr::Kind::Kernel, std::max<std::int64_t>(1, cycles));
      return;
    }
    case OpKind::Memcpy: {
      // Same-space local copy executed by the owning core.
      std::int64_t n = 1;
      for (const auto &d : resolve_dims(op.views[0]))
        n *= d[1];
      emit_core_instr(op, CoreInstr::Kind::Kernel, std::max<std::int64_t>(1, n));
      return;
    }
    case OpKind::ChannelPut:
    case OpKind::ChannelGet:
      emit_transfer(op);
      return;
    case OpKind::WaitAll:
    case OpKind::ScfYield:
    case OpKind::Load:
    case OpKind::Store:
      return;
    default:
      return;
    }
  }

  // --- buffers -----------------------------------------------------------------

  void assign_l1_offsets() {
    // Recompute deterministic per-alloc offsets (same order as the capacity
    // pass).
    // The actual byte offsets are assigned lazily in register_buffer.
  }

  std::string register_buffer(const Operation &alloc) {
    std::string key = "%" + std::to_string(alloc.results[0].id) + inst_suffix() +
                      worker_suffix_;
    buffer_name_[alloc.results[0].id] = key;
    if (pp_.buffer_types.count(key))
      return key; // re-entered loop body: the slot is reused
    pp_.buffer_types[key] = alloc.alloc_type;
    std::int64_t bytes =
        alloc.alloc_type.num_elements() * width_bytes(alloc.alloc_type.elem);
    std::int64_t aligned = (bytes + 63) / 64 * 64;
    TileId home;
    std::int64_t off = 0;
    if (alloc.alloc_type.space == MemorySpace::L2) {
      int m = pp_.placement.l2_memtile.at(&alloc);
      home = TileId{TileId::Kind::Memtile, 0, m};
      off = l2_bump_[{launch_count_, m}];
      l2_bump_[{launch_count_, m}] += aligned;
    } else if (alloc.alloc_type.space == MemorySpace::L1) {
      home = worker_;
      off = l1_bump_[{launch_count_, worker_}];
      l1_bump_[{launch_count_, worker_}] += aligned;
    } else {
      home = TileId{TileId::Kind::Host, 0, 0};
    }
    pp_.buffer_homes[key] = {home, off};
    // Ping-pong groups share one lock pair.
    if (alloc.has_attr("group"))
      group_of_[key] = "group" + std::to_string(alloc.int_attr("group")) +
                       inst_suffix() + worker_suffix_;
    return key;
  }

  std::string inst_suffix() const { return "@L" + std::to_string(launch_count_); }

  // --- core program -----------------------------------------------------------

  void emit_core_instr(Operation &op, CoreInstr::Kind kind, std::int64_t cycles) {
    if (!herd_)
      throw Error("LoweringState", "compute op outside a herd at " +
                                       std::to_string(op.loc.line));
    CoreInstr ci;
    ci.kind = kind;
    ci.op = &op;
    ci.env = env_;
    ci.cycles = cycles;
    ci.launch = launch_count_;
    walk(op, [&](const Operation &o) {
      auto bind = [&](const Value &v) {
        if (v.valid() && v.type.kind == TypeKind::MemRef && buffer_name_.count(v.id))
          ci.buffers[v.id] = buffer_name_.at(v.id);
      };
      for (const auto &v : o.views)
        bind(v.buffer);
      for (const auto &v : o.reads)
        bind(v.buffer);
      for (const auto &v : o.writes)
        bind(v.buffer);
      bind(o.buffer);
    });
    ci.label = op.kind == OpKind::KernelCall ? "@" + op.symbol
               : op.kind == OpKind::Memcpy   ? "copy"
                                             : "compute";
    auto &prog = pp_.core_programs[worker_];
    std::size_t idx = prog.size();
    prog.push_back(std::move(ci));

    EffectSet es = infer_effects(op, true);
    for (const auto &v : es.reads)
      record_core_access(v, false, idx);
    for (const auto &v : es.writes)
      record_core_access(v, true, idx);
  }

  void record_core_access(const BufferView &v, bool write, std::size_t idx) {
    auto it = buffer_name_.find(v.buffer.id);
    if (it == buffer_name_.end())
      return;
    AccessRec rec;
    rec.buffer = it->second;
    rec.write = write;
    rec.seq = seq_++;
    rec.is_core = true;
    rec.core = {worker_, idx};
    rec.actor = "core:" + worker_.str();
    accesses_.push_back(rec);
  }

  std::string group_key(const std::string &buf) const {
    auto g = group_of_.find(buf);
    return g != group_of_.end() ? g->second : buf;
  }

  // --- transfers ----------------------------------------------------------------

  Port port_for(const std::string &channel, const std::vector<std::int64_t> &element,
                const TileId &tile, bool into) {
    auto key = std::make_tuple(channel + elem_tag(element), tile, into);
    auto it = port_assign_.find(key);
    if (it != port_assign_.end())
      return it->second;
    int count = 1;
    switch (tile.kind) {
    case TileId::Kind::Core:
      count = into ? cfg_.dma_in_per_core : cfg_.dma_out_per_core;
      break;
    case TileId::Kind::Memtile:
      count = into ? cfg_.dma_in_per_memtile : cfg_.dma_out_per_memtile;
      break;
    case TileId::Kind::Shim:
    case TileId::Kind::Host:
      count = cfg_.shim_port_count;
      break;
    }
    int idx = port_counter_[std::make_pair(tile, into)]++ % std::max(1, count);
    Port port{tile, into, idx};
    port_assign_[key] = port;
    return port;
  }

  void emit_transfer(Operation &op) {
    bool is_put = op.kind == OpKind::ChannelPut;
    const BufferView &view = op.views[0];
    MemorySpace space = view.buffer.type.memref.space;
    auto nameit = buffer_name_.find(view.buffer.id);
    if (nameit == buffer_name_.end())
      throw Error("LoweringState", "transfer references an unknown buffer");
    std::string buf = nameit->second;

    std::vector<std::int64_t> element;
    const Operation *decl = pp_.program.find_channel(op.symbol);
    std::size_t arity = decl ? decl->extents.size() : op.bundle_index.size();
    for (std::size_t i = 0; i < arity; ++i)
      element.push_back(i < op.bundle_index.size() ? env_of(op.bundle_index[i]) : 0);

    SideInst si;
    si.t.buffer = buf;
    si.t.dims = resolve_dims(view);
    si.t.bytes_acct = acct_bytes(view, si.t.dims);
    si.seq = seq_++;
    si.launch = launch_count_;
    si.op = &op;

    if (space == MemorySpace::L3) {
      si.host_side = true;
      si.port = port_for(op.symbol, element, TileId{TileId::Kind::Shim, 0, 0}, !is_put);
      // Shim naming: W streams into the device (puts from L3), R out.
      si.port.into = is_put;
    } else {
      TileId tile = pp_.buffer_homes.at(buf).first;
      si.port = port_for(op.symbol, element, tile, !is_put);
    }

    if (is_put && op.has_attr("broadcast")) {
      const auto &set = std::get<IntegerSet>(op.attrs.at("broadcast"));
      std::int64_t mask = op.int_attr("broadcast_src_dims",
                                      (std::int64_t{1} << set.num_syms) - 1);
      std::vector<std::int64_t> srcs;
      for (std::size_t d = 0; d < element.size(); ++d)
        if (mask & (std::int64_t{1} << d))
          srcs.push_back(element[d]);
      si.bcast_dests = broadcast_destinations(set, srcs, decl->extents);
    }

    // Record the data access for lock assignment (device-side only; host
    // memory needs no locks).
    if (space != MemorySpace::L3) {
      AccessRec rec;
      rec.buffer = buf;
      rec.write = !is_put;
      rec.seq = si.seq;
      rec.is_core = false;
      rec.actor = "port:" + si.port.tile.str() + ":" + si.port.tid();
      // side pointer fixed after insertion below
      accesses_.push_back(rec);
    }

    SideKey key{op.symbol, element, is_put};
    sides_[key].push_back(std::move(si));
    if (space != MemorySpace::L3) {
      accesses_.back().has_side = true;
      accesses_.back().skey = key;
      accesses_.back().sidx = sides_[key].size() - 1;
    }
  }

  // --- locks ----------------------------------------------------------------------

  void assign_locks() {
    // Instance-level hand-off edges per buffer: reader-after-writer,
    // writer-after-readers, writer-after-writer across different actors.
    // Each (source slot, destination slot) pair gets one counting lock;
    // sources release 1, destinations acquire 1, initial value 0. First
    // instances without a predecessor stay unguarded, which realizes the
    // buffer-multiplicity semantics (a duplicated ping-pong buffer lets its
    // producer run that many iterations ahead).
    std::map<std::string, std::vector<AccessRec *>> per_buf;
    for (auto &a : accesses_)
      per_buf[a.buffer].push_back(&a);

    std::map<std::pair<std::string, std::string>, int> edge_lock;
    auto slot_of = [&](const AccessRec *a) {
      if (a->is_core)
        return "core:" + a->core.first.str() + "#" +
               std::to_string(reinterpret_cast<std::uintptr_t>(
                   pp_.core_programs[a->core.first][a->core.second].op));
      return "side:" +
             std::to_string(reinterpret_cast<std::uintptr_t>(
                 sides_[a->skey][a->sidx].op)) +
             ":" + a->actor;
    };
    auto lock_for = [&](const AccessRec *src, const AccessRec *dst,
                        const std::string &buf) {
      auto key = std::make_pair(slot_of(src) + "->" + slot_of(dst), buf);
      auto it = edge_lock.find(key);
      if (it != edge_lock.end())
        return it->second;
      int id = static_cast<int>(pp_.locks.size());
      TileId home = lock_home(buf, {});
      pp_.locks.push_back({id, home, 0, buf, false});
      edge_lock[key] = id;
      return id;
    };
    auto add_edge = [&](AccessRec *src, AccessRec *dst, const std::string &buf) {
      if (src->actor == dst->actor)
        return;
      int lk = lock_for(src, dst, buf);
      attach(src, {lk, 1, false}, false); // release after
      attach(dst, {lk, 1, true}, true);   // acquire before
    };

    for (auto &[buf, accs] : per_buf) {
      std::sort(accs.begin(), accs.end(),
                [](const AccessRec *a, const AccessRec *b) { return a->seq < b->seq; });
      std::set<std::string> actors;
      for (const auto *a : accs)
        actors.insert(a->actor);
      if (actors.size() < 2)
        continue;
      AccessRec *last_writer = nullptr;
      std::vector<AccessRec *> readers_since;
      for (auto *a : accs) {
        if (a->write) {
          if (!readers_since.empty()) {
            for (auto *r : readers_since)
              add_edge(r, a, buf);
          } else if (last_writer) {
            add_edge(last_writer, a, buf);
          }
          last_writer = a;
          readers_since.clear();
        } else {
          if (last_writer)
            add_edge(last_writer, a, buf);
          readers_since.push_back(a);
        }
      }
    }

    // Materialize core lock actions as explicit instructions.
    for (auto &[tile, prog] : pp_.core_programs) {
      std::vector<CoreInstr> flat;
      for (std::size_t i = 0; i < prog.size(); ++i) {
        for (const auto &la : core_locks_before_[{tile, i}]) {
          CoreInstr ci;
          ci.kind = CoreInstr::Kind::Acquire;
          ci.lock = la;
          ci.launch = prog[i].launch;
          ci.label = "acquire";
          flat.push_back(ci);
        }
        flat.push_back(prog[i]);
        for (const auto &la : core_locks_after_[{tile, i}]) {
          CoreInstr ci;
          ci.kind = CoreInstr::Kind::Release;
          ci.lock = la;
          ci.launch = prog[i].launch;
          ci.label = "release";
          flat.push_back(ci);
        }
      }
      prog = std::move(flat);
    }
  }

  TileId lock_home(const std::string &buf, const std::vector<AccessRec *> &accs) {
    // tile-local: the guarded buffer's tile; groups use a member's home.
    for (const auto &[b, home] : pp_.buffer_homes)
      if (b == buf || group_key(b) == buf)
        return home.first;
    (void)accs;
    return TileId{TileId::Kind::Host, 0, 0};
  }

  void attach(AccessRec *a, LockAction la, bool before) {
    if (a->is_core) {
      if (before)
        core_locks_before_[a->core].push_back(la);
      else
        core_locks_after_[a->core].push_back(la);
    } else if (a->has_side) {
      TransferInst &t = sides_[a->skey][a->sidx].t;
      if (before)
        t.before.push_back(la);
      else
        t.after.push_back(la);
    }
  }

  // --- BDs, queues, routes -----------------------------------------------------

  void build_bds_and_queues() {
    // Flows pair sends with receives per channel element; assign sequence
    // numbers in side order.
    for (auto &[key, insts] : sides_) {
      for (std::size_t i = 0; i < insts.size(); ++i)
        flow_seq_[{key.channel, key.element, key.is_put}].push_back(
            static_cast<int>(i));
    }

    for (auto &[key, insts] : sides_) {
      if (insts.empty())
        continue;
      if (insts[0].host_side) {
        for (auto &si : insts) {
          HostTransfer ht;
          ht.buffer = si.t.buffer;
          ht.dims = si.t.dims;
          ht.port = si.port;
          ht.channel = key.channel;
          ht.element = element_ordinal(key);
          ht.to_stream = key.is_put;
          ht.bytes_acct = si.t.bytes_acct;
          ht.launch = si.launch;
          int hidx = static_cast<int>(pp_.host_transfers.size());
          pp_.host_transfers.push_back(std::move(ht));
          queue_items_.push_back({si.port, si.seq, QueueEntry{-1, hidx, 0, si.seq}});
        }
        continue;
      }
      // Device side: coalesce runs into BDs.
      std::size_t i = 0;
      while (i < insts.size()) {
        std::size_t j = i + 1;
        // Run of identical-shape instances with uniform lock scripts.
        auto same_locks = [](const TransferInst &a, const TransferInst &b) {
          auto eq = [](const std::vector<LockAction> &x, const std::vector<LockAction> &y) {
            if (x.size() != y.size())
              return false;
            for (std::size_t k = 0; k < x.size(); ++k)
              if (x[k].lock != y[k].lock || x[k].amount != y[k].amount ||
                  x[k].acquire != y[k].acquire)
                return false;
            return true;
          };
          return eq(a.before, b.before) && eq(a.after, b.after);
        };
        enum class Mode { Unknown, Identical, Linear, Rotate };
        Mode mode = Mode::Unknown;
        std::int64_t delta = 0;
        while (j < insts.size() && insts[j].port == insts[i].port &&
               insts[j].t.dims.size() == insts[i].t.dims.size() &&
               same_locks(insts[j].t, insts[i].t) &&
               insts[j].bcast_dests == insts[i].bcast_dests) {
          bool shape_ok = true;
          for (std::size_t d = 0; d < insts[i].t.dims.size(); ++d)
            if (insts[j].t.dims[d][1] != insts[i].t.dims[d][1] ||
                insts[j].t.dims[d][2] != insts[i].t.dims[d][2])
              shape_ok = false;
          if (!shape_ok)
            break;
          bool off_same = true;
          for (std::size_t d = 0; d < insts[i].t.dims.size(); ++d)
            off_same &= insts[j].t.dims[d][0] == insts[i].t.dims[d][0];
          bool buf_same = insts[j].t.buffer == insts[i].t.buffer;
          std::int64_t step_delta =
              flat_base(insts[j].t.dims) - flat_base(insts[j - 1].t.dims);
          bool ok = false;
          switch (mode) {
          case Mode::Unknown:
            if (off_same && buf_same) {
              mode = Mode::Identical;
              ok = true;
            } else if (buf_same && step_delta != 0) {
              mode = Mode::Linear;
              delta = step_delta;
              ok = true;
            } else if (!buf_same && off_same) {
              mode = Mode::Rotate;
              ok = true;
            }
            break;
          case Mode::Identical:
            ok = off_same && buf_same;
            break;
          case Mode::Linear:
            ok = buf_same && step_delta == delta;
            break;
          case Mode::Rotate:
            // offsets equal across the whole run; buffers may repeat the cycle
            ok = off_same;
            break;
          }
          if (!ok)
            break;
          ++j;
        }
        bool identical = mode == Mode::Identical || mode == Mode::Unknown;
        bool linear = mode == Mode::Linear;

        BufferDescriptor bd;
        bd.id = static_cast<int>(pp_.bds.size());
        bd.channel = key.channel;
        bd.element = element_ordinal(key);
        bd.to_stream = key.is_put;
        bd.launch = insts[i].launch;
        bd.op = insts[i].op;
        bd.port = insts[i].port;
        bd.before = insts[i].t.before;
        bd.after = insts[i].t.after;
        bd.buffer = insts[i].t.buffer;
        bd.bytes_per_repeat = insts[i].t.bytes_acct;
        std::size_t run = j - i;
        if (run == 1 || identical) {
          bd.dims = insts[i].t.dims;
          bd.repeat = static_cast<std::int64_t>(run);
        } else if (linear) {
          // fold the progression into an extra outer dim; each repeat
          // advances it by one step
          if (insts[i].t.dims.size() >= 4)
            throw Error("BDDimOverflow",
                        "access sequence needs more than 4 dims after coalescing");
          bd.dims.push_back({0, static_cast<std::int64_t>(run), delta});
          for (const auto &d : insts[i].t.dims)
            bd.dims.push_back(d);
          bd.repeat = static_cast<std::int64_t>(run);
          bd.outer_is_repeat = true;
        } else {
          // buffer rotation: identical dims, repeat with cycle
          bd.dims = insts[i].t.dims;
          bd.repeat = static_cast<std::int64_t>(run);
          for (std::size_t k2 = i; k2 < j; ++k2)
            bd.buffer_cycle.push_back(insts[k2].t.buffer);
        }
        if (bd.dims.size() > 4)
          throw Error("BDDimOverflow", "BD dimensionality exceeds 4");
        // The last repeat may carry extra final releases (phase tails) —
        // captured per-instance; conservative: keep per-repeat scripts, and
        // add the difference of the last instance as final actions.
        if (run > 1 && !same_locks_strict(insts[i].t, insts[j - 1].t)) {
          bd.final_after = insts[j - 1].t.after;
        }
        int bidx = static_cast<int>(pp_.bds.size());
        pp_.bds.push_back(bd);
        // queue entries: for linear coalescing, still one entry per logical
        // transfer so pairing and locks stay per-instance.
        for (std::size_t k2 = i; k2 < j; ++k2)
          queue_items_.push_back(
              {insts[k2].port, insts[k2].seq,
               QueueEntry{bidx, -1, static_cast<int>(k2 - i), insts[k2].seq}});
        i = j;
      }
    }

    // Sort each port's queue by walk order.
    std::sort(queue_items_.begin(), queue_items_.end(),
              [](const QItem &a, const QItem &b) { return a.seq < b.seq; });
    std::map<std::pair<std::string, std::vector<std::int64_t>>, int> pair_seq;
    for (auto &qi : queue_items_)
      pp_.port_queues[qi.port].push_back(qi.entry);
  }

  static bool same_locks_strict(const TransferInst &a, const TransferInst &b) {
    auto eq = [](const std::vector<LockAction> &x, const std::vector<LockAction> &y) {
      if (x.size() != y.size())
        return false;
      for (std::size_t k = 0; k < x.size(); ++k)
        if (x[k].lock != y[k].lock || x[k].amount != y[k].amount ||
            x[k].acquire != y[k].acquire)
          return false;
      return true;
    };
    return eq(a.before, b.before) && eq(a.after, b.after);
  }

  static std::int64_t flat_base(const std::vector<std::array<std::int64_t, 3>> &dims) {
    std::int64_t b = 0;
    for (const auto &d : dims)
      b += d[0] * d[2];
    return b;
  }

  int element_ordinal(const SideKey &key) {
    const Operation *decl = pp_.program.find_channel(key.channel);
    if (!decl)
      return 0;
    std::int64_t ord = 0;
    for (std::size_t d = 0; d < key.element.size(); ++d)
      ord = ord * decl->extents[d] + key.element[d];
    return static_cast<int>(ord);
  }

  void build_routes() {
    // One route per put side; broadcast puts get every destination port.
    for (auto &[key, insts] : sides_) {
      if (!key.is_put || insts.empty())
        continue;
      Route r;
      r.channel = key.channel;
      r.element = element_ordinal(key);
      r.src = insts[0].port;
      if (!insts[0].bcast_dests.empty()) {
        for (const auto &dest : insts[0].bcast_dests) {
          SideKey gk{key.channel, dest, false};
          auto it = sides_.find(gk);
          if (it != sides_.end() && !it->second.empty())
            r.dsts.push_back(it->second[0].port);
        }
      } else {
        SideKey gk{key.channel, key.element, false};
        auto it = sides_.find(gk);
        if (it != sides_.end() && !it->second.empty())
          r.dsts.push_back(it->second[0].port);
      }
      pp_.routes.push_back(std::move(r));
    }
  }

  struct QItem {
    Port port;
    int seq;
    QueueEntry entry;
  };

  MachineConfig cfg_;
  PlacedProgram pp_;
  std::map<int, std::string> buffer_name_;
  std::map<std::string, std::string> group_of_;
  std::map<int, std::int64_t> env_;
  std::map<std::pair<int, TileId>, std::int64_t> l1_bump_;
  std::map<std::pair<int, int>, std::int64_t> l2_bump_;
  const Operation *herd_ = nullptr;
  TileId worker_{TileId::Kind::Host, 0, 0};
  std::string worker_suffix_;
  int launch_count_ = 0;
  int seq_ = 0;
  std::map<SideKey, std::vector<SideInst>> sides_;
  static std::string elem_tag(const std::vector<std::int64_t> &element) {
    std::string s;
    for (auto e : element)
      s += "," + std::to_string(e);
    return s;
  }

  std::map<std::tuple<std::string, TileId, bool>, Port> port_assign_;
  std::map<std::pair<TileId, bool>, int> port_counter_;
  std::vector<AccessRec> accesses_;
  std::map<std::pair<TileId, std::size_t>, std::vector<LockAction>> core_locks_before_,
      core_locks_after_;
  std::map<std::tuple<std::string, std::vector<std::int64_t>, bool>, std::vector<int>>
      flow_seq_;
  std::vector<QItem> queue_items_;
};

} // namespace

PlacedProgram compile(const Program &p, const MachineConfig &cfg) {
  auto diags = verify_program(p);
  if (!diags.empty())
    throw Error("VerifyFailed", "compile input does not verify: " + diags[0].str());
  Lowerer lw(p, cfg);
  return lw.run();
}

// ---------------------------------------------------------------------------
// JSON dump

std::string PlacedProgram::to_json() const {
  json j;
  j["version"] = 1;
  j["config"] = json::parse(config.to_json());
  json herds = json::array();
  for (const auto &[op, at] : placement.herds)
    herds.push_back({{"herd", op->symbol}, {"row", at.first}, {"col", at.second},
                     {"rows", op->extents[0]}, {"cols", op->extents[1]}});
  j["placement"] = herds;
  json bufs = json::array();
  for (const auto &[name, home] : buffer_homes)
    bufs.push_back({{"buffer", name},
                    {"tile", home.first.str()},
                    {"offset", home.second},
                    {"bytes", buffer_types.count(name)
                                  ? buffer_types.at(name).byte_size()
                                  : 0}});
  j["buffers"] = bufs;
  json locks_j = json::array();
  for (const auto &l : locks)
    locks_j.push_back({{"id", l.id},
                       {"tile", l.tile.str()},
                       {"init", l.initial},
                       {"buffer", l.buffer},
                       {"side", l.producer_side ? "producer" : "consumer"}});
  j["locks"] = locks_j;
  json bds_j = json::array();
  for (const auto &b : bds) {
    json dims = json::array();
    for (const auto &d : b.dims)
      dims.push_back({d[0], d[1], d[2]});
    bds_j.push_back({{"id", b.id},
                     {"buffer", b.buffer},
                     {"dims", dims},
                     {"repeat", b.repeat},
                     {"direction", b.to_stream ? "to_stream" : "from_stream"},
                     {"tile", b.port.tile.str()},
                     {"port", b.port.tid()},
                     {"channel", b.channel},
                     {"element", b.element},
                     {"bytes", b.total_bytes()}});
  }
  j["bds"] = bds_j;
  json routes_j = json::array();
  for (const auto &r : routes) {
    json dsts = json::array();
    for (const auto &d : r.dsts)
      dsts.push_back(d.tile.str() + ":" + d.tid());
    routes_j.push_back({{"channel", r.channel},
                        {"element", r.element},
                        {"src", r.src.tile.str() + ":" + r.src.tid()},
                        {"dsts", dsts}});
  }
  j["routes"] = routes_j;
  json cores = json::array();
  for (const auto &[tile, prog] : core_programs) {
    json instrs = json::array();
    for (const auto &ci : prog) {
      switch (ci.kind) {
      case CoreInstr::Kind::Acquire:
        instrs.push_back({{"op", "acquire"}, {"lock", ci.lock.lock},
                          {"amount", ci.lock.amount}});
        break;
      case CoreInstr::Kind::Release:
        instrs.push_back({{"op", "release"}, {"lock", ci.lock.lock},
                          {"amount", ci.lock.amount}});
        break;
      default:
        instrs.push_back({{"op", ci.kind == CoreInstr::Kind::Kernel ? "kernel"
                                                                    : "compute"},
                          {"label", ci.label},
                          {"cycles", ci.cycles}});
      }
    }
    cores.push_back({{"tile", tile.str()}, {"program", instrs}});
  }
  j["core_programs"] = cores;
  json rt = json::array();
  for (const auto &e : runtime_sequence)
    rt.push_back({{"kind", e.kind == RuntimeEntry::Kind::Dispatch ? "dispatch" : "wait"},
                  {"launch", e.launch},
                  {"cost", e.cost}});
  j["runtime_sequence"] = rt;
  json hts = json::array();
  for (const auto &h : host_transfers) {
    json dims = json::array();
    for (const auto &d : h.dims)
      dims.push_back({d[0], d[1], d[2]});
    hts.push_back({{"buffer", h.buffer},
                   {"dims", dims},
                   {"port", h.port.tid()},
                   {"channel", h.channel},
                   {"element", h.element},
                   {"direction", h.to_stream ? "to_stream" : "from_stream"},
                   {"launch", h.launch}});
  }
  j["host_transfers"] = hts;
  return j.dump(2);
}

} // namespace air
