#include "air/sim.hpp"

#include "air/error.hpp"
#include "air/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <functional>
#include <queue>
#include <sstream>

namespace air {

namespace {

std::vector<std::int64_t>
enumerate_dims(const std::vector<std::array<std::int64_t, 3>> &dims) {
  std::vector<std::int64_t> out;
  if (dims.empty())
    return out;
  std::vector<std::int64_t> idx(dims.size(), 0);
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

// Pattern of one BD repeat; a folded outer progression advances per repeat.
std::vector<std::array<std::int64_t, 3>> entry_dims(const BufferDescriptor &bd,
                                                    int rep) {
  if (bd.outer_is_repeat) {
    std::vector<std::array<std::int64_t, 3>> out;
    out.push_back({bd.dims[0][0] + rep, 1, bd.dims[0][2]});
    for (std::size_t d = 1; d < bd.dims.size(); ++d)
      out.push_back(bd.dims[d]);
    return out;
  }
  return bd.dims;
}

std::string buffer_for_rep(const BufferDescriptor &bd, int rep) {
  if (!bd.buffer_cycle.empty())
    return bd.buffer_cycle[static_cast<std::size_t>(rep) % bd.buffer_cycle.size()];
  return bd.buffer;
}

struct Actor {
  enum class Kind { Host, Port, Core };
  Kind kind = Kind::Host;
  TileId tile;
  Port port;
  int order = 0;
  std::int64_t avail = 0;
  std::size_t next = 0;
  std::int64_t stall_begin = -1;
  std::int64_t stall_total = 0;
  bool busy = false; // a completion callback will advance this actor
};

struct Item {
  enum class Kind { Dispatch, WaitLaunch, Acquire, Release, Kernel, Transfer };
  Kind kind = Kind::Kernel;
  int launch = 0;
  LockAction lock;         // Acquire / Release
  const CoreInstr *ci = nullptr;
  int flow = -1;           // Transfer
  bool is_send = false;
  int bd = -1, host = -1, rep = 0;
  std::int64_t cost = 0;   // cycles (kernel/dispatch) or accounting bytes
  std::string label;
};

struct Flow {
  std::pair<int, std::size_t> send{-1, 0};
  std::vector<std::pair<int, std::size_t>> recv;
  std::set<int> arrived;
  std::int64_t ready_time = 0;
  bool started = false;
};

} // namespace

class Simulator {
public:
  Simulator(const PlacedProgram &pp, const BufferBindings &inputs) : pp_(pp) {
    for (const auto &[name, type] : pp_.buffer_types) {
      if (pp_.buffer_homes.at(name).first.kind != TileId::Kind::Host)
        continue;
      Bytes b(static_cast<std::size_t>(type.num_elements() * storage_width(type.elem)),
              0);
      auto it = inputs.find(name);
      if (it != inputs.end())
        std::memcpy(b.data(), it->second.data(), std::min(b.size(), it->second.size()));
      memory_[name] = std::move(b);
    }
    build();
  }

  SimResult run() {
    post(0, 0, [this] { try_advance(0, 0); });
    while (!events_.empty()) {
      Event ev = std::move(const_cast<Event &>(events_.top()));
      events_.pop();
      ev.fn();
    }
    finish();
    return std::move(result_);
  }

private:
  struct Event {
    std::int64_t time;
    int order;
    std::int64_t seq;
    std::function<void()> fn;
    bool operator>(const Event &o) const {
      return std::tie(time, order, seq) > std::tie(o.time, o.order, o.seq);
    }
  };

  void post(std::int64_t t, int order, std::function<void()> fn) {
    events_.push(Event{t, order, seq_++, std::move(fn)});
  }

  // --- construction ------------------------------------------------------------

  void build() {
    Actor host;
    host.kind = Actor::Kind::Host;
    host.order = 0;
    actors_.push_back(host);
    items_.emplace_back();
    for (const auto &e : pp_.runtime_sequence) {
      Item it;
      it.kind = e.kind == RuntimeEntry::Kind::Dispatch ? Item::Kind::Dispatch
                                                       : Item::Kind::WaitLaunch;
      it.launch = e.launch;
      it.cost = e.cost;
      items_[0].push_back(it);
    }

    for (const auto &[port, queue] : pp_.port_queues) {
      int a = static_cast<int>(actors_.size());
      Actor pa;
      pa.kind = Actor::Kind::Port;
      pa.tile = port.tile;
      pa.port = port;
      pa.order = a;
      actors_.push_back(pa);
      items_.emplace_back();
      for (const auto &qe : queue) {
        Item it;
        it.kind = Item::Kind::Transfer;
        it.bd = qe.bd;
        it.host = qe.host;
        it.rep = qe.rep;
        if (qe.bd >= 0) {
          const auto &bd = pp_.bds[static_cast<std::size_t>(qe.bd)];
          it.cost = bd.bytes_per_repeat;
          it.is_send = bd.to_stream;
          it.launch = bd.launch;
          it.label = bd.channel;
        } else {
          const auto &ht = pp_.host_transfers[static_cast<std::size_t>(qe.host)];
          it.cost = ht.bytes_acct;
          it.is_send = ht.to_stream;
          it.launch = ht.launch;
          it.label = ht.channel;
        }
        items_[static_cast<std::size_t>(a)].push_back(it);
      }
    }

    for (const auto &[tile, prog] : pp_.core_programs) {
      int a = static_cast<int>(actors_.size());
      Actor ca;
      ca.kind = Actor::Kind::Core;
      ca.tile = tile;
      ca.order = a;
      actors_.push_back(ca);
      items_.emplace_back();
      for (const auto &ci : prog) {
        Item it;
        it.launch = ci.launch;
        switch (ci.kind) {
        case CoreInstr::Kind::Acquire:
          it.kind = Item::Kind::Acquire;
          it.lock = ci.lock;
          break;
        case CoreInstr::Kind::Release:
          it.kind = Item::Kind::Release;
          it.lock = ci.lock;
          break;
        default:
          it.kind = Item::Kind::Kernel;
          it.ci = &ci;
          it.cost = ci.cycles;
          it.label = ci.label;
        }
        items_[static_cast<std::size_t>(a)].push_back(it);
      }
    }

    lock_count_.resize(pp_.locks.size());
    for (std::size_t i = 0; i < pp_.locks.size(); ++i)
      lock_count_[i] = pp_.locks[i].initial;

    build_flows();

    for (std::size_t a = 0; a < items_.size(); ++a)
      for (const auto &it : items_[a])
        if (it.kind != Item::Kind::Dispatch && it.kind != Item::Kind::WaitLaunch)
          ++launch_remaining_[it.launch];
  }

  void build_flows() {
    struct EndRef {
      int actor;
      std::size_t item;
      int seq;
    };
    std::map<std::pair<std::string, int>, std::vector<EndRef>> sends, recvs;
    for (std::size_t a = 0; a < items_.size(); ++a) {
      if (actors_[a].kind != Actor::Kind::Port)
        continue;
      const auto &queue = pp_.port_queues.at(actors_[a].port);
      for (std::size_t i = 0; i < items_[a].size(); ++i) {
        Item &it = items_[a][i];
        if (it.kind != Item::Kind::Transfer)
          continue;
        std::string chan;
        int elem = 0;
        if (it.bd >= 0) {
          chan = pp_.bds[static_cast<std::size_t>(it.bd)].channel;
          elem = pp_.bds[static_cast<std::size_t>(it.bd)].element;
        } else {
          chan = pp_.host_transfers[static_cast<std::size_t>(it.host)].channel;
          elem = pp_.host_transfers[static_cast<std::size_t>(it.host)].element;
        }
        (it.is_send ? sends : recvs)[{chan, elem}].push_back(
            {static_cast<int>(a), i, queue[i].seq});
      }
    }
    // Pair in program (walk) order, not actor enumeration order.
    for (auto &[key, v] : sends)
      std::stable_sort(v.begin(), v.end(),
                       [](const EndRef &x, const EndRef &y) { return x.seq < y.seq; });
    for (auto &[key, v] : recvs)
      std::stable_sort(v.begin(), v.end(),
                       [](const EndRef &x, const EndRef &y) { return x.seq < y.seq; });
    // Broadcast destinations per (channel, src element) from the routes.
    std::map<std::pair<std::string, int>, std::vector<int>> bcast;
    for (const auto &r : pp_.routes) {
      if (r.dsts.size() <= 1)
        continue;
      std::vector<int> delems;
      for (const auto &d : r.dsts)
        for (const auto &[key, ends] : recvs) {
          if (key.first != r.channel || ends.empty())
            continue;
          if (actors_[static_cast<std::size_t>(ends[0].actor)].port == d)
            delems.push_back(key.second);
        }
      bcast[{r.channel, r.element}] = delems;
    }

    for (auto &[key, slist] : sends) {
      std::vector<std::pair<std::string, int>> dst_keys;
      auto bit = bcast.find(key);
      if (bit != bcast.end())
        for (int de : bit->second)
          dst_keys.push_back({key.first, de});
      else
        dst_keys.push_back(key);
      for (const auto &dk : dst_keys) {
        auto rit = recvs.find(dk);
        if (rit == recvs.end() || rit->second.size() != slist.size())
          throw Error("ChannelProtocol",
                      "channel " + key.first + " element " + std::to_string(key.second) +
                          ": send/receive counts differ");
      }
      for (std::size_t k = 0; k < slist.size(); ++k) {
        Flow f;
        f.send = {slist[k].actor, slist[k].item};
        (void)slist[k].seq;
        for (const auto &dk : dst_keys) {
          const auto &r = recvs.at(dk)[k];
          f.recv.push_back({r.actor, r.item});
        }
        int fidx = static_cast<int>(flows_.size());
        items_[static_cast<std::size_t>(slist[k].actor)][slist[k].item].flow = fidx;
        for (const auto &rr : f.recv)
          items_[static_cast<std::size_t>(rr.first)][rr.second].flow = fidx;
        flows_.push_back(std::move(f));
      }
    }
    for (const auto &[key, rlist] : recvs)
      for (const auto &r : rlist)
        if (items_[static_cast<std::size_t>(r.actor)][r.item].flow < 0)
          throw Error("ChannelProtocol",
                      "channel " + key.first + ": receive without matching send");
  }

  // --- engine ---------------------------------------------------------------------

  void try_advance(int a, std::int64_t t) {
    Actor &actor = actors_[static_cast<std::size_t>(a)];
    if (actor.busy)
      return;
    auto &list = items_[static_cast<std::size_t>(a)];
    while (actor.next < list.size()) {
      Item &it = list[actor.next];
      std::int64_t now = std::max(t, actor.avail);
      if (it.kind != Item::Kind::Dispatch && it.kind != Item::Kind::WaitLaunch) {
        auto lit = launch_enabled_.find(it.launch);
        if (lit == launch_enabled_.end())
          return; // not dispatched yet
        now = std::max(now, lit->second);
      }
      switch (it.kind) {
      case Item::Kind::Dispatch: {
        std::int64_t end = now + it.cost;
        result_.stats.dispatch_count++;
        emit_trace("host", "runtime", "dispatch launch " + std::to_string(it.launch),
                   "dispatch", now, it.cost);
        actor.avail = end;
        launch_enabled_[it.launch] = end;
        ++actor.next;
        for (std::size_t other = 1; other < actors_.size(); ++other)
          post(end, static_cast<int>(other), [this, other, end] {
            try_advance(static_cast<int>(other), end);
          });
        continue;
      }
      case Item::Kind::WaitLaunch: {
        if (launch_remaining_[it.launch] > 0)
          return; // finish_item re-advances the host
        actor.avail = std::max(now, launch_done_[it.launch]);
        ++actor.next;
        continue;
      }
      case Item::Kind::Acquire: {
        auto li = static_cast<std::size_t>(it.lock.lock);
        if (lock_count_[li] >= it.lock.amount) {
          lock_count_[li] -= it.lock.amount;
          if (actor.stall_begin >= 0) {
            actor.stall_total += now - actor.stall_begin;
            actor.stall_begin = -1;
          }
          actor.avail = now;
          ++actor.next;
          finish_item(it, now);
          continue;
        }
        if (actor.stall_begin < 0)
          actor.stall_begin = now;
        lock_waiters_[it.lock.lock].insert(a);
        return;
      }
      case Item::Kind::Release: {
        lock_count_[static_cast<std::size_t>(it.lock.lock)] += it.lock.amount;
        actor.avail = now;
        ++actor.next;
        finish_item(it, now);
        wake_lock(it.lock.lock, now);
        continue;
      }
      case Item::Kind::Kernel: {
        std::int64_t end = now + it.cost;
        actor.avail = end;
        actor.busy = true;
        result_.stats.core_busy[actor.tile.str()] += it.cost;
        emit_trace(actor.tile.str(), "core", it.label, "compute", now, it.cost);
        record_op(it.ci->op, now, end, actor.tile.str() + ":core");
        post(end, actor.order, [this, a, end, &it] {
          apply_kernel(*it.ci);
          Actor &me = actors_[static_cast<std::size_t>(a)];
          me.busy = false;
          ++me.next;
          finish_item(it, end);
          try_advance(a, end);
        });
        return;
      }
      case Item::Kind::Transfer: {
        Flow &f = flows_[static_cast<std::size_t>(it.flow)];
        if (f.started)
          return; // completion advances this actor
        f.ready_time = std::max(f.ready_time, now);
        f.arrived.insert(a);
        if (f.arrived.size() < 1 + f.recv.size())
          return;
        start_flow(it.flow, f.ready_time);
        return;
      }
      }
    }
  }

  void wake_lock(int lock, std::int64_t t) {
    auto it = lock_waiters_.find(lock);
    if (it != lock_waiters_.end()) {
      std::set<int> ws = std::move(it->second);
      lock_waiters_.erase(it);
      for (int a : ws)
        post(t, a, [this, a, t] { try_advance(a, t); });
    }
    auto fit = flow_lock_waiters_.find(lock);
    if (fit != flow_lock_waiters_.end()) {
      std::set<int> fs = std::move(fit->second);
      flow_lock_waiters_.erase(fit);
      for (int fidx : fs)
        post(t, 0, [this, fidx, t] {
          Flow &f = flows_[static_cast<std::size_t>(fidx)];
          if (!f.started && f.arrived.size() == 1 + f.recv.size())
            start_flow(fidx, std::max(t, f.ready_time));
        });
    }
  }

  void start_flow(int fidx, std::int64_t t) {
    Flow &f = flows_[static_cast<std::size_t>(fidx)];
    if (f.started)
      return;
    // Lock requirements of every device-side BD entry.
    std::vector<LockAction> acq;
    auto gather = [&](const std::pair<int, std::size_t> &ref) {
      const Item &it = items_[static_cast<std::size_t>(ref.first)][ref.second];
      if (it.bd < 0)
        return;
      const auto &bd = pp_.bds[static_cast<std::size_t>(it.bd)];
      for (const auto &la : bd.before)
        if (la.acquire)
          acq.push_back(la);
    };
    gather(f.send);
    for (const auto &r : f.recv)
      gather(r);
    for (const auto &la : acq)
      if (lock_count_[static_cast<std::size_t>(la.lock)] < la.amount) {
        flow_lock_waiters_[la.lock].insert(fidx);
        mark_stalls(f, t);
        return;
      }
    for (const auto &la : acq)
      lock_count_[static_cast<std::size_t>(la.lock)] -= la.amount;
    f.started = true;

    const Item &send = items_[static_cast<std::size_t>(f.send.first)][f.send.second];
    std::int64_t dur = pp_.config.bd_setup_cycles +
                       (send.cost + pp_.config.stream_bytes_per_cycle - 1) /
                           pp_.config.stream_bytes_per_cycle;
    std::int64_t end = t + dur;

    auto engage = [&](const std::pair<int, std::size_t> &ref) {
      Actor &actor = actors_[static_cast<std::size_t>(ref.first)];
      if (actor.stall_begin >= 0) {
        actor.stall_total += t - actor.stall_begin;
        actor.stall_begin = -1;
      }
      actor.avail = end;
      actor.busy = true;
      const Item &it = items_[static_cast<std::size_t>(ref.first)][ref.second];
      emit_trace(actor.tile.str(), actor.port.tid(),
                 it.label + " " + transfer_buffer(it), "dma", t, dur);
      const Operation *op =
          it.bd >= 0 ? pp_.bds[static_cast<std::size_t>(it.bd)].op : nullptr;
      record_op(op, t, end, actor.tile.str() + ":" + actor.port.tid());
    };
    engage(f.send);
    for (const auto &r : f.recv)
      engage(r);

    result_.stats.route_bytes_in[send.label] += send.cost;
    result_.stats.route_bytes_out[send.label] +=
        send.cost * static_cast<std::int64_t>(f.recv.size());

    post(end, f.send.first, [this, fidx, end] { complete_flow(fidx, end); });
  }

  void mark_stalls(const Flow &f, std::int64_t t) {
    auto mark = [&](const std::pair<int, std::size_t> &ref) {
      Actor &actor = actors_[static_cast<std::size_t>(ref.first)];
      if (actor.stall_begin < 0)
        actor.stall_begin = t;
    };
    mark(f.send);
    for (const auto &r : f.recv)
      mark(r);
  }

  void complete_flow(int fidx, std::int64_t end) {
    Flow &f = flows_[static_cast<std::size_t>(fidx)];
    const Item &send = items_[static_cast<std::size_t>(f.send.first)][f.send.second];
    Bytes payload = read_item(send);
    for (const auto &r : f.recv)
      write_item(items_[static_cast<std::size_t>(r.first)][r.second], payload);

    auto run_after = [&](const std::pair<int, std::size_t> &ref) {
      const Item &it = items_[static_cast<std::size_t>(ref.first)][ref.second];
      if (it.bd < 0)
        return;
      const auto &bd = pp_.bds[static_cast<std::size_t>(it.bd)];
      for (const auto &la : bd.after)
        if (!la.acquire) {
          lock_count_[static_cast<std::size_t>(la.lock)] += la.amount;
          wake_lock(la.lock, end);
        }
      if (it.rep == bd.repeat - 1)
        for (const auto &la : bd.final_after)
          if (!la.acquire) {
            lock_count_[static_cast<std::size_t>(la.lock)] += la.amount;
            wake_lock(la.lock, end);
          }
    };
    run_after(f.send);
    for (const auto &r : f.recv)
      run_after(r);

    auto release_actor = [&](const std::pair<int, std::size_t> &ref) {
      Actor &actor = actors_[static_cast<std::size_t>(ref.first)];
      actor.busy = false;
      ++actor.next;
      finish_item(items_[static_cast<std::size_t>(ref.first)][ref.second], end);
      post(end, actor.order, [this, a = ref.first, end] { try_advance(a, end); });
    };
    release_actor(f.send);
    for (const auto &r : f.recv)
      release_actor(r);
  }

  // --- memory -----------------------------------------------------------------------

  Bytes &buffer_bytes(const std::string &name) {
    auto it = memory_.find(name);
    if (it != memory_.end())
      return it->second;
    const MemRefType &t = pp_.buffer_types.at(name);
    Bytes b(static_cast<std::size_t>(t.num_elements() * storage_width(t.elem)), 0);
    return memory_[name] = std::move(b);
  }

  std::string transfer_buffer(const Item &it) {
    if (it.bd >= 0)
      return buffer_for_rep(pp_.bds[static_cast<std::size_t>(it.bd)], it.rep);
    return pp_.host_transfers[static_cast<std::size_t>(it.host)].buffer;
  }

  std::vector<std::int64_t> item_addrs(const Item &it) {
    if (it.bd >= 0)
      return enumerate_dims(entry_dims(pp_.bds[static_cast<std::size_t>(it.bd)], it.rep));
    return pp_.host_transfers[static_cast<std::size_t>(it.host)].enumerate();
  }

  Bytes read_item(const Item &it) {
    std::string buf = transfer_buffer(it);
    const MemRefType &t = pp_.buffer_types.at(buf);
    int w = storage_width(t.elem);
    Bytes &mem = buffer_bytes(buf);
    Bytes out;
    for (std::int64_t e : item_addrs(it)) {
      if (e < 0 || (e + 1) * w > static_cast<std::int64_t>(mem.size()))
        throw Error("OutOfBounds", "transfer read outside " + buf);
      out.insert(out.end(), mem.begin() + e * w, mem.begin() + (e + 1) * w);
    }
    return out;
  }

  void write_item(const Item &it, const Bytes &payload) {
    std::string buf = transfer_buffer(it);
    const MemRefType &t = pp_.buffer_types.at(buf);
    int w = storage_width(t.elem);
    auto addrs = item_addrs(it);
    if (payload.size() != addrs.size() * static_cast<std::size_t>(w))
      throw Error("ChannelProtocol", "payload size mismatch into " + buf);
    Bytes &mem = buffer_bytes(buf);
    for (std::size_t k = 0; k < addrs.size(); ++k) {
      std::int64_t e = addrs[k];
      if (e < 0 || (e + 1) * w > static_cast<std::int64_t>(mem.size()))
        throw Error("OutOfBounds", "transfer write outside " + buf);
      std::memcpy(mem.data() + e * w, payload.data() + k * static_cast<std::size_t>(w),
                  static_cast<std::size_t>(w));
    }
  }

  // --- kernel semantics ----------------------------------------------------------

  ResolvedView resolve_view(const BufferView &v, const CoreInstr &ci) {
    const std::string &key = ci.buffers.at(v.buffer.id);
    Bytes &mem = buffer_bytes(key);
    const MemRefType &t = pp_.buffer_types.at(key);
    ResolvedView rv;
    rv.data = mem.data();
    rv.elem = t.elem;
    rv.buffer_elems = t.num_elements();
    if (v.whole()) {
      std::int64_t stride = 1;
      rv.offsets.assign(t.shape.size(), 0);
      rv.sizes = t.shape;
      rv.strides.assign(t.shape.size(), 1);
      for (std::size_t d = t.shape.size(); d-- > 0;) {
        rv.strides[d] = stride;
        stride *= t.shape[d];
      }
      return rv;
    }
    auto idx = [&](const IndexExpr &e) {
      return e.is_literal() ? e.literal : ci.env.at(e.value.id);
    };
    for (std::size_t d = 0; d < v.offsets.size(); ++d) {
      rv.offsets.push_back(idx(v.offsets[d]));
      rv.sizes.push_back(idx(v.sizes[d]));
      rv.strides.push_back(idx(v.strides[d]));
    }
    return rv;
  }

  void apply_kernel(const CoreInstr &ci) {
    const Operation &op = *ci.op;
    if (op.kind == OpKind::KernelCall) {
      KernelIO io;
      for (const auto &v : op.reads)
        io.reads.push_back(resolve_view(v, ci));
      for (const auto &v : op.writes)
        io.writes.push_back(resolve_view(v, ci));
      io.op = &op;
      run_kernel(op.symbol, io);
      return;
    }
    if (op.kind == OpKind::Memcpy) {
      ResolvedView dst = resolve_view(op.views[0], ci);
      ResolvedView src = resolve_view(op.views[1], ci);
      auto si = src.enumerate(), di = dst.enumerate();
      if (si.size() != di.size())
        throw Error("KernelShape", "local copy size mismatch");
      int w = storage_width(src.elem);
      for (std::size_t k = 0; k < si.size(); ++k)
        std::memcpy(dst.data + di[k] * w, src.data + si[k] * w,
                    static_cast<std::size_t>(w));
      return;
    }
    // Inline compute block: interpret scalars against the sim memory.
    std::map<int, std::int64_t> ints(ci.env);
    std::map<int, double> floats;
    run_inline(op, ci, ints, floats);
  }

  void run_inline(const Operation &loop, const CoreInstr &ci,
                  std::map<int, std::int64_t> &ints, std::map<int, double> &floats) {
    const Value &iv = loop.regions[0].args[0];
    for (std::int64_t i = loop.lb; i < loop.ub; i += loop.step) {
      ints[iv.id] = i;
      for (const auto &o : loop.regions[0].ops)
        exec_scalar(*o, ci, ints, floats);
    }
  }

  void exec_scalar(const Operation &op, const CoreInstr &ci,
                   std::map<int, std::int64_t> &ints, std::map<int, double> &floats) {
    switch (op.kind) {
    case OpKind::ScfFor:
      run_inline(op, ci, ints, floats);
      return;
    case OpKind::ArithConst:
      if (op.const_type.kind == TypeKind::Scalar && is_float(op.const_type.scalar))
        floats[op.results[0].id] = static_cast<double>(op.const_value);
      else
        ints[op.results[0].id] = op.const_value;
      return;
    case OpKind::AffineApply: {
      std::vector<std::int64_t> dims, syms;
      for (const auto &v : op.apply_dims)
        dims.push_back(ints.at(v.id));
      for (const auto &v : op.apply_syms)
        syms.push_back(ints.at(v.id));
      ints[op.results[0].id] = eval_map(op.map, dims, syms)[0];
      return;
    }
    case OpKind::ArithAdd:
    case OpKind::ArithMul: {
      bool flt = op.const_type.kind == TypeKind::Scalar && is_float(op.const_type.scalar);
      if (flt) {
        double x = floats.at(op.operands[0].id), y = floats.at(op.operands[1].id);
        floats[op.results[0].id] = op.kind == OpKind::ArithAdd ? x + y : x * y;
      } else {
        std::int64_t x = ints.at(op.operands[0].id), y = ints.at(op.operands[1].id);
        ints[op.results[0].id] = op.kind == OpKind::ArithAdd ? x + y : x * y;
      }
      return;
    }
    case OpKind::Load:
    case OpKind::Store: {
      const std::string &key = ci.buffers.at(op.buffer.id);
      Bytes &mem = buffer_bytes(key);
      const MemRefType &t = pp_.buffer_types.at(key);
      std::int64_t flat = 0, stride = 1;
      std::vector<std::int64_t> strides(t.shape.size(), 1);
      for (std::size_t d = t.shape.size(); d-- > 0;) {
        strides[d] = stride;
        stride *= t.shape[d];
      }
      for (std::size_t d = 0; d < op.indices.size(); ++d) {
        std::int64_t x = op.indices[d].is_literal() ? op.indices[d].literal
                                                    : ints.at(op.indices[d].value.id);
        if (x < 0 || x >= t.shape[d])
          throw Error("OutOfBounds", "inline access outside " + key);
        flat += x * strides[d];
      }
      if (op.kind == OpKind::Load) {
        if (is_float(t.elem))
          floats[op.results[0].id] = load_elem_f(mem.data(), t.elem, flat);
        else
          ints[op.results[0].id] = load_elem_i(mem.data(), t.elem, flat);
      } else {
        if (is_float(t.elem))
          store_elem_f(mem.data(), t.elem, flat, floats.at(op.operands[0].id));
        else
          store_elem_i(mem.data(), t.elem, flat, ints.at(op.operands[0].id));
      }
      return;
    }
    default:
      return;
    }
  }

  // --- bookkeeping -----------------------------------------------------------------

  void finish_item(const Item &it, std::int64_t t) {
    if (it.kind == Item::Kind::Dispatch || it.kind == Item::Kind::WaitLaunch)
      return;
    launch_done_[it.launch] = std::max(launch_done_[it.launch], t);
    if (--launch_remaining_[it.launch] == 0)
      post(t, 0, [this, t] { try_advance(0, t); });
  }

  void emit_trace(const std::string &pid, const std::string &tid,
                  const std::string &name, const std::string &cat, std::int64_t ts,
                  std::int64_t dur) {
    result_.trace.push_back({pid, tid, name, cat, ts, dur});
    result_.stats.busy[pid][tid] += dur;
    result_.stats.makespan = std::max(result_.stats.makespan, ts + dur);
  }

  void record_op(const Operation *op, std::int64_t s, std::int64_t e,
                 const std::string &res) {
    if (!op)
      return;
    result_.op_intervals[op].push_back({s, e});
    result_.op_resources[op].insert(res);
  }

  void finish() {
    bool unfinished = false;
    for (std::size_t a = 0; a < items_.size(); ++a)
      unfinished |= actors_[a].next < items_[a].size();
    if (unfinished)
      report_deadlock();
    for (std::size_t a = 0; a < actors_.size(); ++a)
      if (actors_[a].kind == Actor::Kind::Core)
        result_.stats.core_stall[actors_[a].tile.str()] = actors_[a].stall_total;
    for (const auto &[name, home] : pp_.buffer_homes)
      if (home.first.kind == TileId::Kind::Host && memory_.count(name))
        result_.memory[name] = memory_[name];
    std::stable_sort(result_.trace.begin(), result_.trace.end(),
                     [](const TraceEvent &x, const TraceEvent &y) {
                       return std::tie(x.ts, x.pid, x.tid) <
                              std::tie(y.ts, y.pid, y.tid);
                     });
  }

  [[noreturn]] void report_deadlock() {
    std::ostringstream os;
    os << "simulation quiesced with unfinished programs; wait-for state:";
    for (std::size_t a = 0; a < items_.size(); ++a) {
      const Actor &actor = actors_[a];
      if (actor.next >= items_[a].size())
        continue;
      const Item &it = items_[a][actor.next];
      os << "\n  " << (actor.kind == Actor::Kind::Core
                           ? actor.tile.str() + ":core"
                           : actor.kind == Actor::Kind::Port
                                 ? actor.tile.str() + ":" + actor.port.tid()
                                 : "host")
         << " blocked at item " << actor.next;
      if (it.kind == Item::Kind::Acquire)
        os << " acquiring lock " << it.lock.lock << " (count "
           << lock_count_[static_cast<std::size_t>(it.lock.lock)] << ", needs "
           << it.lock.amount << ")";
      if (it.kind == Item::Kind::Transfer)
        os << " on channel " << it.label;
    }
    for (std::size_t i = 0; i < pp_.locks.size(); ++i)
      os << "\n  lock " << i << " (" << pp_.locks[i].buffer << ", "
         << (pp_.locks[i].producer_side ? "producer" : "consumer")
         << ") count=" << lock_count_[i];
    throw Error("Deadlock", os.str());
  }

  const PlacedProgram &pp_;
  SimResult result_;
  std::map<std::string, Bytes> memory_;
  std::vector<Actor> actors_;
  std::vector<std::vector<Item>> items_;
  std::vector<std::int64_t> lock_count_;
  std::map<int, std::set<int>> lock_waiters_;
  std::map<int, std::set<int>> flow_lock_waiters_;
  std::vector<Flow> flows_;
  std::map<int, std::int64_t> launch_enabled_;
  std::map<int, int> launch_remaining_;
  std::map<int, std::int64_t> launch_done_;
  std::priority_queue<Event, std::vector<Event>, std::greater<Event>> events_;
  std::int64_t seq_ = 0;
};

SimResult simulate(const PlacedProgram &pp, const BufferBindings &inputs) {
  Simulator sim(pp, inputs);
  return sim.run();
}

} // namespace air
