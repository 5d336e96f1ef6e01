#include "air/sim.hpp"

#include <json.hpp>

#include <fstream>

namespace air {

using nlohmann::json;

std::string trace_json(const SimResult &r) {
  json arr = json::array();
  // Metadata: cycle units.
  arr.push_back({{"name", "clock_sync"},
                 {"ph", "M"},
                 {"pid", "meta"},
                 {"args", {{"unit", "cycles"}}}});
  for (const auto &e : r.trace)
    arr.push_back({{"name", e.name},
                   {"cat", e.cat},
                   {"ph", "X"},
                   {"ts", e.ts},
                   {"dur", e.dur},
                   {"pid", e.pid},
                   {"tid", e.tid}});
  return arr.dump(2);
}

void export_trace(const SimResult &r, const std::string &path) {
  std::ofstream out(path);
  out << trace_json(r) << "\n";
}

std::string stats_json(const SimResult &r) {
  json j;
  j["makespan"] = r.stats.makespan;
  j["dispatches"] = r.stats.dispatch_count;
  json actors;
  for (const auto &[pid, tids] : r.stats.busy) {
    json per;
    for (const auto &[tid, busy] : tids)
      per[tid] = {{"busy", busy}};
    actors[pid] = per;
  }
  for (const auto &[pid, busy] : r.stats.core_busy) {
    actors[pid]["core"]["busy"] = busy;
    auto it = r.stats.core_stall.find(pid);
    actors[pid]["core"]["stall"] = it != r.stats.core_stall.end() ? it->second : 0;
  }
  j["per_actor"] = actors;
  json routes;
  for (const auto &[chan, bytes] : r.stats.route_bytes_in) {
    routes[chan]["bytes_in"] = bytes;
    auto it = r.stats.route_bytes_out.find(chan);
    routes[chan]["bytes_out"] = it != r.stats.route_bytes_out.end() ? it->second : 0;
  }
  j["routes"] = routes;
  return j.dump(2);
}

namespace {

struct Span {
  std::int64_t lo, hi;
};

Span total_span(const std::vector<std::array<std::int64_t, 2>> &iv) {
  Span s{iv[0][0], iv[0][1]};
  for (const auto &x : iv) {
    s.lo = std::min(s.lo, x[0]);
    s.hi = std::max(s.hi, x[1]);
  }
  return s;
}

bool intervals_overlap(const std::vector<std::array<std::int64_t, 2>> &a,
                       const std::vector<std::array<std::int64_t, 2>> &b) {
  for (const auto &x : a)
    for (const auto &y : b)
      if (x[0] < y[1] && y[0] < x[1])
        return true;
  return false;
}

} // namespace

std::vector<Violation> check_schedule_constraints(const SimResult &result,
                                                  const Program &p) {
  std::vector<Violation> out;
  // token id -> defining op
  std::map<int, const Operation *> def;
  walk(*p.module, [&](const Operation &op) {
    for (const auto &res : op.results)
      if (res.type.kind == TypeKind::Token)
        def[res.id] = &op;
  });

  auto name_of = [](const Operation *op) {
    return op_name(op->kind) + (op->symbol.empty() ? "" : " @" + op->symbol) + " at " +
           std::to_string(op->loc.line) + ":" + std::to_string(op->loc.col);
  };

  walk(*p.module, [&](const Operation &op) {
    auto me = result.op_intervals.find(&op);
    // Dependency edges: happens-before (aggregate spans; per-instance
    // interleavings inside loops are guarded by their carried tokens).
    for (const auto &d : op.deps) {
      auto dit = def.find(d.id);
      if (dit == def.end())
        continue;
      auto src = result.op_intervals.find(dit->second);
      if (src == result.op_intervals.end() || me == result.op_intervals.end())
        continue;
      if (src->second.size() == me->second.size()) {
        for (std::size_t k = 0; k < me->second.size(); ++k)
          if (src->second[k][1] > me->second[k][0]) {
            out.push_back({"DependencyViolation",
                           name_of(dit->second) + " must happen before " +
                               name_of(&op)});
            break;
          }
      } else {
        Span s = total_span(src->second);
        Span m = total_span(me->second);
        if (s.hi > m.lo && !(m.lo >= s.lo))
          out.push_back({"DependencyViolation",
                         name_of(dit->second) + " must happen before " + name_of(&op)});
      }
    }
    // Concurrency: overlapping in time on distinct resources.
    for (const auto &c : op.concurs) {
      auto dit = def.find(c.id);
      if (dit == def.end())
        continue;
      auto other = result.op_intervals.find(dit->second);
      if (other == result.op_intervals.end() || me == result.op_intervals.end())
        continue;
      bool overlap = intervals_overlap(me->second, other->second);
      bool distinct = true;
      auto ra = result.op_resources.find(&op);
      auto rb = result.op_resources.find(dit->second);
      if (ra != result.op_resources.end() && rb != result.op_resources.end())
        for (const auto &r : ra->second)
          distinct &= !rb->second.count(r);
      if (!overlap || !distinct)
        out.push_back({"ConcurrencyViolation",
                       name_of(&op) + " and " + name_of(dit->second) +
                           " must be scheduled at the same time on exclusive resources"});
    }
    // Affinity: same resource, disjoint time slots.
    for (const auto &aff : op.affinities) {
      auto dit = def.find(aff.id);
      if (dit == def.end())
        continue;
      auto other = result.op_intervals.find(dit->second);
      if (other == result.op_intervals.end() || me == result.op_intervals.end())
        continue;
      bool same_resource = false;
      auto ra = result.op_resources.find(&op);
      auto rb = result.op_resources.find(dit->second);
      if (ra != result.op_resources.end() && rb != result.op_resources.end())
        for (const auto &r : ra->second)
          same_resource |= rb->second.count(r) != 0;
      bool disjoint = !intervals_overlap(me->second, other->second);
      if (!same_resource || !disjoint)
        out.push_back({"AffinityViolation",
                       name_of(&op) + " and " + name_of(dit->second) +
                           " must share resources in disjoint time slots"});
    }
  });
  return out;
}

} // namespace air
