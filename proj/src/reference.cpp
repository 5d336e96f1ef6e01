#include "air/interp.hpp"

#include "air/error.hpp"
#include "air/kernels.hpp"

#include <cstring>
#include <deque>
#include <sstream>

namespace air {

namespace {

struct Buffer {
  MemRefType type;
  Bytes data;
};

class Interp {
public:
  Interp(const Program &p, const BufferBindings &inputs, const RegionSchedule *sched)
      : program_(p), schedule_(sched) {
    auto funcs = p.funcs();
    if (funcs.empty())
      return;
    func_ = funcs[0];
    const auto &args = func_->regions[0].args;
    for (std::size_t i = 0; i < args.size(); ++i) {
      if (args[i].type.kind != TypeKind::MemRef)
        continue;
      Buffer b;
      b.type = args[i].type.memref;
      b.data.assign(static_cast<std::size_t>(b.type.num_elements() *
                                             storage_width(b.type.elem)),
                    0);
      std::string name = i < func_->arg_names.size() ? func_->arg_names[i]
                                                     : "arg" + std::to_string(i);
      auto it = inputs.find(name);
      if (it != inputs.end()) {
        std::size_t n = std::min(it->second.size(), b.data.size());
        std::memcpy(b.data.data(), it->second.data(), n);
      }
      buffers_[args[i].id] = std::move(b);
      arg_ids_.emplace_back(name, args[i].id);
    }
  }

  BufferBindings run() {
    if (func_)
      exec_region(func_->regions[0]);
    BufferBindings out;
    for (const auto &[name, id] : arg_ids_)
      out[name] = buffers_.at(id).data;
    return out;
  }

private:
  // --- scalar environment ---------------------------------------------------

  std::int64_t index_of(const IndexExpr &e) {
    if (e.is_literal())
      return e.literal;
    auto it = ints_.find(e.value.id);
    if (it == ints_.end())
      throw Error("InterpState", "index value used before evaluation");
    return it->second;
  }

  // --- buffers ---------------------------------------------------------------

  Buffer &buffer_of(const Value &v) {
    auto it = buffers_.find(v.id);
    if (it == buffers_.end())
      throw Error("InterpState", "buffer used before allocation");
    return it->second;
  }

  ResolvedView resolve(const BufferView &v) {
    Buffer &b = buffer_of(v.buffer);
    ResolvedView rv;
    rv.data = b.data.data();
    rv.elem = b.type.elem;
    rv.buffer_elems = b.type.num_elements();
    if (v.whole()) {
      // Whole buffer in its natural shape.
      std::int64_t stride = 1;
      rv.offsets.assign(b.type.shape.size(), 0);
      rv.sizes = b.type.shape;
      rv.strides.assign(b.type.shape.size(), 1);
      for (std::size_t d = b.type.shape.size(); d-- > 0;) {
        rv.strides[d] = stride;
        stride *= b.type.shape[d];
      }
      return rv;
    }
    for (std::size_t d = 0; d < v.offsets.size(); ++d) {
      rv.offsets.push_back(index_of(v.offsets[d]));
      rv.sizes.push_back(index_of(v.sizes[d]));
      rv.strides.push_back(index_of(v.strides[d]));
    }
    return rv;
  }

  // Payload of a view in element storage order.
  Bytes read_payload(const BufferView &v) {
    ResolvedView rv = resolve(v);
    int w = storage_width(rv.elem);
    Bytes out;
    out.reserve(static_cast<std::size_t>(rv.num_elements() * w));
    for (std::int64_t e : rv.enumerate()) {
      const std::uint8_t *src = rv.data + e * w;
      out.insert(out.end(), src, src + w);
    }
    return out;
  }

  void write_payload(const BufferView &v, const Bytes &payload) {
    ResolvedView rv = resolve(v);
    int w = storage_width(rv.elem);
    auto idxs = rv.enumerate();
    if (payload.size() != idxs.size() * static_cast<std::size_t>(w))
      throw Error("ChannelProtocol",
                  "payload of " + std::to_string(payload.size()) +
                      " bytes does not match destination pattern of " +
                      std::to_string(idxs.size() * static_cast<std::size_t>(w)) +
                      " bytes");
    for (std::size_t i = 0; i < idxs.size(); ++i)
      std::memcpy(rv.data + idxs[i] * w, payload.data() + i * static_cast<std::size_t>(w),
                  static_cast<std::size_t>(w));
  }

  // --- channels ---------------------------------------------------------------

  std::string channel_key(const std::string &sym, const std::vector<std::int64_t> &coord) {
    std::ostringstream os;
    os << sym;
    for (auto c : coord)
      os << "," << c;
    return os.str();
  }

  std::vector<std::int64_t> bundle_coord(const Operation &op) {
    std::vector<std::int64_t> coord;
    const Operation *decl = program_.find_channel(op.symbol);
    std::size_t arity = decl ? decl->extents.size() : op.bundle_index.size();
    for (std::size_t i = 0; i < arity; ++i)
      coord.push_back(i < op.bundle_index.size() ? index_of(op.bundle_index[i]) : 0);
    return coord;
  }

  // --- execution ---------------------------------------------------------------

  void exec_region(const Region &r) {
    if (schedule_) {
      auto it = schedule_->find(&r);
      if (it != schedule_->end()) {
        for (const Operation *op : it->second)
          exec_op(*op);
        return;
      }
    }
    for (const auto &op : r.ops)
      exec_op(*op);
  }

  void exec_op(const Operation &op) {
    switch (op.kind) {
    case OpKind::Alloc: {
      Buffer b;
      b.type = op.alloc_type;
      b.data.assign(static_cast<std::size_t>(b.type.num_elements() *
                                             storage_width(b.type.elem)),
                    0);
      buffers_[op.results[0].id] = std::move(b);
      return;
    }
    case OpKind::Dealloc:
      buffers_.erase(op.buffer.id);
      return;
    case OpKind::Memcpy: {
      Bytes payload = read_payload(op.views[1]);
      write_payload(op.views[0], payload);
      return;
    }
    case OpKind::ChannelPut: {
      Bytes payload = read_payload(op.views[0]);
      auto coord = bundle_coord(op);
      auto bset = op.attrs.find("broadcast");
      if (bset != op.attrs.end()) {
        const auto &set = std::get<IntegerSet>(bset->second);
        const Operation *decl = program_.find_channel(op.symbol);
        std::vector<std::int64_t> bounds = decl->extents;
        // Symbols bind the source coordinates named by the src-dims mask.
        std::int64_t mask = op.int_attr("broadcast_src_dims",
                                        (std::int64_t{1} << set.num_syms) - 1);
        std::vector<std::int64_t> srcs;
        for (std::size_t d = 0; d < coord.size(); ++d)
          if (mask & (std::int64_t{1} << d))
            srcs.push_back(coord[d]);
        for (const auto &dest : broadcast_destinations(set, srcs, bounds))
          channels_[channel_key(op.symbol, dest)].push_back(payload);
      } else {
        channels_[channel_key(op.symbol, coord)].push_back(payload);
      }
      return;
    }
    case OpKind::ChannelGet: {
      auto key = channel_key(op.symbol, bundle_coord(op));
      auto &q = channels_[key];
      if (q.empty())
        throw Error("ChannelProtocol", "get on empty channel " + key +
                                           " (put/get order mismatch)");
      Bytes payload = std::move(q.front());
      q.pop_front();
      write_payload(op.views[0], payload);
      return;
    }
    case OpKind::KernelCall: {
      KernelIO io;
      for (const auto &v : op.reads)
        io.reads.push_back(resolve(v));
      for (const auto &v : op.writes)
        io.writes.push_back(resolve(v));
      io.op = &op;
      run_kernel(op.symbol, io);
      return;
    }
    case OpKind::ScfFor: {
      const Value &iv = op.regions[0].args[0];
      for (std::int64_t i = op.lb; i < op.ub; i += op.step) {
        ints_[iv.id] = i;
        exec_region(op.regions[0]);
      }
      return;
    }
    case OpKind::ScfParallel:
    case OpKind::Launch:
    case OpKind::Herd: {
      if (op.regions.empty())
        return;
      const auto &args = op.regions[0].args;
      std::vector<std::int64_t> extents = op.extents;
      if (extents.empty()) {
        exec_region(op.regions[0]);
        return;
      }
      // Lexicographic instance order.
      std::vector<std::int64_t> coord(extents.size(), 0);
      while (true) {
        for (std::size_t i = 0; i < coord.size() && i < args.size(); ++i)
          ints_[args[i].id] = coord[i];
        exec_region(op.regions[0]);
        std::size_t d = coord.size();
        bool done = true;
        while (d-- > 0) {
          if (++coord[d] < extents[d]) {
            done = false;
            break;
          }
          coord[d] = 0;
        }
        if (done)
          return;
      }
    }
    case OpKind::Segment:
      exec_region(op.regions[0]);
      return;
    case OpKind::ScfYield:
    case OpKind::WaitAll:
      return; // tokens are ignored here
    case OpKind::AffineApply: {
      std::vector<std::int64_t> dims, syms;
      for (const auto &v : op.apply_dims)
        dims.push_back(ints_.at(v.id));
      for (const auto &v : op.apply_syms)
        syms.push_back(ints_.at(v.id));
      ints_[op.results[0].id] = eval_map(op.map, dims, syms)[0];
      return;
    }
    case OpKind::ArithConst:
      if (op.const_type.kind == TypeKind::Index)
        ints_[op.results[0].id] = op.const_value;
      else if (op.const_type.kind == TypeKind::Scalar &&
               is_float(op.const_type.scalar))
        floats_[op.results[0].id] = static_cast<double>(op.const_value);
      else
        ints_[op.results[0].id] = op.const_value;
      return;
    case OpKind::ArithAdd:
    case OpKind::ArithMul: {
      bool flt = op.const_type.kind == TypeKind::Scalar && is_float(op.const_type.scalar);
      if (flt) {
        double a = floats_.at(op.operands[0].id);
        double b = floats_.at(op.operands[1].id);
        floats_[op.results[0].id] = op.kind == OpKind::ArithAdd ? a + b : a * b;
      } else {
        std::int64_t a = ints_.at(op.operands[0].id);
        std::int64_t b = ints_.at(op.operands[1].id);
        ints_[op.results[0].id] = op.kind == OpKind::ArithAdd ? a + b : a * b;
      }
      return;
    }
    case OpKind::Load: {
      Buffer &b = buffer_of(op.buffer);
      std::int64_t flat = flat_index(op, b);
      if (is_float(b.type.elem))
        floats_[op.results[0].id] = load_elem_f(b.data.data(), b.type.elem, flat);
      else
        ints_[op.results[0].id] = load_elem_i(b.data.data(), b.type.elem, flat);
      return;
    }
    case OpKind::Store: {
      Buffer &b = buffer_of(op.buffer);
      std::int64_t flat = flat_index(op, b);
      if (is_float(b.type.elem))
        store_elem_f(b.data.data(), b.type.elem, flat, floats_.at(op.operands[0].id));
      else
        store_elem_i(b.data.data(), b.type.elem, flat, ints_.at(op.operands[0].id));
      return;
    }
    case OpKind::Module:
    case OpKind::Func:
    case OpKind::ChannelDecl:
      return;
    }
  }

  std::int64_t flat_index(const Operation &op, Buffer &b) {
    const auto &shape = b.type.shape;
    if (op.indices.size() != shape.size())
      throw Error("OutOfBounds", "index rank mismatch");
    std::int64_t flat = 0, stride = 1;
    std::vector<std::int64_t> strides(shape.size(), 1);
    for (std::size_t d = shape.size(); d-- > 0;) {
      strides[d] = stride;
      stride *= shape[d];
    }
    for (std::size_t d = 0; d < shape.size(); ++d) {
      std::int64_t i = index_of(op.indices[d]);
      if (i < 0 || i >= shape[d])
        throw Error("OutOfBounds", "index " + std::to_string(i) +
                                       " outside dimension of " +
                                       std::to_string(shape[d]));
      flat += i * strides[d];
    }
    return flat;
  }

  const Program &program_;
  const RegionSchedule *schedule_;
  const Operation *func_ = nullptr;
  std::map<int, Buffer> buffers_;
  std::map<int, std::int64_t> ints_;
  std::map<int, double> floats_;
  std::map<std::string, std::deque<Bytes>> channels_;
  std::vector<std::pair<std::string, int>> arg_ids_;
};

} // namespace

BufferBindings reference_execute(const Program &p, const BufferBindings &inputs,
                                 const RegionSchedule *schedule) {
  Interp interp(p, inputs, schedule);
  return interp.run();
}

} // namespace air
