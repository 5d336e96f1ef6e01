#include "air/ir.hpp"

#include <map>
#include <set>
#include <sstream>
#include <vector>

namespace air {

namespace {

class Printer {
public:
  explicit Printer(const Program &p) : program_(p) {}

  std::string run() {
    os_ << "module {\n";
    indent_ = 1;
    for (const auto &op : program_.body().ops)
      print_op(*op);
    os_ << "}\n";
    return os_.str();
  }

private:
  std::string name(const Value &v) {
    auto it = names_.find(v.id);
    if (it != names_.end())
      return "%" + it->second;
    std::string n = std::to_string(next_++);
    names_[v.id] = n;
    return "%" + n;
  }

  void pad() {
    for (int i = 0; i < indent_; ++i)
      os_ << "  ";
  }

  void print_values(const std::vector<Value> &vs) {
    for (std::size_t i = 0; i < vs.size(); ++i)
      os_ << (i ? ", " : "") << name(vs[i]);
  }

  void print_index(const IndexExpr &e) {
    if (e.is_literal())
      os_ << e.literal;
    else
      os_ << name(e.value);
  }

  void print_index_list(const std::vector<IndexExpr> &l) {
    os_ << "[";
    for (std::size_t i = 0; i < l.size(); ++i) {
      if (i)
        os_ << ", ";
      print_index(l[i]);
    }
    os_ << "]";
  }

  void print_view(const BufferView &v) {
    os_ << name(v.buffer);
    if (!v.whole()) {
      os_ << " ";
      print_index_list(v.offsets);
      os_ << " ";
      print_index_list(v.sizes);
      os_ << " ";
      print_index_list(v.strides);
    }
  }

  void print_view_list(const std::vector<BufferView> &vs) {
    os_ << "(";
    for (std::size_t i = 0; i < vs.size(); ++i) {
      if (i)
        os_ << ", ";
      print_view(vs[i]);
    }
    os_ << ")";
  }

  void print_async_clauses(const Operation &op) {
    if (op.is_async)
      os_ << " async";
    if (!op.deps.empty()) {
      os_ << " deps(";
      print_values(op.deps);
      os_ << ")";
    }
    if (!op.concurs.empty()) {
      os_ << " concur(";
      print_values(op.concurs);
      os_ << ")";
    }
    if (!op.affinities.empty()) {
      os_ << " affinity(";
      print_values(op.affinities);
      os_ << ")";
    }
  }

  void print_attrs(const Operation &op) {
    if (op.attrs.empty())
      return;
    os_ << " attrs {";
    bool first = true;
    for (const auto &[k, v] : op.attrs) {
      if (!first)
        os_ << ", ";
      first = false;
      os_ << k << " = ";
      if (auto *i = std::get_if<std::int64_t>(&v))
        os_ << *i;
      else if (auto *d = std::get_if<double>(&v)) {
        std::ostringstream tmp;
        tmp << *d;
        std::string s = tmp.str();
        if (s.find('.') == std::string::npos && s.find('e') == std::string::npos)
          s += ".0";
        os_ << s;
      } else if (auto *s = std::get_if<std::string>(&v))
        os_ << '"' << *s << '"';
      else if (auto *m = std::get_if<AffineMap>(&v))
        os_ << to_string(*m);
      else if (auto *st = std::get_if<IntegerSet>(&v))
        os_ << to_string(*st);
    }
    os_ << "}";
  }

  void print_region(const Operation &parent, const Region &r) {
    os_ << " {\n";
    ++indent_;
    for (const auto &op : r.ops)
      print_op(*op);
    --indent_;
    pad();
    os_ << "}";
    (void)parent;
  }

  void print_op(const Operation &op) {
    pad();
    if (!op.results.empty()) {
      print_values(op.results);
      os_ << " = ";
    }
    switch (op.kind) {
    case OpKind::ChannelDecl: {
      os_ << "air.channel @" << op.symbol << " [";
      for (std::size_t i = 0; i < op.extents.size(); ++i)
        os_ << (i ? ", " : "") << op.extents[i];
      os_ << "]";
      break;
    }
    case OpKind::Func: {
      // Seed stable names for func args so input bindings survive reprint.
      // Numeric names would collide with canonical renumbering; skip them.
      for (std::size_t i = 0; i < op.regions[0].args.size() && i < op.arg_names.size(); ++i) {
        const std::string &n = op.arg_names[i];
        bool numeric = !n.empty() && n.find_first_not_of("0123456789") == std::string::npos;
        if (!numeric && taken_.insert(n).second)
          names_.emplace(op.regions[0].args[i].id, n);
      }
      os_ << "func @" << op.symbol << "(";
      const auto &args = op.regions[0].args;
      for (std::size_t i = 0; i < args.size(); ++i) {
        if (i)
          os_ << ", ";
        os_ << name(args[i]) << ": " << to_string(args[i].type);
      }
      os_ << ")";
      print_region(op, op.regions[0]);
      break;
    }
    case OpKind::Launch: {
      os_ << "air.launch";
      print_async_clauses(op);
      if (!op.extents.empty()) {
        os_ << " (";
        print_values(op.regions[0].args);
        os_ << ") in [";
        for (std::size_t i = 0; i < op.extents.size(); ++i)
          os_ << (i ? ", " : "") << op.extents[i];
        os_ << "]";
      }
      print_attrs(op);
      print_region(op, op.regions[0]);
      break;
    }
    case OpKind::Segment: {
      os_ << "air.segment";
      print_async_clauses(op);
      if (!op.symbol.empty())
        os_ << " @" << op.symbol;
      print_attrs(op);
      print_region(op, op.regions[0]);
      break;
    }
    case OpKind::Herd: {
      os_ << "air.herd";
      print_async_clauses(op);
      if (!op.symbol.empty())
        os_ << " @" << op.symbol;
      os_ << " tile (";
      print_values(op.regions[0].args);
      os_ << ") in [" << op.extents[0] << ", " << op.extents[1] << "]";
      print_attrs(op);
      print_region(op, op.regions[0]);
      break;
    }
    case OpKind::ScfFor: {
      os_ << "scf.for";
      print_async_clauses(op);
      os_ << " " << name(op.regions[0].args[0]) << " = " << op.lb << " to "
          << op.ub << " step " << op.step;
      if (!op.iter_init.empty()) {
        os_ << " iter_args(";
        for (std::size_t i = 0; i < op.iter_init.size(); ++i) {
          if (i)
            os_ << ", ";
          os_ << name(op.regions[0].args[i + 1]) << " = " << name(op.iter_init[i]);
        }
        os_ << ")";
      }
      print_region(op, op.regions[0]);
      break;
    }
    case OpKind::ScfParallel: {
      os_ << "scf.parallel";
      print_async_clauses(op);
      os_ << " (";
      std::vector<Value> ivs(op.regions[0].args.begin(),
                             op.regions[0].args.begin() +
                                 static_cast<std::ptrdiff_t>(op.extents.size()));
      print_values(ivs);
      os_ << ") in (";
      for (std::size_t i = 0; i < op.extents.size(); ++i)
        os_ << (i ? ", " : "") << op.extents[i];
      os_ << ")";
      if (!op.iter_init.empty()) {
        os_ << " init(" << name(op.regions[0].args[op.extents.size()]) << " = "
            << name(op.iter_init[0]) << ")";
      }
      print_region(op, op.regions[0]);
      break;
    }
    case OpKind::ScfYield: {
      os_ << "scf.yield";
      if (!op.operands.empty()) {
        os_ << " ";
        print_values(op.operands);
      }
      break;
    }
    case OpKind::ChannelPut:
    case OpKind::ChannelGet: {
      os_ << (op.kind == OpKind::ChannelPut ? "air.channel.put" : "air.channel.get");
      print_async_clauses(op);
      os_ << " @" << op.symbol;
      if (!op.bundle_index.empty())
        print_index_list(op.bundle_index);
      os_ << " (";
      print_view(op.views[0]);
      os_ << ")";
      print_attrs(op);
      break;
    }
    case OpKind::Memcpy: {
      os_ << "air.memcpy";
      print_async_clauses(op);
      os_ << " (";
      print_view(op.views[0]);
      os_ << ", ";
      print_view(op.views[1]);
      os_ << ")";
      break;
    }
    case OpKind::Alloc: {
      os_ << "air.alloc";
      print_async_clauses(op);
      print_attrs(op);
      os_ << " : " << to_string(Type::memref_of(op.alloc_type));
      break;
    }
    case OpKind::Dealloc: {
      os_ << "air.dealloc";
      print_async_clauses(op);
      os_ << " " << name(op.buffer);
      break;
    }
    case OpKind::WaitAll: {
      os_ << "air.wait_all";
      print_async_clauses(op);
      break;
    }
    case OpKind::KernelCall: {
      os_ << "air.kernel";
      print_async_clauses(op);
      os_ << " @" << op.symbol << " reads";
      print_view_list(op.reads);
      os_ << " writes";
      print_view_list(op.writes);
      print_attrs(op);
      break;
    }
    case OpKind::AffineApply: {
      os_ << "affine.apply " << to_string(op.map) << " (";
      print_values(op.apply_dims);
      os_ << ")";
      if (!op.apply_syms.empty()) {
        os_ << "[";
        print_values(op.apply_syms);
        os_ << "]";
      }
      break;
    }
    case OpKind::ArithConst: {
      os_ << "arith.const " << op.const_value << " : " << to_string(op.const_type);
      break;
    }
    case OpKind::ArithAdd:
    case OpKind::ArithMul: {
      os_ << (op.kind == OpKind::ArithAdd ? "arith.add " : "arith.mul ");
      print_values(op.operands);
      os_ << " : " << to_string(op.const_type);
      break;
    }
    case OpKind::Load: {
      os_ << "memref.load " << name(op.buffer);
      print_index_list(op.indices);
      break;
    }
    case OpKind::Store: {
      os_ << "memref.store " << name(op.operands[0]) << ", " << name(op.buffer);
      print_index_list(op.indices);
      break;
    }
    case OpKind::Module:
      break;
    }
    os_ << "\n";
  }

  const Program &program_;
  std::ostringstream os_;
  std::map<int, std::string> names_;
  std::set<std::string> taken_;
  int next_ = 0;
  int indent_ = 0;
};

} // namespace

std::string print_program(const Program &p) { return Printer(p).run(); }

} // namespace air
