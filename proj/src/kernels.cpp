#include "air/kernels.hpp"

#include "air/error.hpp"

#include <cmath>
#include <cstring>

namespace air {

int storage_width(ElemKind k) { return k == ElemKind::BF16 ? 4 : width_bytes(k); }

std::int64_t ResolvedView::flat(const std::vector<std::int64_t> &idx) const {
  std::int64_t a = 0;
  for (std::size_t d = 0; d < sizes.size(); ++d)
    a += (offsets[d] + idx[d]) * strides[d];
  if (a < 0 || a >= buffer_elems)
    throw Error("OutOfBounds", "element " + std::to_string(a) + " outside buffer of " +
                                   std::to_string(buffer_elems) + " elements");
  return a;
}

double load_elem_f(const std::uint8_t *base, ElemKind k, std::int64_t i) {
  switch (k) {
  case ElemKind::F32:
  case ElemKind::BF16: {
    float f;
    std::memcpy(&f, base + i * 4, 4);
    return f;
  }
  default:
    return static_cast<double>(load_elem_i(base, k, i));
  }
}

std::int64_t load_elem_i(const std::uint8_t *base, ElemKind k, std::int64_t i) {
  switch (k) {
  case ElemKind::I8: {
    std::int8_t v;
    std::memcpy(&v, base + i, 1);
    return v;
  }
  case ElemKind::I16: {
    std::int16_t v;
    std::memcpy(&v, base + i * 2, 2);
    return v;
  }
  case ElemKind::I32: {
    std::int32_t v;
    std::memcpy(&v, base + i * 4, 4);
    return v;
  }
  default:
    return static_cast<std::int64_t>(load_elem_f(base, k, i));
  }
}

void store_elem_f(std::uint8_t *base, ElemKind k, std::int64_t i, double v) {
  switch (k) {
  case ElemKind::F32:
  case ElemKind::BF16: {
    float f = static_cast<float>(v);
    std::memcpy(base + i * 4, &f, 4);
    return;
  }
  default:
    store_elem_i(base, k, i, static_cast<std::int64_t>(v));
  }
}

void store_elem_i(std::uint8_t *base, ElemKind k, std::int64_t i, std::int64_t v) {
  switch (k) {
  case ElemKind::I8: {
    auto t = static_cast<std::int8_t>(v);
    std::memcpy(base + i, &t, 1);
    return;
  }
  case ElemKind::I16: {
    auto t = static_cast<std::int16_t>(v);
    std::memcpy(base + i * 2, &t, 2);
    return;
  }
  case ElemKind::I32: {
    auto t = static_cast<std::int32_t>(v);
    std::memcpy(base + i * 4, &t, 4);
    return;
  }
  default:
    store_elem_f(base, k, i, static_cast<double>(v));
  }
}

double ResolvedView::get_f(const std::vector<std::int64_t> &idx) const {
  return load_elem_f(data, elem, flat(idx));
}
std::int64_t ResolvedView::get_i(const std::vector<std::int64_t> &idx) const {
  return load_elem_i(data, elem, flat(idx));
}
void ResolvedView::set_f(const std::vector<std::int64_t> &idx, double v) {
  store_elem_f(data, elem, flat(idx), v);
}
void ResolvedView::set_i(const std::vector<std::int64_t> &idx, std::int64_t v) {
  store_elem_i(data, elem, flat(idx), v);
}

std::vector<std::int64_t> ResolvedView::enumerate() const {
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(num_elements()));
  std::vector<std::int64_t> idx(sizes.size(), 0);
  while (true) {
    out.push_back(flat(idx));
    std::size_t d = sizes.size();
    while (d-- > 0) {
      if (++idx[d] < sizes[d])
        break;
      idx[d] = 0;
      if (d == 0)
        return out;
    }
    if (sizes.empty())
      return out;
  }
}

namespace {

void expect_rank(const ResolvedView &v, std::int64_t r, const char *kernel) {
  if (v.rank() != r)
    throw Error("KernelShape", std::string(kernel) + ": expected rank " +
                                   std::to_string(r) + " operand");
}

bool float_kernel(const KernelIO &io) {
  for (const auto &v : io.reads)
    if (is_float(v.elem))
      return true;
  for (const auto &v : io.writes)
    if (is_float(v.elem))
      return true;
  return false;
}

// out = 0
void k_zero(KernelIO &io) {
  ResolvedView &o = io.writes.at(0);
  for (std::int64_t i : o.enumerate())
    if (is_float(o.elem))
      store_elem_f(o.data, o.elem, i, 0.0);
    else
      store_elem_i(o.data, o.elem, i, 0);
}

void k_copy(KernelIO &io) {
  ResolvedView &a = io.reads.at(0);
  ResolvedView &o = io.writes.at(0);
  auto src = a.enumerate(), dst = o.enumerate();
  if (src.size() != dst.size())
    throw Error("KernelShape", "copy: element counts differ");
  for (std::size_t i = 0; i < src.size(); ++i)
    if (is_float(o.elem))
      store_elem_f(o.data, o.elem, dst[i], load_elem_f(a.data, a.elem, src[i]));
    else
      store_elem_i(o.data, o.elem, dst[i], load_elem_i(a.data, a.elem, src[i]));
}

void k_binary(KernelIO &io, bool add) {
  ResolvedView &a = io.reads.at(0);
  ResolvedView &b = io.reads.at(1);
  ResolvedView &o = io.writes.at(0);
  auto ia = a.enumerate(), ib = b.enumerate(), iu = o.enumerate();
  if (ia.size() != ib.size() || ia.size() != iu.size())
    throw Error("KernelShape", "elementwise: element counts differ");
  bool flt = float_kernel(io);
  for (std::size_t i = 0; i < iu.size(); ++i) {
    if (flt) {
      double x = load_elem_f(a.data, a.elem, ia[i]);
      double y = load_elem_f(b.data, b.elem, ib[i]);
      store_elem_f(o.data, o.elem, iu[i], add ? x + y : x * y);
    } else {
      std::int64_t x = load_elem_i(a.data, a.elem, ia[i]);
      std::int64_t y = load_elem_i(b.data, b.elem, ib[i]);
      store_elem_i(o.data, o.elem, iu[i], add ? x + y : x * y);
    }
  }
}

// C += A x B, row-major accumulation order (fixed for fp determinism).
void k_matmul(KernelIO &io) {
  ResolvedView &a = io.reads.at(0);
  ResolvedView &b = io.reads.at(1);
  ResolvedView &c = io.writes.at(0);
  expect_rank(a, 2, "matmul");
  expect_rank(b, 2, "matmul");
  expect_rank(c, 2, "matmul");
  std::int64_t m = a.sizes[0], k = a.sizes[1], n = b.sizes[1];
  if (b.sizes[0] != k || c.sizes[0] != m || c.sizes[1] != n)
    throw Error("KernelShape", "matmul: inner dimensions disagree");
  bool flt = float_kernel(io);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      if (flt) {
        double acc = c.get_f({i, j});
        for (std::int64_t kk = 0; kk < k; ++kk)
          acc += a.get_f({i, kk}) * b.get_f({kk, j});
        c.set_f({i, j}, acc);
      } else {
        std::int64_t acc = c.get_i({i, j});
        for (std::int64_t kk = 0; kk < k; ++kk)
          acc += a.get_i({i, kk}) * b.get_i({kk, j});
        c.set_i({i, j}, acc);
      }
    }
}

// Rotates adjacent element pairs by a per-pair angle; positional-embedding
// style mixing.
void k_rotate_pairs(KernelIO &io) {
  ResolvedView &a = io.reads.at(0);
  ResolvedView &o = io.writes.at(0);
  auto in = a.enumerate(), out = o.enumerate();
  if (in.size() != out.size() || in.size() % 2 != 0)
    throw Error("KernelShape", "rotate_pairs: needs matching even element counts");
  double freq = 1.0;
  if (io.op) {
    auto it = io.op->attrs.find("freq");
    if (it != io.op->attrs.end())
      if (auto *d = std::get_if<double>(&it->second))
        freq = *d;
  }
  std::size_t pairs = in.size() / 2;
  for (std::size_t p = 0; p < pairs; ++p) {
    double theta = freq * static_cast<double>(p) / static_cast<double>(pairs);
    double cs = std::cos(theta), sn = std::sin(theta);
    double x = load_elem_f(a.data, a.elem, in[2 * p]);
    double y = load_elem_f(a.data, a.elem, in[2 * p + 1]);
    store_elem_f(o.data, o.elem, out[2 * p], x * cs - y * sn);
    store_elem_f(o.data, o.elem, out[2 * p + 1], x * sn + y * cs);
  }
}

// Row-wise softmax over a 2-D view.
void k_softmax(KernelIO &io) {
  ResolvedView &a = io.reads.at(0);
  ResolvedView &o = io.writes.at(0);
  expect_rank(a, 2, "softmax");
  expect_rank(o, 2, "softmax");
  if (a.sizes != o.sizes)
    throw Error("KernelShape", "softmax: shape mismatch");
  for (std::int64_t i = 0; i < a.sizes[0]; ++i) {
    double mx = a.get_f({i, 0});
    for (std::int64_t j = 1; j < a.sizes[1]; ++j)
      mx = std::max(mx, a.get_f({i, j}));
    double sum = 0;
    for (std::int64_t j = 0; j < a.sizes[1]; ++j)
      sum += std::exp(a.get_f({i, j}) - mx);
    for (std::int64_t j = 0; j < a.sizes[1]; ++j)
      o.set_f({i, j}, std::exp(a.get_f({i, j}) - mx) / sum);
  }
}

void k_scale(KernelIO &io) {
  ResolvedView &a = io.reads.at(0);
  ResolvedView &o = io.writes.at(0);
  double s = 1.0;
  if (io.op) {
    auto it = io.op->attrs.find("factor");
    if (it != io.op->attrs.end()) {
      if (auto *d = std::get_if<double>(&it->second))
        s = *d;
      else if (auto *i = std::get_if<std::int64_t>(&it->second))
        s = static_cast<double>(*i);
    }
  }
  auto in = a.enumerate(), out = o.enumerate();
  if (in.size() != out.size())
    throw Error("KernelShape", "scale: element counts differ");
  for (std::size_t i = 0; i < in.size(); ++i)
    if (is_float(o.elem))
      store_elem_f(o.data, o.elem, out[i], load_elem_f(a.data, a.elem, in[i]) * s);
    else
      store_elem_i(o.data, o.elem, out[i],
                   static_cast<std::int64_t>(
                       static_cast<double>(load_elem_i(a.data, a.elem, in[i])) * s));
}

} // namespace

void run_kernel(const std::string &name, KernelIO &io) {
  if (name == "zero" || name == "zero_i32" || name == "zero_f32")
    return k_zero(io);
  if (name == "copy")
    return k_copy(io);
  if (name == "add")
    return k_binary(io, true);
  if (name == "mul")
    return k_binary(io, false);
  if (name == "matmul" || name == "matmul_i16" || name == "matmul_f32")
    return k_matmul(io);
  if (name == "rotate_pairs")
    return k_rotate_pairs(io);
  if (name == "softmax")
    return k_softmax(io);
  if (name == "scale")
    return k_scale(io);
  throw Error("UnknownKernel", "no microkernel named @" + name);
}

std::int64_t kernel_default_ops(const std::string &name, const Operation &op) {
  auto elems = [](const std::vector<BufferView> &vs) -> std::int64_t {
    if (vs.empty())
      return 0;
    std::int64_t n = 1;
    if (vs[0].whole())
      return vs[0].buffer.type.memref.num_elements();
    for (const auto &s : vs[0].sizes)
      n *= s.is_literal() ? s.literal : 1;
    return n;
  };
  if (name.rfind("matmul", 0) == 0 && !op.reads.empty()) {
    // M*N*K from A (MxK) and B (KxN) literal sizes when available.
    const BufferView &a = op.reads[0];
    std::int64_t m = 1, k = 1, n = 1;
    if (!a.whole() && a.sizes.size() == 2 && a.sizes[0].is_literal() &&
        a.sizes[1].is_literal()) {
      m = a.sizes[0].literal;
      k = a.sizes[1].literal;
    } else if (a.whole() && a.buffer.type.memref.shape.size() == 2) {
      m = a.buffer.type.memref.shape[0];
      k = a.buffer.type.memref.shape[1];
    }
    if (op.reads.size() > 1) {
      const BufferView &b = op.reads[1];
      if (!b.whole() && b.sizes.size() == 2 && b.sizes[1].is_literal())
        n = b.sizes[1].literal;
      else if (b.whole() && b.buffer.type.memref.shape.size() == 2)
        n = b.buffer.type.memref.shape[1];
    }
    return m * n * k;
  }
  if (name == "softmax")
    return 4 * elems(op.reads);
  std::int64_t w = elems(op.writes);
  return w > 0 ? w : elems(op.reads);
}

} // namespace air
