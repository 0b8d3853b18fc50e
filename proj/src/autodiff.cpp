#include "bfsep/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>
#include <sstream>

#include "bfsep/errors.hpp"
#include "bfsep/kernels.hpp"

namespace bfsep::ad {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

const Shape& Tensor::shape() const { return tape_->shape(id_); }
std::size_t Tensor::numel() const { return tape_->value(id_).size(); }
std::span<const double> Tensor::values() const { return tape_->value(id_); }
bool Tensor::requires_grad() const { return tape_->requires_grad(id_); }

double Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return values()[0];
}

const std::vector<double>& GradientMap::at(const Tensor& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) throw ValidationError("no gradient recorded for node " + std::to_string(leaf.id()));
  return it->second;
}

// ---------------------------------------------------------------- Tape

Tensor Tape::constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size())
    throw ShapeError("constant: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  nodes_.push_back(Node{"constant", std::move(shape), std::move(values), {}, {}, false, false});
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor Tape::constant(Shape shape, double fill) {
  const std::size_t n = numel(shape);
  return constant(std::move(shape), std::vector<double>(n, fill));
}

Tensor Tape::leaf(Shape shape, std::vector<double> values, bool trainable) {
  if (numel(shape) != values.size())
    throw ShapeError("leaf: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  nodes_.push_back(Node{"leaf", std::move(shape), std::move(values), {}, {}, trainable, trainable});
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor Tape::record(const char* op, Shape shape, std::vector<double> values,
                    std::span<const Tensor> parents, BackwardFn backward) {
  if (numel(shape) != values.size())
    throw ShapeError(std::string(op) + ": internal shape/value mismatch " + shape_str(shape));
  bool needs = false;
  for (const Tensor& p : parents) {
    if (p.valid() && &p.tape() != this) throw ValidationError(std::string(op) + ": operands live on different tapes");
    needs = needs || (p.valid() && p.requires_grad());
  }
  needs = needs && grad_enabled_;
  nodes_.push_back(Node{op, std::move(shape), std::move(values), {}, needs ? std::move(backward) : BackwardFn{},
                        needs, false});
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

std::span<double> Tape::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

std::optional<std::uint32_t> Tape::first_nonfinite() const {
  for (std::uint32_t i = 0; i < nodes_.size(); ++i)
    for (double v : nodes_[i].value)
      if (!std::isfinite(v)) return i;
  return std::nullopt;
}

std::string Tape::describe(std::uint32_t id) const {
  return "node " + std::to_string(id) + " ('" + nodes_[id].op + "', shape " + shape_str(nodes_[id].shape) + ")";
}

void Tape::check_finite() const {
  if (auto bad = first_nonfinite()) throw NumericalError("non-finite value at " + describe(*bad));
}

GradientMap Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ValidationError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  const double one = 1.0;
  return sweep(loss, std::span<const double>(&one, 1));
}

GradientMap Tape::backward_from(const Tensor& out, std::span<const double> seed) {
  if (seed.size() != out.numel()) throw ShapeError("backward_from: seed size does not match output");
  return sweep(out, seed);
}

GradientMap Tape::sweep(const Tensor& out, std::span<const double> seed) {
  check_finite();
  for (Node& n : nodes_) n.grad.clear();
  if (nodes_[out.id()].requires_grad) {
    auto g = grad_buffer(out.id());
    std::copy(seed.begin(), seed.end(), g.begin());
    for (std::int64_t i = out.id(); i >= 0; --i) {
      const auto id = static_cast<std::uint32_t>(i);
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
  }
  GradientMap result;
  for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (!n.trainable) continue;
    std::vector<double> g = n.grad.empty() ? std::vector<double>(n.value.size(), 0.0) : n.grad;
    for (double v : g)
      if (!std::isfinite(v)) throw NumericalError("non-finite gradient at " + describe(i));
    result.grads_.emplace(i, std::move(g));
  }
  return result;
}

// ---------------------------------------------------------------- helpers

namespace {

// Index maps from an output element to the contributing element of each
// operand under numpy broadcasting.
struct Broadcast {
  Shape out;
  bool same = false;
  std::vector<std::size_t> ia, ib;
};

Broadcast broadcast(const char* op, const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  bc.out.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
    bc.out[d] = std::max(pa[d], pb[d]);
  }
  std::vector<std::size_t> sa(rank), sb(rank);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t d = rank; d-- > 0;) {
    sa[d] = pa[d] == 1 ? 0 : acc_a;
    sb[d] = pb[d] == 1 ? 0 : acc_b;
    acc_a *= pa[d];
    acc_b *= pb[d];
  }
  const std::size_t n = numel(bc.out);
  bc.ia.resize(n);
  bc.ib.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bc.ia[i] = oa;
    bc.ib[i] = ob;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < bc.out[d]) {
        oa += sa[d];
        ob += sb[d];
        break;
      }
      oa -= sa[d] * (bc.out[d] - 1);
      ob -= sb[d] * (bc.out[d] - 1);
      idx[d] = 0;
    }
  }
  return bc;
}

// f(x, y) with partials dfa(x, y, out), dfb(x, y, out).
template <typename F, typename DA, typename DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
  Tape& tape = a.tape();
  auto bc = std::make_shared<Broadcast>(broadcast(op, a.shape(), b.shape()));
  const auto av = a.values();
  const auto bv = b.values();
  const std::size_t n = numel(bc->out);
  std::vector<double> out(n);
  if (bc->same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[bc->ia[i]], bv[bc->ib[i]]);
  }
  const std::uint32_t ia = a.id(), ib = b.id();
  Shape shape = bc->out;
  return tape.record(op, std::move(shape), std::move(out), {a, b}, [=](Tape& t, std::uint32_t self) {
    const auto g = t.grad(self);
    const auto y = t.value(self);
    const auto x1 = t.value(ia);
    const auto x2 = t.value(ib);
    const std::size_t m = g.size();
    if (t.requires_grad(ia)) {
      auto ga = t.grad_buffer(ia);
      if (bc->same) {
        for (std::size_t i = 0; i < m; ++i) ga[i] += g[i] * dfa(x1[i], x2[i], y[i]);
      } else {
        for (std::size_t i = 0; i < m; ++i)
          ga[bc->ia[i]] += g[i] * dfa(x1[bc->ia[i]], x2[bc->ib[i]], y[i]);
      }
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad_buffer(ib);
      if (bc->same) {
        for (std::size_t i = 0; i < m; ++i) gb[i] += g[i] * dfb(x1[i], x2[i], y[i]);
      } else {
        for (std::size_t i = 0; i < m; ++i)
          gb[bc->ib[i]] += g[i] * dfb(x1[bc->ia[i]], x2[bc->ib[i]], y[i]);
      }
    }
  });
}

// f(x) with derivative df(x, y).
template <typename F, typename D>
Tensor unary(const char* op, const Tensor& a, F f, D df) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const std::uint32_t ia = a.id();
  return a.tape().record(op, a.shape(), std::move(out), {a}, [=](Tape& t, std::uint32_t self) {
    const auto g = t.grad(self);
    const auto y = t.value(self);
    const auto x = t.value(ia);
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor neg(const Tensor& a) {
  return unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double c) {
  return unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
  return unary("sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor log10(const Tensor& a) {
  return unary(
      "log10", a, [](double x) { return std::log10(x); },
      [](double x, double) { return 1.0 / (x * std::numbers::ln10); });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor clamp_min(const Tensor& a, double floor) {
  return unary(
      "clamp_min", a, [floor](double x) { return std::max(x, floor); },
      [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
  const auto av = a.values();
  double s = 0.0;
  for (double v : av) s += v;
  const std::uint32_t ia = a.id();
  return a.tape().record("sum", {}, {s}, {a}, [=](Tape& t, std::uint32_t self) {
    const double g = t.grad(self)[0];
    for (double& x : t.grad_buffer(ia)) x += g;
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw ShapeError("sum_axis: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  const std::size_t outer = prod(s, 0, axis), len = s[axis], inner = prod(s, axis + 1, s.size());
  const auto av = a.values();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * len + l) * inner + i];
  Shape os = s;
  if (keepdim) os[axis] = 1;
  else os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  const std::uint32_t ia = a.id();
  return a.tape().record("sum_axis", std::move(os), std::move(out), {a}, [=](Tape& t, std::uint32_t self) {
    const auto g = t.grad(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i) ga[(o * len + l) * inner + i] += g[o * inner + i];
  });
}

// ---------------------------------------------------------------- structure

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  const auto av = a.values();
  const std::uint32_t ia = a.id();
  return a.tape().record("reshape", std::move(shape), std::vector<double>(av.begin(), av.end()), {a},
                         [=](Tape& t, std::uint32_t self) {
                           const auto g = t.grad(self);
                           auto ga = t.grad_buffer(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const Shape& s = a.shape();
  const std::size_t rank = s.size();
  if (perm.size() != rank) throw ShapeError("permute: permutation rank does not match " + shape_str(s));
  std::vector<bool> seen(rank, false);
  for (std::size_t p : perm) {
    if (p >= rank || seen[p]) throw ShapeError("permute: invalid permutation for " + shape_str(s));
    seen[p] = true;
  }
  Shape os(rank);
  for (std::size_t d = 0; d < rank; ++d) os[d] = s[perm[d]];
  std::vector<std::size_t> in_stride(rank);
  std::size_t acc = 1;
  for (std::size_t d = rank; d-- > 0;) {
    in_stride[d] = acc;
    acc *= s[d];
  }
  const std::size_t n = a.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*src)[i] = off;
    for (std::size_t d = rank; d-- > 0;) {
      const std::size_t st = in_stride[perm[d]];
      if (++idx[d] < os[d]) {
        off += st;
        break;
      }
      off -= st * (os[d] - 1);
      idx[d] = 0;
    }
  }
  const auto av = a.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = av[(*src)[i]];
  const std::uint32_t ia = a.id();
  return a.tape().record("permute", std::move(os), std::move(out), {a}, [=](Tape& t, std::uint32_t self) {
    const auto g = t.grad(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[(*src)[i]] += g[i];
  });
}

Tensor transpose(const Tensor& a) {
  const std::size_t rank = a.rank();
  if (rank < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> perm(rank);
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[rank - 1], perm[rank - 2]);
  return permute(a, perm);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  if (axis >= s.size() || start + length > s[axis])
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) + ") on axis " +
                     std::to_string(axis) + " out of range for " + shape_str(s));
  const std::size_t outer = prod(s, 0, axis), len = s[axis], inner = prod(s, axis + 1, s.size());
  Shape os = s;
  os[axis] = length;
  const auto av = a.values();
  std::vector<double> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * len + start) * inner), length * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * inner));
  const std::uint32_t ia = a.id();
  return a.tape().record("slice", std::move(os), std::move(out), {a}, [=](Tape& t, std::uint32_t self) {
    const auto g = t.grad(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < length * inner; ++j) ga[(o * len + start) * inner + j] += g[o * length * inner + j];
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Shape& s0 = parts.front().shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    lens.push_back(s[axis]);
    total += s[axis];
  }
  const std::size_t outer = prod(s0, 0, axis), inner = prod(s0, axis + 1, s0.size());
  Shape os = s0;
  os[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::size_t offset = 0;
  std::vector<std::uint32_t> ids;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * lens[k] * inner), lens[k] * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
    offset += lens[k];
    ids.push_back(parts[k].id());
  }
  return parts.front().tape().record(
      "concat", std::move(os), std::move(out), parts, [=](Tape& t, std::uint32_t self) {
        const auto g = t.grad(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (t.requires_grad(ids[k])) {
            auto gp = t.grad_buffer(ids[k]);
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t j = 0; j < lens[k] * inner; ++j) gp[o * lens[k] * inner + j] += g[(o * total + off) * inner + j];
          }
          off += lens[k];
        }
      });
}

Tensor pad(const Tensor& a, std::size_t axis, std::size_t before, std::size_t after) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw ShapeError("pad: axis out of range for " + shape_str(s));
  const std::size_t outer = prod(s, 0, axis), len = s[axis], inner = prod(s, axis + 1, s.size());
  const std::size_t olen = len + before + after;
  Shape os = s;
  os[axis] = olen;
  const auto av = a.values();
  std::vector<double> out(outer * olen * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(o * len * inner), len * inner,
                out.begin() + static_cast<std::ptrdiff_t>((o * olen + before) * inner));
  const std::uint32_t ia = a.id();
  return a.tape().record("pad", std::move(os), std::move(out), {a}, [=](Tape& t, std::uint32_t self) {
    const auto g = t.grad(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < len * inner; ++j) ga[o * len * inner + j] += g[(o * olen + before) * inner + j];
  });
}

// ---------------------------------------------------------------- linear algebra

namespace {

struct BatchedPair {
  std::size_t batch = 1;
  bool a_shared = false, b_shared = false;
  Shape batch_shape;
};

BatchedPair batch_layout(const char* op, const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2)
    throw ShapeError(std::string(op) + ": operands need rank >= 2, got " + shape_str(a) + " and " + shape_str(b));
  const Shape ba(a.begin(), a.end() - 2), bb(b.begin(), b.end() - 2);
  BatchedPair p;
  if (ba == bb) {
    p.batch_shape = ba;
  } else if (ba.empty()) {
    p.batch_shape = bb;
    p.a_shared = true;
  } else if (bb.empty()) {
    p.batch_shape = ba;
    p.b_shared = true;
  } else {
    throw ShapeError(std::string(op) + ": batch dimensions differ: " + shape_str(a) + " vs " + shape_str(b));
  }
  p.batch = numel(p.batch_shape);
  return p;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const BatchedPair layout = batch_layout("matmul", sa, sb);
  const std::size_t n = sa[sa.size() - 2], k = sa.back(), m = sb.back();
  if (sb[sb.size() - 2] != k)
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t batch = layout.batch;
  const bool a_shared = layout.a_shared, b_shared = layout.b_shared;

  Shape os = layout.batch_shape;
  os.push_back(n);
  os.push_back(m);
  std::vector<double> out(batch * n * m);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  const kernels::GemmShape fwd{n, m, k};
  for (std::size_t i = 0; i < batch; ++i)
    kernels::gemm(fwd, av + (a_shared ? 0 : i * n * k), bv + (b_shared ? 0 : i * k * m), out.data() + i * n * m,
                  false);

  const std::uint32_t ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(os), std::move(out), {a, b}, [=](Tape& t, std::uint32_t self) {
    const double* g = t.grad(self).data();
    const double* x = t.value(ia).data();
    const double* y = t.value(ib).data();
    if (t.requires_grad(ia)) {
      double* ga = t.grad_buffer(ia).data();
      // dA = dC B^T
      const kernels::GemmShape s{n, k, m, kernels::Trans::kNo, kernels::Trans::kYes};
      for (std::size_t i = 0; i < batch; ++i)
        kernels::gemm(s, g + i * n * m, y + (b_shared ? 0 : i * k * m), ga + (a_shared ? 0 : i * n * k), true);
    }
    if (t.requires_grad(ib)) {
      double* gb = t.grad_buffer(ib).data();
      // dB = A^T dC
      const kernels::GemmShape s{k, m, n, kernels::Trans::kYes, kernels::Trans::kNo};
      for (std::size_t i = 0; i < batch; ++i)
        kernels::gemm(s, x + (a_shared ? 0 : i * n * k), g + i * n * m, gb + (b_shared ? 0 : i * k * m), true);
    }
  });
}

namespace {

// In-place LU with partial pivoting of a dense n x n block: row i of PA is
// row piv[i] of A.
void lu_factor(double* lu, std::size_t n, std::size_t* piv, std::size_t batch_index) {
  for (std::size_t i = 0; i < n; ++i) piv[i] = i;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t best = c;
    double mag = std::abs(lu[c * n + c]);
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(lu[r * n + c]) > mag) {
        mag = std::abs(lu[r * n + c]);
        best = r;
      }
    if (mag == 0.0 || !std::isfinite(mag))
      throw NumericalError("solve: matrix " + std::to_string(batch_index) + " is singular");
    if (best != c) {
      std::swap_ranges(lu + c * n, lu + c * n + n, lu + best * n);
      std::swap(piv[c], piv[best]);
    }
    const double inv = 1.0 / lu[c * n + c];
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = lu[r * n + c] *= inv;
      for (std::size_t j = c + 1; j < n; ++j) lu[r * n + j] -= f * lu[c * n + j];
    }
  }
}

// x (n x k) = A^{-1} b using the factors.
void lu_solve(const double* lu, std::size_t n, const std::size_t* piv, const double* b, std::size_t k, double* x) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) x[i * k + j] = b[piv[i] * k + j];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < i; ++r) {
      const double f = lu[i * n + r];
      for (std::size_t j = 0; j < k; ++j) x[i * k + j] -= f * x[r * k + j];
    }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t r = i + 1; r < n; ++r) {
      const double f = lu[i * n + r];
      for (std::size_t j = 0; j < k; ++j) x[i * k + j] -= f * x[r * k + j];
    }
    const double inv = 1.0 / lu[i * n + i];
    for (std::size_t j = 0; j < k; ++j) x[i * k + j] *= inv;
  }
}

// y (n x k) = A^{-T} g using the factors of A.
void lu_solve_transposed(const double* lu, std::size_t n, const std::size_t* piv, const double* g, std::size_t k,
                         double* y) {
  std::vector<double> q(g, g + n * k);
  // U^T z = g
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < i; ++r) {
      const double f = lu[r * n + i];
      for (std::size_t j = 0; j < k; ++j) q[i * k + j] -= f * q[r * k + j];
    }
    const double inv = 1.0 / lu[i * n + i];
    for (std::size_t j = 0; j < k; ++j) q[i * k + j] *= inv;
  }
  // L^T w = z (unit diagonal)
  for (std::size_t i = n; i-- > 0;)
    for (std::size_t r = i + 1; r < n; ++r) {
      const double f = lu[r * n + i];
      for (std::size_t j = 0; j < k; ++j) q[i * k + j] -= f * q[r * k + j];
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) y[piv[i] * k + j] = q[i * k + j];
}

}  // namespace

Tensor solve(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const BatchedPair layout = batch_layout("solve", sa, sb);
  const std::size_t n = sa.back();
  if (sa[sa.size() - 2] != n) throw ShapeError("solve: matrix is not square: " + shape_str(sa));
  if (sb[sb.size() - 2] != n)
    throw ShapeError("solve: right-hand side rows differ: " + shape_str(sa) + " vs " + shape_str(sb));
  if (layout.a_shared || layout.b_shared)
    throw ShapeError("solve: batch dimensions must match: " + shape_str(sa) + " vs " + shape_str(sb));
  const std::size_t k = sb.back();
  const std::size_t batch = layout.batch;

  auto lu = std::make_shared<std::vector<double>>(a.values().begin(), a.values().end());
  auto piv = std::make_shared<std::vector<std::size_t>>(batch * n);
  std::vector<double> out(batch * n * k);
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < batch; ++i) {
    lu_factor(lu->data() + i * n * n, n, piv->data() + i * n, i);
    lu_solve(lu->data() + i * n * n, n, piv->data() + i * n, bv + i * n * k, k, out.data() + i * n * k);
  }

  const std::uint32_t ia = a.id(), ib = b.id();
  return a.tape().record("solve", sb, std::move(out), {a, b}, [=](Tape& t, std::uint32_t self) {
    const auto g = t.grad(self);
    const auto x = t.value(self);
    std::vector<double> gb(batch * n * k);
    for (std::size_t i = 0; i < batch; ++i)
      lu_solve_transposed(lu->data() + i * n * n, n, piv->data() + i * n, g.data() + i * n * k, k,
                          gb.data() + i * n * k);
    if (t.requires_grad(ib)) {
      auto dst = t.grad_buffer(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) dst[i] += gb[i];
    }
    if (t.requires_grad(ia)) {
      // dA = -dB X^T
      auto ga = t.grad_buffer(ia);
      const kernels::GemmShape s{n, n, k, kernels::Trans::kNo, kernels::Trans::kYes};
      std::vector<double> tmp(n * n);
      for (std::size_t i = 0; i < batch; ++i) {
        kernels::gemm(s, gb.data() + i * n * k, x.data() + i * n * k, tmp.data(), false);
        for (std::size_t j = 0; j < n * n; ++j) ga[i * n * n + j] -= tmp[j];
      }
    }
  });
}

// ---------------------------------------------------------------- signals

Tensor xcorr(const Tensor& a, const Tensor& b, std::size_t lags) {
  if (a.rank() != 1 || b.rank() != 1)
    throw ShapeError("xcorr: operands must be rank 1, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::vector<double> out(lags);
  kernels::xcorr(a.values(), b.values(), out);
  const std::uint32_t ia = a.id(), ib = b.id();
  return a.tape().record("xcorr", {lags}, std::move(out), {a, b}, [=](Tape& t, std::uint32_t self) {
    const auto g = t.grad(self);
    const auto av = t.value(ia);
    const auto bv = t.value(ib);
    if (t.requires_grad(ia)) {
      // da[n] = sum_k g[k] b[n + k]
      std::vector<double> tmp(av.size());
      kernels::xcorr(g, bv, tmp);
      auto ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
    }
    if (t.requires_grad(ib)) {
      // db[m] = sum_k g[k] a[m - k]
      std::vector<double> tmp(av.size() + g.size() - 1);
      kernels::convolve_full(av, g, tmp);
      auto gb = t.grad_buffer(ib);
      const std::size_t len = std::min(gb.size(), tmp.size());
      for (std::size_t i = 0; i < len; ++i) gb[i] += tmp[i];
    }
  });
}

Tensor conv_full(const Tensor& x, const Tensor& h) {
  if (x.rank() != 1 || h.rank() != 1)
    throw ShapeError("conv_full: operands must be rank 1, got " + shape_str(x.shape()) + " and " +
                     shape_str(h.shape()));
  if (x.numel() == 0 || h.numel() == 0) throw ShapeError("conv_full: empty operand");
  const std::size_t len = x.numel() + h.numel() - 1;
  std::vector<double> out(len);
  kernels::convolve_full(x.values(), h.values(), out);
  const std::uint32_t ix = x.id(), ih = h.id();
  return x.tape().record("conv_full", {len}, std::move(out), {x, h}, [=](Tape& t, std::uint32_t self) {
    const auto g = t.grad(self);
    const auto xv = t.value(ix);
    const auto hv = t.value(ih);
    if (t.requires_grad(ix)) {
      std::vector<double> tmp(xv.size());
      kernels::xcorr(hv, g, tmp);
      auto gx = t.grad_buffer(ix);
      for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
    }
    if (t.requires_grad(ih)) {
      std::vector<double> tmp(hv.size());
      kernels::xcorr(xv, g, tmp);
      auto gh = t.grad_buffer(ih);
      for (std::size_t i = 0; i < tmp.size(); ++i) gh[i] += tmp[i];
    }
  });
}

}  // namespace bfsep::ad
