#include "tempal/numcore/ops.hpp"

#include <cmath>
#include <limits>

namespace tempal {
namespace {

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<RowMat<S>>;
template <typename S>
using CMapM = Eigen::Map<const RowMat<S>>;

enum class Broadcast { kSame, kScalar, kRow };

template <typename S>
Broadcast broadcast_kind(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.size() == 1) return Broadcast::kScalar;
  if (b.rank() == 1 && a.rank() >= 1 && b.dim(0) == a.dim(-1)) return Broadcast::kRow;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

// (rows, cols) when the last dimension is treated as the row length.
template <typename S>
std::pair<Index, Index> last_dim_split(const Tensor<S>& a) {
  if (a.rank() == 0) return {1, 1};
  Index cols = a.dim(-1);
  return {a.size() / cols, cols};
}

template <typename S>
CMapM<S> rows_view(const Tensor<S>& t) {
  auto [r, c] = last_dim_split(t);
  return CMapM<S>(t.raw(), r, c);
}

template <typename S>
MapM<S> rows_view(Tensor<S>& t) {
  auto [r, c] = last_dim_split(t);
  return MapM<S>(t.raw(), r, c);
}

template <typename S>
MapM<S> grad_rows_view(Tensor<S>& t) {
  auto [r, c] = last_dim_split(t);
  return MapM<S>(t.grad().data(), r, c);
}

template <typename S, typename Fwd, typename Bwd>
Tensor<S> unary(GradTape<S>& tape, const Tensor<S>& a, Fwd fwd, Bwd bwd) {
  Tensor<S> out(a.shape(), fwd(a.data()));
  if (tape.tracks(a)) {
    tape.record(out, [a = a, out, bwd]() mutable { a.grad().array() += bwd(a.data(), out.data(), out.grad()); });
  }
  return out;
}

}  // namespace

template <typename S>
Tensor<S> matmul(GradTape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are not [m×k]·[k×n]");
  }
  Tensor<S> out({a.dim(0), b.dim(1)});
  out.matrix().noalias() = a.matrix() * b.matrix();
  if (tape.tracks(a, b)) {
    tape.record(out, [a = a, b = b, out]() mutable {
      CMapM<S> g(out.grad().data(), out.dim(0), out.dim(1));
      if (a.requires_grad()) MapM<S>(a.grad().data(), a.dim(0), a.dim(1)).noalias() += g * b.matrix().transpose();
      if (b.requires_grad()) MapM<S>(b.grad().data(), b.dim(0), b.dim(1)).noalias() += a.matrix().transpose() * g;
    });
  }
  return out;
}

template <typename S>
Tensor<S> transpose(GradTape<S>& tape, const Tensor<S>& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expected rank 2, got " + shape_str(a.shape()));
  Tensor<S> out({a.dim(1), a.dim(0)});
  out.matrix() = a.matrix().transpose();
  if (tape.tracks(a)) {
    tape.record(out, [a = a, out]() mutable {
      MapM<S>(a.grad().data(), a.dim(0), a.dim(1)) += CMapM<S>(out.grad().data(), out.dim(0), out.dim(1)).transpose();
    });
  }
  return out;
}

template <typename S>
Tensor<S> linear(GradTape<S>& tape, const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  }
  const bool has_bias = !bias.empty();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  Tensor<S> out({x.dim(0), weight.dim(0)});
  out.matrix().noalias() = x.matrix() * weight.matrix().transpose();
  if (has_bias) out.matrix().rowwise() += bias.data().transpose();
  const bool track = has_bias ? tape.tracks(x, weight, bias) : tape.tracks(x, weight);
  if (track) {
    tape.record(out, [x = x, weight = weight, bias = bias, out, has_bias]() mutable {
      CMapM<S> g(out.grad().data(), out.dim(0), out.dim(1));
      if (x.requires_grad()) MapM<S>(x.grad().data(), x.dim(0), x.dim(1)).noalias() += g * weight.matrix();
      if (weight.requires_grad()) {
        MapM<S>(weight.grad().data(), weight.dim(0), weight.dim(1)).noalias() += g.transpose() * x.matrix();
      }
      if (has_bias && bias.requires_grad()) bias.grad() += g.colwise().sum().transpose();
    });
  }
  return out;
}

namespace {

template <typename S, typename Combine, typename GradA, typename GradB>
Tensor<S> binary(GradTape<S>& tape, const Tensor<S>& a, const Tensor<S>& b, const char* name, Combine combine,
                 GradA grad_a, GradB grad_b) {
  const Broadcast kind = broadcast_kind(a, b, name);
  Tensor<S> out(a.shape());
  auto [rows, cols] = last_dim_split(a);
  // Expand b to a's layout once; cheap relative to the rest of the pipeline.
  Vec<S> bx;
  switch (kind) {
    case Broadcast::kSame: bx = b.data(); break;
    case Broadcast::kScalar: bx = Vec<S>::Constant(a.size(), b[0]); break;
    case Broadcast::kRow: bx = b.data().replicate(rows, 1); break;
  }
  out.data() = combine(a.data().array(), bx.array()).matrix();
  if (tape.tracks(a, b)) {
    tape.record(out, [a = a, b = b, out, bx, kind, rows = rows, cols = cols, grad_a, grad_b]() mutable {
      const auto& g = out.grad();
      if (a.requires_grad()) a.grad().array() += grad_a(g.array(), a.data().array(), bx.array());
      if (b.requires_grad()) {
        Vec<S> gb = grad_b(g.array(), a.data().array(), bx.array()).matrix();
        switch (kind) {
          case Broadcast::kSame: b.grad() += gb; break;
          case Broadcast::kScalar: b.grad()[0] += gb.sum(); break;
          case Broadcast::kRow:
            b.grad() += CMapM<S>(gb.data(), rows, cols).colwise().sum().transpose();
            break;
        }
      }
    });
  }
  return out;
}

}  // namespace

template <typename S>
Tensor<S> add(GradTape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  return binary<S>(
      tape, a, b, "add", [](const auto& x, const auto& y) { return (x + y).eval(); },
      [](const auto& g, const auto&, const auto&) { return g; }, [](const auto& g, const auto&, const auto&) { return g; });
}

template <typename S>
Tensor<S> sub(GradTape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  return binary<S>(
      tape, a, b, "sub", [](const auto& x, const auto& y) { return (x - y).eval(); },
      [](const auto& g, const auto&, const auto&) { return g; },
      [](const auto& g, const auto&, const auto&) { return (-g).eval(); });
}

template <typename S>
Tensor<S> mul(GradTape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  return binary<S>(
      tape, a, b, "mul", [](const auto& x, const auto& y) { return (x * y).eval(); },
      [](const auto& g, const auto&, const auto& y) { return (g * y).eval(); },
      [](const auto& g, const auto& x, const auto&) { return (g * x).eval(); });
}

template <typename S>
Tensor<S> scale(GradTape<S>& tape, const Tensor<S>& a, S factor) {
  return unary<S>(
      tape, a, [factor](const Vec<S>& x) { return Vec<S>(x * factor); },
      [factor](const Vec<S>&, const Vec<S>&, const Vec<S>& g) { return (g.array() * factor).eval(); });
}

template <typename S>
Tensor<S> add_scalar(GradTape<S>& tape, const Tensor<S>& a, S value) {
  return unary<S>(
      tape, a, [value](const Vec<S>& x) { return Vec<S>(x.array() + value); },
      [](const Vec<S>&, const Vec<S>&, const Vec<S>& g) { return g.array().eval(); });
}

template <typename S>
Tensor<S> relu(GradTape<S>& tape, const Tensor<S>& a) {
  return unary<S>(
      tape, a, [](const Vec<S>& x) { return Vec<S>(x.array().max(S(0))); },
      [](const Vec<S>& x, const Vec<S>&, const Vec<S>& g) {
        return (x.array() > S(0)).select(g.array(), S(0)).eval();
      });
}

template <typename S>
Tensor<S> tanh(GradTape<S>& tape, const Tensor<S>& a) {
  return unary<S>(
      tape, a, [](const Vec<S>& x) { return Vec<S>(x.array().tanh()); },
      [](const Vec<S>&, const Vec<S>& y, const Vec<S>& g) { return (g.array() * (S(1) - y.array().square())).eval(); });
}

template <typename S>
Tensor<S> exp(GradTape<S>& tape, const Tensor<S>& a) {
  return unary<S>(
      tape, a, [](const Vec<S>& x) { return Vec<S>(x.array().exp()); },
      [](const Vec<S>&, const Vec<S>& y, const Vec<S>& g) { return (g.array() * y.array()).eval(); });
}

template <typename S>
Tensor<S> log(GradTape<S>& tape, const Tensor<S>& a) {
  return unary<S>(
      tape, a, [](const Vec<S>& x) { return Vec<S>(x.array().log()); },
      [](const Vec<S>& x, const Vec<S>&, const Vec<S>& g) { return (g.array() / x.array()).eval(); });
}

template <typename S>
Tensor<S> minimum(GradTape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("minimum: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  Tensor<S> out(a.shape(), Vec<S>(a.data().array().min(b.data().array())));
  if (tape.tracks(a, b)) {
    tape.record(out, [a = a, b = b, out]() mutable {
      auto take_a = (a.data().array() <= b.data().array());
      if (a.requires_grad()) a.grad().array() += take_a.select(out.grad().array(), S(0));
      if (b.requires_grad()) b.grad().array() += take_a.select(S(0), out.grad().array());
    });
  }
  return out;
}

template <typename S>
Tensor<S> clamp(GradTape<S>& tape, const Tensor<S>& a, S lo, S hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lo must not exceed hi");
  return unary<S>(
      tape, a, [lo, hi](const Vec<S>& x) { return Vec<S>(x.array().max(lo).min(hi)); },
      [lo, hi](const Vec<S>& x, const Vec<S>&, const Vec<S>& g) {
        return (x.array() >= lo && x.array() <= hi).select(g.array(), S(0)).eval();
      });
}

template <typename S>
Tensor<S> sum(GradTape<S>& tape, const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::scalar(a.data().sum());
  if (tape.tracks(a)) {
    tape.record(out, [a = a, out]() mutable { a.grad().array() += out.grad()[0]; });
  }
  return out;
}

template <typename S>
Tensor<S> mean(GradTape<S>& tape, const Tensor<S>& a) {
  const S n = static_cast<S>(a.size());
  Tensor<S> out = Tensor<S>::scalar(a.data().sum() / n);
  if (tape.tracks(a)) {
    tape.record(out, [a = a, out, n]() mutable { a.grad().array() += out.grad()[0] / n; });
  }
  return out;
}

template <typename S>
Tensor<S> sum_rows(GradTape<S>& tape, const Tensor<S>& a) {
  Shape shape = a.shape();
  if (!shape.empty()) shape.pop_back();
  Tensor<S> out(shape, Vec<S>(rows_view(a).rowwise().sum()));
  if (tape.tracks(a)) {
    tape.record(out, [a = a, out]() mutable {
      grad_rows_view(a).colwise() += out.grad();
    });
  }
  return out;
}

template <typename S>
Tensor<S> softmax(GradTape<S>& tape, const Tensor<S>& x, S temperature) {
  if (!(temperature > S(0))) throw ContractError("softmax: temperature must be positive");
  Tensor<S> out(x.shape());
  auto in = rows_view(x);
  auto y = rows_view(out);
  const S inv_t = S(1) / temperature;
  for (Index r = 0; r < in.rows(); ++r) {
    const S m = in.row(r).maxCoeff();
    y.row(r) = ((in.row(r).array() - m) * inv_t).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  if (tape.tracks(x)) {
    tape.record(out, [x = x, out, inv_t]() mutable {
      auto yv = rows_view(std::as_const(out));
      auto g = CMapM<S>(out.grad().data(), yv.rows(), yv.cols());
      auto gx = grad_rows_view(x);
      for (Index r = 0; r < yv.rows(); ++r) {
        const S dot = g.row(r).dot(yv.row(r));
        gx.row(r).array() += yv.row(r).array() * (g.row(r).array() - dot) * inv_t;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> log_softmax(GradTape<S>& tape, const Tensor<S>& x, S temperature) {
  if (!(temperature > S(0))) throw ContractError("log_softmax: temperature must be positive");
  Tensor<S> out(x.shape());
  auto in = rows_view(x);
  auto y = rows_view(out);
  const S inv_t = S(1) / temperature;
  for (Index r = 0; r < in.rows(); ++r) {
    const S m = in.row(r).maxCoeff();
    auto shifted = ((in.row(r).array() - m) * inv_t).eval();
    const S lse = std::log(shifted.exp().sum());
    y.row(r) = (shifted - lse).matrix();
  }
  if (tape.tracks(x)) {
    tape.record(out, [x = x, out, inv_t]() mutable {
      auto yv = rows_view(std::as_const(out));
      auto g = CMapM<S>(out.grad().data(), yv.rows(), yv.cols());
      auto gx = grad_rows_view(x);
      for (Index r = 0; r < yv.rows(); ++r) {
        const S gsum = g.row(r).sum();
        gx.row(r).array() += (g.row(r).array() - yv.row(r).array().exp() * gsum) * inv_t;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> normalize_rows_sum(GradTape<S>& tape, const Tensor<S>& a) {
  Tensor<S> out(a.shape());
  auto in = rows_view(a);
  Vec<S> sums = in.rowwise().sum();
  if ((sums.array() == S(0)).any()) throw DegenerateInputError("normalize_rows_sum: zero row sum");
  rows_view(out) = in.array().colwise() / sums.array();
  if (tape.tracks(a)) {
    tape.record(out, [a = a, out, sums]() mutable {
      auto yv = rows_view(std::as_const(out));
      auto g = CMapM<S>(out.grad().data(), yv.rows(), yv.cols());
      auto ga = grad_rows_view(a);
      for (Index r = 0; r < yv.rows(); ++r) {
        const S dot = g.row(r).dot(yv.row(r));
        ga.row(r).array() += (g.row(r).array() - dot) / sums[r];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> l2_normalize(GradTape<S>& tape, const Tensor<S>& v) {
  Tensor<S> out(v.shape());
  auto in = rows_view(v);
  Vec<S> norms = in.rowwise().norm();
  if ((norms.array() <= S(1e-12)).any()) {
    throw DegenerateInputError("l2_normalize: vector norm is below 1e-12");
  }
  rows_view(out) = in.array().colwise() / norms.array();
  if (tape.tracks(v)) {
    tape.record(out, [v = v, out, norms]() mutable {
      auto yv = rows_view(std::as_const(out));
      auto g = CMapM<S>(out.grad().data(), yv.rows(), yv.cols());
      auto gv = grad_rows_view(v);
      for (Index r = 0; r < yv.rows(); ++r) {
        const S dot = g.row(r).dot(yv.row(r));
        gv.row(r) += (g.row(r) - yv.row(r) * dot) / norms[r];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> conv2d(GradTape<S>& tape, const Tensor<S>& input, const Tensor<S>& kernels, const Tensor<S>& bias,
                 int stride) {
  if (input.rank() != 3 && input.rank() != 4) {
    throw DimensionError("conv2d: input must be [c×h×w] or [n×c×h×w], got " + shape_str(input.shape()));
  }
  if (kernels.rank() != 4) throw DimensionError("conv2d: kernels must be rank 4, got " + shape_str(kernels.shape()));
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  const bool batched = input.rank() == 4;
  const Index n = batched ? input.dim(0) : 1;
  const Index c = input.dim(-3), h = input.dim(-2), w = input.dim(-1);
  const Index oc = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != c) {
    throw DimensionError("conv2d: input " + shape_str(input.shape()) + " has " + std::to_string(c) +
                         " channels but kernels " + shape_str(kernels.shape()) + " expect " +
                         std::to_string(kernels.dim(1)));
  }
  if (kh > h || kw > w) {
    throw DimensionError("conv2d: kernel " + shape_str(kernels.shape()) + " larger than input " +
                         shape_str(input.shape()));
  }
  const bool has_bias = !bias.empty();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != oc)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(oc) +
                         " output channels");
  }
  const Index oh = (h - kh) / stride + 1, ow = (w - kw) / stride + 1;
  const Index patch = oh * ow, ckk = c * kh * kw;

  // im2col: row = (image, oy, ox), column = (ci, ky, kx).
  auto cols = std::make_shared<RowMat<S>>(n * patch, ckk);
  const S* src = input.raw();
  for (Index img = 0; img < n; ++img) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        S* dst = cols->row((img * oh + oy) * ow + ox).data();
        for (Index ci = 0; ci < c; ++ci) {
          const S* corner = src + ((img * c + ci) * h + oy * stride) * w + ox * stride;
          for (Index ky = 0; ky < kh; ++ky, dst += kw) std::copy_n(corner + ky * w, kw, dst);
        }
      }
    }
  }
  CMapM<S> kmat(kernels.raw(), oc, ckk);
  RowMat<S> result(n * patch, oc);
  result.noalias() = (*cols) * kmat.transpose();

  Shape out_shape = batched ? Shape{n, oc, oh, ow} : Shape{oc, oh, ow};
  Tensor<S> out(out_shape);
  for (Index img = 0; img < n; ++img) {
    MapM<S> block(out.raw() + img * oc * patch, oc, patch);
    block = result.middleRows(img * patch, patch).transpose();
    if (has_bias) block.colwise() += bias.data();
  }

  const bool track = has_bias ? tape.tracks(input, kernels, bias) : tape.tracks(input, kernels);
  if (track) {
    tape.record(out, [=, input = input, kernels = kernels, bias = bias]() mutable {
      RowMat<S> gout(n * patch, oc);
      for (Index img = 0; img < n; ++img) {
        gout.middleRows(img * patch, patch) = CMapM<S>(out.grad().data() + img * oc * patch, oc, patch).transpose();
      }
      if (has_bias && bias.requires_grad()) bias.grad() += gout.colwise().sum().transpose();
      if (kernels.requires_grad()) {
        MapM<S>(kernels.grad().data(), oc, ckk).noalias() += gout.transpose() * (*cols);
      }
      if (input.requires_grad()) {
        RowMat<S> gcols(n * patch, ckk);
        gcols.noalias() = gout * kmat;
        S* gin = input.grad().data();
        for (Index img = 0; img < n; ++img) {
          for (Index oy = 0; oy < oh; ++oy) {
            for (Index ox = 0; ox < ow; ++ox) {
              const S* from = gcols.row((img * oh + oy) * ow + ox).data();
              for (Index ci = 0; ci < c; ++ci) {
                S* corner = gin + ((img * c + ci) * h + oy * stride) * w + ox * stride;
                for (Index ky = 0; ky < kh; ++ky, from += kw) {
                  S* line = corner + ky * w;
                  for (Index kx = 0; kx < kw; ++kx) line[kx] += from[kx];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> pointwise_conv1d(GradTape<S>& tape, const Tensor<S>& input, const Tensor<S>& kernels,
                           const Tensor<S>& bias) {
  if (input.rank() != 2 && input.rank() != 3) {
    throw DimensionError("pointwise_conv1d: input must be [c×len] or [n×c×len], got " + shape_str(input.shape()));
  }
  const bool batched = input.rank() == 3;
  const Index n = batched ? input.dim(0) : 1;
  const Index c_in = input.dim(-2), len = input.dim(-1);
  if (kernels.rank() != 2 || kernels.dim(1) != c_in) {
    throw DimensionError("pointwise_conv1d: kernels " + shape_str(kernels.shape()) + " incompatible with input " +
                         shape_str(input.shape()));
  }
  const Index c_out = kernels.dim(0);
  if (bias.rank() != 1 || bias.dim(0) != c_out) {
    throw DimensionError("pointwise_conv1d: bias " + shape_str(bias.shape()) + " must be [" +
                         std::to_string(c_out) + "]");
  }
  Tensor<S> out(batched ? Shape{n, c_out, len} : Shape{c_out, len});
  CMapM<S> k(kernels.raw(), c_out, c_in);
  for (Index img = 0; img < n; ++img) {
    MapM<S> y(out.raw() + img * c_out * len, c_out, len);
    y.noalias() = k * CMapM<S>(input.raw() + img * c_in * len, c_in, len);
    y.colwise() += bias.data();
  }
  if (tape.tracks(input, kernels, bias)) {
    tape.record(out, [=, input = input, kernels = kernels, bias = bias]() mutable {
      for (Index img = 0; img < n; ++img) {
        CMapM<S> g(out.grad().data() + img * c_out * len, c_out, len);
        CMapM<S> x(input.raw() + img * c_in * len, c_in, len);
        if (kernels.requires_grad()) MapM<S>(kernels.grad().data(), c_out, c_in).noalias() += g * x.transpose();
        if (bias.requires_grad()) bias.grad() += g.rowwise().sum();
        if (input.requires_grad()) {
          MapM<S>(input.grad().data() + img * c_in * len, c_in, len).noalias() += k.transpose() * g;
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> reshape(GradTape<S>& tape, const Tensor<S>& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor<S> out(std::move(shape), a.data());
  if (tape.tracks(a)) {
    tape.record(out, [a = a, out]() mutable { a.grad() += out.grad(); });
  }
  return out;
}

template <typename S>
Tensor<S> gather_cols(GradTape<S>& tape, const Tensor<S>& a, std::span<const int> index) {
  if (a.rank() != 2 || Index(index.size()) != a.dim(0)) {
    throw DimensionError("gather_cols: need [n×d] input and n indices, got " + shape_str(a.shape()) + " and " +
                         std::to_string(index.size()));
  }
  const Index d = a.dim(1);
  std::vector<int> idx(index.begin(), index.end());
  Tensor<S> out({a.dim(0)});
  for (Index i = 0; i < a.dim(0); ++i) {
    if (idx[i] < 0 || idx[i] >= d) throw ContractError("gather_cols: index out of range");
    out[i] = a[i * d + idx[i]];
  }
  if (tape.tracks(a)) {
    tape.record(out, [a = a, out, idx, d]() mutable {
      for (std::size_t i = 0; i < idx.size(); ++i) a.grad()[Index(i) * d + idx[i]] += out.grad()[Index(i)];
    });
  }
  return out;
}

template <typename S>
Tensor<S> mask_diagonal(GradTape<S>& tape, const Tensor<S>& a, S value) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw DimensionError("mask_diagonal: expected a square matrix, got " + shape_str(a.shape()));
  }
  Tensor<S> out(a.shape(), a.data());
  out.matrix().diagonal().setConstant(value);
  if (tape.tracks(a)) {
    tape.record(out, [a = a, out]() mutable {
      Vec<S> g = out.grad();
      MapM<S>(g.data(), a.dim(0), a.dim(1)).diagonal().setZero();
      a.grad() += g;
    });
  }
  return out;
}

#define TEMPAL_INSTANTIATE_OPS(S)                                                                        \
  template Tensor<S> matmul(GradTape<S>&, const Tensor<S>&, const Tensor<S>&);                          \
  template Tensor<S> transpose(GradTape<S>&, const Tensor<S>&);                                        \
  template Tensor<S> linear(GradTape<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);       \
  template Tensor<S> add(GradTape<S>&, const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> sub(GradTape<S>&, const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> mul(GradTape<S>&, const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> scale(GradTape<S>&, const Tensor<S>&, S);                                          \
  template Tensor<S> add_scalar(GradTape<S>&, const Tensor<S>&, S);                                     \
  template Tensor<S> relu(GradTape<S>&, const Tensor<S>&);                                             \
  template Tensor<S> tanh(GradTape<S>&, const Tensor<S>&);                                             \
  template Tensor<S> exp(GradTape<S>&, const Tensor<S>&);                                              \
  template Tensor<S> log(GradTape<S>&, const Tensor<S>&);                                              \
  template Tensor<S> minimum(GradTape<S>&, const Tensor<S>&, const Tensor<S>&);                         \
  template Tensor<S> clamp(GradTape<S>&, const Tensor<S>&, S, S);                                       \
  template Tensor<S> sum(GradTape<S>&, const Tensor<S>&);                                              \
  template Tensor<S> mean(GradTape<S>&, const Tensor<S>&);                                             \
  template Tensor<S> sum_rows(GradTape<S>&, const Tensor<S>&);                                         \
  template Tensor<S> softmax(GradTape<S>&, const Tensor<S>&, S);                                       \
  template Tensor<S> log_softmax(GradTape<S>&, const Tensor<S>&, S);                                   \
  template Tensor<S> normalize_rows_sum(GradTape<S>&, const Tensor<S>&);                               \
  template Tensor<S> l2_normalize(GradTape<S>&, const Tensor<S>&);                                     \
  template Tensor<S> conv2d(GradTape<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int);  \
  template Tensor<S> pointwise_conv1d(GradTape<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&); \
  template Tensor<S> reshape(GradTape<S>&, const Tensor<S>&, Shape);                                   \
  template Tensor<S> gather_cols(GradTape<S>&, const Tensor<S>&, std::span<const int>);                \
  template Tensor<S> mask_diagonal(GradTape<S>&, const Tensor<S>&, S);

TEMPAL_INSTANTIATE_OPS(float)
TEMPAL_INSTANTIATE_OPS(double)

#undef TEMPAL_INSTANTIATE_OPS

}  // namespace tempal
