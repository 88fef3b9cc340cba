#include <Eigen/Core>
#include <algorithm>
#include <limits>

#include "distillscope/graph.hpp"

namespace distillscope {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t n, c, h, w;      // input
  std::size_t f, kh, kw;       // kernel
  std::size_t oh, ow;          // output
  int stride, padding;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Shape& in, const Shape& k, int stride, int padding) {
  if (in.size() != 4) throw DimensionError("conv2d input must be [N,C,H,W], got " + shape_string(in));
  if (k.size() != 4) throw DimensionError("conv2d kernel must be [F,C,kh,kw], got " + shape_string(k));
  if (stride < 1) throw ParameterError("conv2d stride must be >= 1");
  if (padding < 0) throw ParameterError("conv2d padding must be >= 0");
  if (k[1] != in[1])
    throw DimensionError("conv2d channel mismatch: input axis 1 = " + std::to_string(in[1]) +
                         ", kernel axis 1 = " + std::to_string(k[1]));
  const std::size_t ph = in[2] + 2 * static_cast<std::size_t>(padding);
  const std::size_t pw = in[3] + 2 * static_cast<std::size_t>(padding);
  if (k[2] > ph || k[3] > pw)
    throw DimensionError("conv2d kernel " + shape_string(k) + " exceeds padded input extents (axes 2,3) of " +
                         shape_string(in));
  ConvGeometry g{in[0], in[1], in[2], in[3], k[0], k[2], k[3], 0, 0, stride, padding};
  g.oh = (ph - g.kh) / stride + 1;
  g.ow = (pw - g.kw) / stride + 1;
  return g;
}

// cols[k, n*P + p] with k = (c*kh + i)*kw + j.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const std::size_t np = g.n * g.positions();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * np;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* plane = x + (n * g.c + c) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const long y = static_cast<long>(oy) * g.stride - g.padding + static_cast<long>(i);
            T* dst = row + n * g.positions() + oy * g.ow;
            if (y < 0 || y >= static_cast<long>(g.h)) {
              std::fill(dst, dst + g.ow, T(0));
              continue;
            }
            const T* src = plane + y * g.w;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long xx = static_cast<long>(ox) * g.stride - g.padding + static_cast<long>(j);
              dst[ox] = (xx < 0 || xx >= static_cast<long>(g.w)) ? T(0) : src[xx];
            }
          }
        }
      }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* cols, T* dx) {
  const std::size_t np = g.n * g.positions();
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * np;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* plane = dx + (n * g.c + c) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const long y = static_cast<long>(oy) * g.stride - g.padding + static_cast<long>(i);
            if (y < 0 || y >= static_cast<long>(g.h)) continue;
            const T* src = row + n * g.positions() + oy * g.ow;
            T* dst = plane + y * g.w;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long xx = static_cast<long>(ox) * g.stride - g.padding + static_cast<long>(j);
              if (xx >= 0 && xx < static_cast<long>(g.w)) dst[xx] += src[ox];
            }
          }
        }
      }
}

}  // namespace

template <typename T>
Var conv2d(Graph<T>& g, Var input, Var kernel, std::optional<Var> bias, int stride, int padding) {
  const Tensor<T>& x = g.value(input);
  const Tensor<T>& k = g.value(kernel);
  const ConvGeometry geo = conv_geometry(x.shape(), k.shape(), stride, padding);
  if (bias && (g.value(*bias).rank() != 1 || g.value(*bias).dim(0) != geo.f))
    throw DimensionError("conv2d bias must be [" + std::to_string(geo.f) + "], got " +
                         shape_string(g.value(*bias).shape()));

  const std::size_t K = geo.patch(), P = geo.positions(), NP = geo.n * P;
  std::vector<T> cols(K * NP);
  im2col(geo, x.raw(), cols.data());
  RowMat<T> out_mat = ConstMatMap<T>(k.raw(), geo.f, K) * ConstMatMap<T>(cols.data(), K, NP);

  Tensor<T> out(Shape{geo.n, geo.f, geo.oh, geo.ow});
  const T* bias_data = bias ? g.value(*bias).raw() : nullptr;
  for (std::size_t n = 0; n < geo.n; ++n)
    for (std::size_t f = 0; f < geo.f; ++f) {
      const T* src = out_mat.data() + f * NP + n * P;
      T* dst = out.raw() + (n * geo.f + f) * P;
      const T b = bias_data ? bias_data[f] : T(0);
      for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + b;
    }

  std::vector<Var> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  return g.record(
      "conv2d", inputs, std::move(out),
      [input, kernel, bias, geo](Graph<T>& gr, const Tensor<T>& gout) {
        const std::size_t K = geo.patch(), P = geo.positions(), NP = geo.n * P;
        RowMat<T> dmat(geo.f, NP);
        for (std::size_t n = 0; n < geo.n; ++n)
          for (std::size_t f = 0; f < geo.f; ++f)
            std::copy_n(gout.raw() + (n * geo.f + f) * P, P, dmat.data() + f * NP + n * P);

        if (bias && gr.requires_grad(*bias)) {
          auto db = gr.grad_buffer(*bias);
          for (std::size_t f = 0; f < geo.f; ++f) {
            double acc = 0.0;
            for (std::size_t q = 0; q < NP; ++q) acc += dmat(f, q);
            db[f] += static_cast<T>(acc);
          }
        }
        if (gr.requires_grad(kernel)) {
          std::vector<T> cols(K * NP);
          im2col(geo, gr.value(input).raw(), cols.data());
          MatMap<T> dk(gr.grad_buffer(kernel).data(), geo.f, K);
          dk.noalias() += dmat * ConstMatMap<T>(cols.data(), K, NP).transpose();
        }
        if (gr.requires_grad(input)) {
          RowMat<T> dcols = ConstMatMap<T>(gr.value(kernel).raw(), geo.f, K).transpose() * dmat;
          col2im_add(geo, dcols.data(), gr.grad_buffer(input).data());
        }
      });
}

template <typename T>
Var relu(Graph<T>& g, Var input) {
  const Tensor<T>& x = g.value(input);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return g.record("relu", {input}, std::move(out), [input](Graph<T>& gr, const Tensor<T>& gout) {
    const Tensor<T>& xv = gr.value(input);
    auto dx = gr.grad_buffer(input);
    const bool guided = gr.mode() == BackwardMode::Guided;
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      if (!(xv[i] > T(0))) continue;
      if (guided && !(gout[i] > T(0))) continue;
      dx[i] += gout[i];
    }
  });
}

template <typename T>
Var maxpool2d(Graph<T>& g, Var input, int window, int stride) {
  const Tensor<T>& x = g.value(input);
  if (x.rank() != 4) throw DimensionError("maxpool2d input must be [N,C,H,W], got " + shape_string(x.shape()));
  if (window < 1 || stride < 1) throw ParameterError("maxpool2d window and stride must be >= 1");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto win = static_cast<std::size_t>(window), st = static_cast<std::size_t>(stride);
  if (win > H || win > W)
    throw DimensionError("maxpool2d window " + std::to_string(window) + " exceeds spatial extents of " +
                         shape_string(x.shape()));
  const std::size_t OH = (H - win) / st + 1, OW = (W - win) / st + 1;
  Tensor<T> out(Shape{N, C, OH, OW});
  std::vector<std::size_t> argmax(out.numel());
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox, ++o) {
        std::size_t best = base + oy * st * W + ox * st;
        for (std::size_t i = 0; i < win; ++i)
          for (std::size_t j = 0; j < win; ++j) {
            const std::size_t idx = base + (oy * st + i) * W + ox * st + j;
            if (x[idx] > x[best]) best = idx;
          }
        out[o] = x[best];
        argmax[o] = best;
      }
  }
  return g.record("maxpool2d", {input}, std::move(out),
                  [input, argmax = std::move(argmax)](Graph<T>& gr, const Tensor<T>& gout) {
                    auto dx = gr.grad_buffer(input);
                    for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += gout[i];
                  });
}

template <typename T>
Var dense(Graph<T>& g, Var input, Var weight, std::optional<Var> bias) {
  const Tensor<T>& x = g.value(input);
  const Tensor<T>& w = g.value(weight);
  if (x.rank() != 2) throw DimensionError("dense input must be [N,D], got " + shape_string(x.shape()));
  if (w.rank() != 2) throw DimensionError("dense weight must be [D,K], got " + shape_string(w.shape()));
  if (x.dim(1) != w.dim(0))
    throw DimensionError("dense inner dimension mismatch: input axis 1 = " + std::to_string(x.dim(1)) +
                         ", weight axis 0 = " + std::to_string(w.dim(0)));
  const std::size_t N = x.dim(0), D = x.dim(1), K = w.dim(1);
  if (bias && (g.value(*bias).rank() != 1 || g.value(*bias).dim(0) != K))
    throw DimensionError("dense bias must be [" + std::to_string(K) + "], got " +
                         shape_string(g.value(*bias).shape()));
  Tensor<T> out(Shape{N, K});
  MatMap<T> y(out.raw(), N, K);
  y.noalias() = ConstMatMap<T>(x.raw(), N, D) * ConstMatMap<T>(w.raw(), D, K);
  if (bias) {
    const T* b = g.value(*bias).raw();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) y(n, k) += b[k];
  }
  std::vector<Var> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  return g.record("dense", inputs, std::move(out),
                  [input, weight, bias, N, D, K](Graph<T>& gr, const Tensor<T>& gout) {
                    ConstMatMap<T> dy(gout.raw(), N, K);
                    if (gr.requires_grad(input)) {
                      MatMap<T> dx(gr.grad_buffer(input).data(), N, D);
                      dx.noalias() += dy * ConstMatMap<T>(gr.value(weight).raw(), D, K).transpose();
                    }
                    if (gr.requires_grad(weight)) {
                      MatMap<T> dw(gr.grad_buffer(weight).data(), D, K);
                      dw.noalias() += ConstMatMap<T>(gr.value(input).raw(), N, D).transpose() * dy;
                    }
                    if (bias && gr.requires_grad(*bias)) {
                      auto db = gr.grad_buffer(*bias);
                      for (std::size_t k = 0; k < K; ++k) {
                        double acc = 0.0;
                        for (std::size_t n = 0; n < N; ++n) acc += dy(n, k);
                        db[k] += static_cast<T>(acc);
                      }
                    }
                  });
}

template <typename T>
Var reshape(Graph<T>& g, Var input, Shape shape) {
  Tensor<T> out = g.value(input).reshaped(std::move(shape));
  return g.record("reshape", {input}, std::move(out), [input](Graph<T>& gr, const Tensor<T>& gout) {
    auto dx = gr.grad_buffer(input);
    for (std::size_t i = 0; i < gout.numel(); ++i) dx[i] += gout[i];
  });
}

template <typename T>
Var flatten(Graph<T>& g, Var input) {
  const Tensor<T>& x = g.value(input);
  if (x.rank() < 2) throw DimensionError("flatten needs a leading batch axis, got " + shape_string(x.shape()));
  return reshape(g, input, Shape{x.dim(0), x.numel() / x.dim(0)});
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  if (av.shape() != bv.shape())
    throw DimensionError("add: " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
  return g.record("add", {a, b}, std::move(out), [a, b](Graph<T>& gr, const Tensor<T>& gout) {
    for (Var v : {a, b}) {
      if (!gr.requires_grad(v)) continue;
      auto d = gr.grad_buffer(v);
      for (std::size_t i = 0; i < gout.numel(); ++i) d[i] += gout[i];
    }
  });
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  if (av.shape() != bv.shape())
    throw DimensionError("mul: " + shape_string(av.shape()) + " vs " + shape_string(bv.shape()));
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  return g.record("mul", {a, b}, std::move(out), [a, b](Graph<T>& gr, const Tensor<T>& gout) {
    if (gr.requires_grad(a)) {
      const Tensor<T>& other = gr.value(b);
      auto d = gr.grad_buffer(a);
      for (std::size_t i = 0; i < gout.numel(); ++i) d[i] += gout[i] * other[i];
    }
    if (gr.requires_grad(b)) {
      const Tensor<T>& other = gr.value(a);
      auto d = gr.grad_buffer(b);
      for (std::size_t i = 0; i < gout.numel(); ++i) d[i] += gout[i] * other[i];
    }
  });
}

template <typename T>
Var scale(Graph<T>& g, Var a, T factor) {
  const Tensor<T>& av = g.value(a);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * factor;
  return g.record("scale", {a}, std::move(out), [a, factor](Graph<T>& gr, const Tensor<T>& gout) {
    auto d = gr.grad_buffer(a);
    for (std::size_t i = 0; i < gout.numel(); ++i) d[i] += gout[i] * factor;
  });
}

template <typename T>
Var sum(Graph<T>& g, Var a) {
  double acc = 0.0;
  for (T v : g.value(a).data()) acc += v;
  return g.record("sum", {a}, Tensor<T>::scalar(static_cast<T>(acc)),
                  [a](Graph<T>& gr, const Tensor<T>& gout) {
                    auto d = gr.grad_buffer(a);
                    for (auto& v : d) v += gout[0];
                  });
}

#define DISTILLSCOPE_INSTANTIATE_OPS(T)                                                   \
  template Var conv2d<T>(Graph<T>&, Var, Var, std::optional<Var>, int, int);              \
  template Var relu<T>(Graph<T>&, Var);                                                   \
  template Var maxpool2d<T>(Graph<T>&, Var, int, int);                                    \
  template Var dense<T>(Graph<T>&, Var, Var, std::optional<Var>);                         \
  template Var reshape<T>(Graph<T>&, Var, Shape);                                         \
  template Var flatten<T>(Graph<T>&, Var);                                                \
  template Var add<T>(Graph<T>&, Var, Var);                                               \
  template Var mul<T>(Graph<T>&, Var, Var);                                               \
  template Var scale<T>(Graph<T>&, Var, T);                                               \
  template Var sum<T>(Graph<T>&, Var);

DISTILLSCOPE_INSTANTIATE_OPS(float)
DISTILLSCOPE_INSTANTIATE_OPS(double)

}  // namespace distillscope
