#include "distillscope/losses.hpp"

#include <algorithm>
#include <cmath>

namespace distillscope {

Objective Objective::for_kind(LossKind kind, double lambda, double epsilon, DirectionalForm form) {
  switch (kind) {
    case LossKind::Value: return {1.0, 0.0, epsilon, form};
    case LossKind::Direction: return {0.0, 1.0, epsilon, form};
    case LossKind::Total: return {1.0, lambda, epsilon, form};
  }
  throw ParameterError("unknown loss kind");
}

double LossTerms::mean_value() const {
  double acc = 0.0;
  for (double v : value) acc += v;
  return value.empty() ? 0.0 : acc / static_cast<double>(value.size());
}

double LossTerms::mean_direction() const {
  double acc = 0.0;
  for (double v : direction) acc += v;
  return direction.empty() ? 0.0 : acc / static_cast<double>(direction.size());
}

std::vector<double> LossTerms::combined(const Objective& o) const {
  std::vector<double> out(value.size());
  for (std::size_t n = 0; n < value.size(); ++n) out[n] = o.value_weight * value[n] + o.direction_weight * direction[n];
  return out;
}

double LossTerms::mean(const Objective& o) const {
  double acc = 0.0;
  for (double v : combined(o)) acc += v;
  return value.empty() ? 0.0 : acc / static_cast<double>(value.size());
}

namespace {

// Per (critical point, sample) statistics, accumulated in double.
struct PairStats {
  double sq = 0.0, dot = 0.0, ss = 0.0, cc = 0.0;
};

template <typename T>
void check_aligned(std::span<const Tensor<T>* const> s, std::span<const Tensor<T>* const> c) {
  if (s.size() != c.size())
    throw ContractError("critical point count differs: " + std::to_string(s.size()) + " vs " +
                        std::to_string(c.size()));
  if (s.empty()) throw ContractError("no critical activations given");
  const std::size_t batch = s[0]->dim(0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i]->shape() != c[i]->shape())
      throw ContractError("critical point " + std::to_string(i) + " shape mismatch: " +
                          shape_string(s[i]->shape()) + " vs " + shape_string(c[i]->shape()));
    if (s[i]->dim(0) != batch) throw ContractError("critical activations disagree on batch size");
  }
}

template <typename T>
std::vector<std::vector<PairStats>> pair_stats(std::span<const Tensor<T>* const> s,
                                               std::span<const Tensor<T>* const> c) {
  const std::size_t batch = s[0]->dim(0);
  std::vector<std::vector<PairStats>> out(s.size(), std::vector<PairStats>(batch));
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::size_t per = s[i]->numel() / batch;
    for (std::size_t n = 0; n < batch; ++n) {
      const T* a = s[i]->raw() + n * per;
      const T* b = c[i]->raw() + n * per;
      PairStats& st = out[i][n];
      for (std::size_t j = 0; j < per; ++j) {
        const double x = a[j], y = b[j], d = x - y;
        st.sq += d * d;
        st.dot += x * y;
        st.ss += x * x;
        st.cc += y * y;
      }
    }
  }
  return out;
}

double guarded(double norm, double eps) { return std::max(norm, eps); }

// sqrt(ss * cc) instead of sqrt(ss) * sqrt(cc): identical vectors then give
// exactly 1, so a perfect clone has exactly zero loss and gradient.
double cosine_of(const PairStats& st, double eps) {
  const double ns = std::sqrt(st.ss), nc = std::sqrt(st.cc);
  if (ns > eps && nc > eps) return st.dot / std::sqrt(st.ss * st.cc);
  return st.dot / (guarded(ns, eps) * guarded(nc, eps));
}

template <typename T>
LossTerms terms_from_stats(const std::vector<std::vector<PairStats>>& stats, std::span<const Tensor<T>* const> s,
                           double eps, DirectionalForm form) {
  const std::size_t batch = s[0]->dim(0);
  LossTerms t;
  t.value.assign(batch, 0.0);
  t.direction.assign(batch, form == DirectionalForm::Literal ? 1.0 : 0.0);
  for (std::size_t i = 0; i < stats.size(); ++i) {
    const double count = static_cast<double>(s[i]->numel() / batch);
    for (std::size_t n = 0; n < batch; ++n) {
      const PairStats& st = stats[i][n];
      t.value[n] += st.sq / count;
      const double cosine = cosine_of(st, eps);
      t.direction[n] += form == DirectionalForm::Literal ? -cosine : 1.0 - cosine;
    }
  }
  return t;
}

template <typename T>
std::vector<const Tensor<T>*> pointers(const ActivationSet<T>& a) {
  std::vector<const Tensor<T>*> out;
  for (const auto& t : a.values) out.push_back(&t);
  return out;
}

}  // namespace

template <typename T>
LossTerms loss_terms(std::span<const Tensor<T>* const> s, std::span<const Tensor<T>* const> c, double eps,
                     DirectionalForm form) {
  if (!(eps > 0.0)) throw ParameterError("cosine epsilon must be positive");
  check_aligned<T>(s, c);
  return terms_from_stats<T>(pair_stats<T>(s, c), s, eps, form);
}

template <typename T>
LossTerms loss_terms(const ActivationSet<T>& source, const ActivationSet<T>& cloner, double eps,
                     DirectionalForm form) {
  const auto s = pointers(source), c = pointers(cloner);
  return loss_terms<T>(std::span<const Tensor<T>* const>(s), std::span<const Tensor<T>* const>(c), eps, form);
}

template <typename T>
double loss_val(const ActivationSet<T>& source, const ActivationSet<T>& cloner) {
  return loss_terms(source, cloner).mean(Objective{1.0, 0.0});
}

template <typename T>
double loss_dir(const ActivationSet<T>& source, const ActivationSet<T>& cloner, double eps, DirectionalForm form) {
  return loss_terms(source, cloner, eps, form).mean(Objective{0.0, 1.0, eps, form});
}

template <typename T>
double loss_total(const ActivationSet<T>& source, const ActivationSet<T>& cloner, double lambda, double eps,
                  DirectionalForm form) {
  return loss_terms(source, cloner, eps, form).mean(Objective::total(lambda, eps, form));
}

template <typename T>
Var discrepancy(Graph<T>& g, std::span<const Var> source, std::span<const Var> cloner, const Objective& o) {
  std::vector<const Tensor<T>*> s, c;
  for (Var v : source) s.push_back(&g.value(v));
  for (Var v : cloner) c.push_back(&g.value(v));
  const LossTerms terms = loss_terms<T>(s, c, o.cosine_epsilon, o.form);
  const double value = terms.mean(o);

  std::vector<Var> inputs(source.begin(), source.end());
  inputs.insert(inputs.end(), cloner.begin(), cloner.end());
  const std::size_t n_cp = source.size();
  return g.record(
      "discrepancy", inputs, Tensor<T>::scalar(static_cast<T>(value)),
      [inputs, n_cp, o](Graph<T>& gr, const Tensor<T>& gout) {
        std::vector<const Tensor<T>*> sv, cv;
        for (std::size_t i = 0; i < n_cp; ++i) {
          sv.push_back(&gr.value(inputs[i]));
          cv.push_back(&gr.value(inputs[n_cp + i]));
        }
        const auto stats = pair_stats<T>(sv, cv);
        const std::size_t batch = sv[0]->dim(0);
        const double upstream = static_cast<double>(gout[0]) / static_cast<double>(batch);
        const double eps = o.cosine_epsilon;
        for (std::size_t i = 0; i < n_cp; ++i) {
          const Var s_var = inputs[i], c_var = inputs[n_cp + i];
          const bool want_s = gr.requires_grad(s_var), want_c = gr.requires_grad(c_var);
          if (!want_s && !want_c) continue;
          const std::size_t per = sv[i]->numel() / batch;
          const double count = static_cast<double>(per);
          std::span<T> ds = want_s ? gr.grad_buffer(s_var) : std::span<T>();
          std::span<T> dc = want_c ? gr.grad_buffer(c_var) : std::span<T>();
          for (std::size_t n = 0; n < batch; ++n) {
            const PairStats& st = stats[i][n];
            const double ns = std::sqrt(st.ss), nc = std::sqrt(st.cc);
            const double gs = guarded(ns, eps), gc = guarded(nc, eps);
            const double cosine = cosine_of(st, eps);
            // d(dir)/d(cos) = -1 for both directional forms
            const double wv = upstream * o.value_weight * 2.0 / count;
            const double wd = -upstream * o.direction_weight / (gs * gc);
            // d cos / d y = (x - cos * y * gs / nc) / (gs * gc); the norm term vanishes where it is guarded
            const double c_ratio = nc > eps ? cosine * gs / nc : 0.0;
            const double s_ratio = ns > eps ? cosine * gc / ns : 0.0;
            const T* a = sv[i]->raw() + n * per;
            const T* b = cv[i]->raw() + n * per;
            for (std::size_t j = 0; j < per; ++j) {
              const double x = a[j], y = b[j];
              if (want_c) dc[n * per + j] += static_cast<T>(wv * (y - x) + wd * (x - c_ratio * y));
              if (want_s) ds[n * per + j] += static_cast<T>(wv * (x - y) + wd * (y - s_ratio * x));
            }
          }
        }
      });
}

#define DISTILLSCOPE_INSTANTIATE_LOSSES(T)                                                                   \
  template LossTerms loss_terms<T>(std::span<const Tensor<T>* const>, std::span<const Tensor<T>* const>,      \
                                   double, DirectionalForm);                                                  \
  template LossTerms loss_terms<T>(const ActivationSet<T>&, const ActivationSet<T>&, double, DirectionalForm); \
  template double loss_val<T>(const ActivationSet<T>&, const ActivationSet<T>&);                              \
  template double loss_dir<T>(const ActivationSet<T>&, const ActivationSet<T>&, double, DirectionalForm);     \
  template double loss_total<T>(const ActivationSet<T>&, const ActivationSet<T>&, double, double,             \
                                DirectionalForm);                                                             \
  template Var discrepancy<T>(Graph<T>&, std::span<const Var>, std::span<const Var>, const Objective&);

DISTILLSCOPE_INSTANTIATE_LOSSES(float)
DISTILLSCOPE_INSTANTIATE_LOSSES(double)

}  // namespace distillscope
