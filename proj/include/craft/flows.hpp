#pragma once

// Parameterized diffeomorphisms with analytic log-det-Jacobians and
// hand-written adjoints.
//
// A Flow is an ordered list of primitive layers plus one flat parameter
// vector (the layers' parameters concatenated in order). Every affine layer
// parameterizes its scales as exp(pre-scale), so forward maps are invertible
// by construction. Layers built by the factory functions start at the
// identity map.

#include "craft/core.hpp"
#include "craft/lattice.hpp"
#include "craft/rng.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace craft {

enum class FlowFamily { identity, diag_affine, coupling, conv_coupling, composite };

inline const char* to_string(FlowFamily f) {
  switch (f) {
    case FlowFamily::identity: return "identity";
    case FlowFamily::diag_affine: return "diag_affine";
    case FlowFamily::coupling: return "coupling";
    case FlowFamily::conv_coupling: return "conv_coupling";
    case FlowFamily::composite: return "composite";
  }
  return "?";
}

/// Which parity class a coupling layer updates; the other class conditions.
enum class MaskParity { even, odd };

struct IdentityLayer {
  int dim = 0;
};

/// y = exp(s) * x + b. Params: [s (dim) | b (dim)].
struct DiagAffineLayer {
  int dim = 0;
};

/// Affine coupling with a dense conditioner (two hidden layers, leaky ReLU).
/// Coordinates i with i % 2 == parity are updated.
struct CouplingLayer {
  int dim = 0;
  int hidden = 32;
  MaskParity parity = MaskParity::even;
};

/// Affine coupling on a periodic L x L lattice. The conditioner is
/// conv(kernel) -> ReLU(hidden channels) -> conv(kernel) -> (s, t),
/// with periodic padding. Sites with checkerboard parity == parity are updated.
struct ConvCouplingLayer {
  int side = 0;
  int kernel = 3;
  int hidden = 10;
  MaskParity parity = MaskParity::even;
};

using LayerSpec = std::variant<IdentityLayer, DiagAffineLayer, CouplingLayer, ConvCouplingLayer>;

inline constexpr double kLeakySlope = 0.01;

inline int layer_dim(const LayerSpec& spec) {
  return std::visit(
      [](const auto& s) -> int {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, ConvCouplingLayer>) return s.side * s.side;
        else return s.dim;
      },
      spec);
}

inline int layer_num_params(const LayerSpec& spec) {
  return std::visit(
      [](const auto& s) -> int {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, IdentityLayer>) {
          return 0;
        } else if constexpr (std::is_same_v<T, DiagAffineLayer>) {
          return 2 * s.dim;
        } else if constexpr (std::is_same_v<T, CouplingLayer>) {
          const int d = s.dim, h = s.hidden;
          return h * d + h + h * h + h + 2 * d * h + 2 * d;
        } else {
          const int kk = s.kernel * s.kernel, h = s.hidden;
          return h * kk + h + 2 * h * kk + 2;
        }
      },
      spec);
}

class Flow {
 public:
  Flow() = default;
  Flow(int dim, std::vector<LayerSpec> layers, Vec params) : dim_(dim), layers_(std::move(layers)), params_(std::move(params)) {
    int total = 0;
    for (const auto& l : layers_) {
      if (layer_dim(l) != dim_) throw std::invalid_argument("flow layer dimension mismatch");
      total += layer_num_params(l);
    }
    if (params_.size() != total) throw std::invalid_argument("flow parameter count does not match layout");
    check_finite();
  }

  static Flow identity(int dim) { return Flow(dim, {}, Vec()); }

  static Flow diag_affine(const Vec& log_scale, const Vec& shift) {
    if (log_scale.size() != shift.size()) throw std::invalid_argument("diag_affine: size mismatch");
    Vec p(2 * log_scale.size());
    p << log_scale, shift;
    return Flow(static_cast<int>(log_scale.size()), {DiagAffineLayer{static_cast<int>(log_scale.size())}}, std::move(p));
  }
  static Flow diag_affine(int dim) { return diag_affine(Vec::Zero(dim), Vec::Zero(dim)); }

  static Flow coupling(const CouplingLayer& spec, Rng& rng);
  static Flow conv_coupling(const ConvCouplingLayer& spec, Rng& rng);

  int dim() const noexcept { return dim_; }
  const Vec& params() const noexcept { return params_; }
  int num_params() const noexcept { return static_cast<int>(params_.size()); }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }

  FlowFamily family() const {
    if (layers_.empty()) return FlowFamily::identity;
    if (layers_.size() > 1) return FlowFamily::composite;
    return std::visit(
        [](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, IdentityLayer>) return FlowFamily::identity;
          else if constexpr (std::is_same_v<T, DiagAffineLayer>) return FlowFamily::diag_affine;
          else if constexpr (std::is_same_v<T, CouplingLayer>) return FlowFamily::coupling;
          else return FlowFamily::conv_coupling;
        },
        layers_.front());
  }

  /// Same layout, new parameters.
  Flow with_params(Vec params) const { return Flow(dim_, layers_, std::move(params)); }

 private:
  void check_finite() const {
    if (!params_.allFinite()) throw std::invalid_argument("flow parameters must be finite");
  }

  int dim_ = 0;
  std::vector<LayerSpec> layers_;
  Vec params_;
};

/// Applies flows in order; log-dets add, parameters concatenate.
inline Flow compose(std::span<const Flow> flows) {
  if (flows.empty()) throw std::invalid_argument("compose needs at least one flow");
  const int dim = flows.front().dim();
  std::vector<LayerSpec> layers;
  int total = 0;
  for (const auto& f : flows) {
    if (f.dim() != dim) throw std::invalid_argument("compose: dimension mismatch");
    layers.insert(layers.end(), f.layers().begin(), f.layers().end());
    total += f.num_params();
  }
  Vec params(total);
  int off = 0;
  for (const auto& f : flows) {
    params.segment(off, f.num_params()) = f.params();
    off += f.num_params();
  }
  return Flow(dim, std::move(layers), std::move(params));
}

inline Flow compose(std::initializer_list<Flow> flows) {
  return compose(std::span<const Flow>(flows.begin(), flows.size()));
}

struct ForwardResult {
  double log_det = 0.0;
  /// Largest |pre-scale| used by any affine layer; trainers watch this for overflow.
  double max_abs_log_scale = 0.0;
};

namespace detail {

using ParamView = std::span<const double>;
using GradView = std::span<double>;

inline bool coupling_updates(int index, MaskParity parity) { return (index % 2) == (parity == MaskParity::even ? 0 : 1); }

/// Sum that gives the same bits for any permutation of the inputs.
inline double order_independent_sum(std::vector<double>& values) {
  std::sort(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

inline double leaky(double a) { return a > 0.0 ? a : kLeakySlope * a; }
inline double leaky_slope(double a) { return a > 0.0 ? 1.0 : kLeakySlope; }

// ---- diagonal affine -------------------------------------------------------

inline ForwardResult diag_forward(const DiagAffineLayer& s, ParamView p, CRef x, VRef y) {
  ForwardResult r;
  for (int i = 0; i < s.dim; ++i) {
    const double ls = p[static_cast<std::size_t>(i)];
    y[i] = std::exp(ls) * x[i] + p[static_cast<std::size_t>(s.dim + i)];
    r.log_det += ls;
    r.max_abs_log_scale = std::max(r.max_abs_log_scale, std::abs(ls));
  }
  return r;
}

inline void diag_adjoint(const DiagAffineLayer& s, ParamView p, CRef x, CRef gy, double gld, VRef gx, GradView gp) {
  for (int i = 0; i < s.dim; ++i) {
    const double e = std::exp(p[static_cast<std::size_t>(i)]);
    gx[i] = gy[i] * e;
    gp[static_cast<std::size_t>(i)] += gy[i] * x[i] * e + gld;
    gp[static_cast<std::size_t>(s.dim + i)] += gy[i];
  }
}

// ---- dense coupling --------------------------------------------------------

struct DenseView {
  using RMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using VMap = Eigen::Map<const Vec>;
  RMap w1, w2, w3;
  VMap b1, b2, b3;

  DenseView(const CouplingLayer& s, ParamView p)
      : w1(p.data(), s.hidden, s.dim),
        w2(p.data() + s.hidden * s.dim + s.hidden, s.hidden, s.hidden),
        w3(p.data() + s.hidden * s.dim + 2 * s.hidden + s.hidden * s.hidden, 2 * s.dim, s.hidden),
        b1(p.data() + s.hidden * s.dim, s.hidden),
        b2(p.data() + s.hidden * s.dim + s.hidden + s.hidden * s.hidden, s.hidden),
        b3(p.data() + s.hidden * s.dim + 2 * s.hidden + s.hidden * s.hidden + 2 * s.dim * s.hidden, 2 * s.dim) {}
};

struct DenseActivations {
  Vec u, a1, h1, a2, h2, out;
};

inline DenseActivations dense_conditioner(const CouplingLayer& s, ParamView p, CRef x) {
  const DenseView v(s, p);
  DenseActivations act;
  act.u = Vec::Zero(s.dim);
  for (int i = 0; i < s.dim; ++i)
    if (!coupling_updates(i, s.parity)) act.u[i] = x[i];
  act.a1 = v.w1 * act.u + v.b1;
  act.h1 = act.a1.unaryExpr(&leaky);
  act.a2 = v.w2 * act.h1 + v.b2;
  act.h2 = act.a2.unaryExpr(&leaky);
  act.out = v.w3 * act.h2 + v.b3;
  return act;
}

inline ForwardResult coupling_forward(const CouplingLayer& s, ParamView p, CRef x, VRef y) {
  const auto act = dense_conditioner(s, p, x);
  ForwardResult r;
  for (int i = 0; i < s.dim; ++i) {
    if (coupling_updates(i, s.parity)) {
      const double ls = act.out[i];
      y[i] = x[i] * std::exp(ls) + act.out[s.dim + i];
      r.log_det += ls;
      r.max_abs_log_scale = std::max(r.max_abs_log_scale, std::abs(ls));
    } else {
      y[i] = x[i];
    }
  }
  return r;
}

inline void coupling_adjoint(const CouplingLayer& s, ParamView p, CRef x, CRef gy, double gld, VRef gx, GradView gp) {
  const DenseView v(s, p);
  const auto act = dense_conditioner(s, p, x);
  const int d = s.dim, h = s.hidden;
  Vec g_out = Vec::Zero(2 * d);
  for (int i = 0; i < d; ++i) {
    if (coupling_updates(i, s.parity)) {
      const double e = std::exp(act.out[i]);
      gx[i] = gy[i] * e;
      g_out[i] = gy[i] * x[i] * e + gld;
      g_out[d + i] = gy[i];
    } else {
      gx[i] = gy[i];
    }
  }
  using GMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using GVec = Eigen::Map<Vec>;
  double* base = gp.data();
  GMap gw1(base, h, d);
  GVec gb1(base + h * d, h);
  GMap gw2(base + h * d + h, h, h);
  GVec gb2(base + h * d + h + h * h, h);
  GMap gw3(base + h * d + 2 * h + h * h, 2 * d, h);
  GVec gb3(base + h * d + 2 * h + h * h + 2 * d * h, 2 * d);

  gw3.noalias() += g_out * act.h2.transpose();
  gb3 += g_out;
  Vec g_a2 = (v.w3.transpose() * g_out).cwiseProduct(act.a2.unaryExpr(&leaky_slope));
  gw2.noalias() += g_a2 * act.h1.transpose();
  gb2 += g_a2;
  Vec g_a1 = (v.w2.transpose() * g_a2).cwiseProduct(act.a1.unaryExpr(&leaky_slope));
  gw1.noalias() += g_a1 * act.u.transpose();
  gb1 += g_a1;
  const Vec g_u = v.w1.transpose() * g_a1;
  for (int i = 0; i < d; ++i)
    if (!coupling_updates(i, s.parity)) gx[i] += g_u[i];
}

// ---- convolutional coupling -----------------------------------------------

struct ConvView {
  const double* w1;  // [hidden][kk]
  const double* b1;  // [hidden]
  const double* ws;  // [hidden][kk]
  const double* wt;  // [hidden][kk]
  double bs;
  double bt;

  ConvView(const ConvCouplingLayer& s, ParamView p) {
    const int kk = s.kernel * s.kernel, h = s.hidden;
    w1 = p.data();
    b1 = w1 + h * kk;
    ws = b1 + h;
    wt = ws + h * kk;
    bs = wt[h * kk];
    bt = wt[h * kk + 1];
  }
};

/// Site index of p + offset o, for every site and kernel offset.
struct ConvStencil {
  std::vector<int> nbr;  // [site][kk]
  int kk = 0;

  explicit ConvStencil(const ConvCouplingLayer& s) : kk(s.kernel * s.kernel) {
    const Lattice lat{s.side};
    const int r = s.kernel / 2;
    nbr.resize(static_cast<std::size_t>(lat.volume() * kk));
    for (int row = 0; row < s.side; ++row)
      for (int col = 0; col < s.side; ++col) {
        const int site = lat.index(row, col);
        for (int dr = -r; dr <= r; ++dr)
          for (int dc = -r; dc <= r; ++dc)
            nbr[static_cast<std::size_t>(site * kk + (dr + r) * s.kernel + (dc + r))] = lat.index(row + dr, col + dc);
      }
  }
  int at(int site, int o) const { return nbr[static_cast<std::size_t>(site * kk + o)]; }
};

inline bool conv_updates(const Lattice& lat, int site, MaskParity parity) {
  return lat.parity(site) == (parity == MaskParity::even ? 0 : 1);
}

struct ConvActivations {
  Vec u;                    // masked input
  std::vector<double> a;    // [hidden][site] pre-activations
  Vec s, t;                 // per-site outputs (only updated sites are meaningful)
};

inline ConvActivations conv_conditioner(const ConvCouplingLayer& spec, const ConvStencil& st, ParamView p, CRef x) {
  const Lattice lat{spec.side};
  const ConvView v(spec, p);
  const int n = lat.volume(), h = spec.hidden, kk = st.kk;
  ConvActivations act;
  act.u = Vec::Zero(n);
  for (int i = 0; i < n; ++i)
    if (!conv_updates(lat, i, spec.parity)) act.u[i] = x[i];
  act.a.assign(static_cast<std::size_t>(h * n), 0.0);
  for (int c = 0; c < h; ++c)
    for (int i = 0; i < n; ++i) {
      double acc = v.b1[c];
      for (int o = 0; o < kk; ++o) acc += v.w1[c * kk + o] * act.u[st.at(i, o)];
      act.a[static_cast<std::size_t>(c * n + i)] = acc;
    }
  act.s = Vec::Zero(n);
  act.t = Vec::Zero(n);
  for (int i = 0; i < n; ++i) {
    if (!conv_updates(lat, i, spec.parity)) continue;
    double s = v.bs, t = v.bt;
    for (int c = 0; c < h; ++c)
      for (int o = 0; o < kk; ++o) {
        const double hv = std::max(0.0, act.a[static_cast<std::size_t>(c * n + st.at(i, o))]);
        s += v.ws[c * kk + o] * hv;
        t += v.wt[c * kk + o] * hv;
      }
    act.s[i] = s;
    act.t[i] = t;
  }
  return act;
}

inline ForwardResult conv_forward(const ConvCouplingLayer& spec, ParamView p, CRef x, VRef y) {
  const ConvStencil st(spec);
  const Lattice lat{spec.side};
  const auto act = conv_conditioner(spec, st, p, x);
  ForwardResult r;
  std::vector<double> scales;
  scales.reserve(static_cast<std::size_t>(lat.volume() / 2 + 1));
  for (int i = 0; i < lat.volume(); ++i) {
    if (conv_updates(lat, i, spec.parity)) {
      y[i] = x[i] * std::exp(act.s[i]) + act.t[i];
      scales.push_back(act.s[i]);
      r.max_abs_log_scale = std::max(r.max_abs_log_scale, std::abs(act.s[i]));
    } else {
      y[i] = x[i];
    }
  }
  r.log_det = order_independent_sum(scales);
  return r;
}

inline void conv_adjoint(const ConvCouplingLayer& spec, ParamView p, CRef x, CRef gy, double gld, VRef gx, GradView gp) {
  const ConvStencil st(spec);
  const Lattice lat{spec.side};
  const ConvView v(spec, p);
  const auto act = conv_conditioner(spec, st, p, x);
  const int n = lat.volume(), h = spec.hidden, kk = st.kk;

  Vec gs = Vec::Zero(n), gt = Vec::Zero(n);
  for (int i = 0; i < n; ++i) {
    if (conv_updates(lat, i, spec.parity)) {
      const double e = std::exp(act.s[i]);
      gx[i] = gy[i] * e;
      gs[i] = gy[i] * x[i] * e + gld;
      gt[i] = gy[i];
    } else {
      gx[i] = gy[i];
    }
  }

  double* gw1 = gp.data();
  double* gb1 = gw1 + h * kk;
  double* gws = gb1 + h;
  double* gwt = gws + h * kk;
  double& gbs = gwt[h * kk];
  double& gbt = gwt[h * kk + 1];

  std::vector<double> ga(static_cast<std::size_t>(h * n), 0.0);  // grad wrt hidden activations, then pre-activations
  for (int i = 0; i < n; ++i) {
    if (!conv_updates(lat, i, spec.parity)) continue;
    gbs += gs[i];
    gbt += gt[i];
    for (int c = 0; c < h; ++c)
      for (int o = 0; o < kk; ++o) {
        const int q = st.at(i, o);
        const double hv = std::max(0.0, act.a[static_cast<std::size_t>(c * n + q)]);
        gws[c * kk + o] += gs[i] * hv;
        gwt[c * kk + o] += gt[i] * hv;
        ga[static_cast<std::size_t>(c * n + q)] += v.ws[c * kk + o] * gs[i] + v.wt[c * kk + o] * gt[i];
      }
  }
  Vec gu = Vec::Zero(n);
  for (int c = 0; c < h; ++c)
    for (int q = 0; q < n; ++q) {
      auto& g = ga[static_cast<std::size_t>(c * n + q)];
      if (act.a[static_cast<std::size_t>(c * n + q)] <= 0.0) g = 0.0;
      if (g == 0.0) continue;
      gb1[c] += g;
      for (int o = 0; o < kk; ++o) {
        const int src = st.at(q, o);
        gw1[c * kk + o] += g * act.u[src];
        gu[src] += v.w1[c * kk + o] * g;
      }
    }
  for (int i = 0; i < n; ++i)
    if (!conv_updates(lat, i, spec.parity)) gx[i] += gu[i];
}

// ---- dispatch ---------------------------------------------------------------

inline ForwardResult layer_forward(const LayerSpec& spec, ParamView p, CRef x, VRef y) {
  return std::visit(
      [&](const auto& s) -> ForwardResult {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, IdentityLayer>) {
          y = x;
          return {};
        } else if constexpr (std::is_same_v<T, DiagAffineLayer>) {
          return diag_forward(s, p, x, y);
        } else if constexpr (std::is_same_v<T, CouplingLayer>) {
          return coupling_forward(s, p, x, y);
        } else {
          return conv_forward(s, p, x, y);
        }
      },
      spec);
}

inline void layer_adjoint(const LayerSpec& spec, ParamView p, CRef x, CRef gy, double gld, VRef gx, GradView gp) {
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, IdentityLayer>) gx = gy;
        else if constexpr (std::is_same_v<T, DiagAffineLayer>) diag_adjoint(s, p, x, gy, gld, gx, gp);
        else if constexpr (std::is_same_v<T, CouplingLayer>) coupling_adjoint(s, p, x, gy, gld, gx, gp);
        else conv_adjoint(s, p, x, gy, gld, gx, gp);
      },
      spec);
}

}  // namespace detail

/// y = T(x); returns log|det dT/dx|.
inline ForwardResult forward(const Flow& flow, CRef x, VRef y) {
  if (x.size() != flow.dim()) throw std::invalid_argument("flow forward: dimension mismatch");
  ForwardResult total;
  if (flow.layers().empty()) {
    y = x;
    return total;
  }
  Vec cur = x, next(x.size());
  std::size_t off = 0;
  const auto& p = flow.params();
  for (const auto& layer : flow.layers()) {
    const auto n = static_cast<std::size_t>(layer_num_params(layer));
    const auto r = detail::layer_forward(layer, {p.data() + off, n}, cur, next);
    total.log_det += r.log_det;
    total.max_abs_log_scale = std::max(total.max_abs_log_scale, r.max_abs_log_scale);
    cur.swap(next);
    off += n;
  }
  y = cur;
  return total;
}

/// Convenience overload returning (y, log_det).
inline std::pair<Vec, double> forward(const Flow& flow, CRef x) {
  Vec y(x.size());
  const auto r = forward(flow, x, y);
  return {std::move(y), r.log_det};
}

/// Gradients of <grad_y, T(x)> + grad_log_det * log|det dT/dx| with respect to
/// x (written to grad_x) and the flow parameters (added into grad_params).
inline void adjoint(const Flow& flow, CRef x, CRef grad_y, double grad_log_det, VRef grad_x, VRef grad_params) {
  if (flow.layers().empty()) {
    grad_x = grad_y;
    return;
  }
  const auto& p = flow.params();
  const auto& layers = flow.layers();
  std::vector<Vec> inputs;
  std::vector<std::size_t> offsets;
  inputs.reserve(layers.size());
  Vec cur = x, next(x.size());
  std::size_t off = 0;
  for (const auto& layer : layers) {
    const auto n = static_cast<std::size_t>(layer_num_params(layer));
    inputs.push_back(cur);
    offsets.push_back(off);
    detail::layer_forward(layer, {p.data() + off, n}, cur, next);
    cur.swap(next);
    off += n;
  }
  Vec g = grad_y, gprev(x.size());
  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto n = static_cast<std::size_t>(layer_num_params(layers[l]));
    detail::layer_adjoint(layers[l], {p.data() + offsets[l], n}, inputs[l], g, grad_log_det, gprev,
                          {grad_params.data() + offsets[l], n});
    g.swap(gprev);
  }
  grad_x = g;
}

struct AdjointResult {
  Vec grad_x;
  Vec grad_params;
};

inline AdjointResult adjoint(const Flow& flow, CRef x, CRef grad_y, double grad_log_det) {
  AdjointResult r{Vec(x.size()), Vec::Zero(flow.num_params())};
  adjoint(flow, x, grad_y, grad_log_det, r.grad_x, r.grad_params);
  return r;
}

// ---- factories ---------------------------------------------------------------

inline Flow Flow::coupling(const CouplingLayer& spec, Rng& rng) {
  if (spec.dim < 1 || spec.hidden < 1) throw std::invalid_argument("coupling layer needs dim >= 1 and hidden >= 1");
  Vec p = Vec::Zero(layer_num_params(spec));
  const int d = spec.dim, h = spec.hidden;
  const double s1 = 1.0 / std::sqrt(static_cast<double>(d)), s2 = 1.0 / std::sqrt(static_cast<double>(h));
  for (int i = 0; i < h * d; ++i) p[i] = s1 * rng.normal();
  for (int i = 0; i < h * h; ++i) p[h * d + h + i] = s2 * rng.normal();
  // final layer stays zero: identity at initialization
  return Flow(d, {spec}, std::move(p));
}

inline Flow Flow::conv_coupling(const ConvCouplingLayer& spec, Rng& rng) {
  if (spec.side < 2 || spec.kernel < 1 || spec.kernel % 2 == 0 || spec.hidden < 1)
    throw std::invalid_argument("conv coupling needs side >= 2, odd kernel, hidden >= 1");
  Vec p = Vec::Zero(layer_num_params(spec));
  const int kk = spec.kernel * spec.kernel;
  const double s1 = 1.0 / std::sqrt(static_cast<double>(kk));
  for (int i = 0; i < spec.hidden * kk; ++i) p[i] = s1 * rng.normal();
  return Flow(spec.side * spec.side, {spec}, std::move(p));
}

/// Even then odd checkerboard conv couplings, so every site is updated.
inline Flow conv_coupling_pair(int side, int kernel, int hidden, Rng& rng) {
  const Flow a = Flow::conv_coupling({side, kernel, hidden, MaskParity::even}, rng);
  const Flow b = Flow::conv_coupling({side, kernel, hidden, MaskParity::odd}, rng);
  return compose({a, b});
}

/// Even then odd dense couplings.
inline Flow coupling_pair(int dim, int hidden, Rng& rng) {
  const Flow a = Flow::coupling({dim, hidden, MaskParity::even}, rng);
  const Flow b = Flow::coupling({dim, hidden, MaskParity::odd}, rng);
  return compose({a, b});
}

}  // namespace craft
