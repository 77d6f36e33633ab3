#pragma once

// Uniform interior grids on the interval and the finite-difference operators
// L_k, A = L + Q and M = L + B(R - I) with Dirichlet killing.

#include <cmath>
#include <memory>
#include <sstream>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <boost/math/interpolators/cardinal_cubic_b_spline.hpp>

#include "superspine/errors.hpp"
#include "superspine/model.hpp"

namespace superspine {

struct Grid {
  double lo = 0.0;
  double hi = 1.0;
  double h = 0.0;
  std::size_t M = 0;
  std::vector<double> nodes;
  std::vector<double> weights;

  double x(std::size_t m) const { return nodes[m]; }
  double measure() const { return hi - lo; }
  double distance_to_boundary(std::size_t m) const { return std::min(nodes[m] - lo, hi - nodes[m]); }
};

using GridPtr = std::shared_ptr<const Grid>;

inline constexpr std::size_t kMinGridNodes = 8;

/// Interior nodes x_m = x_lo + m h, m = 1..M, with h = |D| / (M + 1).
/// `min_nodes` can be lowered for tiny illustrative grids.
inline GridPtr build_grid(const SpatialDomain& domain, std::size_t M, std::size_t min_nodes = kMinGridNodes) {
  const auto* iv = std::get_if<Interval>(&domain);
  if (!iv) throw ModelError("rectangle domains are parsed but not discretized; use an interval");
  if (M < min_nodes) {
    std::ostringstream os;
    os << "grid needs at least " << min_nodes << " interior nodes, got " << M;
    throw ResolutionError(os.str());
  }
  auto g = std::make_shared<Grid>();
  g->lo = iv->lo;
  g->hi = iv->hi;
  g->M = M;
  g->h = (iv->hi - iv->lo) / static_cast<double>(M + 1);
  g->nodes.resize(M);
  g->weights.assign(M, g->h);
  for (std::size_t m = 0; m < M; ++m) g->nodes[m] = iv->lo + static_cast<double>(m + 1) * g->h;
  return g;
}

/// A function on (grid nodes x types), stored node-major: index m*K + k.
struct GridField {
  GridPtr grid;
  std::size_t K = 0;
  Eigen::VectorXd values;

  GridField() = default;
  GridField(GridPtr g, std::size_t k) : grid(std::move(g)), K(k), values(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(grid->M * k))) {}
  GridField(GridPtr g, std::size_t k, Eigen::VectorXd v) : grid(std::move(g)), K(k), values(std::move(v)) {
    if (static_cast<std::size_t>(values.size()) != grid->M * K) throw ArgumentError("GridField size mismatch");
  }

  double& operator()(std::size_t m, std::size_t k) { return values[static_cast<Eigen::Index>(m * K + k)]; }
  double operator()(std::size_t m, std::size_t k) const { return values[static_cast<Eigen::Index>(m * K + k)]; }
  std::size_t size() const { return static_cast<std::size_t>(values.size()); }

  template <class F>
  static GridField from_function(GridPtr g, std::size_t K, F&& f) {
    GridField out(g, K);
    for (std::size_t m = 0; m < g->M; ++m)
      for (std::size_t k = 0; k < K; ++k) out(m, k) = f(g->nodes[m], k);
    return out;
  }
  static GridField constant(GridPtr g, std::size_t K, double c) {
    GridField out(g, K);
    out.values.setConstant(c);
    return out;
  }

  /// Piecewise-linear interpolation in x with zero Dirichlet values at the ends.
  double interpolate(double x, std::size_t k) const {
    const Grid& g = *grid;
    const double s = (x - g.lo) / g.h;  // node m sits at s = m + 1
    if (s <= 0.0 || s >= static_cast<double>(g.M + 1)) return 0.0;
    const auto cell = static_cast<std::size_t>(s);
    const double frac = s - static_cast<double>(cell);
    const double left = cell == 0 ? 0.0 : (*this)(cell - 1, k);
    const double right = cell >= g.M ? 0.0 : (*this)(cell, k);
    return left + frac * (right - left);
  }
};

struct QuadratureResult {
  std::vector<double> per_type;
  double total = 0.0;
};

/// sum_m w_m f(x_m, i), per type and summed.
inline QuadratureResult quadrature(const GridField& f) {
  QuadratureResult r;
  r.per_type.assign(f.K, 0.0);
  for (std::size_t m = 0; m < f.grid->M; ++m)
    for (std::size_t k = 0; k < f.K; ++k) r.per_type[k] += f.grid->weights[m] * f(m, k);
  for (double v : r.per_type) r.total += v;
  return r;
}

/// Weighted inner product <f, g> over D x S.
inline double inner(const GridField& f, const GridField& g) {
  double s = 0.0;
  for (std::size_t m = 0; m < f.grid->M; ++m)
    for (std::size_t k = 0; k < f.K; ++k) s += f.grid->weights[m] * f(m, k) * g(m, k);
  return s;
}

enum class OperatorTag { L_only, A_switched, M_mean };

inline const char* to_string(OperatorTag t) {
  switch (t) {
    case OperatorTag::L_only: return "L_only";
    case OperatorTag::A_switched: return "A_switched";
    default: return "M_mean";
  }
}

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct OperatorMatrix {
  SparseMatrix mat;
  OperatorTag tag = OperatorTag::L_only;
  GridPtr grid;
  std::size_t K = 0;

  Eigen::MatrixXd dense() const { return Eigen::MatrixXd(mat); }
  Eigen::Index dim() const { return mat.rows(); }
};

namespace detail {

using CardinalSpline = boost::math::interpolators::cardinal_cubic_b_spline<double>;

/// Cubic B-spline on a uniform grid with third-order one-sided end slopes. The library's own
/// end estimate loses accuracy in the last cell.
inline CardinalSpline cardinal_spline(const std::vector<double>& v, double t0, double h) {
  if (v.size() < 4) throw ArgumentError("spline needs at least 4 samples");
  const std::size_t n = v.size();
  const double left = (-11 * v[0] + 18 * v[1] - 9 * v[2] + 2 * v[3]) / (6 * h);
  const double right = (11 * v[n - 1] - 18 * v[n - 2] + 9 * v[n - 3] - 2 * v[n - 4]) / (6 * h);
  return CardinalSpline(v.data(), n, t0, h, left, right);
}

}  // namespace detail

namespace detail {

inline void check_diffusivity(const ModelSpec& spec, const Grid& g, std::size_t k) {
  for (std::size_t m = 0; m < g.M; ++m)
    if (!(spec.a(k, g.nodes[m]) > 0.0)) {
      std::ostringstream os;
      os << "diffusivity of type " << k + 1 << " is not positive at x=" << g.nodes[m];
      throw ModelError(os.str());
    }
}

/// Half-node diffusivities a_{m+1/2} for m = 0..M (boundary halves use the boundary value).
inline std::vector<double> half_node_diffusivity(const ModelSpec& spec, const Grid& g, std::size_t k) {
  std::vector<double> a(g.M + 1);
  auto at = [&](std::size_t idx) {  // idx 0 = x_lo, M+1 = x_hi
    const double x = g.lo + static_cast<double>(idx) * g.h;
    return spec.a(k, x);
  };
  for (std::size_t m = 0; m <= g.M; ++m) a[m] = 0.5 * (at(m) + at(m + 1));
  return a;
}

/// Tridiagonal stencil of L_k: sub[m], diag[m], sup[m] for row m.
struct Tridiagonal {
  std::vector<double> sub, diag, sup;
};

inline Tridiagonal lk_stencil(const ModelSpec& spec, const Grid& g, std::size_t k) {
  check_diffusivity(spec, g, k);
  const auto a = half_node_diffusivity(spec, g, k);
  const double ih2 = 1.0 / (g.h * g.h);
  Tridiagonal t;
  t.sub.assign(g.M, 0.0);
  t.diag.assign(g.M, 0.0);
  t.sup.assign(g.M, 0.0);
  for (std::size_t m = 0; m < g.M; ++m) {
    t.diag[m] = -(a[m] + a[m + 1]) * ih2;
    if (m > 0) t.sub[m] = a[m] * ih2;
    if (m + 1 < g.M) t.sup[m] = a[m + 1] * ih2;
  }
  return t;
}

inline void add_lk(std::vector<Eigen::Triplet<double>>& trip, const Tridiagonal& t, std::size_t K, std::size_t k) {
  const std::size_t M = t.diag.size();
  for (std::size_t m = 0; m < M; ++m) {
    const auto r = static_cast<int>(m * K + k);
    trip.emplace_back(r, r, t.diag[m]);
    if (m > 0) trip.emplace_back(r, static_cast<int>((m - 1) * K + k), t.sub[m]);
    if (m + 1 < M) trip.emplace_back(r, static_cast<int>((m + 1) * K + k), t.sup[m]);
  }
}

inline void check_weighted_symmetry(const OperatorMatrix& op) {
  // Uniform weights make weighted symmetry plain symmetry.
  const SparseMatrix diff = SparseMatrix(op.mat.transpose()) - op.mat;
  double worst = 0.0;
  for (int r = 0; r < diff.outerSize(); ++r)
    for (SparseMatrix::InnerIterator it(diff, r); it; ++it) worst = std::max(worst, std::abs(it.value()));
  const double scale = std::max(1.0, op.mat.coeffs().cwiseAbs().maxCoeff());
  if (worst > 1e-10 * scale) {
    std::ostringstream os;
    os << "assembled " << to_string(op.tag) << " is not weighted-symmetric (max asymmetry " << worst
       << "); check b n p^{(i)}_j = b n p^{(j)}_i";
    throw ModelError(os.str());
  }
}

}  // namespace detail

/// Block-diagonal embedding of L_k alone (other types zero).
inline OperatorMatrix assemble_Lk(const GridPtr& grid, const ModelSpec& spec, std::size_t k) {
  detail::check_type(spec, k);
  std::vector<Eigen::Triplet<double>> trip;
  detail::add_lk(trip, detail::lk_stencil(spec, *grid, k), spec.K, k);
  OperatorMatrix op;
  op.tag = OperatorTag::L_only;
  op.grid = grid;
  op.K = spec.K;
  const auto N = static_cast<Eigen::Index>(grid->M * spec.K);
  op.mat.resize(N, N);
  op.mat.setFromTriplets(trip.begin(), trip.end());
  return op;
}

namespace detail {

inline OperatorMatrix assemble_coupled(const GridPtr& grid, const ModelSpec& spec, OperatorTag tag) {
  const Grid& g = *grid;
  const std::size_t K = spec.K;
  std::vector<Eigen::Triplet<double>> trip;
  for (std::size_t k = 0; k < K; ++k) add_lk(trip, lk_stencil(spec, g, k), K, k);
  for (std::size_t m = 0; m < g.M; ++m) {
    const double x = g.nodes[m];
    for (std::size_t i = 0; i < K; ++i) {
      const auto r = static_cast<int>(m * K + i);
      for (std::size_t j = 0; j < K; ++j) {
        const double v = tag == OperatorTag::A_switched
                             ? spec.q(x, i, j)
                             : spec.b(x, i) * (spec.n(x, i) * spec.p(x, i, j) - (i == j ? 1.0 : 0.0));
        if (v != 0.0) trip.emplace_back(r, static_cast<int>(m * K + j), v);
      }
    }
  }
  OperatorMatrix op;
  op.tag = tag;
  op.grid = grid;
  op.K = K;
  const auto N = static_cast<Eigen::Index>(g.M * K);
  op.mat.resize(N, N);
  op.mat.setFromTriplets(trip.begin(), trip.end());
  check_weighted_symmetry(op);
  return op;
}

}  // namespace detail

/// A = L + Q, the switched-diffusion generator killed at the boundary.
inline OperatorMatrix assemble_A(const GridPtr& grid, const ModelSpec& spec) {
  return detail::assemble_coupled(grid, spec, OperatorTag::A_switched);
}

/// M = L + B(R - I), the mean-semigroup generator.
inline OperatorMatrix assemble_M(const GridPtr& grid, const ModelSpec& spec) {
  return detail::assemble_coupled(grid, spec, OperatorTag::M_mean);
}

inline GridField apply(const OperatorMatrix& op, const GridField& f) {
  return GridField(f.grid, f.K, op.mat * f.values);
}

}  // namespace superspine
