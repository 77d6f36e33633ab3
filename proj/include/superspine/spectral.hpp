#pragma once

// Principal eigenpair of the mean generator, heat kernels, intrinsic
// ultracontractivity diagnostics and the phi-transformed (spine) dynamics.

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseLU>

#include "superspine/grid.hpp"
#include "superspine/model.hpp"

namespace superspine {

inline constexpr Eigen::Index kDenseEigenLimit = 2000;
inline constexpr Eigen::Index kDenseKernelLimit = 4000;

/// Eigendecomposition of a symmetric operator, eigenvalues in decreasing order.
class SymmetricSpectrum {
 public:
  SymmetricSpectrum() = default;
  explicit SymmetricSpectrum(const Eigen::MatrixXd& A) {
    if (A.rows() > kDenseKernelLimit) throw ResolutionError("operator too large for a dense eigendecomposition");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
    if (es.info() != Eigen::Success) throw NumericError("symmetric eigensolver did not converge");
    values_ = es.eigenvalues().reverse();
    vectors_ = es.eigenvectors().rowwise().reverse();
  }

  const Eigen::VectorXd& values() const { return values_; }
  const Eigen::MatrixXd& vectors() const { return vectors_; }
  Eigen::Index dim() const { return values_.size(); }

  /// exp(t A) v
  Eigen::VectorXd propagate(double t, const Eigen::VectorXd& v) const {
    Eigen::VectorXd c = vectors_.transpose() * v;
    c.array() *= (t * values_.array()).exp();
    return vectors_ * c;
  }

  /// exp(t A) as a dense matrix.
  Eigen::MatrixXd exp_matrix(double t) const {
    const Eigen::VectorXd e = (t * values_.array()).exp();
    return vectors_ * e.asDiagonal() * vectors_.transpose();
  }

 private:
  Eigen::VectorXd values_;
  Eigen::MatrixXd vectors_;
};

struct Eigenpair {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  GridField phi;
  double residual = 0.0;
};

namespace detail {

inline void normalize_phi(GridField& phi) {
  double mean = phi.values.sum();
  if (mean < 0.0) phi.values = -phi.values;
  const double nrm = std::sqrt(inner(phi, phi));
  phi.values /= nrm;
}

inline void require_positive(const GridField& phi) {
  const double mn = phi.values.minCoeff();
  if (!(mn > 0.0)) {
    std::ostringstream os;
    os << "principal eigenvector is not strictly positive (min entry " << mn
       << "); the type coupling is probably reducible";
    throw ModelError(os.str());
  }
}

/// Block shift-invert iteration for the two largest eigenvalues of a large symmetric operator.
inline Eigen::MatrixXd shift_invert_top(const SparseMatrix& A, double shift, Eigen::VectorXd& ritz) {
  const Eigen::Index N = A.rows();
  Eigen::SparseMatrix<double> S = Eigen::SparseMatrix<double>(A);
  Eigen::SparseMatrix<double> I(N, N);
  I.setIdentity();
  S = S - shift * I;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  lu.compute(S);
  if (lu.info() != Eigen::Success) throw NumericError("shift-invert factorization failed");
  const Eigen::Index block = 4;
  Eigen::MatrixXd V(N, block);
  for (Eigen::Index c = 0; c < block; ++c)
    for (Eigen::Index r = 0; r < N; ++r) V(r, c) = std::cos(0.37 * static_cast<double>((c + 1) * (r + 1))) + (c == 0 ? 2.0 : 0.0);
  Eigen::VectorXd prev = Eigen::VectorXd::Constant(block, kInf);
  for (int it = 0; it < 500; ++it) {
    Eigen::MatrixXd W(N, block);
    for (Eigen::Index c = 0; c < block; ++c) W.col(c) = lu.solve(V.col(c));
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(W);
    V = qr.householderQ() * Eigen::MatrixXd::Identity(N, block);
    const Eigen::MatrixXd H = V.transpose() * (A * V);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(H);
    ritz = es.eigenvalues().reverse();
    V = V * es.eigenvectors().rowwise().reverse();
    if ((ritz.head(2) - prev.head(2)).cwiseAbs().maxCoeff() < 1e-12 * std::max(1.0, std::abs(ritz[0]))) {
      Eigen::VectorXd r = A * V.col(0) - ritz[0] * V.col(0);
      if (r.norm() < 1e-9 * V.col(0).norm()) return V;
    }
    prev = ritz;
  }
  throw NumericError("shift-invert iteration did not converge in 500 sweeps");
}

}  // namespace detail

/// Largest eigenvalue of M with its positive, quadrature-normalized eigenvector.
inline Eigenpair principal_eigenpair(const OperatorMatrix& M) {
  Eigenpair ep;
  const GridPtr grid = M.grid;
  Eigen::VectorXd v;
  if (M.dim() <= kDenseEigenLimit) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M.dense());
    if (es.info() != Eigen::Success) throw NumericError("eigensolver did not converge");
    const Eigen::Index n = M.dim();
    ep.lambda1 = es.eigenvalues()[n - 1];
    ep.lambda2 = es.eigenvalues()[n - 2];
    v = es.eigenvectors().col(n - 1);
  } else {
    // Shift just above the top of the spectrum: Gershgorin bound.
    double gersh = -kInf;
    for (int r = 0; r < M.mat.outerSize(); ++r) {
      double diag = 0.0, off = 0.0;
      for (SparseMatrix::InnerIterator it(M.mat, r); it; ++it) {
        if (it.col() == r) diag += it.value();
        else off += std::abs(it.value());
      }
      gersh = std::max(gersh, diag + off);
    }
    Eigen::VectorXd ritz;
    const Eigen::MatrixXd V = detail::shift_invert_top(M.mat, gersh + 1.0, ritz);
    ep.lambda1 = ritz[0];
    ep.lambda2 = ritz[1];
    v = V.col(0);
  }
  ep.phi = GridField(grid, M.K, v);
  detail::normalize_phi(ep.phi);
  detail::require_positive(ep.phi);
  const Eigen::VectorXd r = M.mat * ep.phi.values - ep.lambda1 * ep.phi.values;
  ep.residual = r.norm() / ep.phi.values.norm();
  return ep;
}

/// Everything the downstream solvers need from the spectral stage.
struct SpectralData {
  GridPtr grid;
  std::size_t K = 0;
  OperatorMatrix M;
  OperatorMatrix A;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  GridField phi;
  double eigen_residual = 0.0;
  std::vector<double> a_spectrum;    ///< leading eigenvalues nu_k of A
  std::vector<GridField> a_fields;   ///< matching eigenfields
  SymmetricSpectrum m_spectrum;      ///< full decomposition of M (dense sizes)
  SymmetricSpectrum a_full;          ///< full decomposition of A (dense sizes)

  double gap() const { return lambda2 - lambda1; }
};

inline SpectralData compute_spectral(const ModelSpec& spec, const GridPtr& grid, std::size_t a_modes = 4) {
  SpectralData sd;
  sd.grid = grid;
  sd.K = spec.K;
  sd.M = assemble_M(grid, spec);
  sd.A = assemble_A(grid, spec);
  if (sd.M.dim() <= kDenseEigenLimit) {
    sd.m_spectrum = SymmetricSpectrum(sd.M.dense());
    sd.a_full = SymmetricSpectrum(sd.A.dense());
    sd.lambda1 = sd.m_spectrum.values()[0];
    sd.lambda2 = sd.m_spectrum.values()[1];
    sd.phi = GridField(grid, spec.K, sd.m_spectrum.vectors().col(0));
    detail::normalize_phi(sd.phi);
    detail::require_positive(sd.phi);
    const Eigen::VectorXd r = sd.M.mat * sd.phi.values - sd.lambda1 * sd.phi.values;
    sd.eigen_residual = r.norm() / sd.phi.values.norm();
    for (std::size_t k = 0; k < std::min<std::size_t>(a_modes, static_cast<std::size_t>(sd.a_full.dim())); ++k) {
      sd.a_spectrum.push_back(sd.a_full.values()[static_cast<Eigen::Index>(k)]);
      GridField f(grid, spec.K, sd.a_full.vectors().col(static_cast<Eigen::Index>(k)));
      f.values /= std::sqrt(inner(f, f));
      sd.a_fields.push_back(std::move(f));
    }
  } else {
    const Eigenpair ep = principal_eigenpair(sd.M);
    sd.lambda1 = ep.lambda1;
    sd.lambda2 = ep.lambda2;
    sd.phi = ep.phi;
    sd.eigen_residual = ep.residual;
  }
  return sd;
}

// ---------------------------------------------------------------------------
// Supercriticality check and heat kernels
// ---------------------------------------------------------------------------

struct Assumption1Verdict {
  bool holds = false;
  double lambda1 = 0.0;
  double sup_phi = 0.0;
  double min_phi_over_dist = 0.0;  ///< empirical C9
  double max_phi_over_dist = 0.0;  ///< empirical C10
};

inline Assumption1Verdict check_assumption1(const SpectralData& sd) {
  Assumption1Verdict v;
  v.lambda1 = sd.lambda1;
  v.holds = sd.lambda1 > 0.0;
  v.sup_phi = sd.phi.values.maxCoeff();
  v.min_phi_over_dist = kInf;
  v.max_phi_over_dist = 0.0;
  const Grid& g = *sd.grid;
  for (std::size_t m = 0; m < g.M; ++m)
    for (std::size_t k = 0; k < sd.K; ++k) {
      const double r = sd.phi(m, k) / g.distance_to_boundary(m);
      v.min_phi_over_dist = std::min(v.min_phi_over_dist, r);
      v.max_phi_over_dist = std::max(v.max_phi_over_dist, r);
    }
  return v;
}

namespace detail {
inline const SymmetricSpectrum& spectrum_for(const SpectralData& sd, OperatorTag tag) {
  if (sd.m_spectrum.dim() == 0) throw ResolutionError("heat kernels need a dense decomposition (N <= 2000)");
  return tag == OperatorTag::A_switched ? sd.a_full : sd.m_spectrum;
}
}  // namespace detail

/// Density of exp(t op) against the quadrature weights: entry (r, c) is p(t, r, c).
inline Eigen::MatrixXd heat_kernel(const OperatorMatrix& op, double t) {
  if (!(t > 0.0)) throw ArgumentError("heat_kernel requires t > 0");
  const SymmetricSpectrum s(op.dense());
  return s.exp_matrix(t) / op.grid->h;
}

/// Same, reusing the decomposition held in SpectralData.
inline Eigen::MatrixXd heat_kernel(const SpectralData& sd, OperatorTag tag, double t) {
  if (!(t > 0.0)) throw ArgumentError("heat_kernel requires t > 0");
  return detail::spectrum_for(sd, tag).exp_matrix(t) / sd.grid->h;
}

// ---------------------------------------------------------------------------
// Intrinsic ultracontractivity diagnostics
// ---------------------------------------------------------------------------

struct IURow {
  double t = 0.0;
  double c_t = 0.0;     ///< max p_A(t) / (phi x phi)
  double delta = 0.0;   ///< max |e^{-lambda1 t} p_M(t)/(phi x phi) - 1|
  double bound = 0.0;   ///< C e^{(lambda2 - lambda1) t}
};

struct IUReport {
  std::vector<IURow> rows;
  double fitted_C = 0.0;
  double fitted_rate = 0.0;  ///< slope of log delta over the later half of the times
  double gap = 0.0;          ///< lambda2 - lambda1
  double C9 = 0.0;
  double C10 = 0.0;
  bool delta_nonincreasing = true;
  bool c_t_finite = true;
  bool bound_holds = true;
};

inline IUReport check_iu(const SpectralData& sd, const std::vector<double>& times) {
  IUReport rep;
  rep.gap = sd.gap();
  const auto a1 = check_assumption1(sd);
  rep.C9 = a1.min_phi_over_dist;
  rep.C10 = a1.max_phi_over_dist;
  const Eigen::VectorXd& phi = sd.phi.values;
  const Eigen::MatrixXd outer = phi * phi.transpose();
  for (double t : times) {
    if (!(t > 0.0)) throw ArgumentError("IU times must be positive");
    IURow row;
    row.t = t;
    const Eigen::MatrixXd pa = heat_kernel(sd, OperatorTag::A_switched, t);
    row.c_t = pa.cwiseQuotient(outer).maxCoeff();
    const Eigen::MatrixXd pm = heat_kernel(sd, OperatorTag::M_mean, t);
    row.delta = (std::exp(-sd.lambda1 * t) * pm.cwiseQuotient(outer).array() - 1.0).abs().maxCoeff();
    rep.c_t_finite = rep.c_t_finite && std::isfinite(row.c_t);
    rep.rows.push_back(row);
  }
  // C is the smallest constant making the spectral-gap envelope dominate every sampled delta.
  for (const auto& r : rep.rows) rep.fitted_C = std::max(rep.fitted_C, r.delta * std::exp(-rep.gap * r.t));
  for (auto& r : rep.rows) {
    r.bound = rep.fitted_C * std::exp(rep.gap * r.t);
    rep.bound_holds = rep.bound_holds && r.delta <= r.bound * (1.0 + 1e-12);
  }
  for (std::size_t k = 1; k < rep.rows.size(); ++k)
    if (rep.rows[k].delta > rep.rows[k - 1].delta * (1.0 + 1e-12)) rep.delta_nonincreasing = false;
  // Least-squares decay rate from the later half of the sampled times.
  const std::size_t start = rep.rows.size() / 2;
  if (rep.rows.size() - start >= 2) {
    double st = 0, sy = 0, stt = 0, sty = 0;
    double cnt = 0;
    for (std::size_t k = start; k < rep.rows.size(); ++k) {
      const double y = std::log(rep.rows[k].delta);
      st += rep.rows[k].t;
      sy += y;
      stt += rep.rows[k].t * rep.rows[k].t;
      sty += rep.rows[k].t * y;
      cnt += 1;
    }
    rep.fitted_rate = (cnt * sty - st * sy) / (cnt * stt - st * st);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// phi-transform
// ---------------------------------------------------------------------------

/// Lookup table of spine coefficients on a fine uniform mesh, linear in between.
struct SpineTable {
  double x0 = 0.0;   ///< first table abscissa
  double dx = 0.0;
  std::size_t n = 0;
  std::size_t K = 0;
  std::vector<double> drift;  ///< [cell * K + k]
  std::vector<double> sigma;  ///< sqrt(2 a)
  std::vector<double> rate;   ///< spine jump rate
  std::vector<double> ptilde; ///< [(cell * K + i) * K + j]

  std::pair<std::size_t, double> locate(double x) const {
    double s = (x - x0) / dx;
    s = std::clamp(s, 0.0, static_cast<double>(n - 1) - 1e-12);
    const auto c = static_cast<std::size_t>(s);
    return {c, s - static_cast<double>(c)};
  }
  double lerp(const std::vector<double>& v, std::size_t c, double f, std::size_t k) const {
    return v[c * K + k] + f * (v[(c + 1) * K + k] - v[c * K + k]);
  }
};

class PhiTransform {
 public:
  PhiTransform() = default;

  // The transform keeps pointers to both arguments.
  PhiTransform(const ModelSpec&, SpectralData&&) = delete;
  PhiTransform(ModelSpec&&, const SpectralData&) = delete;

  PhiTransform(const ModelSpec& spec, const SpectralData& sd) : spec_(&spec), sd_(&sd) {
    if (!(sd.lambda1 > 0.0)) throw ModelError("phi-transform requires lambda1 > 0");
    detail::require_positive(sd.phi);
    const Grid& g = *sd.grid;
    const std::size_t K = spec.K;
    lambda1 = sd.lambda1;
    phi = sd.phi;
    invariant_density = sd.phi;
    invariant_density.values = sd.phi.values.cwiseProduct(sd.phi.values);
    spine_rate = GridField(sd.grid, K);
    log_phi_grad = GridField(sd.grid, K);
    for (std::size_t m = 0; m < g.M; ++m)
      for (std::size_t i = 0; i < K; ++i) spine_rate(m, i) = rate_at_node(m, i);
    // phi' on the nodes extended by both boundary points. phi vanishes on the boundary, so every
    // node has a centered stencil; the boundary slopes are one-sided second order.
    dphi_.assign((g.M + 2) * K, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      auto at = [&](std::ptrdiff_t m) {
        return m < 0 || m >= static_cast<std::ptrdiff_t>(g.M) ? 0.0 : sd.phi(static_cast<std::size_t>(m), k);
      };
      const auto M = static_cast<std::ptrdiff_t>(g.M);
      for (std::ptrdiff_t m = 0; m < M; ++m) dphi_[(static_cast<std::size_t>(m) + 1) * K + k] = (at(m + 1) - at(m - 1)) / (2 * g.h);
      dphi_[k] = (4 * at(0) - at(1)) / (2 * g.h);
      dphi_[(g.M + 1) * K + k] = -(4 * at(M - 1) - at(M - 2)) / (2 * g.h);
      for (std::size_t m = 0; m < g.M; ++m) log_phi_grad(m, k) = dphi_[(m + 1) * K + k] / sd.phi(m, k);
    }
    build_table();
  }

  double lambda1 = 0.0;
  GridField phi;
  GridField spine_rate;
  GridField log_phi_grad;
  GridField invariant_density;

  const ModelSpec& spec() const { return *spec_; }
  const SpectralData& spectral() const { return *sd_; }
  const SpineTable& table() const { return table_; }
  double clamp_margin() const { return 0.5 * sd_->grid->h; }

  /// phi at any x by linear interpolation, zero on the boundary.
  double phi_at(double x, std::size_t k) const { return phi.interpolate(x, k); }

  double pi_phi_at(double x, std::size_t i) const {
    double s = 0.0;
    for (std::size_t j = 0; j < spec_->K; ++j) s += spec_->p(x, i, j) * phi_at(x, j);
    return s;
  }

  /// p~_ij(x) = p^{(i)}_j(x) phi(x,j) / pi(x,i;phi)
  Eigen::MatrixXd ptilde(double x) const {
    const std::size_t K = spec_->K;
    Eigen::MatrixXd P(K, K);
    for (std::size_t i = 0; i < K; ++i) {
      const double den = pi_phi_at(x, i);
      for (std::size_t j = 0; j < K; ++j)
        P(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            den > 0.0 ? spec_->p(x, i, j) * phi_at(x, j) / den : spec_->p(x, i, j);
    }
    return P;
  }

  /// d/dx log phi(x, k) as the ratio of the piecewise-linear phi' and phi. Near the boundary
  /// this behaves like 1 / dist(x, boundary), as the exact value does.
  double log_phi_derivative(double x, std::size_t k) const {
    const Grid& g = *sd_->grid;
    const std::size_t K = spec_->K;
    const double s = std::clamp((x - g.lo) / g.h, 0.0, static_cast<double>(g.M + 1));
    const auto c = std::min(static_cast<std::size_t>(s), g.M);
    const double f = s - static_cast<double>(c);
    const double d = dphi_[c * K + k] + f * (dphi_[(c + 1) * K + k] - dphi_[c * K + k]);
    const double ph = phi_at(x, k);
    if (!(ph > 0.0)) throw DomainError("log phi derivative requested on the boundary");
    return d / ph;
  }

  double spine_rate_at(double x, std::size_t i) const {
    const double ph = phi_at(x, i);
    return ph > 0.0 ? spec_->b(x, i) * spec_->n(x, i) * pi_phi_at(x, i) / ph : 0.0;
  }

  double drift_at(double x, std::size_t k) const {
    return spec_->a_prime(k, x) + 2.0 * spec_->a(k, x) * log_phi_derivative(x, k);
  }

  /// Discrete spine generator Phi^{-1} (M - lambda1) Phi (conservative up to the eigen residual).
  Eigen::MatrixXd generator() const {
    const Eigen::VectorXd& p = phi.values;
    Eigen::MatrixXd G = sd_->M.dense();
    G.diagonal().array() -= lambda1;
    return p.cwiseInverse().asDiagonal() * G * p.asDiagonal();
  }

  /// Transition operator e^{-lambda1 t} Phi^{-1} e^{tM} Phi.
  Eigen::MatrixXd transition(double t) const {
    const Eigen::VectorXd& p = phi.values;
    return std::exp(-lambda1 * t) * (p.cwiseInverse().asDiagonal() * sd_->m_spectrum.exp_matrix(t) * p.asDiagonal());
  }

 private:
  double rate_at_node(std::size_t m, std::size_t i) const {
    const double x = sd_->grid->nodes[m];
    double pp = 0.0;
    for (std::size_t j = 0; j < spec_->K; ++j) pp += spec_->p(x, i, j) * sd_->phi(m, j);
    return spec_->b(x, i) * spec_->n(x, i) * pp / sd_->phi(m, i);
  }

  void build_table() {
    const Grid& g = *sd_->grid;
    const std::size_t K = spec_->K;
    table_.K = K;
    table_.dx = g.h / 8.0;
    table_.x0 = g.lo + clamp_margin();
    const double span = (g.hi - clamp_margin()) - table_.x0;
    table_.n = static_cast<std::size_t>(std::ceil(span / table_.dx)) + 1;
    table_.dx = span / static_cast<double>(table_.n - 1);
    table_.drift.resize(table_.n * K);
    table_.sigma.resize(table_.n * K);
    table_.rate.resize(table_.n * K);
    table_.ptilde.resize(table_.n * K * K);
    for (std::size_t c = 0; c < table_.n; ++c) {
      const double x = table_.x0 + static_cast<double>(c) * table_.dx;
      const Eigen::MatrixXd P = ptilde(x);
      for (std::size_t k = 0; k < K; ++k) {
        table_.drift[c * K + k] = drift_at(x, k);
        table_.sigma[c * K + k] = std::sqrt(2.0 * spec_->a(k, x));
        table_.rate[c * K + k] = spine_rate_at(x, k);
        for (std::size_t j = 0; j < K; ++j)
          table_.ptilde[(c * K + k) * K + j] = P(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
      }
    }
  }

  const ModelSpec* spec_ = nullptr;
  const SpectralData* sd_ = nullptr;
  std::vector<double> dphi_;  ///< [(node + 1) * K + k], boundary slopes at both ends
  SpineTable table_;
};

inline PhiTransform phi_transform(const ModelSpec& spec, const SpectralData& sd) { return PhiTransform(spec, sd); }

}  // namespace superspine
