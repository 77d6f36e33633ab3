#pragma once

// Deterministic time stepping: mean flow, cumulant equation, its linearization,
// the non-local Feynman-Kac equation and the identity checks built from them.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseLU>

#include "superspine/grid.hpp"
#include "superspine/model.hpp"
#include "superspine/spectral.hpp"

namespace superspine {

struct EvolutionTrajectory {
  std::string tag;
  double dt = 0.0;
  std::vector<double> times;
  std::vector<GridField> fields;

  const GridField& final() const { return fields.back(); }
  double horizon() const { return times.back(); }

  /// Linear interpolation in time.
  GridField at(double tau) const {
    if (tau <= times.front()) return fields.front();
    if (tau >= times.back()) return fields.back();
    const double s = (tau - times.front()) / dt;
    auto k = static_cast<std::size_t>(s);
    k = std::min(k, times.size() - 2);
    const double f = (tau - times[k]) / (times[k + 1] - times[k]);
    GridField out = fields[k];
    out.values += f * (fields[k + 1].values - fields[k].values);
    return out;
  }

  /// Value at (tau, x, type) with linear interpolation in both variables.
  double value(double tau, double x, std::size_t i) const {
    const double s = std::clamp((tau - times.front()) / dt, 0.0, static_cast<double>(times.size() - 1));
    auto k = std::min(static_cast<std::size_t>(s), times.size() - 2);
    const double f = std::clamp(s - static_cast<double>(k), 0.0, 1.0);
    return (1.0 - f) * fields[k].interpolate(x, i) + f * fields[k + 1].interpolate(x, i);
  }
};

/// CSV rows "time,node,type,value"; `stride` thins the stored times.
inline void write_trajectory_csv(std::ostream& os, const EvolutionTrajectory& tr, std::size_t stride = 1) {
  os << "time,node,x,type,value\n";
  os.precision(12);
  for (std::size_t n = 0; n < tr.times.size(); n += std::max<std::size_t>(stride, 1)) {
    const GridField& f = tr.fields[n];
    for (std::size_t m = 0; m < f.grid->M; ++m)
      for (std::size_t k = 0; k < f.K; ++k)
        os << tr.times[n] << ',' << m << ',' << f.grid->nodes[m] << ',' << k + 1 << ',' << f(m, k) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Mechanism evaluation with tabulated heavy-tail kernels
// ---------------------------------------------------------------------------

/// eta and zeta2 per type; ParetoLog kernels are tabulated in log(lambda).
class MechanismCache {
 public:
  MechanismCache(const ModelSpec& spec, double lambda_max) : spec_(&spec) {
    tables_.resize(spec.K);
    for (std::size_t i = 0; i < spec.K; ++i) {
      const auto& ker = spec.kernel(i);
      if (!ker.is_pareto_log()) continue;
      auto& t = tables_[i];
      t.lo = std::log(kSmall);
      t.hi = std::log(std::max(lambda_max, 1.0));
      const std::size_t n = 3001;
      t.step = (t.hi - t.lo) / static_cast<double>(n - 1);
      std::vector<double> e(n), z(n);
      for (std::size_t k = 0; k < n; ++k) {
        const double lam = std::exp(t.lo + static_cast<double>(k) * t.step);
        e[k] = ker.eta(lam);
        z[k] = ker.zeta2(lam);
      }
      t.eta0 = ker.mean();
      t.eta_small = e[0];
      t.zeta_small = z[0];
      t.eta = std::make_shared<Spline>(detail::cardinal_spline(e, t.lo, t.step));
      t.zeta = std::make_shared<Spline>(detail::cardinal_spline(z, t.lo, t.step));
    }
  }

  /// Unweighted kernel eta(lambda) for type i.
  double kernel_eta(std::size_t i, double lambda) const {
    const auto& t = tables_[i];
    if (!t.eta) return spec_->kernel(i).eta(lambda);
    if (lambda <= kSmall) return t.eta0 + (t.eta_small - t.eta0) * lambda / kSmall;
    const double s = std::log(lambda);
    if (s > t.hi) return spec_->kernel(i).eta(lambda);
    return (*t.eta)(s);
  }

  double kernel_zeta2(std::size_t i, double lambda) const {
    const auto& t = tables_[i];
    if (!t.zeta) return spec_->kernel(i).zeta2(lambda);
    if (lambda <= kSmall) return t.zeta_small * lambda / kSmall;
    const double s = std::log(lambda);
    if (s > t.hi) return spec_->kernel(i).zeta2(lambda);
    return (*t.zeta)(s);
  }

  double eta(double x, std::size_t i, double lambda) const { return spec_->weight(x, i) * kernel_eta(i, lambda); }
  double zeta2(double x, std::size_t i, double lambda) const { return spec_->weight(x, i) * kernel_zeta2(i, lambda); }
  /// Laplace transform of F~ at lambda.
  double ftilde_laplace(double x, std::size_t i, double lambda) const {
    const double n = spec_->n(x, i);
    return eta(x, i, lambda) / n + spec_->n_tilde(x, i) / n;
  }

 private:
  using Spline = detail::CardinalSpline;
  static constexpr double kSmall = 1e-10;
  struct Table {
    double lo = 0, hi = 0, step = 0, eta0 = 0, eta_small = 0, zeta_small = 0;
    std::shared_ptr<Spline> eta, zeta;
  };
  const ModelSpec* spec_;
  std::vector<Table> tables_;
};

// ---------------------------------------------------------------------------
// Linear algebra helpers
// ---------------------------------------------------------------------------

namespace detail {

/// Factorized (I - theta k Op) together with (I + (1 - theta) k Op).
class ThetaStepper {
 public:
  ThetaStepper(const SparseMatrix& op, double k, double theta) {
    const auto N = op.rows();
    Eigen::SparseMatrix<double> I(N, N);
    I.setIdentity();
    const Eigen::SparseMatrix<double> opc(op);
    lhs_ = I - theta * k * opc;
    rhs_ = I + (1.0 - theta) * k * opc;
    lu_.compute(lhs_);
    if (lu_.info() != Eigen::Success) throw NumericError("time-step factorization failed");
  }
  Eigen::VectorXd explicit_part(const Eigen::VectorXd& u) const { return rhs_ * u; }
  Eigen::VectorXd solve(const Eigen::VectorXd& b) const { return lu_.solve(b); }

 private:
  Eigen::SparseMatrix<double> lhs_, rhs_;
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu_;
};

/// Thomas solver for a fixed tridiagonal system.
class TridiagonalSolver {
 public:
  TridiagonalSolver() = default;
  TridiagonalSolver(std::vector<double> a, std::vector<double> b, std::vector<double> c)
      : a_(std::move(a)), c_(b.size()), d_(b.size()) {
    const std::size_t n = b.size();
    c_[0] = c[0] / b[0];
    d_[0] = b[0];
    for (std::size_t i = 1; i < n; ++i) {
      d_[i] = b[i] - a_[i] * c_[i - 1];
      c_[i] = c[i] / d_[i];
    }
  }
  void solve(std::vector<double>& r) const {
    const std::size_t n = r.size();
    r[0] /= d_[0];
    for (std::size_t i = 1; i < n; ++i) r[i] = (r[i] - a_[i] * r[i - 1]) / d_[i];
    for (std::size_t i = n - 1; i-- > 0;) r[i] -= c_[i] * r[i + 1];
  }

 private:
  std::vector<double> a_, c_, d_;
};

inline std::size_t step_count(double T, double dt) {
  if (!(T >= 0.0)) throw ArgumentError("time horizon must be nonnegative");
  if (!(dt > 0.0)) throw ArgumentError("time step must be positive");
  return static_cast<std::size_t>(std::max(1.0, std::round(T / dt)));
}

inline void check_finite(const Eigen::VectorXd& v, double dt, const char* what) {
  if (!v.allFinite()) {
    std::ostringstream os;
    os << what << " produced non-finite values at dt=" << dt;
    throw StabilityError(os.str(), dt / 4.0);
  }
}

}  // namespace detail

struct EvolveOptions {
  double dt = 1e-3;
  /// Leading steps replaced by two implicit half steps (damps Crank-Nicolson ringing from rough data).
  std::size_t startup_steps = 2;
};

// ---------------------------------------------------------------------------
// Mean flow
// ---------------------------------------------------------------------------

/// e^{tM} f using the dense decomposition held in sd.
inline GridField solve_mean(const SpectralData& sd, const GridField& f, double t) {
  if (!(t >= 0.0)) throw ArgumentError("solve_mean requires t >= 0");
  if (t == 0.0) return f;
  if (sd.m_spectrum.dim() == 0) throw ResolutionError("solve_mean needs a dense decomposition (N <= 2000)");
  return GridField(f.grid, f.K, sd.m_spectrum.propagate(t, f.values));
}

inline GridField solve_mean(const ModelSpec& spec, const GridPtr& grid, const GridField& f, double t) {
  if (!(t >= 0.0)) throw ArgumentError("solve_mean requires t >= 0");
  const SymmetricSpectrum s(assemble_M(grid, spec).dense());
  return GridField(f.grid, f.K, s.propagate(t, f.values));
}

// ---------------------------------------------------------------------------
// Cumulant equation  du/dt = M u + b zeta2(pi(u))
// ---------------------------------------------------------------------------

inline EvolutionTrajectory solve_cumulant(const ModelSpec& spec, const GridPtr& grid, const GridField& f, double T,
                                          const EvolveOptions& opt = {}) {
  if (f.values.size() > 0 && f.values.minCoeff() < 0.0) throw ArgumentError("cumulant initial data must be >= 0");
  if (!f.values.allFinite()) throw ArgumentError("cumulant initial data must be finite");
  const std::size_t nsteps = detail::step_count(T, opt.dt);
  const double dt = T > 0.0 ? T / static_cast<double>(nsteps) : opt.dt;
  const Grid& g = *grid;
  const std::size_t K = spec.K;

  // Lipschitz constant of the explicit part is at most b m.
  double lip = 0.0;
  for (std::size_t m = 0; m < g.M; ++m)
    for (std::size_t i = 0; i < K; ++i) lip = std::max(lip, spec.b(g.nodes[m], i) * spec.m(g.nodes[m], i));
  if (lip * dt > 0.1) {
    std::ostringstream os;
    os << "dt=" << dt << " violates the explicit bound b m dt <= 0.1";
    throw StabilityError(os.str(), 0.1 / lip);
  }

  const OperatorMatrix M = assemble_M(grid, spec);
  const double fmax = f.values.size() ? f.values.maxCoeff() : 0.0;
  double growth = 0.0;
  for (std::size_t m = 0; m < g.M; ++m)
    for (std::size_t i = 0; i < K; ++i) growth = std::max(growth, spec.b(g.nodes[m], i) * spec.n(g.nodes[m], i));
  const MechanismCache mech(spec, 2.0 * fmax * std::exp(growth * T) + 1.0);

  auto nonlinear = [&](const Eigen::VectorXd& u) {
    Eigen::VectorXd out(u.size());
    for (std::size_t m = 0; m < g.M; ++m) {
      const double x = g.nodes[m];
      for (std::size_t i = 0; i < K; ++i) {
        double p = 0.0;
        for (std::size_t j = 0; j < K; ++j) p += spec.p(x, i, j) * u[static_cast<Eigen::Index>(m * K + j)];
        out[static_cast<Eigen::Index>(m * K + i)] = spec.b(x, i) * mech.zeta2(x, i, std::max(p, 0.0));
      }
    }
    return out;
  };

  EvolutionTrajectory tr;
  tr.tag = "cumulant";
  tr.dt = dt;
  tr.times.reserve(nsteps + 1);
  tr.fields.reserve(nsteps + 1);
  tr.times.push_back(0.0);
  tr.fields.push_back(f);
  if (T == 0.0) return tr;

  const detail::ThetaStepper cn(M.mat, dt, 0.5);
  std::unique_ptr<detail::ThetaStepper> be;
  if (opt.startup_steps > 0) be = std::make_unique<detail::ThetaStepper>(M.mat, 0.5 * dt, 1.0);

  auto heun = [&](const detail::ThetaStepper& st, double k, const Eigen::VectorXd& u) {
    const Eigen::VectorXd base = st.explicit_part(u);
    const Eigen::VectorXd n0 = nonlinear(u);
    const Eigen::VectorXd us = st.solve(base + k * n0);
    const Eigen::VectorXd n1 = nonlinear(us);
    return Eigen::VectorXd(st.solve(base + 0.5 * k * (n0 + n1)));
  };

  Eigen::VectorXd u = f.values;
  for (std::size_t n = 0; n < nsteps; ++n) {
    if (n < opt.startup_steps) {
      u = heun(*be, 0.5 * dt, u);
      u = heun(*be, 0.5 * dt, u);
    } else {
      u = heun(cn, dt, u);
    }
    detail::check_finite(u, dt, "cumulant solver");
    u = u.cwiseMax(0.0);
    tr.times.push_back(static_cast<double>(n + 1) * dt);
    tr.fields.emplace_back(grid, K, u);
  }
  return tr;
}

/// exp(-<u^f_t, mu>) with mu given by its density on the grid.
inline double laplace_functional(const ModelSpec& spec, const GridPtr& grid, const GridField& mu, const GridField& f,
                                 double t, const EvolveOptions& opt = {}) {
  if (t == 0.0) return std::exp(-inner(f, mu));
  const auto tr = solve_cumulant(spec, grid, f, t, opt);
  return std::exp(-inner(tr.final(), mu));
}

// ---------------------------------------------------------------------------
// Linearized equation  dv/dt = M v - b (m - eta(pi(u))) pi(v)
// ---------------------------------------------------------------------------

inline EvolutionTrajectory solve_linearized(const ModelSpec& spec, const GridPtr& grid, const EvolutionTrajectory& u_traj,
                                            const GridField& v0, double T, const EvolveOptions& opt = {}) {
  if (u_traj.fields.empty() || T > u_traj.horizon() + 1e-12)
    throw ArgumentError("cumulant trajectory does not cover the requested horizon");
  if (u_traj.fields.front().grid != grid) throw ArgumentError("cumulant trajectory lives on a different grid");
  const std::size_t nsteps = detail::step_count(T, opt.dt);
  const double dt = T / static_cast<double>(nsteps);
  const Grid& g = *grid;
  const std::size_t K = spec.K;
  const OperatorMatrix M = assemble_M(grid, spec);
  double umax = 0.0;
  for (const auto& f : u_traj.fields) umax = std::max(umax, f.values.maxCoeff());
  const MechanismCache mech(spec, 2.0 * umax + 1.0);

  // c(tau) = b (m - eta(pi(u_tau))) per node/type.
  auto coefficient = [&](double tau) {
    const GridField u = u_traj.at(tau);
    Eigen::VectorXd c(u.values.size());
    for (std::size_t m = 0; m < g.M; ++m) {
      const double x = g.nodes[m];
      for (std::size_t i = 0; i < K; ++i) {
        double p = 0.0;
        for (std::size_t j = 0; j < K; ++j) p += spec.p(x, i, j) * u(m, j);
        c[static_cast<Eigen::Index>(m * K + i)] = spec.b(x, i) * (spec.m(x, i) - mech.eta(x, i, std::max(p, 0.0)));
      }
    }
    return c;
  };
  auto extra = [&](const Eigen::VectorXd& c, const Eigen::VectorXd& v) {
    Eigen::VectorXd out(v.size());
    for (std::size_t m = 0; m < g.M; ++m) {
      const double x = g.nodes[m];
      for (std::size_t i = 0; i < K; ++i) {
        double p = 0.0;
        for (std::size_t j = 0; j < K; ++j) p += spec.p(x, i, j) * v[static_cast<Eigen::Index>(m * K + j)];
        out[static_cast<Eigen::Index>(m * K + i)] = -c[static_cast<Eigen::Index>(m * K + i)] * p;
      }
    }
    return out;
  };

  EvolutionTrajectory tr;
  tr.tag = "linearized";
  tr.dt = dt;
  tr.times.push_back(0.0);
  tr.fields.push_back(v0);
  const detail::ThetaStepper cn(M.mat, dt, 0.5);
  std::unique_ptr<detail::ThetaStepper> be;
  if (opt.startup_steps > 0) be = std::make_unique<detail::ThetaStepper>(M.mat, 0.5 * dt, 1.0);

  auto heun = [&](const detail::ThetaStepper& st, double k, double tau, const Eigen::VectorXd& v) {
    const Eigen::VectorXd base = st.explicit_part(v);
    const Eigen::VectorXd n0 = extra(coefficient(tau), v);
    const Eigen::VectorXd vs = st.solve(base + k * n0);
    const Eigen::VectorXd n1 = extra(coefficient(tau + k), vs);
    return Eigen::VectorXd(st.solve(base + 0.5 * k * (n0 + n1)));
  };

  Eigen::VectorXd v = v0.values;
  for (std::size_t n = 0; n < nsteps; ++n) {
    const double tau = static_cast<double>(n) * dt;
    if (n < opt.startup_steps) {
      v = heun(*be, 0.5 * dt, tau, v);
      v = heun(*be, 0.5 * dt, tau + 0.5 * dt, v);
    } else {
      v = heun(cn, dt, tau, v);
    }
    detail::check_finite(v, dt, "linearized solver");
    tr.times.push_back(static_cast<double>(n + 1) * dt);
    tr.fields.emplace_back(grid, K, v);
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Non-local Feynman-Kac equation
//   dw_i/dt = L_i w_i + q(tau,x,i) w_i + sum_{j != i} q_ij(x) [J(tau,x,i,j) w_j - w_i]
// ---------------------------------------------------------------------------

struct FKWeightSpec {
  std::function<double(double tau, double x, std::size_t i)> potential;
  std::function<double(double tau, double x, std::size_t i, std::size_t j)> jump_factor;
};

/// No potential and unit jump factors: the plain switched-diffusion semigroup.
inline FKWeightSpec plain_weights() {
  return {[](double, double, std::size_t) { return 0.0; },
          [](double, double, std::size_t, std::size_t) { return 1.0; }};
}

/// q = b(n - 1) with constant jump factor kappa.
inline FKWeightSpec constant_factor_weights(const ModelSpec& spec, double kappa) {
  const ModelSpec* s = &spec;
  return {[s](double, double x, std::size_t i) { return s->b(x, i) * (s->n(x, i) - 1.0); },
          [kappa](double, double, std::size_t, std::size_t) { return kappa; }};
}

/// Weights of the product form: q = b(n - 1), jump factor eta/n + n~/n evaluated at
/// pi(u^g_tau) for the type chosen by `conv`; `scale` perturbs the factor.
inline FKWeightSpec theorem1_weights(const ModelSpec& spec, std::shared_ptr<const EvolutionTrajectory> u_traj,
                                     JumpConvention conv, double scale = 1.0) {
  const ModelSpec* s = &spec;
  double umax = 0.0;
  for (const auto& f : u_traj->fields) umax = std::max(umax, f.values.maxCoeff());
  auto mech = std::make_shared<MechanismCache>(spec, 2.0 * umax + 1.0);
  FKWeightSpec w;
  w.potential = [s](double, double x, std::size_t i) { return s->b(x, i) * (s->n(x, i) - 1.0); };
  w.jump_factor = [s, u_traj, conv, scale, mech](double tau, double x, std::size_t i, std::size_t j) {
    const std::size_t c = conv == JumpConvention::PreJump ? i : j;
    double p = 0.0;
    for (std::size_t l = 0; l < s->K; ++l) p += s->p(x, c, l) * u_traj->value(tau, x, l);
    return scale * mech->ftilde_laplace(x, c, std::max(p, 0.0));
  };
  return w;
}

namespace detail {

/// Generic splitting engine for
///   dw_i = T_i w_i + V(tau,x,i) w_i + sum_j R_ij(x) (J(tau,x,i,j) w_j - w_i).
struct NlfkEngine {
  GridPtr grid;
  std::size_t K = 0;
  std::vector<Tridiagonal> diffusion;  ///< per type
  std::function<double(double, double, std::size_t)> potential;
  std::function<double(std::size_t m, std::size_t i, std::size_t j)> rate;
  std::function<double(double, double, std::size_t, std::size_t)> jump;

  /// Exact exponential of the per-node type system frozen at tau, over a step k.
  void react(Eigen::VectorXd& w, double tau, double k) const {
    const Grid& g = *grid;
    const auto Ki = static_cast<Eigen::Index>(K);
    Eigen::MatrixXd G(Ki, Ki);
    for (std::size_t m = 0; m < g.M; ++m) {
      const double x = g.nodes[m];
      for (std::size_t i = 0; i < K; ++i) {
        double out = 0.0;
        for (std::size_t j = 0; j < K; ++j) {
          if (j == i) continue;
          const double r = rate(m, i, j);
          out += r;
          G(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = r == 0.0 ? 0.0 : r * jump(tau, x, i, j);
        }
        G(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = potential(tau, x, i) - out;
      }
      Eigen::VectorXd seg = w.segment(static_cast<Eigen::Index>(m * K), Ki);
      w.segment(static_cast<Eigen::Index>(m * K), Ki) = small_expm(G * k) * seg;
    }
  }

  static Eigen::MatrixXd small_expm(const Eigen::MatrixXd& A) {
    // Scaling and squaring with a degree-12 Taylor polynomial; the matrices are tiny and well scaled.
    const double nrm = A.cwiseAbs().rowwise().sum().maxCoeff();
    int s = 0;
    if (nrm > 0.5) s = static_cast<int>(std::ceil(std::log2(nrm / 0.5)));
    const Eigen::MatrixXd B = A / std::ldexp(1.0, s);
    const auto n = A.rows();
    Eigen::MatrixXd E = Eigen::MatrixXd::Identity(n, n), term = Eigen::MatrixXd::Identity(n, n);
    for (int k = 1; k <= 12; ++k) {
      term = term * B / static_cast<double>(k);
      E += term;
    }
    for (int k = 0; k < s; ++k) E = E * E;
    return E;
  }

  struct DiffusionStep {
    std::vector<TridiagonalSolver> solvers;
    std::vector<Tridiagonal> explicit_ops;
  };

  DiffusionStep make_step(double k, double theta) const {
    DiffusionStep st;
    for (const auto& T : diffusion) {
      const std::size_t n = T.diag.size();
      std::vector<double> a(n), b(n), c(n);
      Tridiagonal ex{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
      for (std::size_t m = 0; m < n; ++m) {
        a[m] = -theta * k * T.sub[m];
        b[m] = 1.0 - theta * k * T.diag[m];
        c[m] = -theta * k * T.sup[m];
        ex.sub[m] = (1.0 - theta) * k * T.sub[m];
        ex.diag[m] = 1.0 + (1.0 - theta) * k * T.diag[m];
        ex.sup[m] = (1.0 - theta) * k * T.sup[m];
      }
      st.solvers.emplace_back(std::move(a), std::move(b), std::move(c));
      st.explicit_ops.push_back(std::move(ex));
    }
    return st;
  }

  void diffuse(Eigen::VectorXd& w, const DiffusionStep& st) const {
    const std::size_t M = grid->M;
    std::vector<double> r(M);
    for (std::size_t k = 0; k < K; ++k) {
      const auto& ex = st.explicit_ops[k];
      for (std::size_t m = 0; m < M; ++m) {
        double v = ex.diag[m] * w[static_cast<Eigen::Index>(m * K + k)];
        if (m > 0) v += ex.sub[m] * w[static_cast<Eigen::Index>((m - 1) * K + k)];
        if (m + 1 < M) v += ex.sup[m] * w[static_cast<Eigen::Index>((m + 1) * K + k)];
        r[m] = v;
      }
      st.solvers[k].solve(r);
      for (std::size_t m = 0; m < M; ++m) w[static_cast<Eigen::Index>(m * K + k)] = r[m];
    }
  }

  /// Strang splitting: half reaction, full diffusion, half reaction.
  EvolutionTrajectory run(const GridField& f, double T, const EvolveOptions& opt, const char* tag) const {
    const std::size_t nsteps = step_count(T, opt.dt);
    const double dt = T / static_cast<double>(nsteps);
    const DiffusionStep cn = make_step(dt, 0.5);
    DiffusionStep be;
    if (opt.startup_steps > 0) be = make_step(0.5 * dt, 1.0);
    EvolutionTrajectory tr;
    tr.tag = tag;
    tr.dt = dt;
    tr.times.push_back(0.0);
    tr.fields.push_back(f);
    Eigen::VectorXd w = f.values;
    for (std::size_t n = 0; n < nsteps; ++n) {
      const double tau = static_cast<double>(n) * dt;
      if (n < opt.startup_steps) {
        for (int half = 0; half < 2; ++half) {
          const double t0 = tau + 0.5 * dt * half;
          react(w, t0 + 0.125 * dt, 0.25 * dt);
          diffuse(w, be);
          react(w, t0 + 0.375 * dt, 0.25 * dt);
        }
      } else {
        react(w, tau + 0.25 * dt, 0.5 * dt);
        diffuse(w, cn);
        react(w, tau + 0.75 * dt, 0.5 * dt);
      }
      check_finite(w, dt, "non-local Feynman-Kac solver");
      tr.times.push_back(static_cast<double>(n + 1) * dt);
      tr.fields.emplace_back(grid, K, w);
    }
    return tr;
  }
};

}  // namespace detail

inline EvolutionTrajectory nlfk_solve(const ModelSpec& spec, const GridPtr& grid, const FKWeightSpec& weights,
                                      const GridField& f, double T, const EvolveOptions& opt = {}) {
  const Grid& g = *grid;
  // Reject nonpositive jump factors on a coarse sample of (tau, node, i, j).
  for (double tau : {0.0, 0.5 * T, T})
    for (std::size_t m = 0; m < g.M; m += std::max<std::size_t>(1, g.M / 16))
      for (std::size_t i = 0; i < spec.K; ++i)
        for (std::size_t j = 0; j < spec.K; ++j)
          if (i != j && !(weights.jump_factor(tau, g.nodes[m], i, j) > 0.0))
            throw ArgumentError("jump factor must be positive");
  detail::NlfkEngine eng;
  eng.grid = grid;
  eng.K = spec.K;
  for (std::size_t k = 0; k < spec.K; ++k) eng.diffusion.push_back(detail::lk_stencil(spec, g, k));
  eng.potential = weights.potential;
  const ModelSpec* s = &spec;
  eng.rate = [s, grid](std::size_t m, std::size_t i, std::size_t j) { return s->q(grid->nodes[m], i, j); };
  eng.jump = weights.jump_factor;
  return eng.run(f, T, opt, "nlfk");
}

// ---------------------------------------------------------------------------
// Identity checks
// ---------------------------------------------------------------------------

struct TiltedResult {
  double tilted = 0.0;     ///< e^{-lambda1 t} exp(-<u,mu>) <v,mu> / <phi,mu>
  double laplace = 0.0;    ///< exp(-<u,mu>)
  double mean_ratio = 0.0; ///< e^{-lambda1 t} <v,mu> / <phi,mu>
};

inline TiltedResult tilted_laplace_from(const SpectralData& sd, const GridField& mu, const EvolutionTrajectory& u,
                                        const EvolutionTrajectory& v, double t) {
  TiltedResult r;
  r.laplace = std::exp(-inner(u.final(), mu));
  r.mean_ratio = std::exp(-sd.lambda1 * t) * inner(v.final(), mu) / inner(sd.phi, mu);
  r.tilted = r.laplace * r.mean_ratio;
  return r;
}

inline TiltedResult tilted_laplace(const ModelSpec& spec, const SpectralData& sd, const GridField& mu, const GridField& g,
                                   double t, const EvolveOptions& opt = {}) {
  const auto u = solve_cumulant(spec, sd.grid, g, t, opt);
  const auto v = solve_linearized(spec, sd.grid, u, sd.phi, t, opt);
  return tilted_laplace_from(sd, mu, u, v, t);
}

struct ConventionResidual {
  JumpConvention convention = JumpConvention::PreJump;
  double spine_factor = 0.0;
  double rhs = 0.0;
  double residual = 0.0;
};

struct Theorem1Record {
  double t = 0.0;
  double dt = 0.0;
  std::size_t M_nodes = 0;
  double lhs = 0.0;       ///< tilted Laplace functional
  double laplace = 0.0;   ///< plain Laplace functional
  ConventionResidual pre;
  ConventionResidual post;
  double jump_scale = 1.0;

  const ConventionResidual& for_convention(JumpConvention c) const { return c == JumpConvention::PreJump ? pre : post; }
};

/// Compares the tilted Laplace functional with laplace x spine factor for both jump-time conventions.
/// mu defaults to phi dx.
inline Theorem1Record theorem1_check(const ModelSpec& spec, const SpectralData& sd, const GridField& g, double t,
                                     const EvolveOptions& opt = {}, double jump_scale = 1.0,
                                     const GridField* mu_in = nullptr) {
  const GridField mu = mu_in ? *mu_in : sd.phi;
  auto u = std::make_shared<const EvolutionTrajectory>(solve_cumulant(spec, sd.grid, g, t, opt));
  const auto v = solve_linearized(spec, sd.grid, *u, sd.phi, t, opt);
  const auto tl = tilted_laplace_from(sd, mu, *u, v, t);
  Theorem1Record rec;
  rec.t = t;
  rec.dt = u->dt;
  rec.M_nodes = sd.grid->M;
  rec.lhs = tl.tilted;
  rec.laplace = tl.laplace;
  rec.jump_scale = jump_scale;
  for (auto conv : {JumpConvention::PreJump, JumpConvention::PostJump}) {
    const auto w = nlfk_solve(spec, sd.grid, theorem1_weights(spec, u, conv, jump_scale), sd.phi, t, opt);
    ConventionResidual cr;
    cr.convention = conv;
    cr.spine_factor = std::exp(-sd.lambda1 * t) * inner(w.final(), mu) / inner(sd.phi, mu);
    cr.rhs = tl.laplace * cr.spine_factor;
    cr.residual = std::abs(tl.tilted - cr.rhs);
    (conv == JumpConvention::PreJump ? rec.pre : rec.post) = cr;
  }
  return rec;
}

/// Expectation of the jump product along the phi-spine, started from phi mu / <phi, mu>.
inline double spine_laplace(const ModelSpec& spec, const SpectralData& sd, const GridField& g, double t,
                            const EvolveOptions& opt = {}, const GridField* mu_in = nullptr) {
  const GridField mu = mu_in ? *mu_in : sd.phi;
  auto u = std::make_shared<const EvolutionTrajectory>(solve_cumulant(spec, sd.grid, g, t, opt));
  const Grid& gr = *sd.grid;
  const std::size_t K = spec.K;
  detail::NlfkEngine eng;
  eng.grid = sd.grid;
  eng.K = K;
  // Phi^{-1} L_k Phi stays tridiagonal.
  for (std::size_t k = 0; k < K; ++k) {
    auto T = detail::lk_stencil(spec, gr, k);
    for (std::size_t m = 0; m < gr.M; ++m) {
      const double pm = sd.phi(m, k);
      if (m > 0) T.sub[m] *= sd.phi(m - 1, k) / pm;
      if (m + 1 < gr.M) T.sup[m] *= sd.phi(m + 1, k) / pm;
    }
    eng.diffusion.push_back(std::move(T));
  }
  const ModelSpec* s = &spec;
  const SpectralData* d = &sd;
  auto rate = [s, d](std::size_t m, std::size_t i, std::size_t j) {
    const double x = d->grid->nodes[m];
    return s->b(x, i) * s->n(x, i) * s->p(x, i, j) * d->phi(m, j) / d->phi(m, i);
  };
  eng.rate = rate;
  // Diagonal of Phi^{-1}(M - lambda1)Phi outside L, written in the engine's (J w_j - w_i) form.
  const double l1 = sd.lambda1;
  auto node_of = [d](double x) {
    const auto m = static_cast<std::size_t>(std::lround((x - d->grid->lo) / d->grid->h)) - 1;
    return std::min(m, d->grid->M - 1);
  };
  eng.potential = [s, rate, l1, node_of](double, double x, std::size_t i) {
    const std::size_t m = node_of(x);
    double out = 0.0;
    for (std::size_t j = 0; j < s->K; ++j)
      if (j != i) out += rate(m, i, j);
    return -s->b(x, i) - l1 + out;
  };
  eng.jump = theorem1_weights(spec, u, spec.convention).jump_factor;
  const auto w = eng.run(GridField::constant(sd.grid, K, 1.0), t, opt, "spine_laplace");
  GridField start = sd.phi;
  start.values = sd.phi.values.cwiseProduct(mu.values);
  return inner(w.final(), start) / inner(sd.phi, mu);
}

}  // namespace superspine
