#pragma once

// Multitype model: coefficient fields, offspring kernels and pointwise
// evaluation of the non-local branching mechanism.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "superspine/errors.hpp"

namespace superspine {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Absolute tolerance used for every kernel integral evaluated by quadrature.
inline constexpr double kKernelQuadratureTol = 1e-9;

namespace detail {

/// 1 - e^{-x} - x without cancellation for small x.
inline double one_minus_exp_minus_linear(double x) {
  if (std::abs(x) < 1e-2) {
    const double x2 = x * x;
    return -x2 / 2 + x2 * x / 6 - x2 * x2 / 24 + x2 * x2 * x / 120;
  }
  return -std::expm1(-x) - x;
}

inline double positive_log(double r) { return r > 1.0 ? std::log(r) : 0.0; }

template <class F>
double integrate(F&& f, double a, double b) {
  if (!(b > a)) return 0.0;
  double err = 0.0;
  // A relative target much below 1e-12 is not certifiable near roundoff and makes
  // the bisection run to full depth on short panels.
  const double v = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
      f, a, b, 15, 1e-11, &err);
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Coefficient fields
// ---------------------------------------------------------------------------

struct ConstantField {
  double value = 0.0;
};

struct AffineField {
  double c0 = 0.0;
  double c1 = 0.0;
};

/// mean + amp * cos(freq * x + phase)
struct CosineField {
  double mean = 0.0;
  double amp = 0.0;
  double freq = 1.0;
  double phase = 0.0;
};

/// Piecewise-linear table, constant beyond the end points.
struct TableField {
  std::vector<double> x;
  std::vector<double> y;
};

/// A bounded real function of the spatial coordinate.
class Field {
 public:
  using Repr = std::variant<ConstantField, AffineField, CosineField, TableField>;

  Field() : repr_(ConstantField{0.0}) {}
  Field(double c) : repr_(ConstantField{c}) {}  // NOLINT: implicit by design of scenario literals
  Field(Repr r) : repr_(std::move(r)) {}        // NOLINT

  double operator()(double x) const {
    return std::visit(
        [x](const auto& f) -> double {
          using T = std::decay_t<decltype(f)>;
          if constexpr (std::is_same_v<T, ConstantField>) {
            return f.value;
          } else if constexpr (std::is_same_v<T, AffineField>) {
            return f.c0 + f.c1 * x;
          } else if constexpr (std::is_same_v<T, CosineField>) {
            return f.mean + f.amp * std::cos(f.freq * x + f.phase);
          } else {
            return table_value(f, x);
          }
        },
        repr_);
  }

  double derivative(double x) const {
    return std::visit(
        [x](const auto& f) -> double {
          using T = std::decay_t<decltype(f)>;
          if constexpr (std::is_same_v<T, ConstantField>) {
            return 0.0;
          } else if constexpr (std::is_same_v<T, AffineField>) {
            return f.c1;
          } else if constexpr (std::is_same_v<T, CosineField>) {
            return -f.amp * f.freq * std::sin(f.freq * x + f.phase);
          } else {
            return table_slope(f, x);
          }
        },
        repr_);
  }

  bool is_constant() const { return std::holds_alternative<ConstantField>(repr_); }
  const Repr& repr() const { return repr_; }

 private:
  static std::size_t table_segment(const TableField& t, double x) {
    auto it = std::upper_bound(t.x.begin(), t.x.end(), x);
    std::size_t k = static_cast<std::size_t>(it - t.x.begin());
    return std::clamp<std::size_t>(k, 1, t.x.size() - 1) - 1;
  }
  static double table_value(const TableField& t, double x) {
    if (x <= t.x.front()) return t.y.front();
    if (x >= t.x.back()) return t.y.back();
    const std::size_t k = table_segment(t, x);
    const double s = (x - t.x[k]) / (t.x[k + 1] - t.x[k]);
    return t.y[k] + s * (t.y[k + 1] - t.y[k]);
  }
  static double table_slope(const TableField& t, double x) {
    if (x <= t.x.front() || x >= t.x.back()) return 0.0;
    const std::size_t k = table_segment(t, x);
    return (t.y[k + 1] - t.y[k]) / (t.x[k + 1] - t.x[k]);
  }

  Repr repr_;
};

// ---------------------------------------------------------------------------
// Spatial domain
// ---------------------------------------------------------------------------

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
};

/// Tensor-product rectangle. Parsed and validated, but grids and simulators
/// only support the interval.
struct Rectangle {
  double x_lo = 0.0, x_hi = 1.0, y_lo = 0.0, y_hi = 1.0;
};

using SpatialDomain = std::variant<Interval, Rectangle>;

inline double domain_measure(const SpatialDomain& d) {
  if (const auto* iv = std::get_if<Interval>(&d)) return iv->hi - iv->lo;
  const auto& r = std::get<Rectangle>(d);
  return (r.x_hi - r.x_lo) * (r.y_hi - r.y_lo);
}

// ---------------------------------------------------------------------------
// Offspring kernels F(du)
// ---------------------------------------------------------------------------

/// F = mass * delta_{u0}
struct PointMass {
  double u0 = 1.0;
  double mass = 1.0;
};

/// F = sum_k weights[k] * delta_{atoms[k]}
struct FiniteMixture {
  std::vector<double> weights;
  std::vector<double> atoms;
};

/// F(du) = c u^{-2} (ln u)^{-beta} du on [u_min, inf), u_min >= e.
struct ParetoLog {
  double c = 1.0;
  double beta = 1.5;
  double u_min = std::numbers::e;
};

/// Finite-mass offspring kernel. All integrals are per unit spatial weight.
class OffspringKernel {
 public:
  using Family = std::variant<PointMass, FiniteMixture, ParetoLog>;

  OffspringKernel() : family_(PointMass{}) {}
  OffspringKernel(Family f) : family_(std::move(f)) { precompute(); }  // NOLINT

  const Family& family() const { return family_; }
  bool is_pareto_log() const { return std::holds_alternative<ParetoLog>(family_); }

  std::string family_name() const {
    if (std::holds_alternative<PointMass>(family_)) return "point_mass";
    if (std::holds_alternative<FiniteMixture>(family_)) return "finite_mixture";
    return "pareto_log";
  }

  /// lambda_F = F((0, inf)).
  double total_mass() const { return total_mass_; }
  /// m = int u F(du).
  double mean() const { return mean_; }
  /// Analytic flag: int u log+ u F(du) < inf.
  bool llogl_finite() const {
    if (const auto* p = std::get_if<ParetoLog>(&family_)) return p->beta > 2.0;
    return true;
  }
  double support_sup() const {
    return std::visit(
        [](const auto& f) -> double {
          using T = std::decay_t<decltype(f)>;
          if constexpr (std::is_same_v<T, PointMass>) return f.u0;
          else if constexpr (std::is_same_v<T, FiniteMixture>)
            return *std::max_element(f.atoms.begin(), f.atoms.end());
          else return kInf;
        },
        family_);
  }

  /// eta(lambda) = int e^{-u lambda} u F(du).
  double eta(double lambda) const {
    if (lambda == 0.0) return mean_;
    if (const auto* p = std::get_if<ParetoLog>(&family_)) return pareto_eta(*p, lambda);
    double s = 0.0;
    for_atoms([&](double w, double a) { s += w * a * std::exp(-a * lambda); });
    return s;
  }

  /// int (1 - e^{-u lambda} - u lambda) F(du) <= 0.
  double zeta2(double lambda) const {
    if (lambda == 0.0) return 0.0;
    if (const auto* p = std::get_if<ParetoLog>(&family_)) return pareto_zeta2(*p, lambda);
    double s = 0.0;
    for_atoms([&](double w, double a) { s += w * detail::one_minus_exp_minus_linear(a * lambda); });
    return s;
  }

  /// int (1 - e^{-u lambda}) F(du).
  double one_minus_laplace(double lambda) const { return zeta2(lambda) + lambda * mean_; }

  /// int r kappa log+(r kappa) F(dr); +inf when the integral diverges.
  double l_integral(double kappa) const {
    if (kappa <= 0.0) return 0.0;
    if (const auto* p = std::get_if<ParetoLog>(&family_)) {
      if (p->beta <= 2.0) return kInf;
      return pareto_l_truncated(*p, kappa, kInf);
    }
    double s = 0.0;
    for_atoms([&](double w, double a) { s += w * a * kappa * detail::positive_log(a * kappa); });
    return s;
  }

  /// Same integral restricted to r <= cutoff.
  double l_truncated(double kappa, double cutoff) const {
    if (kappa <= 0.0) return 0.0;
    if (const auto* p = std::get_if<ParetoLog>(&family_)) return pareto_l_truncated(*p, kappa, cutoff);
    double s = 0.0;
    for_atoms([&](double w, double a) {
      if (a <= cutoff) s += w * a * kappa * detail::positive_log(a * kappa);
    });
    return s;
  }

  /// Same integral restricted to ln r <= log_cutoff (cutoffs far beyond double range).
  double l_truncated_log(double kappa, double log_cutoff) const {
    if (kappa <= 0.0) return 0.0;
    if (const auto* p = std::get_if<ParetoLog>(&family_)) return pareto_l_truncated_log(*p, kappa, log_cutoff);
    double s = 0.0;
    for_atoms([&](double w, double a) {
      if (std::log(a) <= log_cutoff) s += w * a * kappa * detail::positive_log(a * kappa);
    });
    return s;
  }

  /// Draw u ~ F / lambda_F.
  template <class Rng>
  double sample(Rng& rng) const {
    if (const auto* p = std::get_if<ParetoLog>(&family_)) {
      // t = ln u has density proportional to e^{-t} t^{-beta} on [t0, inf).
      const double t0 = std::log(p->u_min);
      std::exponential_distribution<double> expo(1.0);
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      for (;;) {
        const double t = t0 + expo(rng);
        if (unif(rng) <= std::pow(t0 / t, p->beta)) return std::exp(t);
      }
    }
    return atoms_[pick(rng, atom_cdf_)];
  }

  /// Draw ln u with u ~ u F(du) / m (the size-biased law).
  template <class Rng>
  double sample_size_biased_log(Rng& rng) const {
    if (const auto* p = std::get_if<ParetoLog>(&family_)) {
      // t = ln u is Pareto(t0, beta - 1).
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      const double t0 = std::log(p->u_min);
      double v = unif(rng);
      while (v <= 0.0) v = unif(rng);
      return t0 * std::pow(v, -1.0 / (p->beta - 1.0));
    }
    return std::log(atoms_[pick(rng, biased_cdf_)]);
  }

 private:
  template <class Fn>
  void for_atoms(Fn&& fn) const {
    for (std::size_t k = 0; k < atoms_.size(); ++k) fn(weights_[k], atoms_[k]);
  }

  template <class Rng>
  static std::size_t pick(Rng& rng, const std::vector<double>& cdf) {
    std::uniform_real_distribution<double> unif(0.0, cdf.back());
    const double v = unif(rng);
    auto it = std::upper_bound(cdf.begin(), cdf.end(), v);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
  }

  void precompute() {
    if (const auto* pm = std::get_if<PointMass>(&family_)) {
      weights_ = {pm->mass};
      atoms_ = {pm->u0};
    } else if (const auto* fm = std::get_if<FiniteMixture>(&family_)) {
      weights_ = fm->weights;
      atoms_ = fm->atoms;
    }
    if (const auto* p = std::get_if<ParetoLog>(&family_)) {
      const double t0 = std::log(p->u_min);
      mean_ = p->beta > 1.0 ? p->c * std::pow(t0, 1.0 - p->beta) / (p->beta - 1.0) : kInf;
      total_mass_ = p->c * detail::integrate(
                               [&](double t) { return std::exp(-t) * std::pow(t, -p->beta); }, t0, kInf);
      return;
    }
    total_mass_ = 0.0;
    mean_ = 0.0;
    atom_cdf_.clear();
    biased_cdf_.clear();
    double acc = 0.0, bacc = 0.0;
    for_atoms([&](double w, double a) {
      total_mass_ += w;
      mean_ += w * a;
      acc += w;
      bacc += w * a;
      atom_cdf_.push_back(acc);
      biased_cdf_.push_back(bacc);
    });
  }

  static double pareto_eta(const ParetoLog& p, double lambda) {
    const double t0 = std::log(p.u_min);
    const double tc = std::max(t0, -std::log(lambda));
    auto f = [&](double t) { return std::exp(-lambda * std::exp(t)) * std::pow(t, -p.beta); };
    // Beyond tc the integrand decays like exp(-e^{t - tc}); e^{-e^7} is far below tolerance.
    return p.c * (detail::integrate(f, t0, tc) + detail::integrate(f, tc, tc + 7.0));
  }

  static double pareto_zeta2(const ParetoLog& p, double lambda) {
    const double t0 = std::log(p.u_min);
    const double tc = std::max(t0, -std::log(lambda));
    auto head = [&](double t) {
      return detail::one_minus_exp_minus_linear(lambda * std::exp(t)) * std::exp(-t) *
             std::pow(t, -p.beta);
    };
    // Tail: (1 - e^{-x} - x) e^{-t} = e^{-t}(1 - e^{-x}) - lambda, the last part in closed form.
    auto tail = [&](double t) {
      return std::exp(-t) * (-std::expm1(-lambda * std::exp(t))) * std::pow(t, -p.beta);
    };
    const double tail_linear = lambda * std::pow(tc, 1.0 - p.beta) / (p.beta - 1.0);
    return p.c * (detail::integrate(head, t0, tc) + detail::integrate(tail, tc, kInf) - tail_linear);
  }

  static double pareto_l_truncated(const ParetoLog& p, double kappa, double cutoff) {
    return pareto_l_truncated_log(p, kappa, std::isinf(cutoff) ? kInf : std::log(cutoff));
  }

  static double pareto_l_truncated_log(const ParetoLog& p, double kappa, double hi) {
    // int (t + ln kappa) t^{-beta} dt over t in [max(t0, -ln kappa), hi].
    const double t0 = std::log(p.u_min);
    const double lk = std::log(kappa);
    const double lo = std::max(t0, -lk);
    if (!(hi > lo)) return 0.0;
    const double b = p.beta;
    auto antiderivative = [&](double t) -> double {
      if (std::isinf(t)) {
        // Only reached for beta > 2, where both terms vanish at infinity.
        return 0.0;
      }
      const double first = (b == 2.0) ? std::log(t) : std::pow(t, 2.0 - b) / (2.0 - b);
      const double second = (b == 1.0) ? lk * std::log(t) : lk * std::pow(t, 1.0 - b) / (1.0 - b);
      return first + second;
    };
    if (std::isinf(hi) && b <= 2.0) return kInf;
    return p.c * kappa * (antiderivative(hi) - antiderivative(lo));
  }

  Family family_;
  std::vector<double> weights_, atoms_, atom_cdf_, biased_cdf_;
  double total_mass_ = 0.0;
  double mean_ = 0.0;
};

/// Kernel for one type with an optional bounded spatial weight on its mass.
struct TypeKernel {
  OffspringKernel kernel;
  Field spatial_weight = Field(1.0);
};

// ---------------------------------------------------------------------------
// Model specification
// ---------------------------------------------------------------------------

/// Which coordinate a jump-time quantity is evaluated at.
enum class JumpConvention { PreJump, PostJump };

inline const char* to_string(JumpConvention c) {
  return c == JumpConvention::PreJump ? "pre_jump" : "post_jump";
}

struct CoefficientFields {
  std::vector<Field> b;               ///< branching rate per type
  std::vector<Field> n;               ///< mean offspring factor per type
  std::vector<Field> a;               ///< diffusivity per type
  std::vector<std::vector<Field>> p;  ///< p[i][j] = p^{(i)}_j
};

/// Complete description of a scenario. Immutable once built; evaluation
/// methods are unchecked and intended for inner loops.
struct ModelSpec {
  std::string name;
  std::size_t K = 2;
  SpatialDomain domain = Interval{0.0, std::numbers::pi};
  CoefficientFields coeffs;
  std::vector<TypeKernel> kernels;
  JumpConvention convention = JumpConvention::PreJump;

  const Interval& interval() const {
    const auto* iv = std::get_if<Interval>(&domain);
    if (!iv) throw ModelError("operation requires a one-dimensional interval domain");
    return *iv;
  }

  double b(double x, std::size_t i) const { return coeffs.b[i](x); }
  double n(double x, std::size_t i) const { return coeffs.n[i](x); }
  double a(std::size_t k, double x) const { return coeffs.a[k](x); }
  double a_prime(std::size_t k, double x) const { return coeffs.a[k].derivative(x); }
  double p(double x, std::size_t i, std::size_t j) const { return coeffs.p[i][j](x); }
  double weight(double x, std::size_t i) const { return kernels[i].spatial_weight(x); }
  const OffspringKernel& kernel(std::size_t i) const { return kernels[i].kernel; }

  double m(double x, std::size_t i) const { return weight(x, i) * kernel(i).mean(); }
  double n_tilde(double x, std::size_t i) const { return n(x, i) - m(x, i); }
  double lambda_F(double x, std::size_t i) const { return weight(x, i) * kernel(i).total_mass(); }

  double pi(double x, std::size_t i, std::span<const double> f) const {
    double s = 0.0;
    for (std::size_t j = 0; j < K; ++j) s += p(x, i, j) * f[j];
    return s;
  }
  /// q_ij = b_i n_i (p_ij - delta_ij)
  double q(double x, std::size_t i, std::size_t j) const {
    return b(x, i) * n(x, i) * (p(x, i, j) - (i == j ? 1.0 : 0.0));
  }
  double eta_at(double x, std::size_t i, double lambda) const {
    return weight(x, i) * kernel(i).eta(lambda);
  }
  double zeta2_at(double x, std::size_t i, double lambda) const {
    return weight(x, i) * kernel(i).zeta2(lambda);
  }
  /// Laplace transform of F~(x,i;.) at lambda: eta/n + n~/n.
  double ftilde_laplace(double x, std::size_t i, double lambda) const {
    const double nn = n(x, i);
    return eta_at(x, i, lambda) / nn + n_tilde(x, i) / nn;
  }
};

// ---------------------------------------------------------------------------
// Checked pointwise operations
// ---------------------------------------------------------------------------

namespace detail {

inline void check_point(const ModelSpec& spec, double x) {
  const auto& iv = spec.interval();
  if (!(x > iv.lo && x < iv.hi)) {
    std::ostringstream os;
    os << "point x=" << x << " outside D=(" << iv.lo << ", " << iv.hi << ")";
    throw DomainError(os.str());
  }
}

inline void check_type(const ModelSpec& spec, std::size_t i) {
  if (i >= spec.K) throw ArgumentError("type index out of range");
}

inline void check_vector(const ModelSpec& spec, std::span<const double> f, bool nonneg) {
  if (f.size() != spec.K) throw ArgumentError("vector over types must have K entries");
  for (double v : f) {
    if (!std::isfinite(v)) throw ArgumentError("vector over types has a non-finite entry");
    if (nonneg && v < 0.0) throw ArgumentError("negative entry where f >= 0 is required");
  }
}

inline void check_all(const ModelSpec& spec, double x, std::size_t i, std::span<const double> f,
                      bool nonneg) {
  check_point(spec, x);
  check_type(spec, i);
  check_vector(spec, f, nonneg);
}

}  // namespace detail

/// pi(x,i;f) = sum_j p^{(i)}_j(x) f_j
inline double pi_f(const ModelSpec& spec, double x, std::size_t i, std::span<const double> f) {
  detail::check_all(spec, x, i, f, false);
  return spec.pi(x, i, f);
}

inline double zeta1(const ModelSpec& spec, double x, std::size_t i, std::span<const double> f) {
  detail::check_all(spec, x, i, f, true);
  return spec.n(x, i) * spec.pi(x, i, f);
}

inline double zeta2(const ModelSpec& spec, double x, std::size_t i, std::span<const double> f) {
  detail::check_all(spec, x, i, f, true);
  return spec.zeta2_at(x, i, spec.pi(x, i, f));
}

inline double zeta(const ModelSpec& spec, double x, std::size_t i, std::span<const double> f) {
  return zeta1(spec, x, i, f) + zeta2(spec, x, i, f);
}

/// The same mechanism written through n~ = n - m.
inline double zeta_via_ntilde(const ModelSpec& spec, double x, std::size_t i,
                              std::span<const double> f) {
  detail::check_all(spec, x, i, f, true);
  const double pf = spec.pi(x, i, f);
  return spec.n_tilde(x, i) * pf + spec.weight(x, i) * spec.kernel(i).one_minus_laplace(pf);
}

/// psi(x,i;f) = b (f_i - zeta)
inline double psi(const ModelSpec& spec, double x, std::size_t i, std::span<const double> f) {
  return spec.b(x, i) * (f[i] - zeta(spec, x, i, f));
}

/// Mechanism of the superprocess over the switched diffusion.
inline double psi_hat(const ModelSpec& spec, double x, std::size_t i, std::span<const double> f) {
  const double z2 = zeta2(spec, x, i, f);
  const double bb = spec.b(x, i);
  return -bb * spec.n(x, i) * f[i] + bb * (f[i] - z2);
}

inline double eta(const ModelSpec& spec, double x, std::size_t i, double lambda) {
  detail::check_point(spec, x);
  detail::check_type(spec, i);
  if (!(lambda >= 0.0)) throw ArgumentError("eta requires lambda >= 0");
  return spec.eta_at(x, i, lambda);
}

struct MatrixFields {
  Eigen::MatrixXd B, N, R, P, B_hat, Q;
};

inline MatrixFields matrix_fields(const ModelSpec& spec, double x) {
  detail::check_point(spec, x);
  const auto K = static_cast<Eigen::Index>(spec.K);
  MatrixFields mf;
  mf.B = Eigen::MatrixXd::Zero(K, K);
  mf.N = Eigen::MatrixXd::Zero(K, K);
  mf.B_hat = Eigen::MatrixXd::Zero(K, K);
  mf.R.resize(K, K);
  mf.P.resize(K, K);
  for (Eigen::Index i = 0; i < K; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    mf.B(i, i) = spec.b(x, ui);
    mf.N(i, i) = spec.n(x, ui);
    mf.B_hat(i, i) = spec.b(x, ui) * spec.n(x, ui);
    for (Eigen::Index j = 0; j < K; ++j) {
      mf.P(i, j) = spec.p(x, ui, static_cast<std::size_t>(j));
      mf.R(i, j) = spec.n(x, ui) * mf.P(i, j);
    }
  }
  mf.Q = mf.B_hat * (mf.P - Eigen::MatrixXd::Identity(K, K));
  return mf;
}

/// The probability law F~(x,i;du) = (n~ delta_0 + u F(du)) / n.
class FTildeLaw {
 public:
  FTildeLaw(const OffspringKernel& kernel, double weight, double n, double n_tilde)
      : kernel_(&kernel), weight_(weight), n_(n), atom_zero_(n_tilde / n) {}

  double atom_zero() const { return atom_zero_; }
  /// Mass of the u F(du)/n part.
  double continuous_mass() const { return weight_ * kernel_->mean() / n_; }
  /// E[mark] = int u * u F(du) / n; infinite for ParetoLog kernels.
  double mean() const { return weight_ == 0.0 ? 0.0 : weight_ * second_moment_ratio(); }
  double total_mass() const { return atom_zero_ + continuous_mass(); }
  double laplace(double lambda) const { return atom_zero_ + weight_ * kernel_->eta(lambda) / n_; }

  /// Draw ln(mark); -inf encodes the atom at zero.
  template <class Rng>
  double sample_log(Rng& rng) const {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    if (unif(rng) * total_mass() < atom_zero_) return -kInf;
    return kernel_->sample_size_biased_log(rng);
  }
  template <class Rng>
  double sample(Rng& rng) const {
    return std::exp(sample_log(rng));
  }

 private:
  double second_moment_ratio() const {
    if (kernel_->is_pareto_log()) return kInf;
    double s = 0.0;
    const auto& fam = kernel_->family();
    if (const auto* pm = std::get_if<PointMass>(&fam)) s = pm->mass * pm->u0 * pm->u0;
    if (const auto* fm = std::get_if<FiniteMixture>(&fam))
      for (std::size_t k = 0; k < fm->atoms.size(); ++k) s += fm->weights[k] * fm->atoms[k] * fm->atoms[k];
    return s / n_;
  }

  const OffspringKernel* kernel_;
  double weight_;
  double n_;
  double atom_zero_;
};

inline FTildeLaw ftilde(const ModelSpec& spec, double x, std::size_t i) {
  detail::check_point(spec, x);
  detail::check_type(spec, i);
  const double nn = spec.n(x, i);
  if (!(nn > 0.0)) throw ModelError("F~ requires n(x,i) > 0");
  return FTildeLaw(spec.kernel(i), spec.weight(x, i), nn, spec.n_tilde(x, i));
}

/// l(x,i) written through kappa = pi(x,i;phi): int r kappa log+(r kappa) F(x,i;dr).
inline double l_field(const ModelSpec& spec, double x, std::size_t i, double kappa) {
  detail::check_point(spec, x);
  detail::check_type(spec, i);
  if (!(kappa >= 0.0)) throw ArgumentError("l_field requires kappa >= 0");
  return spec.weight(x, i) * spec.kernel(i).l_integral(kappa);
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct Violation {
  std::string rule;
  std::size_t i = 0, j = 0;
  double x = 0.0;
  std::string detail;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

/// Checks every structural invariant at `samples` equispaced interior points.
inline ValidationReport validate(const ModelSpec& spec, std::size_t samples = 257) {
  ValidationReport rep;
  auto add = [&](std::string rule, std::size_t i, std::size_t j, double x, std::string d) {
    rep.violations.push_back({std::move(rule), i, j, x, std::move(d)});
  };
  if (spec.K < 2) add("type_count", 0, 0, 0.0, "K must be at least 2");
  if (spec.coeffs.b.size() != spec.K || spec.coeffs.n.size() != spec.K ||
      spec.coeffs.a.size() != spec.K || spec.coeffs.p.size() != spec.K ||
      spec.kernels.size() != spec.K) {
    add("shape", 0, 0, 0.0, "coefficient arrays must have K entries");
    return rep;
  }
  for (const auto& row : spec.coeffs.p)
    if (row.size() != spec.K) {
      add("shape", 0, 0, 0.0, "p must be K x K");
      return rep;
    }
  const auto* iv = std::get_if<Interval>(&spec.domain);
  if (!iv) {
    const auto& r = std::get<Rectangle>(spec.domain);
    if (!(r.x_lo < r.x_hi && r.y_lo < r.y_hi)) add("domain", 0, 0, 0.0, "empty rectangle");
    add("domain", 0, 0, 0.0, "rectangle domains are not supported by the solvers");
    return rep;
  }
  if (!(iv->lo < iv->hi) || !std::isfinite(iv->lo) || !std::isfinite(iv->hi)) {
    add("domain", 0, 0, 0.0, "interval requires finite x_lo < x_hi");
    return rep;
  }
  for (std::size_t i = 0; i < spec.K; ++i) {
    const auto& fam = spec.kernel(i).family();
    if (const auto* p = std::get_if<ParetoLog>(&fam)) {
      if (!(p->beta > 1.0)) add("kernel", i, i, 0.0, "pareto_log requires beta > 1 (finite mean)");
      if (!(p->u_min >= std::numbers::e)) add("kernel", i, i, 0.0, "pareto_log requires u_min >= e");
      if (!(p->c > 0.0)) add("kernel", i, i, 0.0, "pareto_log requires c > 0");
    } else if (const auto* fm = std::get_if<FiniteMixture>(&fam)) {
      if (fm->weights.size() != fm->atoms.size() || fm->atoms.empty())
        add("kernel", i, i, 0.0, "finite_mixture needs equally many weights and atoms");
      for (std::size_t k = 0; k < std::min(fm->weights.size(), fm->atoms.size()); ++k)
        if (!(fm->weights[k] >= 0.0) || !(fm->atoms[k] > 0.0))
          add("kernel", i, i, 0.0, "finite_mixture weights must be >= 0 and atoms > 0");
    } else {
      const auto& pm = std::get<PointMass>(fam);
      if (!(pm.u0 > 0.0) || !(pm.mass >= 0.0)) add("kernel", i, i, 0.0, "point_mass needs u0 > 0, mass >= 0");
    }
  }
  if (!rep.ok()) return rep;

  std::vector<std::vector<bool>> edge(spec.K, std::vector<bool>(spec.K, false));
  const double tol = 1e-10;
  for (std::size_t s = 0; s < samples; ++s) {
    const double x = iv->lo + (iv->hi - iv->lo) * (static_cast<double>(s) + 0.5) / static_cast<double>(samples);
    for (std::size_t i = 0; i < spec.K; ++i) {
      const double b = spec.b(x, i), n = spec.n(x, i), a = spec.a(i, x), m = spec.m(x, i);
      if (!(b >= 0.0) || !std::isfinite(b)) add("b_nonnegative", i, i, x, "b(x,i) must be finite and >= 0");
      if (!(n >= 0.0) || !std::isfinite(n)) add("n_nonnegative", i, i, x, "n(x,i) must be finite and >= 0");
      if (!(a > 0.0) || !std::isfinite(a)) add("a_positive", i, i, x, "diffusivity must be > 0");
      if (!(spec.weight(x, i) >= 0.0)) add("kernel_weight", i, i, x, "spatial weight must be >= 0");
      if (!(n >= m * (1.0 - 1e-12))) {
        std::ostringstream os;
        os << "n=" << n << " < m=" << m;
        add("n_ge_m", i, i, x, os.str());
      }
      double row = 0.0;
      for (std::size_t j = 0; j < spec.K; ++j) {
        const double pij = spec.p(x, i, j);
        row += pij;
        if (!(pij >= 0.0)) add("p_nonnegative", i, j, x, "p must be >= 0");
        if (i == j && pij != 0.0) add("p_diagonal", i, j, x, "p^{(i)}_i must vanish");
        if (i != j && spec.q(x, i, j) > 0.0) edge[i][j] = true;
        if (j > i) {
          const double lhs = b * n * pij;
          const double rhs = spec.b(x, j) * spec.n(x, j) * spec.p(x, j, i);
          if (std::abs(lhs - rhs) > tol * std::max(1.0, std::max(std::abs(lhs), std::abs(rhs)))) {
            std::ostringstream os;
            os << "b n p^{(i)}_j = " << lhs << " but b n p^{(j)}_i = " << rhs;
            add("symmetry", i, j, x, os.str());
          }
        }
      }
      if (std::abs(row - 1.0) > tol) {
        std::ostringstream os;
        os << "row sum " << row;
        add("p_row_sum", i, i, x, os.str());
      }
    }
  }
  // Irreducibility: every type reaches every other one through positive rates.
  for (std::size_t k = 0; k < spec.K; ++k) {
    std::vector<bool> seen(spec.K, false);
    std::vector<std::size_t> stack{k};
    seen[k] = true;
    while (!stack.empty()) {
      const std::size_t u = stack.back();
      stack.pop_back();
      for (std::size_t v = 0; v < spec.K; ++v)
        if (edge[u][v] && !seen[v]) {
          seen[v] = true;
          stack.push_back(v);
        }
    }
    for (std::size_t l = 0; l < spec.K; ++l)
      if (!seen[l]) add("irreducibility", k, l, 0.0, "type l is not reachable from type k");
  }
  return rep;
}

inline void require_valid(const ModelSpec& spec) {
  const auto rep = validate(spec);
  if (rep.ok()) return;
  const auto& v = rep.violations.front();
  std::ostringstream os;
  os << "invalid model (" << v.rule << ") at i=" << v.i + 1 << ", j=" << v.j + 1 << ", x=" << v.x
     << ": " << v.detail;
  throw ModelError(os.str());
}

}  // namespace superspine
