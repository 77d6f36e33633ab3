#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "fixtures.hpp"

using namespace superspine;

namespace {

const double kPi = std::numbers::pi;

}  // namespace

TEST(BuildGrid, ThreeNodes) {
  const auto g = build_grid(Interval{0.0, kPi}, 3, 3);
  ASSERT_EQ(g->M, 3u);
  EXPECT_NEAR(g->h, kPi / 4, 1e-15);
  EXPECT_NEAR(g->nodes[0], kPi / 4, 1e-15);
  EXPECT_NEAR(g->nodes[1], kPi / 2, 1e-15);
  EXPECT_NEAR(g->nodes[2], 3 * kPi / 4, 1e-15);
}

TEST(BuildGrid, TooFewNodes) {
  EXPECT_THROW(build_grid(Interval{0.0, kPi}, 7), ResolutionError);
  EXPECT_NO_THROW(build_grid(Interval{0.0, kPi}, 8));
}

TEST(BuildGrid, RectangleNotDiscretized) {
  EXPECT_THROW(build_grid(Rectangle{}, 16), ModelError);
}

TEST(BuildGrid, RefinementHalvesSpacing) {
  const auto g = build_grid(Interval{0.0, kPi}, 99);
  const auto f = build_grid(Interval{0.0, kPi}, 199);
  EXPECT_DOUBLE_EQ(f->h, g->h / 2);
  for (std::size_t m = 0; m < g->M; ++m) EXPECT_NEAR(f->nodes[2 * m + 1], g->nodes[m], 1e-14);
}

TEST(Quadrature, MeasureOfDomain) {
  const auto g = build_grid(Interval{0.0, kPi}, 100);
  const auto q = quadrature(GridField::constant(g, 2, 1.0));
  EXPECT_LT(kPi - q.per_type[0], 2 * g->h);
  EXPECT_GT(kPi - q.per_type[0], 0.0);
}

TEST(Quadrature, SineIntegral) {
  for (std::size_t M : {50, 100, 200}) {
    const auto g = build_grid(Interval{0.0, kPi}, M);
    const auto f = GridField::from_function(g, 2, [](double x, std::size_t) { return std::sin(x); });
    const auto q = quadrature(f);
    EXPECT_NEAR(q.per_type[0], 2.0, g->h * g->h);
    EXPECT_NEAR(q.total, 4.0, 2 * g->h * g->h);
  }
}

TEST(Quadrature, ZeroField) {
  const auto g = build_grid(Interval{0.0, kPi}, 20);
  EXPECT_EQ(quadrature(GridField::constant(g, 2, 0.0)).total, 0.0);
}

TEST(Quadrature, EigenfunctionNormalization) {
  const auto g = build_grid(Interval{0.0, kPi}, 200);
  const auto phi = GridField::from_function(g, 2, [](double x, std::size_t) { return std::sin(x) / std::sqrt(kPi); });
  EXPECT_NEAR(inner(phi, phi), 1.0, g->h * g->h);
}

TEST(AssembleLk, UnitDiffusivityStencil) {
  const auto spec = fixtures::load("canon2");
  const auto g = build_grid(spec.domain, 10);
  const auto L = assemble_Lk(g, spec, 0).dense();
  const double s = 1.0 / (g->h * g->h);
  for (std::size_t m = 0; m < g->M; ++m) {
    const auto r = static_cast<Eigen::Index>(2 * m);
    EXPECT_NEAR(L(r, r), -2 * s, 1e-9 * s);
    if (m > 0) EXPECT_NEAR(L(r, r - 2), s, 1e-9 * s);
    if (m + 1 < g->M) EXPECT_NEAR(L(r, r + 2), s, 1e-9 * s);
    EXPECT_EQ(L.row(r + 1).norm(), 0.0);  // type 2 block is not part of L_1
  }
}

TEST(AssembleLk, DirichletEigenvalue) {
  const auto spec = fixtures::load("canon2");
  const auto g = build_grid(spec.domain, 100);
  const auto L = assemble_Lk(g, spec, 0).dense();
  // Restrict to the type-1 block.
  Eigen::MatrixXd B(g->M, g->M);
  for (std::size_t r = 0; r < g->M; ++r)
    for (std::size_t c = 0; c < g->M; ++c) B(r, c) = L(2 * r, 2 * c);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(-B);
  // Exact discrete value: 4 sin^2(h/2) / h^2.
  const double exact = 4 * std::pow(std::sin(g->h / 2), 2) / (g->h * g->h);
  EXPECT_NEAR(es.eigenvalues()[0], exact, 1e-10);
  EXPECT_NEAR(es.eigenvalues()[0], 1.0, g->h * g->h);
}

TEST(AssembleLk, ExactlySymmetric) {
  const auto spec = fixtures::load("var2");
  const auto g = build_grid(spec.domain, 60);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto L = assemble_Lk(g, spec, k).dense();
    EXPECT_EQ((L - L.transpose()).norm(), 0.0);
  }
}

TEST(AssembleLk, NonPositiveDiffusivityRejected) {
  const auto spec = fixtures::patched("canon2", {{"coefficients", {{"a", {1.0, {{"kind", "affine"}, {"c0", -1.0}, {"c1", 0.5}}}}}}});
  const auto g = build_grid(spec.domain, 20);
  EXPECT_THROW(assemble_Lk(g, spec, 1), ModelError);
}

TEST(AssembleCoupled, MeanOperatorShift) {
  const auto spec = fixtures::load("canon2");
  const auto g = build_grid(spec.domain, 30);
  const Eigen::MatrixXd diff = assemble_M(g, spec).dense() - assemble_A(g, spec).dense();
  EXPECT_LE((diff - 2.0 * Eigen::MatrixXd::Identity(diff.rows(), diff.cols())).norm(), 1e-12);
}

TEST(AssembleCoupled, CouplingKillsConstantsInType) {
  const auto spec = fixtures::load("var2");
  const auto g = build_grid(spec.domain, 40);
  const auto A = assemble_A(g, spec);
  const SparseMatrix L = assemble_Lk(g, spec, 0).mat + assemble_Lk(g, spec, 1).mat;
  // f(x, i) = sin x: only the diffusion part acts.
  const auto f = GridField::from_function(g, 2, [](double x, std::size_t) { return std::sin(x); });
  const Eigen::VectorXd r = A.mat * f.values - L * f.values;
  EXPECT_LE(r.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(AssembleCoupled, WeightedSymmetry) {
  for (const char* name : {"canon2", "var2", "canonH"}) {
    const auto spec = fixtures::load(name);
    const auto g = build_grid(spec.domain, 50);
    for (const auto& op : {assemble_A(g, spec), assemble_M(g, spec)}) {
      const Eigen::MatrixXd W = g->h * op.dense();
      EXPECT_LE((W - W.transpose()).norm(), 1e-10) << name;
    }
  }
}

TEST(AssembleCoupled, AsymmetricRatesRejected) {
  const auto spec = fixtures::patched("canon2", {{"coefficients", {{"n", {3.0, 2.0}}}}});
  const auto g = build_grid(spec.domain, 20);
  EXPECT_THROW(assemble_M(g, spec), ModelError);
  EXPECT_THROW(assemble_A(g, spec), ModelError);
}

TEST(AssembleCoupledProperty, DiagonalShiftIsBranchingExcess) {
  const auto spec = fixtures::load("var2");
  const auto g = build_grid(spec.domain, 64);
  const Eigen::MatrixXd diff = assemble_M(g, spec).dense() - assemble_A(g, spec).dense();
  for (std::size_t m = 0; m < g->M; ++m)
    for (std::size_t i = 0; i < 2; ++i) {
      const auto r = static_cast<Eigen::Index>(2 * m + i);
      const double x = g->nodes[m];
      EXPECT_NEAR(diff(r, r), spec.b(x, i) * (spec.n(x, i) - 1.0), 1e-12);
      EXPECT_NEAR(diff.row(r).cwiseAbs().sum(), std::abs(diff(r, r)), 1e-12);
    }
}

TEST(AssembleCoupledProperty, RefinementOrder) {
  const auto spec = fixtures::load("canon2");
  auto top = [&](std::size_t M) {
    const auto g = build_grid(spec.domain, M);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(assemble_M(g, spec).dense());
    return es.eigenvalues()[es.eigenvalues().size() - 1];
  };
  const double e1 = std::abs(top(49) - 1.0);
  const double e2 = std::abs(top(99) - 1.0);
  EXPECT_GE(std::log2(e1 / e2), 1.7);
}

TEST(CardinalSpline, AccurateInBothEndCells) {
  const double h = kPi / 201;
  std::vector<double> v(202);
  for (std::size_t m = 0; m < v.size(); ++m) v[m] = std::sin(static_cast<double>(m) * h);
  const auto s = detail::cardinal_spline(v, 0.0, h);
  for (double off : {0.25, 0.5, 0.75}) {
    const double a = off * h, b = 201 * h - off * h;
    EXPECT_NEAR(s(a), std::sin(a), 1e-9);
    EXPECT_NEAR(s(b), std::sin(b), 1e-9);
  }
  EXPECT_THROW(detail::cardinal_spline({1.0, 2.0, 3.0}, 0.0, 1.0), ArgumentError);
}
