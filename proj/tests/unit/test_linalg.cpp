#include <catch2/catch_amalgamated.hpp>

#include "dlab/linalg.hpp"
#include "testutil.hpp"

using dlab::NdArray;

TEST_CASE("svd of a diagonal matrix is the identity factorization") {
  auto t = dlab::svd(NdArray::mat({{3.0, 0.0}, {0.0, 1.0}}));
  CHECK(t.S[0] == Catch::Approx(3.0));
  CHECK(t.S[1] == Catch::Approx(1.0));
  CHECK(dlab::max_abs_diff(t.U, dlab::identity(2)) < 1e-12);
  CHECK(dlab::max_abs_diff(t.V, dlab::identity(2)) < 1e-12);
}

TEST_CASE("singular values are rotation invariant") {
  const double th = 30.0 * M_PI / 180.0;
  NdArray R = NdArray::mat({{std::cos(th), -std::sin(th)}, {std::sin(th), std::cos(th)}});
  NdArray M = dlab::matmul(R, NdArray::mat({{2.0, 0.0}, {0.0, 1.0}}));
  auto t = dlab::svd(M);
  CHECK(t.S[0] == Catch::Approx(2.0));
  CHECK(t.S[1] == Catch::Approx(1.0));
  CHECK(testutil::reconstruction_rel_fro(M, t) < 1e-10);
}

TEST_CASE("svd invariants hold on 1000 random matrices") {
  dlab::Rng rng(42);
  double worst_recon = 0.0, worst_orth = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int64_t k = 1 + rng.index(6);
    const int64_t d = k + rng.index(5);
    NdArray M = NdArray::zeros({d, k});
    dlab::fill_normal(M, rng);
    auto t = dlab::svd(M);
    worst_recon = std::max(worst_recon, testutil::reconstruction_rel_fro(M, t));
    worst_orth = std::max({worst_orth, testutil::orthonormality_residual(t.U),
                           testutil::orthonormality_residual(t.V)});
    for (size_t j = 1; j < t.S.size(); ++j) REQUIRE(t.S[j - 1] >= t.S[j]);
  }
  INFO("worst reconstruction " << worst_recon << " worst orthonormality " << worst_orth);
  CHECK(worst_recon < 1e-8);
  CHECK(worst_orth < 1e-8);
}

TEST_CASE("svd of the zero matrix keeps orthonormal bases") {
  auto t = dlab::svd(NdArray::zeros({4, 3}));
  CHECK(t.S[0] == 0.0);
  CHECK(t.S[2] == 0.0);
  CHECK(testutil::orthonormality_residual(t.U) < 1e-12);
  CHECK(testutil::orthonormality_residual(t.V) < 1e-12);
}

TEST_CASE("svd handles rank deficiency") {
  // second column is 2x the first
  NdArray M = NdArray::mat({{1.0, 2.0}, {2.0, 4.0}, {-1.0, -2.0}});
  auto t = dlab::svd(M);
  CHECK(t.S[1] < 1e-12);
  CHECK(testutil::orthonormality_residual(t.U) < 1e-10);
  CHECK(testutil::reconstruction_rel_fro(M, t) < 1e-10);
}

TEST_CASE("svd rejects wide or non finite input") {
  CHECK_THROWS_AS(dlab::svd(NdArray::zeros({2, 5})), dlab::ValidationError);
  NdArray bad = NdArray::zeros({2, 2});
  bad.data[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(dlab::svd(bad), dlab::ValidationError);
}

TEST_CASE("jacobi_eigh solves a known symmetric matrix") {
  auto e = dlab::jacobi_eigh(NdArray::mat({{2.0, 1.0}, {1.0, 2.0}}));
  CHECK(e.values[0] == Catch::Approx(3.0));
  CHECK(e.values[1] == Catch::Approx(1.0));
  const double r = 1.0 / std::sqrt(2.0);
  CHECK(std::fabs(e.vectors.at(0, 0)) == Catch::Approx(r));
  CHECK(testutil::abs_cosine(e.vectors, 0, NdArray::mat({{r}, {r}}), 0) == Catch::Approx(1.0));
  CHECK(testutil::abs_cosine(e.vectors, 1, NdArray::mat({{r}, {-r}}), 0) == Catch::Approx(1.0));
}

TEST_CASE("jacobi_eigh reconstructs random symmetric matrices") {
  dlab::Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t n = 2 + rng.index(6);
    NdArray A = NdArray::zeros({n, n});
    dlab::fill_normal(A, rng);
    NdArray S = NdArray::zeros({n, n});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) S.at(i, j) = 0.5 * (A.at(i, j) + A.at(j, i));
    auto e = dlab::jacobi_eigh(S);
    NdArray VL = e.vectors;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) VL.at(i, j) *= e.values[static_cast<size_t>(j)];
    NdArray R = dlab::matmul(VL, dlab::transpose(e.vectors));
    REQUIRE(dlab::max_abs_diff(R, S) < 1e-9);
    REQUIRE(testutil::orthonormality_residual(e.vectors) < 1e-10);
  }
}

TEST_CASE("pca_fit recovers axis aligned structure") {
  dlab::Rng rng(5);
  const int64_t n = 500;
  NdArray X = NdArray::zeros({n, 3});
  for (int64_t i = 0; i < n; ++i) {
    X.at(i, 0) = 3.0 * rng.normal() + 10.0;
    X.at(i, 1) = 1.0 * rng.normal() - 4.0;
    X.at(i, 2) = 0.3 * rng.normal();
  }
  auto fit = dlab::pca_fit(X);
  CHECK(fit.mean[0] == Catch::Approx(10.0).margin(0.5));
  CHECK(fit.mean[1] == Catch::Approx(-4.0).margin(0.5));
  CHECK(dlab::max_abs_diff(fit.eigvecs, dlab::identity(3)) < 0.05);
  CHECK(fit.eigvals[0] > fit.eigvals[1]);
  CHECK(fit.eigvals[1] > fit.eigvals[2]);
}

TEST_CASE("pca_fit leading direction of diagonal data rotated 45 degrees") {
  dlab::Rng rng(6);
  const int64_t n = 800;
  NdArray X = NdArray::zeros({n, 2});
  const double r = 1.0 / std::sqrt(2.0);
  for (int64_t i = 0; i < n; ++i) {
    const double a = 2.0 * rng.normal(), b = 0.4 * rng.normal();
    X.at(i, 0) = r * (a - b);
    X.at(i, 1) = r * (a + b);
  }
  auto fit = dlab::pca_fit(X);
  NdArray diag_dir = NdArray::mat({{r}, {r}});
  CHECK(testutil::abs_cosine(fit.eigvecs, 0, diag_dir, 0) > 0.999);
}

TEST_CASE("pca eigenvalues match planted factor variances times n") {
  dlab::Rng rng(77);
  const int64_t n = 20000, d = 2;
  NdArray R = testutil::random_orthonormal(d, rng);
  NdArray X = NdArray::zeros({n, d});
  for (int64_t i = 0; i < n; ++i) {
    const double s0 = 2.0 * rng.normal();  // variance 4
    const double s1 = 1.0 * rng.normal();  // variance 1
    for (int64_t j = 0; j < d; ++j) X.at(i, j) = R.at(j, 0) * s0 + R.at(j, 1) * s1;
  }
  auto fit = dlab::pca_fit(X);
  CHECK(fit.eigvals[0] / static_cast<double>(n) == Catch::Approx(4.0).epsilon(0.05));
  CHECK(fit.eigvals[1] / static_cast<double>(n) == Catch::Approx(1.0).epsilon(0.05));
}

TEST_CASE("pca_fit spectrum is invariant under feature rotation") {
  dlab::Rng rng(13);
  const int64_t n = 300, d = 4;
  NdArray X = NdArray::zeros({n, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) X.at(i, j) = (j + 1.0) * rng.normal();
  NdArray R = testutil::random_orthonormal(d, rng);
  NdArray XR = dlab::matmul(X, R);
  auto f1 = dlab::pca_fit(X);
  auto f2 = dlab::pca_fit(XR);
  for (int64_t j = 0; j < d; ++j) {
    REQUIRE(f2.eigvals[static_cast<size_t>(j)] ==
            Catch::Approx(f1.eigvals[static_cast<size_t>(j)]).epsilon(1e-8));
    // columns of R^T-rotated originals match up to sign
    NdArray rotated = dlab::matmul(dlab::transpose(R), f1.eigvecs);
    REQUIRE(testutil::abs_cosine(f2.eigvecs, j, rotated, j) > 1.0 - 1e-7);
  }
}

TEST_CASE("pca_fit rejects degenerate input") {
  CHECK_THROWS_AS(dlab::pca_fit(NdArray::zeros({1, 3})), dlab::ValidationError);
  CHECK_THROWS_AS(dlab::pca_fit(NdArray::zeros({4})), dlab::ValidationError);
}

TEST_CASE("spearman on monotonic and tied data") {
  CHECK(dlab::spearman({1.0, 2.0, 3.0, 4.0}, {10.0, 20.0, 22.0, 100.0}) == Catch::Approx(1.0));
  CHECK(dlab::spearman({1.0, 2.0, 3.0}, {5.0, 0.0, -5.0}) == Catch::Approx(-1.0));
  // ranks (1.5, 1.5, 3) vs (1, 2, 3): Pearson = 0.5/sqrt(0.5*2/3)
  CHECK(dlab::spearman({1.0, 1.0, 2.0}, {3.0, 4.0, 10.0}) == Catch::Approx(std::sqrt(0.75)));
  CHECK(dlab::spearman({1.0, 1.0}, {2.0, 3.0}) == 0.0);
  CHECK_THROWS_AS(dlab::spearman({1.0}, {2.0, 3.0}), dlab::ValidationError);
}
