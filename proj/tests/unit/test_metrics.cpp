#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dlab/dataset.hpp"
#include "dlab/metrics.hpp"
#include "dlab/sprites.hpp"
#include "dlab/vae.hpp"
#include "testutil.hpp"

using namespace dlab;

namespace {

// complete grid enumeration, repeated `replicas` times; mu zeroed for the
// caller to fill, sigma^2 constant
RepresentationTable blank_table(const FactorGrid& grid, int replicas, int64_t k,
                                double sigma_sq = 0.01) {
  RepresentationTable t;
  t.grid = grid;
  const int64_t n = grid.size() * replicas;
  t.mu = NdArray::zeros({n, k});
  t.sigma_sq = NdArray::full({n, k}, sigma_sq);
  t.factor_indices.reserve(static_cast<size_t>(n) * static_cast<size_t>(grid.num_factors()));
  for (int rep = 0; rep < replicas; ++rep)
    for (int64_t flat = 0; flat < grid.size(); ++flat)
      for (int idx : grid.unravel(flat))
        t.factor_indices.push_back(static_cast<uint16_t>(idx));
  return t;
}

void fill_affine(RepresentationTable& t, int64_t latent, int factor, double a, double b) {
  for (int64_t i = 0; i < t.n(); ++i)
    t.mu.at(i, latent) = a * t.factor_value_at(i, factor) + b;
}

// independent reimplementation: dense count arrays, cells visited in
// ascending (a level, b level) order
double mi_oracle(const std::vector<int>& a, const std::vector<int>& b) {
  const auto n = static_cast<int64_t>(a.size());
  const int la = *std::max_element(a.begin(), a.end()) + 1;
  const int lb = *std::max_element(b.begin(), b.end()) + 1;
  std::vector<int64_t> joint(static_cast<size_t>(la * lb), 0);
  std::vector<int64_t> ca(static_cast<size_t>(la), 0), cb(static_cast<size_t>(lb), 0);
  for (size_t i = 0; i < a.size(); ++i) {
    ++joint[static_cast<size_t>(a[i] * lb + b[i])];
    ++ca[static_cast<size_t>(a[i])];
    ++cb[static_cast<size_t>(b[i])];
  }
  double acc = 0.0;
  for (int x = 0; x < la; ++x)
    for (int y = 0; y < lb; ++y) {
      const int64_t c = joint[static_cast<size_t>(x * lb + y)];
      if (c == 0) continue;
      acc += (static_cast<double>(c) / static_cast<double>(n)) *
             std::log(static_cast<double>(c * n) /
                      static_cast<double>(ca[static_cast<size_t>(x)] * cb[static_cast<size_t>(y)]));
    }
  return std::max(0.0, acc);
}

FactorGrid small_grid() {
  return make_factor_grid({{"alpha", 3, 0.0, 1.0}, {"beta", 4, -1.0, 2.0}});
}

}  // namespace

TEST_CASE("latent discretization puts the maximum in the top right-closed bin") {
  NdArray mu = NdArray::zeros({3, 1});
  mu.data = {0.0, 0.5, 1.0};
  const auto codes = discretize_latents(mu, 2);
  REQUIRE(codes[0] == std::vector<int>{0, 0, 1});
}

TEST_CASE("constant latent discretizes to all zeros") {
  NdArray mu = NdArray::full({5, 2}, 3.25);
  const auto codes = discretize_latents(mu, 20);
  for (const auto& col : codes)
    for (int c : col) REQUIRE(c == 0);
}

TEST_CASE("discretization rejects fewer than two bins") {
  NdArray mu = NdArray::zeros({4, 1});
  REQUIRE_THROWS_AS(discretize_latents(mu, 1), ValidationError);
}

TEST_CASE("discretization is monotone and hits both end bins") {
  Rng rng(41);
  for (int trial = 0; trial < 30; ++trial) {
    const int64_t n = 40 + rng.index(100);
    const int bins = 2 + static_cast<int>(rng.index(30));
    NdArray mu = NdArray::zeros({n, 1});
    for (auto& v : mu.data) v = rng.normal() * 3.0 - 1.0;
    const auto codes = discretize_latents(mu, bins)[0];

    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int64_t a, int64_t b) { return mu.data[static_cast<size_t>(a)] < mu.data[static_cast<size_t>(b)]; });
    int prev = 0;
    for (int64_t i : order) {
      const int c = codes[static_cast<size_t>(i)];
      REQUIRE(c >= prev);
      REQUIRE(c >= 0);
      REQUIRE(c < bins);
      prev = c;
    }
    REQUIRE(codes[static_cast<size_t>(order.front())] == 0);
    REQUIRE(codes[static_cast<size_t>(order.back())] == bins - 1);
  }
}

TEST_CASE("mutual information of a column with itself equals its entropy") {
  std::vector<int> a;
  for (int i = 0; i < 48; ++i) a.push_back(i % 4);
  const double h = discrete_entropy(a);
  REQUIRE(mutual_information(a, a) == h);
  REQUIRE(h == Catch::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("independent columns on a complete grid have exactly zero mi") {
  std::vector<int> a, b;
  for (int x = 0; x < 5; ++x)
    for (int y = 0; y < 7; ++y)
      for (int rep = 0; rep < 3; ++rep) {
        a.push_back(x);
        b.push_back(y);
      }
  REQUIRE(mutual_information(a, b) == 0.0);
}

TEST_CASE("mi matches the direct cell-sum on a 2x2 joint") {
  // joint counts [[4,1],[1,4]]
  std::vector<int> a, b;
  auto add = [&](int x, int y, int c) {
    for (int i = 0; i < c; ++i) {
      a.push_back(x);
      b.push_back(y);
    }
  };
  add(0, 0, 4);
  add(0, 1, 1);
  add(1, 0, 1);
  add(1, 1, 4);
  const double expected = 2.0 * 0.4 * std::log(0.4 / 0.25) + 2.0 * 0.1 * std::log(0.1 / 0.25);
  REQUIRE(mutual_information(a, b) == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("mi equals the brute-force oracle exactly on random tables") {
  Rng rng(91);
  for (int trial = 0; trial < 200; ++trial) {
    const size_t n = 30 + rng.index(400);
    const int la = 2 + static_cast<int>(rng.index(31));
    const int lb = 2 + static_cast<int>(rng.index(31));
    std::vector<int> a(n), b(n);
    const bool couple = trial % 2 == 0;
    for (size_t i = 0; i < n; ++i) {
      a[i] = static_cast<int>(rng.index(static_cast<size_t>(la)));
      b[i] = couple ? static_cast<int>((a[i] + rng.index(3)) % lb)
                    : static_cast<int>(rng.index(static_cast<size_t>(lb)));
    }
    const double mi = mutual_information(a, b);
    REQUIRE(mi == mi_oracle(a, b));
    REQUIRE(mi == Catch::Approx(mutual_information(b, a)).margin(1e-12));
    REQUIRE(mi >= 0.0);
  }
}

TEST_CASE("mi is invariant under bijective relabeling of one column") {
  Rng rng(92);
  std::vector<int> a(300), b(300);
  for (size_t i = 0; i < a.size(); ++i) {
    a[i] = static_cast<int>(rng.index(5));
    b[i] = static_cast<int>((a[i] + rng.index(2)) % 6);
  }
  std::vector<int> perm = {3, 5, 0, 4, 1, 2};
  std::vector<int> b2(b.size());
  for (size_t i = 0; i < b.size(); ++i) b2[i] = perm[static_cast<size_t>(b[i])];
  REQUIRE(mutual_information(a, b2) == Catch::Approx(mutual_information(a, b)).margin(1e-12));
}

TEST_CASE("mig is one for a bijective latent per factor") {
  FactorGrid g = make_factor_grid({{"a", 3, 0.0, 1.0}, {"b", 4, -1.0, 2.0}, {"c", 5, 0.0, 4.0}});
  RepresentationTable t = blank_table(g, 2, 3);
  fill_affine(t, 0, 0, 2.0, -1.0);
  fill_affine(t, 1, 1, -0.5, 0.3);
  fill_affine(t, 2, 2, 1.3, 7.0);
  REQUIRE(mig_score(t) == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("mig is zero when every latent is constant") {
  RepresentationTable t = blank_table(small_grid(), 1, 2);
  REQUIRE(mig_score(t) == 0.0);
}

TEST_CASE("duplicated informative latent zeroes the factor gap") {
  FactorGrid g = make_factor_grid({{"a", 4, 0.0, 1.0}});
  RepresentationTable t = blank_table(g, 3, 2);
  fill_affine(t, 0, 0, 1.0, 0.0);
  fill_affine(t, 1, 0, 1.0, 0.0);
  REQUIRE(mig_score(t) == 0.0);
}

TEST_CASE("mig requires two latents and a non-degenerate factor") {
  RepresentationTable one = blank_table(small_grid(), 1, 1);
  REQUIRE_THROWS_AS(mig_score(one), ValidationError);

  // every row sits at the same grid point: both factors degenerate
  RepresentationTable t;
  t.grid = small_grid();
  t.mu = NdArray::zeros({4, 2});
  for (int64_t i = 0; i < 4; ++i) t.mu.at(i, 0) = static_cast<double>(i);
  t.sigma_sq = NdArray::full({4, 2}, 0.01);
  t.factor_indices.assign(8, 0);
  REQUIRE_THROWS_AS(mig_score(t), ValidationError);
}

TEST_CASE("mig is stable under latent permutation and sign flips") {
  FactorGrid g = small_grid();
  RepresentationTable t = blank_table(g, 4, 3);
  fill_affine(t, 0, 0, 2.0, 0.0);
  fill_affine(t, 1, 1, 1.0, -2.0);
  Rng rng(93);
  for (int64_t i = 0; i < t.n(); ++i) t.mu.at(i, 2) = rng.normal();
  const double base = mig_score(t);

  RepresentationTable p = t;
  for (int64_t i = 0; i < t.n(); ++i) {
    p.mu.at(i, 0) = -t.mu.at(i, 2);
    p.mu.at(i, 1) = t.mu.at(i, 0);
    p.mu.at(i, 2) = -t.mu.at(i, 1);
  }
  REQUIRE(mig_score(p) == Catch::Approx(base).margin(1e-9));
}

TEST_CASE("sap is one for exact linear factors and zero for noise") {
  FactorGrid g = small_grid();
  RepresentationTable t = blank_table(g, 8, 2);
  fill_affine(t, 0, 0, 3.0, 1.0);
  fill_affine(t, 1, 1, -2.0, 0.0);
  REQUIRE(sap_score(t) == Catch::Approx(1.0).epsilon(1e-12));

  RepresentationTable noise = blank_table(g, 16, 3);
  Rng rng(94);
  for (auto& v : noise.mu.data) v = rng.normal();
  REQUIRE(sap_score(noise) < 0.08);
  REQUIRE(sap_score(noise) >= 0.0);
}

TEST_CASE("sap gap vanishes for duplicated latents") {
  FactorGrid g = make_factor_grid({{"a", 5, 0.0, 1.0}});
  RepresentationTable t = blank_table(g, 4, 2);
  fill_affine(t, 0, 0, 1.5, 0.0);
  fill_affine(t, 1, 0, 1.5, 0.0);
  REQUIRE(sap_score(t) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("dci is one for a one-to-one code and zero for a shared code") {
  FactorGrid g = small_grid();
  RepresentationTable t = blank_table(g, 4, 2);
  fill_affine(t, 0, 0, 1.0, 0.0);
  fill_affine(t, 1, 1, -2.0, 3.0);
  REQUIRE(dci_disentanglement(t) == Catch::Approx(1.0).margin(1e-6));

  // both latents carry the same equal mix of two exchangeable factors
  FactorGrid sym = make_factor_grid({{"a", 4, 0.0, 1.0}, {"b", 4, 0.0, 1.0}});
  RepresentationTable shared = blank_table(sym, 4, 2);
  for (int64_t i = 0; i < shared.n(); ++i) {
    const double s = shared.factor_value_at(i, 0) + shared.factor_value_at(i, 1);
    shared.mu.at(i, 0) = s;
    shared.mu.at(i, 1) = 2.0 * s;
  }
  REQUIRE(dci_disentanglement(shared) == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("dead latents carry no dci weight") {
  FactorGrid g = small_grid();
  RepresentationTable t = blank_table(g, 4, 3);
  fill_affine(t, 0, 0, 1.0, 0.0);
  fill_affine(t, 1, 1, 1.0, 0.0);
  // latent 2 stays constant
  REQUIRE(dci_disentanglement(t) == Catch::Approx(1.0).margin(1e-6));

  RepresentationTable dead = blank_table(g, 4, 2);
  REQUIRE(dci_disentanglement(dead) == 0.0);
}

TEST_CASE("factorvae score is one when latents equal factors") {
  FactorGrid g = make_factor_grid({{"a", 4, 0.0, 1.0}, {"b", 4, 0.0, 1.0}});
  RepresentationTable t = blank_table(g, 8, 2);
  fill_affine(t, 0, 0, 1.0, 0.0);
  fill_affine(t, 1, 1, 1.0, 0.0);
  REQUIRE(factorvae_score(t, 400, 32, 5) == 1.0);
}

TEST_CASE("factorvae score sits near chance for pure noise") {
  FactorGrid g = make_factor_grid({{"a", 4, 0.0, 1.0}, {"b", 4, 0.0, 1.0}});
  RepresentationTable t = blank_table(g, 16, 3);
  Rng rng(95);
  for (auto& v : t.mu.data) v = rng.normal();
  const double score = factorvae_score(t, 800, 64, 6);
  REQUIRE(score > 0.3);
  REQUIRE(score < 0.7);
}

TEST_CASE("factorvae score is deterministic under a fixed seed") {
  FactorGrid g = small_grid();
  RepresentationTable t = blank_table(g, 8, 2);
  Rng rng(96);
  for (auto& v : t.mu.data) v = rng.normal();
  REQUIRE(factorvae_score(t, 200, 16, 7) == factorvae_score(t, 200, 16, 7));
}

TEST_CASE("collapsed latents are pruned from the vote") {
  FactorGrid g = make_factor_grid({{"a", 4, 0.0, 1.0}, {"b", 4, 0.0, 1.0}});
  RepresentationTable t = blank_table(g, 8, 2);
  fill_affine(t, 0, 0, 1.0, 0.0);
  fill_affine(t, 1, 1, 1.0, 0.0);
  // latent 1 reports prior-level variance: pruned, so factor b becomes
  // unpredictable and accuracy drops toward one half
  for (int64_t i = 0; i < t.n(); ++i) t.sigma_sq.at(i, 1) = 1.0;
  const double pruned = factorvae_score(t, 800, 32, 8);
  REQUIRE(pruned < 0.75);

  // with every latent collapsed the prune rule falls back to all latents
  for (int64_t i = 0; i < t.n(); ++i) t.sigma_sq.at(i, 0) = 1.0;
  REQUIRE(factorvae_score(t, 400, 32, 8) == 1.0);
}

TEST_CASE("factors without observed variation are excluded from votes") {
  FactorGrid g = small_grid();
  RepresentationTable t;
  t.grid = g;
  const int64_t n = 60;
  t.mu = NdArray::zeros({n, 2});
  t.sigma_sq = NdArray::full({n, 2}, 0.01);
  Rng rng(97);
  for (int64_t i = 0; i < n; ++i) {
    const int a = static_cast<int>(rng.index(3));
    t.factor_indices.push_back(static_cast<uint16_t>(a));
    t.factor_indices.push_back(0);  // factor b never varies
    t.mu.at(i, 0) = g.factors[0].values[static_cast<size_t>(a)];
    t.mu.at(i, 1) = rng.normal();
  }
  REQUIRE(factorvae_score(t, 400, 16, 9) == 1.0);

  for (size_t i = 0; i < t.factor_indices.size(); i += 2) t.factor_indices[i] = 1;
  REQUIRE_THROWS_AS(factorvae_score(t, 400, 16, 9), ValidationError);
}

TEST_CASE("active unit count thresholds mean posterior variance") {
  NdArray close_to_prior = NdArray::full({10, 3}, 0.999);
  REQUIRE(count_active_units(close_to_prior) == 0);

  NdArray mixed = NdArray::zeros({2, 2});
  mixed.data = {0.01, 0.99, 0.01, 0.99};
  REQUIRE(count_active_units(mixed) == 1);
  REQUIRE(count_active_units(mixed, 0.0) == 0);

  NdArray bad = NdArray::zeros({2, 1});
  REQUIRE_THROWS_AS(count_active_units(bad), ValidationError);
}

TEST_CASE("metric report on an untrained model stays in range") {
  FactorGrid g = make_factor_grid({{"shape", 2, 0.0, 1.0},
                                   {"scale", 2, 0.25, 0.35},
                                   {"pos_x", 2, 0.35, 0.65},
                                   {"pos_y", 2, 0.35, 0.65}});
  MinispritesParams p;
  p.grid = g;
  p.image_side = 16;
  LabeledDataset ds = generate_minisprites(p, 3);

  ModelConfig cfg;
  cfg.arch = "mlp";
  cfg.input_dim = ds.dim();
  cfg.latent_dim = 4;
  cfg.hidden = {16};
  VaeModel model = make_vae_model(cfg, 17);
  Representation rep = eval_representation(model, ds.images);
  RepresentationTable t = make_representation_table(rep, ds);

  MetricReport r = compute_metric_report(t, 21, 20, 160, 8);
  for (double v : {r.mig, r.sap, r.dci_d, r.factorvae}) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
  REQUIRE(r.active_units >= 0);
  REQUIRE(r.active_units <= 4);
  REQUIRE(r.mi.shape == Shape{4, 4});
}

TEST_CASE("metric report serializes to json and a fixed csv layout") {
  MetricReport r;
  r.mig = 1.0;
  r.sap = 0.5;
  r.dci_d = 0.25;
  r.factorvae = 0.75;
  r.active_units = 3;
  r.mi = NdArray::zeros({1, 2});
  r.mi.data = {0.5, 1.5};

  nlohmann::json j = metric_report_json(r);
  REQUIRE(j.at("mig").get<double>() == 1.0);
  REQUIRE(j.at("active_units").get<int>() == 3);
  REQUIRE(j.at("mi_matrix").at(0).at(1).get<double>() == 1.5);

  REQUIRE(metric_csv_header() == "run_id,seed,beta,provenance,mig,sap,dci_d,factorvae,active_units");
  REQUIRE(metric_csv_row("run7", 42, 0.5, "original", r) ==
          "run7,42,0.500000,original,1.000000,0.500000,0.250000,0.750000,3");
}
