#include <cmath>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "doctest.h"
#include "ndcrf/oracle.hpp"
#include "ndcrf/permutohedral.hpp"
#include "test_helpers.hpp"

using ndcrf::FeatureConfig;
using ndcrf::FeatureMatrix;
using ndcrf::FeatureMode;
using ndcrf::Lattice;
using ndcrf::Tensor;

namespace {

double rel_rms(const std::vector<float>& a, const std::vector<float>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    num += d * d;
    den += static_cast<double>(b[i]) * static_cast<double>(b[i]);
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

double dot(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

double norm(const std::vector<float>& a) { return std::sqrt(dot(a, a)); }

std::vector<float> random_values(std::int64_t n, int c, std::uint64_t seed,
                                 double lo = -1.0, double hi = 1.0) {
  testutil::Rng rng(seed);
  std::vector<float> v(static_cast<std::size_t>(n * c));
  for (float& x : v) x = static_cast<float>(rng.range(lo, hi));
  return v;
}

}  // namespace

TEST_CASE("build_features lays out smoothness rows as coords over theta") {
  Tensor ref({2, 3}, 1);
  FeatureMatrix f = ndcrf::build_features(
      ref, {.mode = FeatureMode::smoothness, .theta_gamma = 2.0f});
  CHECK(f.n_points == 6);
  CHECK(f.dim == 2);
  // Row-major voxel order: (0,0), (0,1), (0,2), (1,0), ...
  CHECK(f.row(1)[0] == 0.0f);
  CHECK(f.row(1)[1] == 0.5f);
  CHECK(f.row(3)[0] == 0.5f);
  CHECK(f.row(3)[1] == 0.0f);
  CHECK(f.row(5)[0] == 0.5f);
  CHECK(f.row(5)[1] == 1.0f);
}

TEST_CASE("build_features appends intensity channels in appearance mode") {
  Tensor ref({1, 2}, 3, {0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f});
  FeatureMatrix f = ndcrf::build_features(
      ref,
      {.mode = FeatureMode::appearance, .theta_alpha = 2.0f, .theta_beta = 0.5f});
  CHECK(f.n_points == 2);
  CHECK(f.dim == 5);
  CHECK(f.row(1)[0] == 0.0f);
  CHECK(f.row(1)[1] == 0.5f);
  CHECK(f.row(1)[2] == doctest::Approx(0.8f));
  CHECK(f.row(1)[4] == doctest::Approx(1.2f));
}

TEST_CASE("build_features rejects bad inputs") {
  Tensor ref({2, 2}, 1);
  CHECK_THROWS_AS(ndcrf::build_features(
                      ref, {.mode = FeatureMode::appearance, .theta_alpha = 1.0f,
                            .theta_beta = 0.0f}),
                  ndcrf::ConfigError);
  CHECK_THROWS_AS(ndcrf::build_features(
                      ref, {.mode = FeatureMode::smoothness, .theta_gamma = -1.0f}),
                  ndcrf::ConfigError);

  Tensor nan_ref({2, 2}, 1);
  nan_ref.at(0, 0) = std::nanf("");
  CHECK_THROWS_AS(ndcrf::build_features(
                      nan_ref, {.mode = FeatureMode::appearance,
                                .theta_alpha = 1.0f, .theta_beta = 1.0f}),
                  ndcrf::Error);
}

TEST_CASE("lattice geometry invariants hold on a random bilateral build") {
  Tensor ref = testutil::random_tensor({6, 7}, 3, 99);
  FeatureMatrix f = ndcrf::build_features(
      ref,
      {.mode = FeatureMode::appearance, .theta_alpha = 3.0f, .theta_beta = 0.4f});
  Lattice lat(f);
  const int d = lat.dim();
  REQUIRE(d == 5);
  REQUIRE(lat.n_points() == 42);
  CHECK(lat.n_vertices() >= 1);
  CHECK(lat.n_vertices() <= lat.n_points() * (d + 1));

  SUBCASE("barycentric rows are convex combinations") {
    for (std::int64_t p = 0; p < lat.n_points(); ++p) {
      double sum = 0.0;
      for (float w : lat.barycentric(p)) {
        CHECK(w >= 0.0f);
        CHECK(w <= 1.0f + 1e-5f);
        sum += w;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-4));
      for (std::int32_t v : lat.simplex_vertices(p)) {
        CHECK(v >= 0);
        CHECK(v < lat.n_vertices());
      }
    }
  }

  SUBCASE("vertex keys resolve back to their own index") {
    for (std::int64_t v = 0; v < lat.n_vertices(); ++v) {
      const auto key = lat.vertex_key(v);
      CHECK(lat.vertex_table().find(key) == v);
    }
  }

  SUBCASE("contributor lists transpose the splat map exactly") {
    std::int64_t total = 0;
    std::vector<std::vector<std::pair<std::int32_t, float>>> expect(
        static_cast<std::size_t>(lat.n_vertices()));
    for (std::int64_t p = 0; p < lat.n_points(); ++p) {
      const auto verts = lat.simplex_vertices(p);
      const auto bary = lat.barycentric(p);
      for (int r = 0; r <= d; ++r)
        expect[static_cast<std::size_t>(verts[r])].push_back(
            {static_cast<std::int32_t>(p), bary[r]});
    }
    for (std::int64_t v = 0; v < lat.n_vertices(); ++v) {
      const auto pts = lat.contributors(v);
      const auto wts = lat.contributor_weights(v);
      REQUIRE(pts.size() == expect[static_cast<std::size_t>(v)].size());
      total += static_cast<std::int64_t>(pts.size());
      for (std::size_t i = 0; i < pts.size(); ++i) {
        CHECK(pts[i] == expect[static_cast<std::size_t>(v)][i].first);
        CHECK(wts[i] == expect[static_cast<std::size_t>(v)][i].second);
        if (i > 0) CHECK(pts[i] >= pts[i - 1]);  // ascending point order
      }
    }
    CHECK(total == lat.n_points() * (d + 1));
  }

  SUBCASE("blur neighbors are mutual") {
    for (std::int64_t v = 0; v < lat.n_vertices(); ++v) {
      for (int j = 0; j <= d; ++j) {
        const std::int32_t up = lat.neighbors_up(v)[j];
        if (up >= 0) CHECK(lat.neighbors_down(up)[j] == v);
        const std::int32_t down = lat.neighbors_down(v)[j];
        if (down >= 0) CHECK(lat.neighbors_up(down)[j] == v);
      }
    }
  }
}

TEST_CASE("identical feature rows land on identical simplices") {
  FeatureMatrix f;
  f.n_points = 4;
  f.dim = 2;
  f.values = {0.3f, -0.7f, 0.3f, -0.7f, 0.3f, -0.7f, 2.0f, 1.0f};
  Lattice lat(f);
  for (std::int64_t p : {1, 2}) {
    for (int r = 0; r <= 2; ++r) {
      CHECK(lat.simplex_vertices(p)[r] == lat.simplex_vertices(0)[r]);
      CHECK(lat.barycentric(p)[r] == lat.barycentric(0)[r]);
    }
  }
}

TEST_CASE("filtering a constant preserves it under normalization") {
  Tensor ref = testutil::random_tensor({8, 9}, 3, 5);
  FeatureMatrix f = ndcrf::build_features(
      ref,
      {.mode = FeatureMode::appearance, .theta_alpha = 4.0f, .theta_beta = 0.3f});
  Lattice lat(f);
  std::vector<float> values(static_cast<std::size_t>(lat.n_points()) * 2);
  for (std::size_t i = 0; i < values.size(); ++i)
    values[i] = (i % 2 == 0) ? 0.75f : -2.5f;
  const auto out = ndcrf::filter(lat, values, 2, {.normalize = true});
  for (std::size_t i = 0; i < values.size(); ++i)
    CHECK(out[i] == doctest::Approx(values[i]).epsilon(1e-5));
}

TEST_CASE("the unnormalized filter is linear") {
  Tensor ref = testutil::random_tensor({7, 6}, 1, 17);
  FeatureMatrix f = ndcrf::build_features(
      ref, {.mode = FeatureMode::smoothness, .theta_gamma = 1.5f});
  Lattice lat(f);
  const auto x = random_values(lat.n_points(), 3, 1);
  const auto y = random_values(lat.n_points(), 3, 2);
  std::vector<float> combo(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) combo[i] = 2.0f * x[i] - 0.5f * y[i];

  const auto fx = ndcrf::filter(lat, x, 3);
  const auto fy = ndcrf::filter(lat, y, 3);
  const auto fc = ndcrf::filter(lat, combo, 3);
  for (std::size_t i = 0; i < fc.size(); ++i)
    CHECK(fc[i] ==
          doctest::Approx(2.0f * fx[i] - 0.5f * fy[i]).epsilon(1e-4));
}

TEST_CASE("coincident points average under the normalized filter") {
  FeatureMatrix f;
  f.n_points = 2;
  f.dim = 1;
  f.values = {0.4f, 0.4f};
  Lattice lat(f);
  const std::vector<float> v = {1.0f, 3.0f};
  const auto out = ndcrf::filter(lat, v, 1, {.normalize = true});
  CHECK(out[0] == out[1]);  // bitwise: identical splat/slice paths
  CHECK(out[0] == doctest::Approx(2.0f).epsilon(1e-5));
}

TEST_CASE("far-apart points do not exchange mass") {
  FeatureMatrix f;
  f.n_points = 2;
  f.dim = 1;
  f.values = {0.0f, 50.0f};
  Lattice lat(f);
  const std::vector<float> v = {1.0f, -1.0f};
  const auto out = ndcrf::filter(lat, v, 1, {.normalize = true});
  CHECK(out[0] == doctest::Approx(1.0f).epsilon(1e-4));
  CHECK(out[1] == doctest::Approx(-1.0f).epsilon(1e-4));
}

TEST_CASE("lattice filtering tracks the brute-force Gaussian") {
  // Relative RMS against the float64 oracle across spatial ranks.
  const double tol = 0.08;

  auto check_case = [&](const Tensor& ref, const FeatureConfig& fc,
                        const Tensor& vals) {
    Lattice lat(ndcrf::build_features(ref, fc));
    const auto fast = ndcrf::filter(lat, vals.storage(), vals.channels(),
                                    {.normalize = true});
    const Tensor exact =
        ndcrf::oracle::brute_filter(ref, vals, fc, false, true);
    CHECK(rel_rms(fast, exact.storage()) <= tol);
  };

  SUBCASE("1d smoothness") {
    check_case(testutil::random_tensor({64}, 1, 21),
               {.mode = FeatureMode::smoothness, .theta_gamma = 3.0f},
               testutil::random_tensor({64}, 2, 22));
  }
  SUBCASE("2d bilateral") {
    check_case(testutil::random_tensor({12, 12}, 3, 23),
               {.mode = FeatureMode::appearance, .theta_alpha = 4.0f,
                .theta_beta = 0.4f},
               testutil::random_tensor({12, 12}, 2, 24));
  }
  SUBCASE("3d smoothness") {
    check_case(testutil::random_tensor({5, 6, 7}, 1, 25),
               {.mode = FeatureMode::smoothness, .theta_gamma = 2.0f},
               testutil::random_tensor({5, 6, 7}, 1, 26));
  }
  SUBCASE("4d smoothness") {
    check_case(testutil::random_tensor({3, 4, 3, 3}, 1, 27),
               {.mode = FeatureMode::smoothness, .theta_gamma = 1.5f},
               testutil::random_tensor({3, 4, 3, 3}, 2, 28));
  }
}

TEST_CASE("huge intensity scale reduces the bilateral kernel to smoothness") {
  // With theta_beta enormous the intensity coordinates collapse to ~0, so the
  // d=5 bilateral filter should approximate the d=2 spatial filter. The two
  // lattices tessellate differently, so agreement is approximate.
  Tensor ref = testutil::random_tensor({10, 10}, 3, 31);
  Lattice bilateral(ndcrf::build_features(
      ref, {.mode = FeatureMode::appearance, .theta_alpha = 3.0f,
            .theta_beta = 1e6f}));
  Lattice spatial(ndcrf::build_features(
      ref, {.mode = FeatureMode::smoothness, .theta_gamma = 3.0f}));
  const auto v = random_values(100, 1, 32, 0.0, 1.0);
  const auto a = ndcrf::filter(bilateral, v, 1, {.normalize = true});
  const auto b = ndcrf::filter(spatial, v, 1, {.normalize = true});
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  CHECK(std::sqrt(num / den) <= 0.1);
}

TEST_CASE("adjoint identity couples filter and filter_transpose") {
  Tensor ref = testutil::random_tensor({10, 5}, 3, 41);
  Lattice lat(ndcrf::build_features(
      ref, {.mode = FeatureMode::appearance, .theta_alpha = 3.0f,
            .theta_beta = 0.5f}));
  for (int c : {1, 4}) {
    const auto x = random_values(lat.n_points(), c, 100 + c);
    const auto y = random_values(lat.n_points(), c, 200 + c);
    const auto fx = ndcrf::filter(lat, x, c);
    const auto fty = ndcrf::filter_transpose(lat, y, c);
    const double lhs = dot(fx, y);
    const double rhs = dot(x, fty);
    CHECK(std::abs(lhs - rhs) / std::max(norm(fx) * norm(y), 1e-12) <= 1e-4);
  }
}

TEST_CASE("adjoint identity holds on the double path to near machine precision") {
  Tensor ref = testutil::random_tensor({6, 6}, 1, 43);
  Lattice lat(ndcrf::build_features(
      ref, {.mode = FeatureMode::smoothness, .theta_gamma = 2.0f}));
  testutil::Rng rng(44);
  std::vector<double> x(36), y(36);
  for (auto& v : x) v = rng.range(-1, 1);
  for (auto& v : y) v = rng.range(-1, 1);
  const auto fx = ndcrf::filter(lat, std::span<const double>(x), 1);
  const auto fty = ndcrf::filter_transpose(lat, std::span<const double>(y), 1);
  double lhs = 0.0, rhs = 0.0, scale = 0.0;
  for (int i = 0; i < 36; ++i) {
    lhs += fx[i] * y[i];
    rhs += x[i] * fty[i];
    scale += fx[i] * fx[i];
  }
  CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::sqrt(scale)));
}

TEST_CASE("parallel filtering matches the serial reference bit for bit") {
  Tensor ref = testutil::random_tensor({9, 11}, 3, 51);
  Lattice lat(ndcrf::build_features(
      ref, {.mode = FeatureMode::appearance, .theta_alpha = 5.0f,
            .theta_beta = 0.3f}));
  const int c = 3;
  const auto v = random_values(lat.n_points(), c, 52);

  for (const ndcrf::FilterOptions opts :
       {ndcrf::FilterOptions{}, ndcrf::FilterOptions{.normalize = true},
        ndcrf::FilterOptions{.reverse = true}}) {
    const auto want = ndcrf::serial::filter(lat, v, c, opts);
#ifdef _OPENMP
    const int restore = omp_get_max_threads();
    for (int threads : {1, 2, 3, 8}) {
      omp_set_num_threads(threads);
      const auto got = ndcrf::filter(lat, v, c, opts);
      REQUIRE(got.size() == want.size());
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == want[i]);
    }
    omp_set_num_threads(restore);
#else
    const auto got = ndcrf::filter(lat, v, c, opts);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == want[i]);
#endif
  }

  // Same property on the double overload.
  std::vector<double> vd(v.begin(), v.end());
  const auto wantd =
      ndcrf::serial::filter(lat, std::span<const double>(vd), c, {});
  const auto gotd = ndcrf::filter(lat, std::span<const double>(vd), c, {});
  for (std::size_t i = 0; i < gotd.size(); ++i) CHECK(gotd[i] == wantd[i]);
}

TEST_CASE("repeated runs are deterministic") {
  Tensor ref = testutil::random_tensor({8, 8}, 3, 61);
  const FeatureConfig fc{.mode = FeatureMode::appearance, .theta_alpha = 4.0f,
                         .theta_beta = 0.25f};
  Lattice a(ndcrf::build_features(ref, fc));
  Lattice b(ndcrf::build_features(ref, fc));
  CHECK(a.n_vertices() == b.n_vertices());
  const auto v = random_values(64, 2, 62);
  const auto r1 = ndcrf::filter(a, v, 2, {.normalize = true});
  const auto r2 = ndcrf::filter(b, v, 2, {.normalize = true});
  for (std::size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("filter validates value shapes") {
  Tensor ref = testutil::random_tensor({4, 4}, 1, 71);
  Lattice lat(ndcrf::build_features(
      ref, {.mode = FeatureMode::smoothness, .theta_gamma = 1.0f}));
  std::vector<float> wrong(17);
  CHECK_THROWS_AS(ndcrf::filter(lat, wrong, 1), ndcrf::ShapeError);
  CHECK_THROWS_AS(ndcrf::filter(lat, wrong, 0), ndcrf::ShapeError);
}

TEST_CASE("out-of-range features are rejected") {
  FeatureMatrix f;
  f.n_points = 2;
  f.dim = 1;
  f.values = {0.0f, 1e8f};
  CHECK_THROWS_AS(Lattice{f}, ndcrf::LatticeRangeError);
}
