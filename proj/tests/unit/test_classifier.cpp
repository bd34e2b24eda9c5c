#include <numeric>
#include <random>

#include "doctest.h"
#include "lcmigrate/classifier.hpp"
#include "lcmigrate/error.hpp"
#include "support.hpp"

using namespace lcmigrate;

namespace {

struct Blobs {
  FeatureMatrix x;
  std::vector<int> y;
};

// Classes 0..k-1 centered 10 apart along the diagonal, unit spread.
Blobs blobs(std::size_t per_class, int k, std::size_t d, std::uint64_t seed, double spread = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  Blobs b;
  b.x.resize(static_cast<Eigen::Index>(per_class * static_cast<std::size_t>(k)), static_cast<Eigen::Index>(d));
  Eigen::Index r = 0;
  for (std::size_t i = 0; i < per_class; ++i) {
    for (int c = 0; c < k; ++c, ++r) {
      for (std::size_t j = 0; j < d; ++j) b.x(r, static_cast<Eigen::Index>(j)) = 10.0 * c + spread * n01(rng);
      b.y.push_back(c);
    }
  }
  return b;
}

FeatureMatrix uniform_probes(std::size_t n, std::size_t d, double lo, double hi, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  FeatureMatrix p(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  return p;
}

double accuracy(const std::vector<int>& a, const std::vector<int>& b) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < a.size(); ++i) hit += a[i] == b[i];
  return static_cast<double>(hit) / static_cast<double>(a.size());
}

ForestConfig small_forest(std::uint64_t seed = 1) {
  ForestConfig c;
  c.n_trees = 30;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_SUITE("classifier") {

TEST_CASE("separated blobs are learned almost perfectly") {
  const auto b = blobs(100, 2, 2, 3);
  const auto m = RandomForest(small_forest()).fit(b.x, b.y);
  CHECK(accuracy(m->predict(b.x), b.y) >= 0.99);
  CHECK(m->classes() == std::vector<int>{0, 1});
}

TEST_CASE("one sample per class is memorized") {
  FeatureMatrix x(2, 3);
  x << 0.1, 0.2, 0.3, 5.0, 4.0, 3.0;
  const std::vector<int> y{4, 9};
  ForestConfig c = small_forest();
  c.n_trees = 50;
  const auto m = RandomForest(c).fit(x, y);
  CHECK(m->predict(x) == y);
}

TEST_CASE("a heavily duplicated training point keeps its label") {
  auto b = blobs(30, 3, 2, 4);
  const Eigen::Index n = b.x.rows();
  b.x.conservativeResize(n + 50, Eigen::NoChange);
  for (Eigen::Index i = 0; i < 50; ++i) {
    b.x.row(n + i) << 4.0, 6.0;
    b.y.push_back(2);
  }
  const auto m = RandomForest(small_forest()).fit(b.x, b.y);
  FeatureMatrix probe(1, 2);
  probe << 4.0, 6.0;
  CHECK(m->predict(probe)[0] == 2);
}

TEST_CASE("fitting is deterministic for a fixed seed") {
  const auto b = blobs(60, 3, 4, 5, 4.0);
  const auto probes = uniform_probes(300, 4, -10.0, 30.0, 6);
  const auto m1 = RandomForest(small_forest(9)).fit(b.x, b.y);
  const auto m2 = RandomForest(small_forest(9)).fit(b.x, b.y);
  CHECK(m1->serialize() == m2->serialize());
  CHECK(m1->predict_proba(probes) == m2->predict_proba(probes));
  const auto m3 = RandomForest(small_forest(10)).fit(b.x, b.y);
  CHECK(m3->serialize() != m1->serialize());
}

TEST_CASE("probability rows are distributions and predict is their argmax") {
  const auto b = blobs(80, 4, 3, 12, 5.0);
  const auto m = RandomForest(small_forest()).fit(b.x, b.y);
  const auto probes = uniform_probes(1000, 3, -10.0, 40.0, 13);
  const auto proba = m->predict_proba(probes);
  const auto pred = m->predict(probes);
  for (Eigen::Index r = 0; r < proba.rows(); ++r) {
    CHECK(proba.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(proba.row(r).minCoeff() >= 0.0);
    Eigen::Index arg = 0;
    for (Eigen::Index c = 1; c < proba.cols(); ++c) {
      if (proba(r, c) > proba(r, arg)) arg = c;
    }
    CHECK(pred[static_cast<std::size_t>(r)] == m->classes()[static_cast<std::size_t>(arg)]);
  }
}

TEST_CASE("permuting feature columns with max_features = d leaves predictions unchanged") {
  const auto b = blobs(60, 3, 4, 21, 5.0);
  const std::vector<int> perm{2, 0, 3, 1};
  FeatureMatrix xp(b.x.rows(), 4);
  for (int j = 0; j < 4; ++j) xp.col(j) = b.x.col(perm[static_cast<std::size_t>(j)]);
  const auto probes = uniform_probes(500, 4, -10.0, 30.0, 22);
  FeatureMatrix pp(probes.rows(), 4);
  for (int j = 0; j < 4; ++j) pp.col(j) = probes.col(perm[static_cast<std::size_t>(j)]);
  ForestConfig c = small_forest();
  c.max_features = 4;
  const auto m1 = RandomForest(c).fit(b.x, b.y);
  const auto m2 = RandomForest(c).fit(xp, b.y);
  CHECK(m1->predict(probes) == m2->predict(pp));
}

TEST_CASE("80/20 holdout on separable data") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  FeatureMatrix x(300, 2);
  std::vector<int> y;
  for (Eigen::Index i = 0; i < 300; ++i) {
    double a, c;
    do {
      a = u(rng);
      c = u(rng);
    } while (std::abs(a + 0.5 * c) < 0.05);  // margin around the boundary
    x.row(i) << a, c;
    y.push_back(a + 0.5 * c > 0.0 ? 1 : 0);
  }
  const FeatureMatrix train = x.topRows(240), test = x.bottomRows(60);
  const std::vector<int> ytrain(y.begin(), y.begin() + 240), ytest(y.begin() + 240, y.end());
  const auto m = RandomForest(small_forest()).fit(train, ytrain);
  CHECK(accuracy(m->predict(test), ytest) >= 0.95);
}

TEST_CASE("models survive a save and load round trip") {
  testing::TempDir dir;
  const auto b = blobs(40, 3, 3, 41, 3.0);
  auto m = RandomForest(small_forest()).fit(b.x, b.y);
  m->set_legend(testing::legend_of(3));
  m->save(dir / "m.lcrf");
  const auto back = load_model(dir / "m.lcrf");
  CHECK(back->serialize() == m->serialize());
  CHECK(back->legend() == m->legend());
  const auto probes = uniform_probes(200, 3, -5.0, 25.0, 42);
  CHECK(back->predict_proba(probes) == m->predict_proba(probes));
}

TEST_CASE("bad inputs are rejected") {
  const auto b = blobs(10, 2, 2, 51);
  const RandomForest rf(small_forest());
  FeatureMatrix nan_x = b.x;
  nan_x(3, 1) = std::nan("");
  const std::vector<std::string> ids = [] {
    std::vector<std::string> v;
    for (int i = 0; i < 20; ++i) v.push_back("row" + std::to_string(i));
    return v;
  }();
  try {
    rf.fit(nan_x, b.y, ids);
    FAIL("expected an error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("row3") != std::string::npos);
  }
  CHECK_THROWS_AS(rf.fit(b.x, std::vector<int>(5, 0)), DataError);
  CHECK_THROWS_AS(rf.fit(FeatureMatrix(0, 2), std::vector<int>{}), DataError);
  const auto m = rf.fit(b.x, b.y);
  CHECK_THROWS_AS(m->predict(FeatureMatrix::Zero(2, 3)), DataError);
  ForestConfig bad;
  bad.n_trees = 0;
  CHECK_THROWS(RandomForest{bad});
}

TEST_CASE("raster prediction reproduces training labels and keeps nodata") {
  const auto b = blobs(8, 2, 3, 61);  // 16 rows
  const auto m = RandomForest(small_forest()).fit(b.x, b.y);
  Eigen::MatrixXd px = b.x;
  RasterStack stack = testing::stack_from_pixels(4, 4, px);
  std::vector<float> data = stack.data();
  data[5] = std::nanf("");
  const RasterStack with_hole(4, 4, testing::plain_bands(3), data, stack.transform());
  const Legend legend = testing::legend_of(2);
  const ClassMap map = predict_raster(*m, with_hole, &legend);
  for (std::size_t p = 0; p < 16; ++p) {
    if (p == 5) {
      CHECK(map.classes[p] == kClassNodata);
    } else {
      CHECK(map.classes[p] == b.y[p]);
    }
  }
  const RasterStack flat(3, 3, testing::plain_bands(3), std::vector<float>(27, 10.0f), stack.transform());
  const ClassMap constant = predict_raster(*m, flat, &legend);
  CHECK(std::all_of(constant.classes.begin(), constant.classes.end(), [&](auto c) { return c == constant.classes[0]; }));
  CHECK_THROWS_AS(predict_raster(*m, testing::gaussian_stack(2, 2, 4, 1), &legend), DataError);
}

}  // TEST_SUITE
