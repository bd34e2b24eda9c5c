#include <algorithm>
#include <random>

#include "doctest.h"
#include "lcmigrate/error.hpp"
#include "lcmigrate/io_util.hpp"
#include "lcmigrate/samples.hpp"
#include "support.hpp"

using namespace lcmigrate;

namespace {

std::filesystem::path write_csv(const testing::TempDir& dir, const std::string& body,
                                const std::string& legend = R"({"0":"a","1":"b","2":"c","3":"d"})") {
  const auto csv = dir / "s.csv";
  atomic_write(csv, "id,x,y,label_t0,label_t1,change_flag\n" + body);
  atomic_write(legend_path_for(csv), legend);
  return csv;
}

}  // namespace

TEST_SUITE("samples") {

TEST_CASE("a stable row maps field by field") {
  testing::TempDir dir;
  const SampleSet s = read_samples(write_csv(dir, "p1,10.0,20.0,2,2,stable\n"));
  REQUIRE(s.size() == 1);
  const auto& p = s.points[0];
  CHECK(p.id == "p1");
  CHECK(p.x == 10.0);
  CHECK(p.y == 20.0);
  CHECK(p.label_t0 == 2);
  CHECK(*p.label_t1 == 2);
  CHECK(p.change == ChangeState::stable);
  CHECK_FALSE(p.features_t0.has_value());
}

TEST_CASE("an empty label_t1 cell is absent and unknown flags parse as unknown") {
  testing::TempDir dir;
  const SampleSet s = read_samples(write_csv(dir, "p1,1,2,3,,changed\np2,1,3,1,,maybe\n"));
  CHECK_FALSE(s.points[0].label_t1.has_value());
  CHECK(s.points[0].change == ChangeState::changed);
  CHECK(s.points[1].change == ChangeState::unknown);
}

TEST_CASE("stable with differing labels violates the sample invariant") {
  testing::TempDir dir;
  CHECK_THROWS_AS(read_samples(write_csv(dir, "p1,10.0,20.0,2,3,stable\n")), DataError);
}

TEST_CASE("duplicate ids, labels outside the legend and bad coordinates are rejected") {
  testing::TempDir dir;
  CHECK_THROWS_AS(read_samples(write_csv(dir, "p1,1,2,0,,changed\np1,3,4,1,,changed\n")), DataError);
  CHECK_THROWS_AS(read_samples(write_csv(dir, "p1,1,2,9,,changed\n")), DataError);
  CHECK_THROWS_AS(read_samples(write_csv(dir, "p1,1,2,0,7,changed\n")), DataError);
  CHECK_THROWS_AS(read_samples(write_csv(dir, "p1,east,2,0,,changed\n")), DataError);
}

TEST_CASE("round trip preserves every field including features") {
  testing::TempDir dir;
  SampleSet s;
  s.legend = testing::legend_of(3);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01;
  for (int i = 0; i < 20; ++i) {
    SamplePoint p;
    p.id = "pt" + std::to_string(i);
    p.x = n01(rng) * 1e5;
    p.y = n01(rng) * 1e5;
    p.label_t0 = i % 3;
    p.change = i % 4 == 0 ? ChangeState::changed : (i % 4 == 1 ? ChangeState::unknown : ChangeState::stable);
    if (p.change == ChangeState::stable) p.label_t1 = p.label_t0;
    if (p.change == ChangeState::changed && i % 8 == 0) p.label_t1 = (p.label_t0 + 1) % 3;
    if (i % 5 != 0) p.features_t0 = std::vector<double>{n01(rng), n01(rng) * 1e-7, 1.0 / 3.0};
    p.features_t1 = std::vector<double>{n01(rng), n01(rng)};
    s.points.push_back(p);
  }
  write_samples(s, dir / "rt.csv");
  const SampleSet back = read_samples(dir / "rt.csv");
  REQUIRE(back.size() == s.size());
  CHECK(back.legend == s.legend);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& a = s.points[i];
    const auto& b = back.points[i];
    CHECK(a.id == b.id);
    CHECK(a.x == b.x);
    CHECK(a.y == b.y);
    CHECK(a.label_t0 == b.label_t0);
    CHECK(a.label_t1 == b.label_t1);
    CHECK(a.change == b.change);
    CHECK(a.features_t0 == b.features_t0);
    CHECK(a.features_t1 == b.features_t1);
  }
}

TEST_CASE("extract_features reads the pixel containing each point") {
  // 5x4 grid, origin (100, 50), 10 m pixels, two bands.
  const GeoTransform t{100.0, 50.0, 10.0, -10.0};
  std::vector<float> data(5 * 4 * 2);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(i);
  data[7] = 7.5f;  // band 0 at pixel (2,1)
  RasterStack stack(5, 4, testing::plain_bands(2), data, t);

  SampleSet s;
  s.legend = testing::legend_of(2);
  // Exactly at the origin: the top-left corner of pixel (0,0).
  s.points.push_back({"origin", 100.0, 50.0, 0, std::nullopt, ChangeState::unknown, std::nullopt, std::nullopt});
  // Center of pixel (3,2), computed by hand: x = 100 + 3.5*10, y = 50 - 2.5*10.
  s.points.push_back({"c32", 135.0, 25.0, 1, std::nullopt, ChangeState::unknown, std::nullopt, std::nullopt});
  const auto r = extract_features(stack, s, Epoch::t0);
  REQUIRE(r.samples.size() == 2);
  CHECK(*r.samples.points[0].features_t0 == std::vector<double>{0.0, 20.0});
  const std::size_t pix = 2 * 5 + 3;
  CHECK(*r.samples.points[1].features_t0 == std::vector<double>{static_cast<double>(pix), static_cast<double>(20 + pix)});
  CHECK(r.nodata_ids.empty());
}

TEST_CASE("a single-band value at the origin pixel is read directly") {
  RasterStack stack(2, 2, testing::plain_bands(1), {7.0f, 1.0f, 2.0f, 3.0f}, testing::unit_transform());
  SampleSet s;
  s.legend = testing::legend_of(1);
  s.points.push_back({"o", 0.0, 0.0, 0, std::nullopt, ChangeState::unknown, std::nullopt, std::nullopt});
  CHECK(*extract_features(stack, s, Epoch::t1).samples.points[0].features_t1 == std::vector<double>{7.0});
}

TEST_CASE("points on nodata are excluded and counted; points outside are listed") {
  RasterStack stack(2, 1, testing::plain_bands(1), {std::nanf(""), 1.0f}, testing::unit_transform());
  SampleSet s;
  s.legend = testing::legend_of(1);
  s.points.push_back({"nd", 0.5, -0.5, 0, std::nullopt, ChangeState::unknown, std::nullopt, std::nullopt});
  s.points.push_back({"ok", 1.5, -0.5, 0, std::nullopt, ChangeState::unknown, std::nullopt, std::nullopt});
  const auto r = extract_features(stack, s, Epoch::t0);
  CHECK(r.samples.size() == 1);
  CHECK(r.nodata_ids == std::vector<std::string>{"nd"});

  s.points.push_back({"far1", 10.0, -0.5, 0, std::nullopt, ChangeState::unknown, std::nullopt, std::nullopt});
  s.points.push_back({"far2", -3.0, -0.5, 0, std::nullopt, ChangeState::unknown, std::nullopt, std::nullopt});
  try {
    extract_features(stack, s, Epoch::t0);
    FAIL("expected an error");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("far1") != std::string::npos);
    CHECK(msg.find("far2") != std::string::npos);
  }
}

TEST_CASE("extraction does not depend on point order") {
  const RasterStack stack = testing::gaussian_stack(16, 16, 3, 9);
  SampleSet s;
  s.legend = testing::legend_of(1);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 16.0);
  for (int i = 0; i < 50; ++i) {
    s.points.push_back({"p" + std::to_string(i), u(rng), -u(rng), 0, std::nullopt, ChangeState::unknown,
                        std::nullopt, std::nullopt});
  }
  SampleSet shuffled = s;
  std::shuffle(shuffled.points.begin(), shuffled.points.end(), rng);
  const auto a = extract_features(stack, s, Epoch::t0).samples;
  const auto b = extract_features(stack, shuffled, Epoch::t0).samples;
  for (const auto& p : a.points) {
    auto it = std::find_if(b.points.begin(), b.points.end(), [&](const SamplePoint& q) { return q.id == p.id; });
    REQUIRE(it != b.points.end());
    CHECK(it->features_t0 == p.features_t0);
  }
}

}  // TEST_SUITE
