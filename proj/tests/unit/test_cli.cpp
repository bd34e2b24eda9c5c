#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "lcmigrate/io_util.hpp"
#include "lcmigrate/raster.hpp"
#include "support.hpp"

using namespace lcmigrate;

TEST_SUITE("cli") {

TEST_CASE("usage errors exit with 1") {
  testing::TempDir dir;
  CHECK(testing::run_cli("frobnicate") == 1);
  CHECK(testing::run_cli("") == 1);
  CHECK(testing::run_cli("irmad --t0 a") == 1);
  CHECK(testing::run_cli_stderr("frobnicate", dir / "err.txt") == 1);
  CHECK(read_file(dir / "err.txt").find("synth") != std::string::npos);  // usage text lists subcommands
  CHECK(testing::run_cli("--help") == 0);
}

TEST_CASE("irmad on rasters of different shapes exits with 2 and names both") {
  testing::TempDir dir;
  write_raster(testing::gaussian_stack(8, 6, 3, 1), dir / "a");
  write_raster(testing::gaussian_stack(9, 6, 3, 2), dir / "b");
  const auto args = "irmad --t0 " + (dir / "a").string() + " --t1 " + (dir / "b").string() + " --out " + (dir / "z").string();
  CHECK(testing::run_cli_stderr(args, dir / "err.txt") == 2);
  const std::string err = read_file(dir / "err.txt");
  CHECK(err.find("8x6") != std::string::npos);
  CHECK(err.find("9x6") != std::string::npos);
  CHECK_FALSE(std::filesystem::exists(dir / "z.bsq"));
}

TEST_CASE("missing input files are data errors") {
  testing::TempDir dir;
  CHECK(testing::run_cli("normalize --input " + (dir / "nope").string() + " --output " + (dir / "out").string()) == 2);
}

TEST_CASE("synth is deterministic and does not touch other files") {
  testing::TempDir dir;
  CHECK(testing::run_cli("synth --preset small --seed 4 --out-dir " + (dir / "a").string()) == 0);
  CHECK(testing::run_cli("synth --preset small --seed 4 --out-dir " + (dir / "b").string()) == 0);
  for (const auto& name : {"t0.bsq", "t1.bsq", "samples.csv", "truth_change.bsq", "synth_config.json"}) {
    CHECK(read_file(dir / "a" / name) == read_file(dir / "b" / name));
  }
}

TEST_CASE("options can come from a flags file") {
  testing::TempDir dir;
  {
    std::ofstream f(dir / "flags.toml");
    f << "[synth]\npreset = \"small\"\nseed = 4\nout-dir = \"" << (dir / "c").string() << "\"\n";
  }
  CHECK(testing::run_cli("--flags-file " + (dir / "flags.toml").string() + " synth") == 0);
  CHECK(testing::run_cli("synth --preset small --seed 4 --out-dir " + (dir / "d").string()) == 0);
  CHECK(read_file(dir / "c" / "t1.bsq") == read_file(dir / "d" / "t1.bsq"));
}

TEST_CASE("the image tools chain and record a manifest") {
  testing::TempDir dir;
  REQUIRE(testing::run_cli("synth --preset small --seed 2 --out-dir " + (dir / "s").string()) == 0);
  const auto s = (dir / "s").string();
  CHECK(testing::run_cli("irmad --t0 " + s + "/t0 --t1 " + s + "/t1 --out " + s + "/z --report " + s + "/z_report.json") == 0);
  CHECK(testing::run_cli("mask --stat " + s + "/z --percentile 95 --out " + s + "/m") == 0);
  CHECK(testing::run_cli("mask --stat " + s + "/z --pr " + s + "/samples.csv --out " + s + "/m_pr") == 0);
  CHECK(testing::run_cli("normalize --input " + s + "/t1 --output " + s + "/t1n") == 0);
  CHECK(testing::run_cli("drop-bands --input " + s + "/t1 --bands 0,5 --output " + s + "/t1d") == 0);
  CHECK(read_raster(dir / "s" / "t1d").band_count() == 4);
  CHECK(testing::run_cli("composite --inputs " + s + "/t0," + s + "/t1 --output " + s + "/med") == 0);
  CHECK(testing::run_cli("migrate --experiment 5.2 --t0-raster " + s + "/t0 --t1-raster " + s + "/t1 --samples " + s +
                         "/samples.csv --mask " + s + "/m_pr --seed 1 --n-trees 10 --out-model " + s + "/m52.lcrf --out-map " +
                         s + "/map52 --out-bundle " + s + "/bundle.csv") == 0);
  CHECK(testing::run_cli("predict-raster --model " + s + "/m52.lcrf --raster " + s + "/t1 --normalize --output " + s + "/map_again") == 0);
  CHECK(read_file(dir / "s" / "map52.bsq") == read_file(dir / "s" / "map_again.bsq"));
  const auto manifest = nlohmann::json::parse(read_file(dir / "s" / "m52.lcrf.manifest.json"));
  CHECK(manifest.at("command") == "migrate");
  CHECK(manifest.at("seed") == 1);
  CHECK(manifest.at("outputs").size() >= 3);
  CHECK(manifest.at("inputs").size() >= 3);
}

TEST_CASE("reproduce writes one ranking row per experiment, deterministically") {
  testing::TempDir dir;
  const auto a = dir / "a", b = dir / "b";
  REQUIRE(testing::run_cli("reproduce --preset small --seed 7 --k 3 --out-dir " + a.string()) == 0);
  REQUIRE(testing::run_cli("reproduce --preset small --seed 7 --k 3 --out-dir " + b.string()) == 0);
  std::ifstream in(a / "ranking.csv");
  std::string line;
  std::getline(in, line);
  std::vector<std::string> experiments;
  while (std::getline(in, line)) experiments.push_back(line.substr(line.find(',') + 1, line.find(',', line.find(',') + 1) - line.find(',') - 1));
  CHECK(experiments == std::vector<std::string>{"1", "2.1", "2.2", "3", "4.1", "4.2", "5.1", "5.2"});
  CHECK(read_file(a / "ranking.csv") == read_file(b / "ranking.csv"));
  CHECK(read_file(a / "ranking.txt") == read_file(b / "ranking.txt"));
  for (const auto& entry : std::filesystem::directory_iterator(a / "models")) {
    CHECK(read_file(entry.path()) == read_file(b / "models" / entry.path().filename()));
  }
}

TEST_CASE("thread count does not change reproduce outputs") {
  testing::TempDir dir;
  const auto a = dir / "a", b = dir / "b";
  REQUIRE(testing::run_cli("--threads 1 reproduce --preset small --seed 3 --k 3 --out-dir " + a.string()) == 0);
  REQUIRE(testing::run_cli("--threads 4 reproduce --preset small --seed 3 --k 3 --out-dir " + b.string()) == 0);
  CHECK(read_file(a / "ranking.csv") == read_file(b / "ranking.csv"));
  CHECK(read_file(a / "scene" / "irmad_z.bsq") == read_file(b / "scene" / "irmad_z.bsq"));
  for (const auto& entry : std::filesystem::directory_iterator(a / "models")) {
    CHECK(read_file(entry.path()) == read_file(b / "models" / entry.path().filename()));
  }
  for (const auto& entry : std::filesystem::directory_iterator(a / "reports")) {
    CHECK(read_file(entry.path()) == read_file(b / "reports" / entry.path().filename()));
  }
}

}  // TEST_SUITE
