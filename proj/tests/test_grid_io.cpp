#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "disagg/error.hpp"
#include "disagg/grid_io.hpp"
#include "disagg/rng.hpp"
#include "support.hpp"

using namespace disagg;
using namespace disagg::grid;

namespace {

const char* kHeader =
    "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n";

Raster parse(const std::string& text) {
  std::istringstream in(text);
  return parse_ascii_grid(in);
}

std::string square_feature(const std::string& id, double response, double x0, double y0,
                           double x1, double y1) {
  std::ostringstream s;
  s << R"({"type":"Feature","properties":{"ID_2":")" << id << R"(","inc":)" << response
    << R"(},"geometry":{"type":"Polygon","coordinates":[[)"
    << "[" << x0 << "," << y0 << "],[" << x1 << "," << y0 << "],[" << x1 << "," << y1 << "],["
    << x0 << "," << y1 << "],[" << x0 << "," << y0 << "]]]}}";
  return s.str();
}

std::string collection(const std::vector<std::string>& features) {
  std::string s = R"({"type":"FeatureCollection","features":[)";
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (i) s += ",";
    s += features[i];
  }
  return s + "]}";
}

RegionSet one_region(std::vector<Ring> rings) {
  RegionSet set;
  set.regions.push_back({"A", 1.0, std::move(rings)});
  return set;
}

}  // namespace

TEST_CASE("ascii grid parses values north row first") {
  const Raster r = parse(std::string(kHeader) + "1 2\n3 4\n");
  CHECK(r.ncols == 2);
  CHECK(r.nrows == 2);
  CHECK(r.values == std::vector<double>{1, 2, 3, 4});
  CHECK(r.at(0, 1) == 2.0);
  CHECK_FALSE(r.is_nodata(0));
}

TEST_CASE("nodata sentinel is recognized") {
  const Raster r = parse(std::string(kHeader) + "1 -9999\n3 4\n");
  CHECK(r.is_nodata(r.index(0, 1)));
  CHECK_FALSE(r.is_nodata(r.index(1, 1)));
}

TEST_CASE("header keys are case-insensitive and corner values are read") {
  const Raster r = parse(
      "NCOLS 3\nNROWS 1\nXLLCORNER 10.5\nYLLCORNER -2\nCELLSIZE 0.5\nnodata_value -1\n1 2 3\n");
  CHECK(r.xll == 10.5);
  CHECK(r.yll == -2.0);
  CHECK(r.cellsize == 0.5);
  CHECK(r.nodata == -1.0);
}

TEST_CASE("value count mismatch is a parse error") {
  CHECK_THROWS_WITH_AS(parse(std::string(kHeader) + "1 2\n3\n"),
                       doctest::Contains("value count mismatch"), ParseError);
  CHECK_THROWS_WITH_AS(parse(std::string(kHeader) + "1 2\n3 4 5\n"),
                       doctest::Contains("value count mismatch"), ParseError);
}

TEST_CASE("malformed headers are rejected") {
  CHECK_THROWS_AS(parse("ncols 2\nnrows 2\n"), ParseError);
  CHECK_THROWS_AS(parse("ncols two\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n"
                        "NODATA_value -9999\n1 2\n3 4\n"),
                  ParseError);
  CHECK_THROWS_AS(parse(std::string(kHeader) + "1 x\n3 4\n"), ParseError);
}

TEST_CASE("write then parse round-trips bit-exactly") {
  RngStream rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t nr = 1 + rng.below(6), nc = 1 + rng.below(6);
    std::vector<double> v(nr * nc);
    for (auto& x : v) x = rng.normal() * std::pow(10.0, static_cast<double>(rng.below(20)) - 10.0);
    v[0] = -9999.0;
    Raster r = support::make_raster(nr, nc, v, 0.1 + rng.uniform(), rng.normal() * 100,
                                    rng.normal() * 100);
    std::ostringstream out;
    write_ascii_grid(out, r);
    const Raster back = parse(out.str());
    CHECK(back == r);
  }
}

TEST_CASE("file round trip and covariate directory order") {
  support::TempDir dir("gridio");
  const Raster a = support::make_raster(2, 2, {1, 2, 3, 4});
  const Raster b = support::make_raster(2, 2, {5, 6, 7, 8});
  write_ascii_grid(dir.path() / "zeta.asc", a);
  write_ascii_grid(dir.path() / "alpha.asc", b);
  std::ofstream(dir.path() / "readme.txt") << "ignored";
  const RasterStack stack = read_covariate_dir(dir.path());
  REQUIRE(stack.size() == 2);
  CHECK(stack.names() == std::vector<std::string>{"alpha", "zeta"});
  CHECK(stack.layer(0) == b);
  CHECK(read_ascii_grid(dir.path() / "zeta.asc") == a);
  CHECK_THROWS_AS(read_ascii_grid(dir.path() / "missing.asc"), Error);
}

TEST_CASE("raster stack rejects mismatched geometry and duplicate names") {
  RasterStack stack;
  stack.add("a", support::make_raster(2, 2, {}));
  CHECK_THROWS_AS(stack.add("a", support::make_raster(2, 2, {})), ValidationError);
  CHECK_THROWS_AS(stack.add("b", support::make_raster(3, 2, {})), ValidationError);
  stack.add("b", support::make_raster(2, 2, {}));
  CHECK(stack.select({"b", "a"}).names() == std::vector<std::string>{"b", "a"});
  CHECK_THROWS_AS((void)stack.select({"c"}), ValidationError);
}

TEST_CASE("cell centres and lookup are inverse") {
  const Raster r = support::make_raster(3, 4, {}, 2.0, 10.0, 20.0);
  const auto [x, y] = r.cell_center(0, 0);
  CHECK(x == 11.0);
  CHECK(y == 25.0);  // north row
  for (std::size_t c = 0; c < r.size(); ++c) {
    const auto [cx, cy] = r.cell_center(c);
    CHECK(r.cell_at(cx, cy) == c);
  }
  CHECK_FALSE(r.cell_at(9.0, 21.0).has_value());
}

TEST_CASE("region file: single square") {
  const RegionSet set = parse_region_file(collection({square_feature("A", 120, 0, 0, 2, 2)}),
                                          "ID_2", "inc");
  REQUIRE(set.size() == 1);
  CHECK(set.regions[0].id == "A");
  CHECK(set.regions[0].response == 120.0);
  CHECK(set.regions[0].rings.size() == 1);
}

TEST_CASE("region file: duplicate ids and missing fields") {
  CHECK_THROWS_WITH_AS(
      parse_region_file(collection({square_feature("A", 1, 0, 0, 1, 1),
                                    square_feature("A", 2, 1, 1, 2, 2)}),
                        "ID_2", "inc"),
      doctest::Contains("duplicate region id"), ParseError);
  CHECK_THROWS_WITH_AS(
      parse_region_file(collection({square_feature("A", 1, 0, 0, 1, 1)}), "ID_2", "cases"),
      doctest::Contains("cases"), ParseError);
  CHECK_THROWS_AS(parse_region_file("{\"type\":\"Feature\"}", "ID_2", "inc"), ParseError);
  CHECK_THROWS_AS(parse_region_file("not json", "ID_2", "inc"), ParseError);
}

TEST_CASE("region file: multipolygon and writer round trip") {
  const std::string mp =
      R"({"type":"FeatureCollection","features":[{"type":"Feature","properties":{"id":"m","response":3.5},)"
      R"("geometry":{"type":"MultiPolygon","coordinates":[[[[0,0],[1,0],[1,1],[0,1],[0,0]]],)"
      R"([[[2,2],[3,2],[3,3],[2,3],[2,2]]]]}}]})";
  const RegionSet set = parse_region_file(mp, "id", "response");
  REQUIRE(set.regions[0].rings.size() == 2);
  std::ostringstream out;
  write_region_file(out, set, "id", "response");
  const RegionSet back = parse_region_file(out.str(), "id", "response");
  CHECK(back.regions[0].id == "m");
  CHECK(back.regions[0].response == 3.5);
  CHECK(back.regions[0].rings == set.regions[0].rings);
}

TEST_CASE("rasterize: covering polygon assigns every pixel") {
  const Raster ref = support::make_raster(3, 3, {});
  const RegionMask mask = rasterize_regions(one_region({support::rect(-1, -1, 4, 4)}), ref);
  CHECK(mask.assigned_count() == 9);
  for (std::size_t c = 0; c < mask.size(); ++c) CHECK(mask.region_of(c) == 0u);
}

TEST_CASE("rasterize: two halves of a 4x4 grid") {
  const Raster ref = support::make_raster(4, 4, {});
  RegionSet set;
  set.regions.push_back({"W", 1, {support::rect(0, 0, 2, 4)}});
  set.regions.push_back({"E", 1, {support::rect(2, 0, 4, 4)}});
  const RegionMask mask = rasterize_regions(set, ref);
  CHECK(mask.pixel_counts() == std::vector<std::size_t>{8, 8});
  CHECK(mask.region_of(ref.index(0, 0)) == 0u);
  CHECK(mask.region_of(ref.index(0, 3)) == 1u);
}

TEST_CASE("rasterize: outside centres stay unassigned") {
  const Raster ref = support::make_raster(4, 4, {});
  const RegionMask mask = rasterize_regions(one_region({support::rect(0, 0, 1, 1)}), ref);
  CHECK(mask.assigned_count() == 1);
  CHECK(mask.region_of(ref.index(3, 0)) == 0u);  // south-west cell
  CHECK_FALSE(mask.region_of(ref.index(0, 0)).has_value());
}

TEST_CASE("rasterize: centre on an edge is inside, overlaps go to the earliest region") {
  const Raster ref = support::make_raster(2, 2, {});
  RegionSet set;
  // Right edge at x = 0.5 passes through the west column centres.
  set.regions.push_back({"A", 1, {support::rect(0, 0, 0.5, 2)}});
  set.regions.push_back({"B", 1, {support::rect(0, 0, 2, 2)}});
  const RegionMask mask = rasterize_regions(set, ref);
  CHECK(mask.pixel_counts() == std::vector<std::size_t>{2, 2});
}

TEST_CASE("rasterize: hole rings use even-odd") {
  const Raster ref = support::make_raster(3, 3, {});
  const RegionMask mask =
      rasterize_regions(one_region({support::rect(0, 0, 3, 3), support::rect(1, 1, 2, 2)}), ref);
  CHECK(mask.assigned_count() == 8);
  CHECK_FALSE(mask.region_of(ref.index(1, 1)).has_value());
}

TEST_CASE("rasterize property: reversed rings and conservation") {
  RngStream rng(99);
  const Raster ref = support::make_raster(12, 15, {}, 1.0, 0.0, 0.0);
  for (int trial = 0; trial < 30; ++trial) {
    RegionSet set;
    const std::size_t n = 1 + rng.below(5);
    for (std::size_t i = 0; i < n; ++i) {
      // Random star-ish polygon around a random centre.
      const double cx = 15.0 * rng.uniform(), cy = 12.0 * rng.uniform();
      Ring ring;
      const int k = 3 + static_cast<int>(rng.below(6));
      for (int v = 0; v < k; ++v) {
        const double a = 2.0 * 3.141592653589793 * v / k;
        const double rad = 1.0 + 4.0 * rng.uniform();
        ring.push_back({cx + rad * std::cos(a), cy + rad * std::sin(a)});
      }
      ring.push_back(ring.front());
      set.regions.push_back({"r" + std::to_string(i), 1.0, {ring}});
    }
    const RegionMask mask = rasterize_regions(set, ref);
    RegionSet reversed = set;
    for (auto& region : reversed.regions) {
      for (auto& ring : region.rings) std::reverse(ring.begin(), ring.end());
    }
    CHECK(rasterize_regions(reversed, ref) == mask);
    const auto counts = mask.pixel_counts();
    std::size_t total = 0;
    for (auto c : counts) total += c;
    CHECK(total == mask.assigned_count());
  }
}

TEST_CASE("alignment report names each mismatch") {
  const Raster base = support::make_raster(2, 2, {});
  RasterStack stack;
  stack.add("a", base);
  CHECK(check_alignment(stack, base).aligned());

  Raster half = base;
  half.cellsize = 0.5;
  auto report = check_alignment(stack, half);
  CHECK(report.mismatches == std::vector<std::string>{"cellsize"});

  Raster shifted = base;
  shifted.xll += 1.0;
  report = check_alignment(stack, shifted);
  CHECK(report.mismatches == std::vector<std::string>{"xll"});
  REQUIRE(report.details.size() == 1);
}

TEST_CASE("raster validation") {
  Raster r = support::make_raster(2, 2, {1, 2, 3});
  CHECK_THROWS_AS(r.validate(), ValidationError);
  r.values.push_back(4);
  CHECK_NOTHROW(r.validate());
  r.cellsize = 0;
  CHECK_THROWS_AS(r.validate(), ValidationError);
}
