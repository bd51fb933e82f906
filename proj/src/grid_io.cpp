#include "disagg/grid_io.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cctype>
#include <cmath>
#include <limits>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "disagg/error.hpp"

namespace disagg::grid {
namespace {

using nlohmann::json;

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::optional<double> parse_double(std::string_view token) {
  if (!token.empty() && token.front() == '+') token.remove_prefix(1);
  double value = 0.0;
  const auto* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(token.data(), end, value);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return value;
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

void append_number(std::string& out, double v) {
  std::array<char, 40> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v,
                                 std::chars_format::general, 17);
  out.append(buf.data(), ptr);
}

// Edge with endpoints ordered by (y, x), so every geometric test is
// independent of ring orientation.
struct Edge {
  Point lo;
  Point hi;
};

Edge canonical(const Point& a, const Point& b) {
  if (a.y < b.y || (a.y == b.y && a.x < b.x)) return {a, b};
  return {b, a};
}

struct PreparedRegion {
  std::vector<Edge> edges;
  double xmin = 0.0, xmax = 0.0, ymin = 0.0, ymax = 0.0;
};

PreparedRegion prepare(const Region& region) {
  PreparedRegion out;
  out.xmin = out.ymin = std::numeric_limits<double>::infinity();
  out.xmax = out.ymax = -std::numeric_limits<double>::infinity();
  for (const auto& ring : region.rings) {
    for (std::size_t i = 0; i + 1 < ring.size(); ++i) {
      if (ring[i] == ring[i + 1]) continue;
      out.edges.push_back(canonical(ring[i], ring[i + 1]));
    }
    for (const auto& p : ring) {
      out.xmin = std::min(out.xmin, p.x);
      out.xmax = std::max(out.xmax, p.x);
      out.ymin = std::min(out.ymin, p.y);
      out.ymax = std::max(out.ymax, p.y);
    }
  }
  return out;
}

bool contains(const PreparedRegion& region, double px, double py) {
  bool inside = false;
  for (const auto& e : region.edges) {
    const double dx = e.hi.x - e.lo.x;
    const double dy = e.hi.y - e.lo.y;
    if (py >= e.lo.y && py <= e.hi.y && px >= std::min(e.lo.x, e.hi.x) &&
        px <= std::max(e.lo.x, e.hi.x) && dx * (py - e.lo.y) - dy * (px - e.lo.x) == 0.0) {
      return true;
    }
    if ((e.lo.y > py) != (e.hi.y > py)) {
      const double xint = e.lo.x + (py - e.lo.y) * dx / dy;
      if (px < xint) inside = !inside;
    }
  }
  return inside;
}

double number_property(const json& value, std::string_view field, std::size_t feature) {
  if (value.is_number()) return value.get<double>();
  if (value.is_string()) {
    if (auto v = parse_double(value.get<std::string>())) return *v;
  }
  throw ParseError("feature " + std::to_string(feature) + ": property '" + std::string(field) +
                   "' is not numeric");
}

std::string id_property(const json& value, std::string_view field, std::size_t feature) {
  if (value.is_string()) return value.get<std::string>();
  if (value.is_number_integer()) return std::to_string(value.get<long long>());
  if (value.is_number()) {
    std::string s;
    append_number(s, value.get<double>());
    return s;
  }
  throw ParseError("feature " + std::to_string(feature) + ": property '" + std::string(field) +
                   "' must be a string or number");
}

Ring parse_ring(const json& coords, std::size_t feature) {
  if (!coords.is_array()) {
    throw ParseError("feature " + std::to_string(feature) + ": ring is not an array");
  }
  Ring ring;
  ring.reserve(coords.size());
  for (const auto& pos : coords) {
    if (!pos.is_array() || pos.size() < 2 || !pos[0].is_number() || !pos[1].is_number()) {
      throw ParseError("feature " + std::to_string(feature) + ": invalid coordinate position");
    }
    ring.push_back({pos[0].get<double>(), pos[1].get<double>()});
  }
  return ring;
}

void append_polygon(const json& polygon, std::vector<Ring>& rings, std::size_t feature) {
  if (!polygon.is_array()) {
    throw ParseError("feature " + std::to_string(feature) + ": polygon is not an array of rings");
  }
  for (const auto& ring : polygon) rings.push_back(parse_ring(ring, feature));
}

}  // namespace

Raster Raster::filled_like(const Raster& like, double fill) {
  Raster out = like;
  out.values.assign(like.nrows * like.ncols, fill);
  return out;
}

bool Raster::is_nodata(std::size_t cell) const noexcept {
  const double v = values[cell];
  return v == nodata || !std::isfinite(v);
}

std::pair<double, double> Raster::cell_center(std::size_t row, std::size_t col) const noexcept {
  return {xll + (static_cast<double>(col) + 0.5) * cellsize,
          yll + (static_cast<double>(nrows - row) - 0.5) * cellsize};
}

std::optional<std::size_t> Raster::cell_at(double x, double y) const noexcept {
  const double fc = std::floor((x - xll) / cellsize);
  const double fr = std::floor((yll + static_cast<double>(nrows) * cellsize - y) / cellsize);
  if (!(fc >= 0.0 && fr >= 0.0) || fc >= static_cast<double>(ncols) ||
      fr >= static_cast<double>(nrows)) {
    return std::nullopt;
  }
  return index(static_cast<std::size_t>(fr), static_cast<std::size_t>(fc));
}

bool Raster::same_geometry(const Raster& o) const noexcept {
  return ncols == o.ncols && nrows == o.nrows && xll == o.xll && yll == o.yll &&
         cellsize == o.cellsize;
}

void Raster::validate() const {
  if (ncols == 0 || nrows == 0) throw ValidationError("raster must have positive ncols and nrows");
  if (!(cellsize > 0.0) || !std::isfinite(cellsize)) {
    throw ValidationError("raster cellsize must be positive");
  }
  if (values.size() != nrows * ncols) {
    throw ValidationError("raster holds " + std::to_string(values.size()) + " values, expected " +
                          std::to_string(nrows * ncols));
  }
}

void RasterStack::add(std::string name, Raster layer) {
  layer.validate();
  if (find(name)) throw ValidationError("duplicate covariate name '" + name + "'");
  if (!layers_.empty() && !layers_.front().same_geometry(layer)) {
    throw ValidationError("covariate '" + name + "' does not share the stack geometry");
  }
  names_.push_back(std::move(name));
  layers_.push_back(std::move(layer));
}

std::optional<std::size_t> RasterStack::find(std::string_view name) const noexcept {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  return std::nullopt;
}

RasterStack RasterStack::select(const std::vector<std::string>& order) const {
  RasterStack out;
  for (const auto& name : order) {
    auto idx = find(name);
    if (!idx) throw ValidationError("unknown covariate '" + name + "'");
    out.add(name, layers_[*idx]);
  }
  return out;
}

void RegionSet::validate() const {
  std::unordered_set<std::string> seen;
  for (const auto& r : regions) {
    if (!seen.insert(r.id).second) throw ValidationError("duplicate region id '" + r.id + "'");
    if (!(r.response >= 0.0) || !std::isfinite(r.response)) {
      throw ValidationError("region '" + r.id + "' has a negative or non-finite response");
    }
    for (const auto& ring : r.rings) {
      if (ring.size() < 4 || !(ring.front() == ring.back())) {
        throw ValidationError("region '" + r.id +
                              "' has a ring that is not closed or has fewer than 4 vertices");
      }
    }
  }
}

RegionMask::RegionMask(std::size_t nrows, std::size_t ncols, std::size_t n_regions)
    : nrows_(nrows), ncols_(ncols), n_regions_(n_regions), cells_(nrows * ncols, kNone) {}

void RegionMask::assign(std::size_t cell, std::optional<std::size_t> region) {
  if (region && *region >= n_regions_) throw ValidationError("region index out of range");
  cells_.at(cell) = region ? static_cast<std::int32_t>(*region) : kNone;
}

std::vector<std::size_t> RegionMask::pixel_counts() const {
  std::vector<std::size_t> counts(n_regions_, 0);
  for (auto v : cells_) {
    if (v != kNone) ++counts[static_cast<std::size_t>(v)];
  }
  return counts;
}

std::size_t RegionMask::assigned_count() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(cells_.begin(), cells_.end(), [](auto v) { return v != kNone; }));
}

Raster parse_ascii_grid(std::istream& in) {
  Raster raster;
  std::array<bool, 6> have{};
  static constexpr std::array<std::string_view, 6> kKeys = {
      "ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"};

  std::string line;
  std::size_t line_no = 0;
  std::size_t header_lines = 0;
  while (header_lines < kKeys.size()) {
    if (!std::getline(in, line)) {
      throw ParseError("unexpected end of input in header", line_no + 1);
    }
    ++line_no;
    auto tokens = split_ws(line);
    if (tokens.empty()) continue;
    if (tokens.size() != 2) throw ParseError("malformed header line", line_no);
    const std::string key = lower(tokens[0]);
    auto it = std::find(kKeys.begin(), kKeys.end(), key);
    if (it == kKeys.end()) {
      throw ParseError("malformed header key '" + std::string(tokens[0]) + "'", line_no);
    }
    const auto slot = static_cast<std::size_t>(it - kKeys.begin());
    if (have[slot]) throw ParseError("duplicate header key '" + key + "'", line_no);
    have[slot] = true;
    ++header_lines;
    auto value = parse_double(tokens[1]);
    if (!value) {
      throw ParseError("non-numeric header value '" + std::string(tokens[1]) + "'", line_no);
    }
    switch (slot) {
      case 0:
      case 1: {
        if (*value < 1.0 || std::floor(*value) != *value) {
          throw ParseError(key + " must be a positive integer", line_no);
        }
        (slot == 0 ? raster.ncols : raster.nrows) = static_cast<std::size_t>(*value);
        break;
      }
      case 2: raster.xll = *value; break;
      case 3: raster.yll = *value; break;
      case 4:
        if (!(*value > 0.0)) throw ParseError("cellsize must be positive", line_no);
        raster.cellsize = *value;
        break;
      default: raster.nodata = *value; break;
    }
  }

  const std::size_t expected = raster.nrows * raster.ncols;
  raster.values.reserve(expected);
  while (std::getline(in, line)) {
    ++line_no;
    for (auto token : split_ws(line)) {
      auto value = parse_double(token);
      if (!value) throw ParseError("non-numeric token '" + std::string(token) + "'", line_no);
      if (raster.values.size() == expected) {
        throw ParseError("value count mismatch: more than " + std::to_string(expected) + " values",
                         line_no);
      }
      raster.values.push_back(*value);
    }
  }
  if (raster.values.size() != expected) {
    throw ParseError("value count mismatch: expected " + std::to_string(expected) + ", found " +
                         std::to_string(raster.values.size()),
                     line_no);
  }
  return raster;
}

Raster read_ascii_grid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open raster '" + path.string() + "'");
  try {
    return parse_ascii_grid(in);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_ascii_grid(std::ostream& out, const Raster& raster) {
  raster.validate();
  std::string text;
  text.reserve(raster.values.size() * 12 + 128);
  auto header = [&](std::string_view key, double v) {
    text.append(key);
    text.push_back(' ');
    append_number(text, v);
    text.push_back('\n');
  };
  header("ncols", static_cast<double>(raster.ncols));
  header("nrows", static_cast<double>(raster.nrows));
  header("xllcorner", raster.xll);
  header("yllcorner", raster.yll);
  header("cellsize", raster.cellsize);
  header("NODATA_value", raster.nodata);
  for (std::size_t r = 0; r < raster.nrows; ++r) {
    for (std::size_t c = 0; c < raster.ncols; ++c) {
      if (c > 0) text.push_back(' ');
      append_number(text, raster.at(r, c));
    }
    text.push_back('\n');
  }
  out << text;
}

void write_ascii_grid(const std::filesystem::path& path, const Raster& raster) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write raster '" + path.string() + "'");
  write_ascii_grid(out, raster);
}

RasterStack read_covariate_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw ValidationError("covariate directory '" + dir.string() + "' does not exist");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && lower(entry.path().extension().string()) == ".asc") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ValidationError("no .asc covariates in '" + dir.string() + "'");
  RasterStack stack;
  for (const auto& f : files) stack.add(f.stem().string(), read_ascii_grid(f));
  return stack;
}

RegionSet parse_region_file(std::string_view text, std::string_view id_field,
                            std::string_view response_field) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("unparseable region document: ") + e.what());
  }
  if (!doc.is_object() || doc.value("type", "") != "FeatureCollection" ||
      !doc.contains("features") || !doc["features"].is_array()) {
    throw ParseError("region document must be a FeatureCollection with a features array");
  }

  RegionSet set;
  std::unordered_set<std::string> seen;
  std::size_t index = 0;
  for (const auto& feature : doc["features"]) {
    const json* props = feature.contains("properties") ? &feature["properties"] : nullptr;
    auto property = [&](std::string_view field) -> const json& {
      if (props == nullptr || !props->is_object() || !props->contains(field) ||
          (*props)[std::string(field)].is_null()) {
        throw ParseError("feature " + std::to_string(index) + " is missing property '" +
                         std::string(field) + "'");
      }
      return (*props)[std::string(field)];
    };

    Region region;
    region.id = id_property(property(id_field), id_field, index);
    region.response = number_property(property(response_field), response_field, index);
    if (!(region.response >= 0.0) || !std::isfinite(region.response)) {
      throw ParseError("feature " + std::to_string(index) + ": response '" +
                       std::string(response_field) + "' must be non-negative");
    }
    if (!seen.insert(region.id).second) {
      throw ParseError("duplicate region id '" + region.id + "'");
    }

    if (!feature.contains("geometry") || !feature["geometry"].is_object()) {
      throw ParseError("feature " + std::to_string(index) + " has no geometry");
    }
    const auto& geometry = feature["geometry"];
    const std::string type = geometry.value("type", "");
    if (!geometry.contains("coordinates")) {
      throw ParseError("feature " + std::to_string(index) + " geometry has no coordinates");
    }
    if (type == "Polygon") {
      append_polygon(geometry["coordinates"], region.rings, index);
    } else if (type == "MultiPolygon") {
      if (!geometry["coordinates"].is_array()) {
        throw ParseError("feature " + std::to_string(index) + ": invalid MultiPolygon");
      }
      for (const auto& polygon : geometry["coordinates"]) {
        append_polygon(polygon, region.rings, index);
      }
    } else {
      throw ParseError("feature " + std::to_string(index) + " has non-polygon geometry '" + type +
                       "'");
    }
    for (const auto& ring : region.rings) {
      if (ring.size() < 4 || !(ring.front() == ring.back())) {
        throw ParseError("feature " + std::to_string(index) +
                         ": ring must be closed with at least 4 vertices");
      }
    }
    set.regions.push_back(std::move(region));
    ++index;
  }
  return set;
}

RegionSet read_region_file(const std::filesystem::path& path, std::string_view id_field,
                           std::string_view response_field) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open region file '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_region_file(buffer.str(), id_field, response_field);
}

void write_region_file(std::ostream& out, const RegionSet& regions, std::string_view id_field,
                       std::string_view response_field) {
  json features = json::array();
  for (const auto& r : regions.regions) {
    json rings = json::array();
    for (const auto& ring : r.rings) {
      json coords = json::array();
      for (const auto& p : ring) coords.push_back({p.x, p.y});
      rings.push_back(std::move(coords));
    }
    json feature = {
        {"type", "Feature"},
        {"properties", {{std::string(id_field), r.id}, {std::string(response_field), r.response}}},
        {"geometry", {{"type", "Polygon"}, {"coordinates", std::move(rings)}}}};
    features.push_back(std::move(feature));
  }
  json doc = {{"type", "FeatureCollection"}, {"features", std::move(features)}};
  out << doc.dump(1) << '\n';
}

RegionMask rasterize_regions(const RegionSet& regions, const Raster& reference) {
  reference.validate();
  RegionMask mask(reference.nrows, reference.ncols, regions.size());
  const double cs = reference.cellsize;
  const double top = reference.yll + static_cast<double>(reference.nrows) * cs;

  for (std::size_t ri = 0; ri < regions.size(); ++ri) {
    const PreparedRegion region = prepare(regions.regions[ri]);
    if (region.edges.empty()) continue;

    // Candidate window from the bounding box, widened by one cell; the exact
    // centre test below decides membership.
    auto clamp_index = [](double v, std::size_t n) {
      if (v < 0.0) return std::size_t{0};
      if (v >= static_cast<double>(n)) return n;
      return static_cast<std::size_t>(v);
    };
    const std::size_t r0 = clamp_index(std::floor((top - region.ymax) / cs) - 1.0, reference.nrows);
    const std::size_t r1 = clamp_index(std::ceil((top - region.ymin) / cs) + 1.0, reference.nrows);
    const std::size_t c0 =
        clamp_index(std::floor((region.xmin - reference.xll) / cs) - 1.0, reference.ncols);
    const std::size_t c1 =
        clamp_index(std::ceil((region.xmax - reference.xll) / cs) + 1.0, reference.ncols);

    for (std::size_t r = r0; r < r1; ++r) {
      for (std::size_t c = c0; c < c1; ++c) {
        const std::size_t cell = reference.index(r, c);
        if (mask.region_of(cell)) continue;
        const auto [x, y] = reference.cell_center(r, c);
        if (x < region.xmin || x > region.xmax || y < region.ymin || y > region.ymax) continue;
        if (contains(region, x, y)) mask.assign(cell, ri);
      }
    }
  }
  return mask;
}

AlignmentReport check_alignment(const RasterStack& stack, const Raster& population) {
  AlignmentReport report;
  auto note = [&](const std::string& attr, const std::string& layer) {
    if (std::find(report.mismatches.begin(), report.mismatches.end(), attr) ==
        report.mismatches.end()) {
      report.mismatches.push_back(attr);
    }
    report.details.push_back(attr + " differs between covariate '" + layer + "' and population");
  };
  for (std::size_t i = 0; i < stack.size(); ++i) {
    const Raster& layer = stack.layer(i);
    const std::string& name = stack.names()[i];
    if (layer.ncols != population.ncols) note("ncols", name);
    if (layer.nrows != population.nrows) note("nrows", name);
    if (layer.xll != population.xll) note("xll", name);
    if (layer.yll != population.yll) note("yll", name);
    if (layer.cellsize != population.cellsize) note("cellsize", name);
  }
  return report;
}

}  // namespace disagg::grid
