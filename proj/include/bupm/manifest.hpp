#pragma once

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bupm/image.hpp"
#include "bupm/rng.hpp"
#include "json.hpp"

namespace bupm {

struct GpsPoint {
  double lat = 0.0;
  double lon = 0.0;
};

inline void validate_gps(const GpsPoint& p) {
  if (!(p.lat >= -90.0 && p.lat <= 90.0) || !(p.lon >= -180.0 && p.lon <= 180.0)) {
    throw std::invalid_argument("gps: coordinates out of range (lat " + std::to_string(p.lat) +
                                ", lon " + std::to_string(p.lon) + ")");
  }
}

// Haversine great-circle distance in kilometers.
inline double gps_distance_km(const GpsPoint& a, const GpsPoint& b) {
  validate_gps(a);
  validate_gps(b);
  constexpr double kEarthRadiusKm = 6371.0;
  constexpr double kDegToRad = 3.14159265358979323846 / 180.0;
  const double lat1 = a.lat * kDegToRad, lat2 = b.lat * kDegToRad;
  const double dlat = (b.lat - a.lat) * kDegToRad;
  const double dlon = (b.lon - a.lon) * kDegToRad;
  const double s1 = std::sin(dlat / 2.0), s2 = std::sin(dlon / 2.0);
  const double h = s1 * s1 + std::cos(lat1) * std::cos(lat2) * s2 * s2;
  return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(h)));
}

struct ManifestRecord {
  std::string query_path;
  std::string ref_path;
  double lat = 0.0;
  double lon = 0.0;
  int label = 0;  // 1: query taken at the claimed location, 0: mismatch
  std::string split;

  GpsPoint gps() const { return {lat, lon}; }
};

struct Manifest {
  std::vector<ManifestRecord> records;
};

namespace detail {

constexpr const char* kManifestFormat = "bupm-manifest";
constexpr int kManifestVersion = 1;

inline void validate_record(const ManifestRecord& r, const std::string& where) {
  validate_gps(r.gps());
  if (r.label != 0 && r.label != 1) {
    throw DecodeError(where, "label must be 0 or 1");
  }
  if (r.split != "train" && r.split != "val" && r.split != "test") {
    throw DecodeError(where, "split must be train, val, or test");
  }
}

}  // namespace detail

// One record per line; the first line carries the format name and version.
inline void save_manifest(const Manifest& manifest, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DecodeError(path, "cannot open for writing");
  nlohmann::json header = {{"format", detail::kManifestFormat},
                           {"version", detail::kManifestVersion}};
  out << header.dump() << "\n";
  for (const ManifestRecord& r : manifest.records) {
    detail::validate_record(r, path);
    nlohmann::json line = {{"query_path", r.query_path}, {"ref_path", r.ref_path},
                           {"lat", r.lat},               {"lon", r.lon},
                           {"label", r.label},           {"split", r.split}};
    out << line.dump() << "\n";
  }
  if (!out) throw DecodeError(path, "write failed");
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DecodeError(path, "cannot open for reading");
  std::string line;
  if (!std::getline(in, line)) throw DecodeError(path, "empty file, missing header line");
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != detail::kManifestFormat) {
    throw DecodeError(path, "missing manifest header line");
  }
  if (header.value("version", -1) != detail::kManifestVersion) {
    throw DecodeError(path, "unsupported manifest version");
  }
  Manifest manifest;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw DecodeError(path, "line " + std::to_string(line_no) + ": malformed record");
    }
    ManifestRecord r;
    try {
      r.query_path = j.at("query_path").get<std::string>();
      r.ref_path = j.at("ref_path").get<std::string>();
      r.lat = j.at("lat").get<double>();
      r.lon = j.at("lon").get<double>();
      r.label = j.at("label").get<int>();
      r.split = j.at("split").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DecodeError(path, "line " + std::to_string(line_no) + ": " + e.what());
    }
    detail::validate_record(r, path + ": line " + std::to_string(line_no));
    manifest.records.push_back(std::move(r));
  }
  return manifest;
}

// Pairs each positive's query with another record's reference located at
// least min_km away, claiming that reference's location. Seed-deterministic:
// a shuffled assignment repaired by swaps until the distance floor holds.
inline std::vector<ManifestRecord> build_negative_manifest(
    const std::vector<ManifestRecord>& positives, double min_km, Rng& rng) {
  const std::size_t n = positives.size();
  if (n < 2) throw std::invalid_argument("negative pairing needs at least 2 positives");
  for (const ManifestRecord& r : positives) validate_gps(r.gps());

  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  rng.shuffle(perm);

  auto ok = [&](std::size_t q, std::size_t ref) {
    return gps_distance_km(positives[q].gps(), positives[ref].gps()) >= min_km;
  };

  for (std::size_t pass = 0; pass <= n; ++pass) {
    bool dirty = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (ok(i, perm[i])) continue;
      bool fixed = false;
      for (std::size_t step = 1; step < n; ++step) {
        const std::size_t j = (i + step) % n;
        if (ok(i, perm[j]) && ok(j, perm[i])) {
          std::swap(perm[i], perm[j]);
          fixed = true;
          break;
        }
      }
      if (!fixed) {
        // fall back to any donor that at least fixes this slot
        for (std::size_t step = 1; step < n && !fixed; ++step) {
          const std::size_t j = (i + step) % n;
          if (ok(i, perm[j])) {
            std::swap(perm[i], perm[j]);
            fixed = true;
            dirty = true;
          }
        }
      }
      if (!fixed) {
        throw std::invalid_argument(
            "negative pairing infeasible: no reference at least " + std::to_string(min_km) +
            " km from query " + positives[i].query_path);
      }
    }
    if (!dirty) break;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!ok(i, perm[i])) {
      throw std::invalid_argument("negative pairing infeasible under the " +
                                  std::to_string(min_km) + " km floor");
    }
  }

  std::vector<ManifestRecord> negatives(n);
  for (std::size_t i = 0; i < n; ++i) {
    ManifestRecord r;
    r.query_path = positives[i].query_path;
    r.ref_path = positives[perm[i]].ref_path;
    r.lat = positives[perm[i]].lat;
    r.lon = positives[perm[i]].lon;
    r.label = 0;
    r.split = positives[i].split;
    negatives[i] = std::move(r);
  }
  return negatives;
}

}  // namespace bupm
