#pragma once

// On-disk formats.
//
// Feature file (little-endian):
//   "QATF" | u32 version = 1 | u32 T | u32 C | T*C float32, row-major
// Annotation file (JSON):
//   {"video_id": ..., "duration_seconds": ..., "segments": [{"start", "end", "label"}]}
// Split manifest (JSON): {"<class>": "train" | "val" | "test", ...}
//
// A dataset directory holds manifest.json, annotations/<id>.json and
// features/<id>.qatf.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsqat/data.hpp"
#include "fsqat/synthetic.hpp"

namespace fsqat {

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

namespace io {

static_assert(std::endian::native == std::endian::little, "feature files are read with native little-endian layout");

inline constexpr std::array<char, 4> kFeatureMagic{'Q', 'A', 'T', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

inline void save_feature_file(const std::filesystem::path& path, const Matrix& features) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(path.string() + ": cannot open for writing");
  os.write(kFeatureMagic.data(), 4);
  write_u32(os, kFeatureVersion);
  write_u32(os, static_cast<std::uint32_t>(features.rows));
  write_u32(os, static_cast<std::uint32_t>(features.cols));
  std::vector<float> buf(features.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(features.data[i]);
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!os) throw FormatError(path.string() + ": write failed");
}

inline Matrix load_feature_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(path.string() + ": cannot open");
  std::array<char, 4> magic{};
  std::uint32_t header[3] = {0, 0, 0};
  is.read(magic.data(), 4);
  is.read(reinterpret_cast<char*>(header), sizeof header);
  if (!is) throw FormatError(path.string() + ": truncated header");
  if (magic != kFeatureMagic) throw FormatError(path.string() + ": bad magic (expected QATF)");
  if (header[0] != kFeatureVersion) throw FormatError(path.string() + ": unsupported version " + std::to_string(header[0]));
  const std::size_t T = header[1], C = header[2];
  if (T == 0 || C == 0) throw FormatError(path.string() + ": empty feature matrix");
  std::vector<float> buf(T * C);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  const auto got = static_cast<std::size_t>(is.gcount());
  if (got != buf.size() * sizeof(float))
    throw FormatError(path.string() + ": truncated payload, header claims " + std::to_string(T) + "x" + std::to_string(C) + " but only " +
                      std::to_string(got / (C * sizeof(float))) + " complete rows present");
  if (is.peek() != std::ifstream::traits_type::eof()) throw FormatError(path.string() + ": trailing bytes after payload");
  Matrix m(T, C);
  for (std::size_t i = 0; i < buf.size(); ++i) m.data[i] = buf[i];
  return m;
}

inline nlohmann::json annotations_to_json(const AnnotatedVideo& v) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : v.segments) segs.push_back({{"start", s.start}, {"end", s.end}, {"label", s.label}});
  nlohmann::json j{{"video_id", v.id}, {"duration_seconds", v.duration}, {"segments", segs}};
  if (v.num_snippets() > 0) j["num_snippets"] = v.num_snippets();
  return j;
}

struct AnnotationRecord {
  AnnotatedVideo video;  // features left empty
  std::size_t num_snippets = 0;  // 0 when the file does not declare it
};

/// Video metadata from JSON. `num_snippets` is optional; when present it must
/// match the feature file.
inline AnnotationRecord annotation_record_from_json(const nlohmann::json& j, const std::string& where = "annotation") {
  AnnotationRecord r;
  AnnotatedVideo& v = r.video;
  try {
    if (j.contains("num_snippets")) r.num_snippets = j.at("num_snippets").get<std::size_t>();
    v.id = j.at("video_id").get<std::string>();
    v.duration = j.at("duration_seconds").get<double>();
    for (const auto& s : j.at("segments")) v.segments.push_back({s.at("start").get<double>(), s.at("end").get<double>(), s.at("label").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  try {
    validate_annotations(v);
  } catch (const DataError& e) {
    throw FormatError(where + ": " + e.what());
  }
  return r;
}

inline AnnotatedVideo annotations_from_json(const nlohmann::json& j, const std::string& where = "annotation") {
  return annotation_record_from_json(j, where).video;
}

inline void save_annotations(const std::filesystem::path& path, const AnnotatedVideo& v) {
  std::ofstream os(path);
  if (!os) throw FormatError(path.string() + ": cannot open for writing");
  os << annotations_to_json(v).dump(2) << "\n";
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError(path.string() + ": cannot open");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline AnnotatedVideo load_annotations(const std::filesystem::path& path) { return annotations_from_json(read_json(path), path.string()); }

using SplitManifest = std::map<std::string, Split>;

inline SplitManifest load_manifest(const std::filesystem::path& path) {
  SplitManifest m;
  const auto j = read_json(path);
  if (!j.is_object()) throw FormatError(path.string() + ": manifest must be an object of class -> split");
  for (const auto& [k, v] : j.items()) {
    if (!v.is_string()) throw FormatError(path.string() + ": split of '" + k + "' must be a string");
    try {
      m[k] = parse_split(v.get<std::string>());
    } catch (const DataError& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  return m;
}

inline void save_manifest(const std::filesystem::path& path, const SplitManifest& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : m) j[k] = to_string(v);
  std::ofstream os(path);
  if (!os) throw FormatError(path.string() + ": cannot open for writing");
  os << j.dump(2) << "\n";
}

/// Loads one video: annotations plus features, cross-checked.
inline AnnotatedVideo load_video(const std::filesystem::path& annotation_path, const std::filesystem::path& feature_path,
                                 std::size_t expected_snippets = 0) {
  AnnotationRecord rec = annotation_record_from_json(read_json(annotation_path), annotation_path.string());
  AnnotatedVideo v = std::move(rec.video);
  v.features = load_feature_file(feature_path);
  if (rec.num_snippets != 0 && rec.num_snippets != v.features.rows)
    throw FormatError(annotation_path.string() + ": declares " + std::to_string(rec.num_snippets) + " snippets but " +
                      feature_path.string() + " holds " + std::to_string(v.features.rows));
  if (expected_snippets != 0 && v.features.rows != expected_snippets)
    throw FormatError(feature_path.string() + ": " + std::to_string(v.features.rows) + " snippets, profile expects " +
                      std::to_string(expected_snippets));
  return v;
}

struct Dataset {
  SplitManifest manifest;
  std::vector<VideoPtr> videos;

  std::set<std::string> classes(Split s) const {
    std::set<std::string> out;
    for (const auto& [k, v] : manifest)
      if (v == s) out.insert(k);
    return out;
  }

  /// Videos indexed under the classes of one split only.
  VideoPool pool(Split s) const {
    VideoPool p;
    const auto allowed = classes(s);
    if (allowed.empty()) return p;
    for (const auto& v : videos) p.add(v, allowed);
    return p;
  }
};

inline Dataset load_dataset(const std::filesystem::path& dir, std::size_t expected_snippets = 0) {
  Dataset ds;
  ds.manifest = load_manifest(dir / "manifest.json");
  const auto ann_dir = dir / "annotations";
  if (!std::filesystem::is_directory(ann_dir)) throw FormatError(ann_dir.string() + ": missing annotations directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(ann_dir))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::size_t dim = 0;
  for (const auto& f : files) {
    AnnotatedVideo meta = load_annotations(f);
    auto v = load_video(f, dir / "features" / (meta.id + ".qatf"), expected_snippets);
    if (dim == 0) dim = v.dim();
    if (v.dim() != dim) throw FormatError(f.string() + ": embedding dim " + std::to_string(v.dim()) + " differs from " + std::to_string(dim));
    ds.videos.push_back(std::make_shared<const AnnotatedVideo>(std::move(v)));
  }
  return ds;
}

/// Writes a synthetic world in dataset-directory form.
inline std::size_t write_synthetic_dataset(const SyntheticWorld& world, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "annotations");
  std::filesystem::create_directories(dir / "features");
  save_manifest(dir / "manifest.json", SplitManifest(world.splits.begin(), world.splits.end()));
  std::size_t n = 0;
  for (Split s : {Split::train, Split::val, Split::test}) {
    VideoPool pool = make_pool(world, s);
    for (const auto& [_, vids] : pool.classes()) {
      for (const auto& v : vids) {
        save_annotations(dir / "annotations" / (v->id + ".json"), *v);
        save_feature_file(dir / "features" / (v->id + ".qatf"), v->features);
        ++n;
      }
    }
  }
  return n;
}

}  // namespace io
}  // namespace fsqat
