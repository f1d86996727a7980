#pragma once

// On-disk formats: 16-bit binary graymaps for frames, background library
// directories, dataset manifests, model files and run configuration.
//
// Frames:   P5 graymap, maxval 65535, big-endian samples, rows top first.
// Library:  <dir>/bg_NNNN.pgm + <dir>/dark_NNNN.pgm, NNNN = sequence index.
// Datasets: <dir>/manifest.json + <dir>/atoms_NNNNNN.pgm; bg/dark frames
//           stay in the library and are referenced by name and hash.
// Models:   <name>.json (spec, normalizer, provenance) + <name>.weights.bin
//           (float32 little-endian, network layer order).

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "absorb/error.hpp"
#include "absorb/imaging.hpp"
#include "absorb/ls_fit.hpp"
#include "absorb/regressor.hpp"
#include "absorb/simulator.hpp"

namespace absorb {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr int kFormatVersion = 1;

// ---------------------------------------------------------------------------
// Bytes and hashes

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) fail(Errc::io, "read failed for " + path.string());
  return ss.str();
}

inline void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(Errc::io, "write failed for " + path.string());
}

inline std::string config_hash(const json& j) { return hex64(fnv1a(j.dump())); }

// ---------------------------------------------------------------------------
// Frames

/// Raw graymap contents. Unlike Frame, any positive size is allowed.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> counts;  // row-major, top row first
};

/// Serializes counts as P5. `comment`, if given, goes into a '#' header line.
inline std::string encode_pgm(int width, int height, std::span<const std::uint16_t> counts,
                              std::string_view comment = {}) {
  if (width <= 0 || height <= 0) fail(Errc::domain, "graymap dimensions must be positive");
  if (counts.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    fail(Errc::shape, "graymap count buffer does not match its dimensions");
  }
  std::string out = "P5\n";
  if (!comment.empty()) {
    if (comment.find('\n') != std::string_view::npos) fail(Errc::domain, "graymap comment must be one line");
    out += "# ";
    out += comment;
    out += '\n';
  }
  out += std::to_string(width) + " " + std::to_string(height) + "\n65535\n";
  const std::size_t header = out.size();
  out.resize(header + 2 * counts.size());
  auto* p = reinterpret_cast<unsigned char*>(out.data() + header);
  for (std::uint16_t c : counts) {
    *p++ = static_cast<unsigned char>(c >> 8);
    *p++ = static_cast<unsigned char>(c & 0xff);
  }
  return out;
}

inline std::string encode_pgm(const Frame& f, std::string_view comment = {}) {
  return encode_pgm(f.width(), f.height(), f.counts(), comment);
}

namespace detail {

struct PgmCursor {
  std::string_view s;
  std::size_t pos = 0;
  std::string_view name;

  [[noreturn]] void bad(const std::string& what) const {
    fail(Errc::malformed_header, std::string(name) + ": " + what);
  }

  void skip_space_and_comments() {
    while (pos < s.size()) {
      const char c = s[pos];
      if (c == '#') {
        while (pos < s.size() && s[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos;
      } else {
        break;
      }
    }
  }

  long long number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos;
    long long v = 0;
    while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
      v = v * 10 + (s[pos] - '0');
      if (v > 1'000'000'000) bad(std::string(what) + " out of range");
      ++pos;
    }
    if (pos == start) bad(std::string("expected ") + what);
    return v;
  }
};

}  // namespace detail

inline GrayImage decode_pgm_image(std::string_view bytes, std::string_view name = "graymap") {
  detail::PgmCursor cur{bytes, 0, name};
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') cur.bad("missing P5 magic");
  cur.pos = 2;
  if (cur.pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[cur.pos]))) cur.bad("bad magic");
  const long long w = cur.number("width");
  const long long h = cur.number("height");
  const long long maxval = cur.number("maxval");
  if (cur.pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[cur.pos]))) {
    cur.bad("maxval must be followed by one whitespace byte");
  }
  ++cur.pos;
  if (w <= 0 || h <= 0) cur.bad("dimensions must be positive");
  if (maxval != 65535) {
    fail(Errc::bad_maxval, std::string(name) + ": maxval " + std::to_string(maxval) + ", expected 65535");
  }
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  const std::size_t have = bytes.size() - cur.pos;
  if (have < 2 * n) {
    fail(Errc::truncated_payload, std::string(name) + ": payload has " + std::to_string(have) + " bytes, expected " +
                                      std::to_string(2 * n));
  }
  GrayImage img{static_cast<int>(w), static_cast<int>(h), std::vector<std::uint16_t>(n)};
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + cur.pos);
  for (std::size_t i = 0; i < n; ++i) img.counts[i] = static_cast<std::uint16_t>((p[2 * i] << 8) | p[2 * i + 1]);
  return img;
}

inline Frame decode_pgm(std::string_view bytes, std::string_view name = "graymap") {
  GrayImage img = decode_pgm_image(bytes, name);
  return Frame(img.width, img.height, std::move(img.counts));
}

inline void write_frame(const fs::path& path, const Frame& f, std::string_view comment = {}) {
  write_file(path, encode_pgm(f, comment));
}

inline Frame read_frame(const fs::path& path) { return decode_pgm(read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// Background library directories

inline std::string library_file_name(const char* kind, int sequence) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s_%04d.pgm", kind, sequence);
  return buf;
}

struct LibraryFile {
  std::string bg, dark;            // file names within the directory
  std::string bg_hash, dark_hash;  // FNV-1a of the file bytes
};

struct LoadedLibrary {
  BackgroundLibrary library;
  std::vector<LibraryFile> files;  // parallel to library entries
};

inline LoadedLibrary load_background_library(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(Errc::io, dir.string() + " is not a directory");
  static const std::regex pattern(R"((bg|dark)_(\d{4,})\.pgm)");
  std::map<int, std::pair<std::string, std::string>> pairs;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& p : files) {
    std::smatch m;
    const std::string name = p.filename().string();
    if (!std::regex_match(name, m, pattern)) continue;
    const int seq = std::stoi(m[2].str());
    auto& slot = pairs[seq];
    (m[1] == "bg" ? slot.first : slot.second) = name;
  }
  LoadedLibrary out;
  std::vector<BackgroundEntry> entries;
  for (const auto& [seq, names] : pairs) {
    if (names.first.empty()) fail(Errc::structural, "orphan dark frame " + names.second + " has no bg partner");
    if (names.second.empty()) fail(Errc::structural, "orphan bg frame " + names.first + " has no dark partner");
    const std::string bg_bytes = read_file(dir / names.first);
    const std::string dark_bytes = read_file(dir / names.second);
    BackgroundEntry e{decode_pgm(bg_bytes, names.first), decode_pgm(dark_bytes, names.second), seq, ""};
    char stem[16];
    std::snprintf(stem, sizeof stem, "%04d", seq);
    e.name = stem;
    const Frame& ref = entries.empty() ? e.bg : entries.front().bg;
    for (const auto* f : {&e.bg, &e.dark}) {
      if (!f->same_shape(ref)) {
        fail(Errc::shape, (f == &e.bg ? names.first : names.second) + " is " + std::to_string(f->width()) + "x" +
                              std::to_string(f->height()) + ", library frames are " + std::to_string(ref.width()) +
                              "x" + std::to_string(ref.height()));
      }
    }
    out.files.push_back({names.first, names.second, hex64(fnv1a(bg_bytes)), hex64(fnv1a(dark_bytes))});
    entries.push_back(std::move(e));
  }
  if (entries.size() < 2) {
    fail(Errc::structural, dir.string() + " holds " + std::to_string(entries.size()) + " pairs, need at least 2");
  }
  out.library = BackgroundLibrary(std::move(entries));
  return out;
}

inline void save_background_library(const fs::path& dir, const BackgroundLibrary& lib,
                                    std::string_view comment = {}) {
  lib.validate();
  fs::create_directories(dir);
  for (const auto& e : lib.entries()) {
    write_frame(dir / library_file_name("bg", e.sequence), e.bg, comment);
    write_frame(dir / library_file_name("dark", e.sequence), e.dark, comment);
  }
}

// ---------------------------------------------------------------------------
// JSON helpers

inline json to_json(const GaussianParams& p) {
  json j;
  const auto a = p.to_array();
  for (std::size_t i = 0; i < a.size(); ++i) j[GaussianParams::kNames[i]] = a[i];
  return j;
}

inline GaussianParams params_from_json(const json& j) {
  std::array<double, GaussianParams::kCount> a{};
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = j.at(GaussianParams::kNames[i]).get<double>();
  return GaussianParams::from_array(a);
}

inline std::string_view to_string(RangeScale s) {
  switch (s) {
    case RangeScale::width: return "width";
    case RangeScale::height: return "height";
    case RangeScale::absolute: break;
  }
  return "absolute";
}

inline RangeScale range_scale_from(std::string_view s) {
  if (s == "width") return RangeScale::width;
  if (s == "height") return RangeScale::height;
  if (s == "absolute") return RangeScale::absolute;
  fail(Errc::config, "unknown range scale '" + std::string(s) + "'");
}

inline InputMode input_mode_from(std::string_view s) {
  if (s == "ML1" || s == "ml1") return InputMode::ml1;
  if (s == "ML3" || s == "ml3") return InputMode::ml3;
  fail(Errc::config, "unknown input mode '" + std::string(s) + "'");
}

inline std::string_view to_string(Pairing p) { return p == Pairing::subsequent ? "subsequent" : "same"; }

inline Pairing pairing_from(std::string_view s) {
  if (s == "subsequent") return Pairing::subsequent;
  if (s == "same") return Pairing::same;
  fail(Errc::config, "unknown pairing '" + std::string(s) + "'");
}

inline json to_json(const ParamRanges& r) {
  json j;
  const auto all = r.all();
  for (std::size_t i = 0; i < all.size(); ++i) {
    j[GaussianParams::kNames[i]] = {{"min", all[i]->min}, {"max", all[i]->max}, {"scale", to_string(all[i]->scale)}};
  }
  j["min_sigma_px"] = r.min_sigma_px;
  return j;
}

// ---------------------------------------------------------------------------
// Strict config reading: every key must be consumed by the reader.

class ConfigReader {
 public:
  ConfigReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(Errc::config, where() + " must be an object");
  }

  template <class T>
  void get(const char* key, T& field) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      field = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      fail(Errc::config, where(key) + " has the wrong type");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  ConfigReader child(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return ConfigReader(j_.contains(key) ? j_.at(key) : empty, where(key));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) fail(Errc::config, "unknown key " + where(k));
    }
  }

 private:
  std::string where(const std::string& key = {}) const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline ParamRanges ranges_from_json(const json& j, const std::string& path = "ranges") {
  ParamRanges r;
  ConfigReader rd(j, path);
  auto all = r.all();
  for (std::size_t i = 0; i < all.size(); ++i) {
    const char* name = GaussianParams::kNames[i];
    if (!rd.has(name)) {
      rd.child(name);
      continue;
    }
    ConfigReader c = rd.child(name);
    c.get("min", all[i]->min);
    c.get("max", all[i]->max);
    std::string scale(to_string(all[i]->scale));
    c.get("scale", scale);
    all[i]->scale = range_scale_from(scale);
    c.finish();
  }
  rd.get("min_sigma_px", r.min_sigma_px);
  rd.finish();
  r.validate();
  return r;
}

// ---------------------------------------------------------------------------
// Dataset manifests

struct DatasetManifest {
  int format_version = kFormatVersion;
  std::string config_hash;
  std::uint64_t seed = 0;
  InputMode mode = InputMode::ml1;
  Pairing pairing = Pairing::subsequent;
  ParamRanges ranges;
  std::string library_dir;  // as given when written; relative paths resolve against the manifest
  std::vector<LibraryFile> library;
  std::size_t count = 0;
  struct Shot {
    std::string atoms;
    std::uint64_t seed = 0;
    int source_bg = 0;
    int synth_bg = 0;
    GaussianParams truth;
  };
  std::vector<Shot> shots;
};

inline json generator_json(const DatasetManifest& m) {
  json lib = json::array();
  for (const auto& f : m.library) {
    lib.push_back({{"bg", f.bg}, {"dark", f.dark}, {"bg_hash", f.bg_hash}, {"dark_hash", f.dark_hash}});
  }
  return {{"seed", m.seed},
          {"mode", to_string(m.mode)},
          {"pairing", to_string(m.pairing)},
          {"count", m.count},
          {"ranges", to_json(m.ranges)},
          {"library", lib}};
}

inline json to_json(const DatasetManifest& m) {
  json j;
  j["format_version"] = m.format_version;
  j["kind"] = "dataset";
  j["config_hash"] = config_hash(generator_json(m));
  j["generator"] = generator_json(m);
  j["library_dir"] = m.library_dir;
  json shots = json::array();
  for (const auto& s : m.shots) {
    shots.push_back({{"atoms", s.atoms},
                     {"seed", s.seed},
                     {"source_bg", s.source_bg},
                     {"synth_bg", s.synth_bg},
                     {"truth", to_json(s.truth)}});
  }
  j["shots"] = shots;
  return j;
}

inline DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kFormatVersion) {
      fail(Errc::config, "unsupported dataset format version " + std::to_string(m.format_version));
    }
    if (j.at("kind").get<std::string>() != "dataset") fail(Errc::config, "manifest is not a dataset manifest");
    const json& g = j.at("generator");
    m.seed = g.at("seed").get<std::uint64_t>();
    m.mode = input_mode_from(g.at("mode").get<std::string>());
    m.pairing = pairing_from(g.at("pairing").get<std::string>());
    m.count = g.at("count").get<std::size_t>();
    m.ranges = ranges_from_json(g.at("ranges"));
    for (const auto& f : g.at("library")) {
      m.library.push_back({f.at("bg").get<std::string>(), f.at("dark").get<std::string>(),
                           f.at("bg_hash").get<std::string>(), f.at("dark_hash").get<std::string>()});
    }
    m.library_dir = j.at("library_dir").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& s : j.at("shots")) {
      m.shots.push_back({s.at("atoms").get<std::string>(), s.at("seed").get<std::uint64_t>(),
                         s.at("source_bg").get<int>(), s.at("synth_bg").get<int>(), params_from_json(s.at("truth"))});
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::config, std::string("malformed dataset manifest: ") + e.what());
  }
  if (m.config_hash != config_hash(generator_json(m))) fail(Errc::config, "dataset manifest hash mismatch");
  if (m.shots.size() != m.count) fail(Errc::config, "dataset manifest shot count mismatch");
  return m;
}

inline std::string atoms_file_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "atoms_%06zu.pgm", i);
  return buf;
}

/// Writes the atoms frames and manifest for `ds`, which must have been built
/// from `lib` (loaded from `library_dir`).
inline DatasetManifest write_dataset(const fs::path& dir, const Dataset& ds, const LoadedLibrary& lib,
                                     const std::string& library_dir) {
  DatasetManifest m;
  m.seed = ds.seed;
  m.mode = ds.mode;
  m.pairing = ds.pairing;
  m.ranges = ds.ranges;
  m.library_dir = library_dir;
  m.library = lib.files;
  m.count = ds.shots.size();
  m.config_hash = config_hash(generator_json(m));
  const std::string comment = "absorb v" + std::to_string(kFormatVersion) + " config " + m.config_hash;
  fs::create_directories(dir);
  for (std::size_t i = 0; i < ds.shots.size(); ++i) {
    const auto& s = ds.shots[i];
    m.shots.push_back({atoms_file_name(i), s.seed, s.source_bg_index, s.synth_bg_index, s.truth});
    write_frame(dir / m.shots.back().atoms, s.triple.atoms, comment);
  }
  write_file(dir / "manifest.json", to_json(m).dump(2) + "\n");
  return m;
}

inline DatasetManifest read_manifest(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    fail(Errc::config, path.string() + ": " + e.what());
  }
  return manifest_from_json(j);
}

inline fs::path resolve_library_dir(const fs::path& manifest_path, const DatasetManifest& m) {
  const fs::path p(m.library_dir);
  return p.is_absolute() ? p : manifest_path.parent_path() / p;
}

inline void check_library_matches(const DatasetManifest& m, const LoadedLibrary& lib) {
  if (lib.files.size() != m.library.size()) fail(Errc::structural, "background library size differs from manifest");
  for (std::size_t i = 0; i < lib.files.size(); ++i) {
    const auto& a = lib.files[i];
    const auto& b = m.library[i];
    if (a.bg != b.bg || a.dark != b.dark || a.bg_hash != b.bg_hash || a.dark_hash != b.dark_hash) {
      fail(Errc::structural, "background pair " + a.bg + " differs from the manifest record");
    }
  }
}

/// Rebuilds the dataset from its generator record and library; the result is
/// bit-identical to the dataset that was written.
inline Dataset regenerate_dataset(const DatasetManifest& m, const LoadedLibrary& lib) {
  check_library_matches(m, lib);
  Dataset ds = build_dataset(lib.library, m.ranges, m.count, m.mode, m.seed, m.pairing);
  for (std::size_t i = 0; i < ds.shots.size(); ++i) {
    if (!(ds.shots[i].truth == m.shots[i].truth) || ds.shots[i].seed != m.shots[i].seed) {
      fail(Errc::structural, "regenerated shot " + std::to_string(i) + " disagrees with its manifest record");
    }
  }
  return ds;
}

/// Reads a dataset from disk: atoms frames from the dataset directory, bg
/// and dark from the library.
inline Dataset load_dataset(const fs::path& manifest_path) {
  const DatasetManifest m = read_manifest(manifest_path);
  const LoadedLibrary lib = load_background_library(resolve_library_dir(manifest_path, m));
  check_library_matches(m, lib);
  Dataset ds;
  ds.mode = m.mode;
  ds.pairing = m.pairing;
  ds.seed = m.seed;
  ds.ranges = m.ranges;
  for (const auto& s : m.shots) {
    if (s.source_bg < 0 || static_cast<std::size_t>(s.source_bg) >= lib.library.size()) {
      fail(Errc::structural, "shot " + s.atoms + " references a missing background pair");
    }
    const auto& e = lib.library[static_cast<std::size_t>(s.source_bg)];
    LabeledShot shot;
    shot.triple = FrameTriple(read_frame(manifest_path.parent_path() / s.atoms), e.bg, e.dark);
    shot.truth = s.truth;
    shot.source_bg_index = s.source_bg;
    shot.synth_bg_index = s.synth_bg;
    shot.seed = s.seed;
    ds.shots.push_back(std::move(shot));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Model files

inline std::string encode_weights(std::span<const float> w) {
  std::string out(4 * w.size(), '\0');
  for (std::size_t i = 0; i < w.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(w[i]);
    for (int b = 0; b < 4; ++b) out[4 * i + b] = static_cast<char>((u >> (8 * b)) & 0xff);
  }
  return out;
}

inline AlignedVector<float> decode_weights(std::string_view bytes) {
  if (bytes.size() % 4) fail(Errc::truncated_payload, "weight blob length is not a multiple of 4");
  AlignedVector<float> w(bytes.size() / 4);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const std::uint32_t u = static_cast<std::uint32_t>(p[4 * i]) | (static_cast<std::uint32_t>(p[4 * i + 1]) << 8) |
                            (static_cast<std::uint32_t>(p[4 * i + 2]) << 16) |
                            (static_cast<std::uint32_t>(p[4 * i + 3]) << 24);
    w[i] = std::bit_cast<float>(u);
  }
  return w;
}

inline json to_json(const NetworkSpec& s) {
  return {{"input_channels", s.input_channels},
          {"input_width", s.input_width},
          {"input_height", s.input_height},
          {"conv_channels", s.conv_channels},
          {"hidden", s.hidden},
          {"outputs", NetworkSpec::kOutputs},
          {"layout", "conv3x3 stride 2 pad 1 relu per stage; flatten; dense relu; dense linear"}};
}

inline json model_json(const RegressorModel& m, const std::string& weights_file, const std::string& weights_hash) {
  json j;
  j["format_version"] = kFormatVersion;
  j["kind"] = "model";
  j["spec"] = to_json(m.spec);
  j["normalizer"] = {{"center", m.normalizer.center},
                     {"scale", m.normalizer.scale},
                     {"count_scale", m.normalizer.count_scale},
                     {"order", GaussianParams::kNames}};
  j["provenance"] = {{"dataset_id", m.provenance.dataset_id},
                     {"seed", m.provenance.seed},
                     {"epochs", m.provenance.epochs},
                     {"mode", m.provenance.mode}};
  j["weights"] = {{"file", weights_file}, {"count", m.weights.size()}, {"dtype", "float32-le"}, {"hash", weights_hash}};
  j["config_hash"] = config_hash(json{{"spec", j["spec"]}, {"normalizer", j["normalizer"]}, {"provenance", j["provenance"]}});
  return j;
}

/// Writes `path` (json) and the weight blob next to it.
inline void save_model(const fs::path& path, const RegressorModel& m) {
  m.validate();
  const std::string blob = encode_weights(m.weights);
  const std::string weights_file = path.stem().string() + ".weights.bin";
  write_file(path.parent_path() / weights_file, blob);
  write_file(path, model_json(m, weights_file, hex64(fnv1a(blob))).dump(2) + "\n");
}

inline RegressorModel load_model(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    fail(Errc::config, path.string() + ": " + e.what());
  }
  RegressorModel m;
  std::string weights_file, weights_hash;
  try {
    if (j.at("format_version").get<int>() != kFormatVersion) fail(Errc::config, "unsupported model format version");
    if (j.at("kind").get<std::string>() != "model") fail(Errc::config, path.string() + " is not a model file");
    const json& s = j.at("spec");
    m.spec.input_channels = s.at("input_channels").get<int>();
    m.spec.input_width = s.at("input_width").get<int>();
    m.spec.input_height = s.at("input_height").get<int>();
    m.spec.conv_channels = s.at("conv_channels").get<std::vector<int>>();
    m.spec.hidden = s.at("hidden").get<int>();
    const json& n = j.at("normalizer");
    m.normalizer.center = n.at("center").get<ParamVector>();
    m.normalizer.scale = n.at("scale").get<ParamVector>();
    m.normalizer.count_scale = n.at("count_scale").get<double>();
    const json& p = j.at("provenance");
    m.provenance = {p.at("dataset_id").get<std::string>(), p.at("seed").get<std::uint64_t>(),
                    p.at("epochs").get<int>(), p.at("mode").get<std::string>()};
    weights_file = j.at("weights").at("file").get<std::string>();
    weights_hash = j.at("weights").at("hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::config, std::string("malformed model file: ") + e.what());
  }
  const std::string blob = read_file(path.parent_path() / weights_file);
  if (hex64(fnv1a(blob)) != weights_hash) fail(Errc::structural, "weight blob hash does not match the model file");
  m.weights = decode_weights(blob);
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  std::uint64_t seed = 1;  // drives library, dataset and training randomness
  int threads = 1;
  int width = 64;
  int height = 64;
  ParamRanges ranges;
  // synthetic background library
  std::size_t library_size = 50;
  BackgroundSpec background{40000.0, 200.0, 100.0, 5.0, {600.0, 13.0, 0.7, 0.0}};
  double phase_drift = 0.4;
  // datasets
  std::size_t shots = 5000;
  InputMode mode = InputMode::ml1;
  Pairing pairing = Pairing::subsequent;
  // optical density guards
  double t_floor = kDefaultTFloor;
  double od_floor = kDefaultTransmissionFloor;
  FitConfig fit;
  NetworkSpec network;
  TrainConfig train;
  // benchmark
  std::size_t bench_shots = 200;
  int bench_repeats = 1;
  std::string reference_method = "2dls";

  void validate() const {
    if (threads < 1) fail(Errc::config, "threads must be >= 1");
    if (width < kMinFrameSide || height < kMinFrameSide) fail(Errc::config, "frame sides must be >= 8");
    if (library_size < 2) fail(Errc::config, "library_size must be >= 2");
    if (bench_repeats < 0) fail(Errc::config, "bench.repeats must be >= 0");
    ranges.validate();
    fit.validate();
    network.validate();
    train.validate();
  }
};

inline json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["image"] = {{"width", c.width}, {"height", c.height}};
  j["ranges"] = to_json(c.ranges);
  const auto& b = c.background;
  j["background"] = {{"count", c.library_size},
                     {"level", b.level},
                     {"noise_sd", b.noise_sd},
                     {"dark_level", b.dark_level},
                     {"dark_noise_sd", b.dark_noise_sd},
                     {"fringe",
                      {{"amplitude", b.fringe.amplitude},
                       {"period", b.fringe.period},
                       {"angle", b.fringe.angle},
                       {"phase", b.fringe.phase}}},
                     {"phase_drift", c.phase_drift}};
  j["dataset"] = {{"shots", c.shots}, {"mode", to_string(c.mode)}, {"pairing", to_string(c.pairing)}};
  j["od"] = {{"t_floor", c.t_floor}, {"floor", c.od_floor}};
  const auto& f = c.fit;
  j["fit"] = {{"max_iterations", f.max_iterations}, {"param_tolerance", f.param_tolerance},
              {"residual_tolerance", f.residual_tolerance}, {"lm_lambda0", f.lm_lambda0},
              {"lm_lambda_up", f.lm_lambda_up},         {"lm_lambda_down", f.lm_lambda_down},
              {"slice_rounds", f.slice_rounds}};
  j["network"] = {{"input_width", c.network.input_width},
                  {"input_height", c.network.input_height},
                  {"conv_channels", c.network.conv_channels},
                  {"hidden", c.network.hidden}};
  const auto& t = c.train;
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"learning_rate", t.learning_rate},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"epsilon", t.epsilon},
                {"val_fraction", t.val_fraction},
                {"cosine_decay", t.cosine_decay},
                {"final_lr_fraction", t.final_lr_fraction},
                {"augment", t.augment}};
  j["bench"] = {{"shots", c.bench_shots}, {"repeats", c.bench_repeats}, {"reference", c.reference_method}};
  return j;
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  ConfigReader rd(j, "");
  rd.get("seed", c.seed);
  rd.get("threads", c.threads);
  {
    auto r = rd.child("image");
    r.get("width", c.width);
    r.get("height", c.height);
    r.finish();
  }
  if (rd.has("ranges")) c.ranges = ranges_from_json(j.at("ranges"));
  rd.child("ranges");
  {
    auto r = rd.child("background");
    auto& b = c.background;
    r.get("count", c.library_size);
    r.get("level", b.level);
    r.get("noise_sd", b.noise_sd);
    r.get("dark_level", b.dark_level);
    r.get("dark_noise_sd", b.dark_noise_sd);
    r.get("phase_drift", c.phase_drift);
    auto fr = r.child("fringe");
    fr.get("amplitude", b.fringe.amplitude);
    fr.get("period", b.fringe.period);
    fr.get("angle", b.fringe.angle);
    fr.get("phase", b.fringe.phase);
    fr.finish();
    r.finish();
  }
  {
    auto r = rd.child("dataset");
    r.get("shots", c.shots);
    std::string mode(to_string(c.mode)), pairing(to_string(c.pairing));
    r.get("mode", mode);
    r.get("pairing", pairing);
    c.mode = input_mode_from(mode);
    c.pairing = pairing_from(pairing);
    r.finish();
  }
  {
    auto r = rd.child("od");
    r.get("t_floor", c.t_floor);
    r.get("floor", c.od_floor);
    r.finish();
  }
  {
    auto r = rd.child("fit");
    auto& f = c.fit;
    r.get("max_iterations", f.max_iterations);
    r.get("param_tolerance", f.param_tolerance);
    r.get("residual_tolerance", f.residual_tolerance);
    r.get("lm_lambda0", f.lm_lambda0);
    r.get("lm_lambda_up", f.lm_lambda_up);
    r.get("lm_lambda_down", f.lm_lambda_down);
    r.get("slice_rounds", f.slice_rounds);
    r.finish();
  }
  {
    auto r = rd.child("network");
    r.get("input_width", c.network.input_width);
    r.get("input_height", c.network.input_height);
    r.get("conv_channels", c.network.conv_channels);
    r.get("hidden", c.network.hidden);
    r.finish();
  }
  {
    auto r = rd.child("train");
    auto& t = c.train;
    r.get("epochs", t.epochs);
    r.get("batch_size", t.batch_size);
    r.get("learning_rate", t.learning_rate);
    r.get("beta1", t.beta1);
    r.get("beta2", t.beta2);
    r.get("epsilon", t.epsilon);
    r.get("val_fraction", t.val_fraction);
    r.get("cosine_decay", t.cosine_decay);
    r.get("final_lr_fraction", t.final_lr_fraction);
    r.get("augment", t.augment);
    r.finish();
  }
  {
    auto r = rd.child("bench");
    r.get("shots", c.bench_shots);
    r.get("repeats", c.bench_repeats);
    r.get("reference", c.reference_method);
    r.finish();
  }
  rd.finish();
  c.train.seed = c.seed;
  c.validate();
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    fail(Errc::config, path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace absorb
