#pragma once

#include "latentlm/common.hpp"

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace latentlm {

namespace fs = std::filesystem;
using nlohmann::json;

// --------------------------------------------------------------------------
// Atomic file output: write to a sibling temp file, then rename.
// --------------------------------------------------------------------------

inline void atomic_write(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing file: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline std::uint64_t file_hash(const fs::path& path) {
  return fnv1a64(read_file(path));
}

// --------------------------------------------------------------------------
// Tensor container: one line of JSON (config + manifest), then a raw
// little-endian float blob with tensors laid out in manifest order.
// --------------------------------------------------------------------------

struct TensorEntry {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<double> data;  // held in f64; written per file precision
};

struct TensorFile {
  json config;                      // arbitrary metadata for the artifact
  std::string precision = "f64";    // "f32" or "f64"
  std::vector<TensorEntry> tensors;

  const TensorEntry& find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw std::runtime_error("tensor not found: " + name);
  }
};

inline std::size_t element_size(const std::string& precision) {
  if (precision == "f32") return 4;
  if (precision == "f64") return 8;
  throw std::runtime_error("unknown precision: " + precision);
}

inline std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

inline void save_tensors(const fs::path& path, const TensorFile& tf) {
  const std::size_t esz = element_size(tf.precision);
  json manifest = json::array();
  std::int64_t offset = 0;
  for (const auto& t : tf.tensors) {
    const std::int64_t numel = shape_numel(t.shape);
    if (numel != static_cast<std::int64_t>(t.data.size()))
      throw std::runtime_error("tensor shape/data mismatch: " + t.name);
    manifest.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += numel * static_cast<std::int64_t>(esz);
  }
  json header = {{"format", "latentlm-tensors"},
                 {"format_version", kFormatVersion},
                 {"precision", tf.precision},
                 {"blob_bytes", offset},
                 {"config", tf.config},
                 {"manifest", manifest}};
  std::string bytes = header.dump();
  bytes += '\n';
  for (const auto& t : tf.tensors) {
    if (tf.precision == "f32") {
      for (double v : t.data) {
        const float f = static_cast<float>(v);
        bytes.append(reinterpret_cast<const char*>(&f), 4);
      }
    } else {
      bytes.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * 8);
    }
  }
  atomic_write(path, bytes);
}

inline TensorFile load_tensors(const fs::path& path) {
  const std::string bytes = read_file(path);
  const std::size_t nl = bytes.find('\n');
  if (nl == std::string::npos) throw std::runtime_error("tensor file: missing header terminator");
  json header;
  try {
    header = json::parse(bytes.substr(0, nl));
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("tensor file: corrupt header: ") + e.what());
  }
  if (header.value("format", "") != "latentlm-tensors")
    throw std::runtime_error("tensor file: bad magic");
  if (header.value("format_version", -1) != kFormatVersion)
    throw std::runtime_error("tensor file: unsupported format version");
  TensorFile tf;
  tf.precision = header.at("precision").get<std::string>();
  tf.config = header.value("config", json::object());
  const std::size_t esz = element_size(tf.precision);
  const char* blob = bytes.data() + nl + 1;
  const std::int64_t blob_bytes = static_cast<std::int64_t>(bytes.size() - nl - 1);
  if (blob_bytes != header.at("blob_bytes").get<std::int64_t>())
    throw std::runtime_error("tensor file: blob length mismatch");
  std::int64_t expected_offset = 0;
  for (const auto& m : header.at("manifest")) {
    TensorEntry t;
    t.name = m.at("name").get<std::string>();
    t.shape = m.at("shape").get<std::vector<std::int64_t>>();
    const std::int64_t offset = m.at("offset").get<std::int64_t>();
    if (offset != expected_offset) throw std::runtime_error("tensor file: manifest offsets not contiguous");
    const std::int64_t numel = shape_numel(t.shape);
    const std::int64_t end = offset + numel * static_cast<std::int64_t>(esz);
    if (end > blob_bytes) throw std::runtime_error("tensor file: truncated blob for " + t.name);
    t.data.resize(static_cast<std::size_t>(numel));
    if (tf.precision == "f32") {
      for (std::int64_t i = 0; i < numel; ++i) {
        float f;
        std::memcpy(&f, blob + offset + i * 4, 4);
        t.data[static_cast<std::size_t>(i)] = static_cast<double>(f);
      }
    } else {
      std::memcpy(t.data.data(), blob + offset, static_cast<std::size_t>(numel) * 8);
    }
    expected_offset = end;
    tf.tensors.push_back(std::move(t));
  }
  if (expected_offset != blob_bytes) throw std::runtime_error("tensor file: trailing bytes after manifest");
  return tf;
}

// --------------------------------------------------------------------------
// JSONL records.
// --------------------------------------------------------------------------

inline std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing file: " + path.string());
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(json::parse(line));
  }
  return out;
}

inline std::string jsonl_dump(const std::vector<json>& records) {
  std::string out;
  for (const auto& r : records) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

// Appends a single record; used for resumable runs.
inline void append_jsonl(const fs::path& path, const json& record) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open for append: " + path.string());
  out << record.dump() << '\n';
  if (!out) throw std::runtime_error("append failed: " + path.string());
}

// --------------------------------------------------------------------------
// Flat INI-style config: [section] headers, key = value lines, '#' comments.
// --------------------------------------------------------------------------

class IniConfig {
 public:
  IniConfig() = default;

  static IniConfig parse(const std::string& text) {
    IniConfig cfg;
    std::string section;
    std::size_t pos = 0, line_no = 0;
    while (pos <= text.size()) {
      const std::size_t nl = text.find('\n', pos);
      std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
      pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
      ++line_no;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw std::runtime_error("config line " + std::to_string(line_no) + ": unterminated section");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos) throw std::runtime_error("config line " + std::to_string(line_no) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw std::runtime_error("config line " + std::to_string(line_no) + ": empty key");
      cfg.values_[section + "." + key] = value;
    }
    return cfg;
  }

  static IniConfig load(const fs::path& path) { return parse(read_file(path)); }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_str(const std::string& key, std::optional<std::string> fallback = {}) const {
    auto it = values_.find(key);
    if (it != values_.end()) return it->second;
    if (fallback) return *fallback;
    throw std::runtime_error("config: missing key '" + key + "'");
  }

  long get_int(const std::string& key, std::optional<long> fallback = {}) const {
    auto it = values_.find(key);
    if (it == values_.end()) {
      if (fallback) return *fallback;
      throw std::runtime_error("config: missing key '" + key + "'");
    }
    return std::stol(it->second);
  }

  double get_double(const std::string& key, std::optional<double> fallback = {}) const {
    auto it = values_.find(key);
    if (it == values_.end()) {
      if (fallback) return *fallback;
      throw std::runtime_error("config: missing key '" + key + "'");
    }
    return std::stod(it->second);
  }

  bool get_bool(const std::string& key, std::optional<bool> fallback = {}) const {
    auto it = values_.find(key);
    if (it == values_.end()) {
      if (fallback) return *fallback;
      throw std::runtime_error("config: missing key '" + key + "'");
    }
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw std::runtime_error("config: key '" + key + "' is not a boolean: " + v);
  }

  std::vector<std::string> get_list(const std::string& key, std::optional<std::string> fallback = {}) const {
    const std::string raw = get_str(key, std::move(fallback));
    std::vector<std::string> out;
    std::size_t p = 0;
    while (p <= raw.size()) {
      const std::size_t c = raw.find(',', p);
      std::string item = trim(raw.substr(p, c == std::string::npos ? std::string::npos : c - p));
      if (!item.empty()) out.push_back(item);
      if (c == std::string::npos) break;
      p = c + 1;
    }
    return out;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace latentlm
