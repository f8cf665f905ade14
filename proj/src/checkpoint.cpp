#include "avdit/cli/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace avdit::cli {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

template <typename T>
void put(std::string& out, T v) {
  v = to_little(v);
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t at) {
  T v;
  std::memcpy(&v, in.data() + at, sizeof(T));
  return to_little(v);
}

struct Entry {
  std::string name;
  std::string group;
  const Tensor<float>* tensor;
  bool trainable;
};

std::string encode(ordered_json header, const std::vector<Entry>& entries) {
  std::string payload;
  auto table = ordered_json::array();
  for (const auto& e : entries) {
    ordered_json t;
    t["name"] = e.name;
    t["group"] = e.group;
    t["shape"] = e.tensor->shape();
    t["offset"] = payload.size();
    t["trainable"] = e.trainable;
    table.push_back(std::move(t));
    for (Index i = 0; i < e.tensor->numel(); ++i) put(payload, (*e.tensor)[i]);
  }
  header["tensors"] = std::move(table);
  const std::string text = header.dump();
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  out += payload;
  return out;
}

struct Decoded {
  json header;
  std::string bytes;
  std::size_t payload_at = 0;
};

std::string read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Decoded decode(const std::string& path) {
  Decoded d;
  d.bytes = read_all(path);
  if (d.bytes.size() < 16 || std::memcmp(d.bytes.data(), kMagic, 4) != 0) throw FormatError(path + ": not a UTLK file");
  const auto version = take<std::uint32_t>(d.bytes, 4);
  if (version != kFormatVersion) throw FormatError(path + ": unsupported version " + std::to_string(version));
  const auto len = take<std::uint64_t>(d.bytes, 8);
  if (len > d.bytes.size() - 16) throw FormatError(path + ": header runs past the end of the file");
  d.header = json::parse(d.bytes.substr(16, len), nullptr, false);
  if (d.header.is_discarded() || !d.header.is_object()) throw FormatError(path + ": header is not a JSON object");
  d.payload_at = 16 + len;
  return d;
}

struct TableRow {
  std::string name;
  std::string group;
  Tensor<float> tensor;
  bool trainable;
};

std::vector<TableRow> read_table(const Decoded& d, const std::string& path) {
  if (!d.header.contains("tensors") || !d.header["tensors"].is_array()) throw FormatError(path + ": missing tensor table");
  const std::size_t payload = d.bytes.size() - d.payload_at;
  std::vector<TableRow> rows;
  for (const auto& t : d.header["tensors"]) {
    try {
      TableRow r;
      r.name = t.at("name").get<std::string>();
      r.group = t.at("group").get<std::string>();
      r.trainable = t.at("trainable").get<bool>();
      const auto shape = t.at("shape").get<std::vector<Index>>();
      const auto offset = t.at("offset").get<std::uint64_t>();
      Index n = 1;
      for (Index e : shape) {
        if (e < 0 || (e > 0 && n > static_cast<Index>(payload) / e)) throw FormatError(path + ": bad shape for " + r.name);
        n *= e;
      }
      const std::uint64_t bytes = static_cast<std::uint64_t>(n) * sizeof(float);
      if (offset % sizeof(float) || offset > payload || bytes > payload - offset) {
        throw FormatError(path + ": tensor " + r.name + " lies outside the payload");
      }
      r.tensor = Tensor<float>(shape);
      for (Index i = 0; i < n; ++i) r.tensor[i] = take<float>(d.bytes, d.payload_at + offset + i * sizeof(float));
      rows.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw FormatError(path + ": malformed tensor table (" + e.what() + ")");
    }
  }
  return rows;
}

RunConfig read_config(const Decoded& d, const std::string& path) {
  if (!d.header.contains("config")) throw FormatError(path + ": missing config");
  return parse_run_config(d.header["config"]);
}

}  // namespace

void write_file_atomic(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  ordered_json header;
  header["kind"] = "checkpoint";
  header["config"] = to_json(ckpt.config);
  std::vector<Entry> entries;
  for (const auto& e : ckpt.params) entries.push_back({e.name, "param", &e.value, e.trainable});
  if (ckpt.optimizer) {
    header["optimizer"] = {{"step", ckpt.optimizer->step}};
    for (const auto& [name, mom] : ckpt.optimizer->moments) {
      entries.push_back({name, "adam_m", &mom.m, true});
      entries.push_back({name, "adam_v", &mom.v, true});
    }
  }
  header["rng"] = {{"seed", ckpt.rng_seed}, {"step", ckpt.rng_step}};
  write_file_atomic(path, encode(std::move(header), entries));
}

Checkpoint load_checkpoint(const std::string& path) {
  const Decoded d = decode(path);
  if (d.header.value("kind", "") != "checkpoint") throw FormatError(path + ": not a checkpoint");
  Checkpoint c;
  c.config = read_config(d, path);
  auto rows = read_table(d, path);
  std::map<std::string, Moments> moments;
  for (auto& r : rows) {
    if (r.group == "param") {
      if (c.params.contains(r.name)) throw FormatError(path + ": duplicate tensor " + r.name);
      c.params.add(r.name, std::move(r.tensor), r.trainable);
    } else if (r.group == "adam_m") {
      moments[r.name].m = std::move(r.tensor);
    } else if (r.group == "adam_v") {
      moments[r.name].v = std::move(r.tensor);
    } else {
      throw FormatError(path + ": unknown tensor group " + r.group);
    }
  }
  if (d.header.contains("optimizer")) {
    OptimizerState opt;
    try {
      opt.step = d.header["optimizer"].at("step").get<Index>();
    } catch (const json::exception&) {
      throw FormatError(path + ": malformed optimizer section");
    }
    for (auto& [name, m] : moments) {
      if (!c.params.contains(name) || m.m.shape() != c.params.at(name).value.shape() ||
          m.v.shape() != m.m.shape()) {
        throw FormatError(path + ": optimizer moments for " + name + " do not match the parameters");
      }
    }
    opt.moments = std::move(moments);
    c.optimizer = std::move(opt);
  } else if (!moments.empty()) {
    throw FormatError(path + ": moments without an optimizer section");
  }
  try {
    c.rng_seed = d.header.at("rng").at("seed").get<std::uint64_t>();
    c.rng_step = d.header.at("rng").at("step").get<Index>();
  } catch (const json::exception&) {
    throw FormatError(path + ": malformed rng section");
  }
  return c;
}

void save_tensor_dump(const std::string& path, const RunConfig& config, const NamedTensors& tensors) {
  ordered_json header;
  header["kind"] = "dump";
  header["config"] = to_json(config);
  std::vector<Entry> entries;
  for (const auto& [name, t] : tensors) entries.push_back({name, "param", &t, false});
  write_file_atomic(path, encode(std::move(header), entries));
}

NamedTensors load_tensor_dump(const std::string& path) {
  const Decoded d = decode(path);
  if (d.header.value("kind", "") != "dump") throw FormatError(path + ": not a tensor dump");
  NamedTensors out;
  for (auto& r : read_table(d, path)) out.emplace_back(r.name, std::move(r.tensor));
  return out;
}

}  // namespace avdit::cli
