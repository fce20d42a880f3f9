#include "stagescope/safetensors.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>

#include "stagescope/error.hpp"

namespace stagescope {

namespace {

std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000) << 16;
  std::uint32_t exp = (h >> 10) & 0x1F;
  std::uint32_t mant = h & 0x3FF;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: renormalize
      exp = 127 - 15 + 1;
      while ((mant & 0x400) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3FF;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  return 0;
}

}  // namespace

std::size_t TensorData::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::int64_t d) { return a * static_cast<std::size_t>(d); });
}

SafetensorsFile SafetensorsFile::open(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open weight file " + path.string());
  unsigned char len_buf[8];
  if (!in.read(reinterpret_cast<char*>(len_buf), 8)) {
    throw FormatError(path.string() + ": truncated header length");
  }
  const std::uint64_t header_len = read_u64_le(len_buf);
  const auto file_size = std::filesystem::file_size(path);
  if (header_len > file_size - 8) {
    throw FormatError(path.string() + ": header length " + std::to_string(header_len) +
                      " exceeds file size");
  }
  std::string header(header_len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_len))) {
    throw FormatError(path.string() + ": truncated header");
  }

  SafetensorsFile f;
  f.path_ = path;
  f.data_start_ = 8 + header_len;
  const std::uint64_t data_len = file_size - f.data_start_;

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": header is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw FormatError(path.string() + ": header must be a JSON object");
  for (const auto& [name, val] : j.items()) {
    if (name == "__metadata__") {
      if (val.is_object()) {
        for (const auto& [k, v] : val.items())
          if (v.is_string()) f.metadata_[k] = v.get<std::string>();
      }
      continue;
    }
    try {
      Entry e;
      e.dtype = val.at("dtype").get<std::string>();
      e.shape = val.at("shape").get<std::vector<std::int64_t>>();
      const auto offs = val.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offs.size() != 2 || offs[0] > offs[1] || offs[1] > data_len) {
        throw FormatError(path.string() + ": tensor '" + name + "' has invalid data_offsets");
      }
      e.begin = offs[0];
      e.end = offs[1];
      std::uint64_t numel = 1;
      for (auto d : e.shape) {
        if (d < 0) throw FormatError(path.string() + ": tensor '" + name + "' has a negative dim");
        numel *= static_cast<std::uint64_t>(d);
      }
      const std::size_t es = dtype_size(e.dtype);
      if (es != 0 && numel * es != e.end - e.begin) {
        throw FormatError(path.string() + ": tensor '" + name + "' byte length does not match shape");
      }
      f.entries_.emplace(name, std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(path.string() + ": tensor '" + name + "' header entry: " + ex.what());
    }
  }
  return f;
}

std::vector<std::string> SafetensorsFile::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

const SafetensorsFile::Entry& SafetensorsFile::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw FormatError(path_.string() + ": missing tensor '" + name + "'");
  }
  return it->second;
}

const std::vector<std::int64_t>& SafetensorsFile::shape(const std::string& name) const {
  return entry(name).shape;
}

const std::string& SafetensorsFile::dtype(const std::string& name) const {
  return entry(name).dtype;
}

TensorData SafetensorsFile::read(const std::string& name) const {
  const Entry& e = entry(name);
  const std::size_t es = dtype_size(e.dtype);
  if (es == 0) {
    throw FormatError(path_.string() + ": tensor '" + name + "' has unsupported dtype " + e.dtype);
  }
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw FormatError("cannot open weight file " + path_.string());
  std::vector<unsigned char> raw(e.end - e.begin);
  in.seekg(static_cast<std::streamoff>(data_start_ + e.begin));
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw FormatError(path_.string() + ": truncated data for tensor '" + name + "'");
  }

  TensorData t;
  t.shape = e.shape;
  const std::size_t n = raw.size() / es;
  t.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* p = raw.data() + i * es;
    if (e.dtype == "F32") {
      const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                                 (static_cast<std::uint32_t>(p[2]) << 16) |
                                 (static_cast<std::uint32_t>(p[3]) << 24);
      t.values[i] = std::bit_cast<float>(bits);
    } else {
      const auto h = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
      t.values[i] = e.dtype == "F16" ? half_to_float(h)
                                     : std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
    }
  }
  return t;
}

void write_safetensors(const std::filesystem::path& path,
                       const std::map<std::string, TensorData>& tensors,
                       const std::map<std::string, std::string>& metadata) {
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (t.values.size() != t.numel()) {
      throw ShapeError("tensor '" + name + "' value count does not match its shape");
    }
    const std::uint64_t bytes = t.values.size() * 4;
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string h = header.dump();
  while ((8 + h.size()) % 8 != 0) h.push_back(' ');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write weight file " + path.string());
  unsigned char len_buf[8];
  std::uint64_t len = h.size();
  for (int i = 0; i < 8; ++i) len_buf[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(len_buf), 8);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& [name, t] : tensors) {
    for (float v : t.values) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      const unsigned char b[4] = {static_cast<unsigned char>(bits & 0xFF),
                                  static_cast<unsigned char>((bits >> 8) & 0xFF),
                                  static_cast<unsigned char>((bits >> 16) & 0xFF),
                                  static_cast<unsigned char>((bits >> 24) & 0xFF)};
      out.write(reinterpret_cast<const char*>(b), 4);
    }
  }
  if (!out) throw FormatError("write failed: " + path.string());
}

}  // namespace stagescope
