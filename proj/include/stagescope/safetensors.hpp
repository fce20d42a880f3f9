#pragma once

// Named-tensor container: 8-byte little-endian header length, JSON header
// mapping names to {dtype, shape, data_offsets}, then the raw byte buffer.
// F32, F16 and BF16 tensors are read and widened to float.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace stagescope {

struct TensorData {
  std::vector<std::int64_t> shape;
  std::vector<float> values;

  std::size_t numel() const;
};

class SafetensorsFile {
 public:
  // Parses the header. Throws FormatError on malformed files.
  static SafetensorsFile open(const std::filesystem::path& path);

  bool contains(const std::string& name) const { return entries_.contains(name); }
  std::vector<std::string> names() const;
  const std::vector<std::int64_t>& shape(const std::string& name) const;
  const std::string& dtype(const std::string& name) const;
  // Throws FormatError for unknown names or unsupported dtypes.
  TensorData read(const std::string& name) const;

  const std::map<std::string, std::string>& metadata() const { return metadata_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  struct Entry {
    std::string dtype;
    std::vector<std::int64_t> shape;
    std::uint64_t begin = 0;
    std::uint64_t end = 0;
  };

  const Entry& entry(const std::string& name) const;

  std::filesystem::path path_;
  std::uint64_t data_start_ = 0;
  std::map<std::string, Entry> entries_;
  std::map<std::string, std::string> metadata_;
};

// Writes F32 tensors in lexicographic name order.
void write_safetensors(const std::filesystem::path& path,
                       const std::map<std::string, TensorData>& tensors,
                       const std::map<std::string, std::string>& metadata = {});

}  // namespace stagescope
