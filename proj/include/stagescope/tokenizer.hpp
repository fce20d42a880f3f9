#pragma once

// Byte-level BPE compatible with the GPT-2 vocab.json / merges.txt pair,
// and the pre-tokenized binary path (little-endian u32 ids, no header).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace stagescope {

using TokenId = std::uint32_t;

enum class TokenSource { raw_text, pre_tokenized };

struct TokenStream {
  std::vector<TokenId> ids;
  TokenSource source = TokenSource::raw_text;
};

class BpeVocab {
 public:
  // Loads the GPT-2 two-file convention. Throws FormatError on malformed
  // files and ValidationError when ids are not dense in [0, V).
  static BpeVocab load(const std::filesystem::path& vocab_json,
                       const std::filesystem::path& merges_txt);
  // Convenience: <dir>/vocab.json + <dir>/merges.txt.
  static BpeVocab load_dir(const std::filesystem::path& dir);

  BpeVocab(std::unordered_map<std::string, TokenId> token_to_id,
           std::vector<std::pair<std::string, std::string>> merges);

  std::size_t size() const { return id_to_token_.size(); }

  TokenStream encode(std::string_view text) const;
  // Invalid UTF-8 after byte unmapping becomes U+FFFD. Throws
  // ValidationError for ids >= size().
  std::string decode(std::span<const TokenId> ids) const;
  std::string decode(const TokenStream& s) const { return decode(s.ids); }
  // Raw bytes of one token.
  std::string token_bytes(TokenId id) const;
  // Printable (byte-mapped) form as stored in vocab.json.
  const std::string& token_string(TokenId id) const;

  // Pre-split pieces of `text` under the GPT-2 pattern (exposed for tests).
  static std::vector<std::string_view> pre_split(std::string_view text);

 private:
  std::vector<TokenId> bpe_piece(std::string_view piece) const;

  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> merge_ranks_;  // "left right" -> rank
  std::vector<std::string> byte_encoder_;  // byte -> UTF-8 of its surrogate
  std::unordered_map<std::uint32_t, std::uint8_t> byte_decoder_;  // code point -> byte
};

// Reads little-endian u32 ids. Throws FormatError when the size is not a
// multiple of 4 and ValidationError for ids >= vocab_size.
TokenStream load_pretokenized(const std::filesystem::path& path, std::size_t vocab_size);
void save_pretokenized(const std::filesystem::path& path, std::span<const TokenId> ids);

// Replaces invalid UTF-8 sequences with U+FFFD.
std::string sanitize_utf8(std::string_view bytes);

}  // namespace stagescope
