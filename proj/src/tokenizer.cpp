#include "stagescope/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "stagescope/error.hpp"
#include "utf8.hpp"

namespace stagescope {

namespace {

struct CodepointRange {
  std::uint32_t first;
  std::uint32_t last;
};

#include "unicode_tables.inc"

template <std::size_t N>
bool in_ranges(const CodepointRange (&table)[N], std::uint32_t cp) {
  auto it = std::upper_bound(std::begin(table), std::end(table), cp,
                             [](std::uint32_t v, const CodepointRange& r) { return v < r.first; });
  if (it == std::begin(table)) return false;
  --it;
  return cp <= it->last;
}

enum class CharClass : std::uint8_t { letter, number, space, other };

CharClass classify(std::uint32_t cp) {
  if (cp < 0x80) {
    if ((cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z')) return CharClass::letter;
    if (cp >= '0' && cp <= '9') return CharClass::number;
  }
  if (in_ranges(kLetterRanges, cp)) return CharClass::letter;
  if (in_ranges(kNumberRanges, cp)) return CharClass::number;
  if (in_ranges(kSpaceRanges, cp)) return CharClass::space;
  return CharClass::other;
}

struct Symbol {
  std::uint32_t cp;
  std::size_t offset;  // byte offset in the source text
  CharClass cls;
};

std::vector<Symbol> decode_symbols(std::string_view text) {
  std::vector<Symbol> out;
  out.reserve(text.size());
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto d = utf8::decode_one(text, pos);
    // Invalid bytes stay in the stream as "other" so byte-level encoding
    // still covers them.
    out.push_back({d.cp, pos, d.valid ? classify(d.cp) : CharClass::other});
    pos += d.len;
  }
  return out;
}

// GPT-2 byte -> printable code point bijection.
std::vector<std::uint32_t> byte_to_codepoint() {
  std::vector<std::uint32_t> table(256, 0);
  std::vector<bool> direct(256, false);
  for (int b = '!'; b <= '~'; ++b) direct[b] = true;
  for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
  for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
  std::uint32_t next = 256;
  for (int b = 0; b < 256; ++b) table[b] = direct[b] ? static_cast<std::uint32_t>(b) : next++;
  return table;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

BpeVocab::BpeVocab(std::unordered_map<std::string, TokenId> token_to_id,
                   std::vector<std::pair<std::string, std::string>> merges)
    : token_to_id_(std::move(token_to_id)) {
  id_to_token_.resize(token_to_id_.size());
  std::vector<bool> seen(token_to_id_.size(), false);
  for (const auto& [tok, id] : token_to_id_) {
    if (id >= id_to_token_.size() || seen[id]) {
      throw ValidationError("vocab ids are not dense in [0, " +
                            std::to_string(id_to_token_.size()) + "): token '" + tok +
                            "' has id " + std::to_string(id));
    }
    seen[id] = true;
    id_to_token_[id] = tok;
  }
  int rank = 0;
  for (const auto& [a, b] : merges) {
    // First occurrence wins, as in the reference implementation.
    merge_ranks_.try_emplace(a + " " + b, rank++);
  }
  const auto table = byte_to_codepoint();
  byte_encoder_.resize(256);
  for (int b = 0; b < 256; ++b) {
    utf8::append(byte_encoder_[b], table[b]);
    byte_decoder_[table[b]] = static_cast<std::uint8_t>(b);
  }
}

BpeVocab BpeVocab::load(const std::filesystem::path& vocab_json,
                        const std::filesystem::path& merges_txt) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(vocab_json));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(vocab_json.string() + ": " + e.what());
  }
  if (!j.is_object()) throw FormatError(vocab_json.string() + ": expected a JSON object");
  std::unordered_map<std::string, TokenId> token_to_id;
  token_to_id.reserve(j.size());
  for (const auto& [tok, id] : j.items()) {
    if (!id.is_number_unsigned() || id.get<std::uint64_t>() > std::numeric_limits<TokenId>::max()) {
      throw FormatError(vocab_json.string() + ": token '" + tok + "' has a non-integer id");
    }
    token_to_id.emplace(tok, id.get<TokenId>());
  }

  std::vector<std::pair<std::string, std::string>> merges;
  std::istringstream lines(read_file(merges_txt));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.starts_with("#version"))) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size() ||
        line.find(' ', sp + 1) != std::string::npos) {
      throw FormatError(merges_txt.string() + ":" + std::to_string(lineno) +
                        ": expected two space-separated symbols");
    }
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return BpeVocab(std::move(token_to_id), std::move(merges));
}

BpeVocab BpeVocab::load_dir(const std::filesystem::path& dir) {
  return load(dir / "vocab.json", dir / "merges.txt");
}

std::vector<std::string_view> BpeVocab::pre_split(std::string_view text) {
  // 's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
  const auto sym = decode_symbols(text);
  const std::size_t n = sym.size();
  auto offset = [&](std::size_t i) { return i < n ? sym[i].offset : text.size(); };
  auto is = [&](std::size_t i, CharClass c) { return i < n && sym[i].cls == c; };

  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < n) {
    std::size_t end = i;
    if (sym[i].cp == '\'' && i + 1 < n) {
      const auto c1 = sym[i + 1].cp;
      const auto c2 = i + 2 < n ? sym[i + 2].cp : 0;
      if (c1 == 's' || c1 == 't' || c1 == 'm' || c1 == 'd') {
        end = i + 2;
      } else if ((c1 == 'r' && c2 == 'e') || (c1 == 'v' && c2 == 'e') || (c1 == 'l' && c2 == 'l')) {
        end = i + 3;
      }
    }
    if (end == i) {
      for (CharClass cls : {CharClass::letter, CharClass::number, CharClass::other}) {
        std::size_t j = i;
        if (sym[i].cp == ' ' && is(i + 1, cls)) {
          j = i + 1;
        } else if (!is(i, cls)) {
          continue;
        }
        while (is(j, cls)) ++j;
        end = j;
        break;
      }
    }
    if (end == i) {
      // Whitespace run; leave its last character to prefix the next word.
      std::size_t j = i;
      while (is(j, CharClass::space)) ++j;
      if (j < n && j - i >= 2) {
        end = j - 1;
      } else {
        end = j;
      }
    }
    out.push_back(text.substr(offset(i), offset(end) - offset(i)));
    i = end;
  }
  return out;
}

std::vector<TokenId> BpeVocab::bpe_piece(std::string_view piece) const {
  std::vector<std::string> parts;
  parts.reserve(piece.size());
  for (unsigned char b : piece) parts.push_back(byte_encoder_[b]);

  std::string key;
  while (parts.size() > 1) {
    int best_rank = std::numeric_limits<int>::max();
    std::size_t best = 0;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      key.assign(parts[i]).append(" ").append(parts[i + 1]);
      auto it = merge_ranks_.find(key);
      if (it != merge_ranks_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = i;
      }
    }
    if (best_rank == std::numeric_limits<int>::max()) break;
    const std::string left = parts[best];
    const std::string right = parts[best + 1];
    std::vector<std::string> merged;
    merged.reserve(parts.size());
    for (std::size_t i = 0; i < parts.size();) {
      if (i + 1 < parts.size() && parts[i] == left && parts[i + 1] == right) {
        merged.push_back(left + right);
        i += 2;
      } else {
        merged.push_back(std::move(parts[i]));
        ++i;
      }
    }
    parts = std::move(merged);
  }

  std::vector<TokenId> ids;
  ids.reserve(parts.size());
  for (const auto& p : parts) {
    auto it = token_to_id_.find(p);
    if (it == token_to_id_.end()) {
      throw FormatError("BPE produced symbol '" + p + "' absent from the vocab");
    }
    ids.push_back(it->second);
  }
  return ids;
}

TokenStream BpeVocab::encode(std::string_view text) const {
  TokenStream out;
  out.source = TokenSource::raw_text;
  for (auto piece : pre_split(text)) {
    auto ids = bpe_piece(piece);
    out.ids.insert(out.ids.end(), ids.begin(), ids.end());
  }
  return out;
}

std::string BpeVocab::token_bytes(TokenId id) const {
  const std::string& tok = token_string(id);
  std::string bytes;
  std::size_t pos = 0;
  while (pos < tok.size()) {
    const auto d = utf8::decode_one(tok, pos);
    auto it = byte_decoder_.find(d.cp);
    if (!d.valid || it == byte_decoder_.end()) {
      throw FormatError("vocab token " + std::to_string(id) + " is not byte-mapped");
    }
    bytes.push_back(static_cast<char>(it->second));
    pos += d.len;
  }
  return bytes;
}

const std::string& BpeVocab::token_string(TokenId id) const {
  if (id >= id_to_token_.size()) {
    throw ValidationError("token id " + std::to_string(id) + " out of range for vocab of size " +
                          std::to_string(id_to_token_.size()));
  }
  return id_to_token_[id];
}

std::string BpeVocab::decode(std::span<const TokenId> ids) const {
  std::string bytes;
  for (TokenId id : ids) bytes += token_bytes(id);
  return sanitize_utf8(bytes);
}

std::string sanitize_utf8(std::string_view bytes) {
  std::string out;
  out.reserve(bytes.size());
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto d = utf8::decode_one(bytes, pos);
    if (d.valid) {
      out.append(bytes.substr(pos, d.len));
    } else {
      utf8::append(out, utf8::kReplacement);
    }
    pos += d.len;
  }
  return out;
}

TokenStream load_pretokenized(const std::filesystem::path& path, std::size_t vocab_size) {
  const std::string raw = read_file(path);
  if (raw.size() % 4 != 0) {
    throw FormatError(path.string() + ": size " + std::to_string(raw.size()) +
                      " is not a multiple of 4 bytes");
  }
  TokenStream out;
  out.source = TokenSource::pre_tokenized;
  out.ids.resize(raw.size() / 4);
  for (std::size_t i = 0; i < out.ids.size(); ++i) {
    const auto* p = reinterpret_cast<const unsigned char*>(raw.data() + 4 * i);
    const TokenId id = static_cast<TokenId>(p[0]) | (static_cast<TokenId>(p[1]) << 8) |
                       (static_cast<TokenId>(p[2]) << 16) | (static_cast<TokenId>(p[3]) << 24);
    if (id >= vocab_size) {
      throw ValidationError(path.string() + ": token id " + std::to_string(id) + " at index " +
                            std::to_string(i) + " out of range for vocab of size " +
                            std::to_string(vocab_size));
    }
    out.ids[i] = id;
  }
  return out;
}

void save_pretokenized(const std::filesystem::path& path, std::span<const TokenId> ids) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  for (TokenId id : ids) {
    const unsigned char b[4] = {static_cast<unsigned char>(id & 0xFF),
                                static_cast<unsigned char>((id >> 8) & 0xFF),
                                static_cast<unsigned char>((id >> 16) & 0xFF),
                                static_cast<unsigned char>((id >> 24) & 0xFF)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
  if (!out) throw FormatError("write failed: " + path.string());
}

}  // namespace stagescope
