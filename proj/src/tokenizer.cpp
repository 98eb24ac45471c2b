#include "wilke/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace wilke {

namespace {

std::string utf8_encode(unsigned cp) {
  std::string out;
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return out;
}

/// Splits a UTF-8 string into code-point substrings.
std::vector<std::string> utf8_chars(const std::string& s) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    const std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : 4;
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

bool is_letter(unsigned char c) { return std::isalpha(c) || c >= 0x80; }
bool is_digit(unsigned char c) { return std::isdigit(c); }
bool is_space(unsigned char c) { return std::isspace(c); }

}  // namespace

const std::vector<std::string>& byte_to_unicode() {
  static const std::vector<std::string> table = [] {
    std::vector<int> bs;
    for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
    for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
    for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
    std::vector<unsigned> cs(bs.begin(), bs.end());
    unsigned n = 0;
    for (int b = 0; b < 256; ++b) {
      if (std::find(bs.begin(), bs.end(), b) == bs.end()) {
        bs.push_back(b);
        cs.push_back(256 + n++);
      }
    }
    std::vector<std::string> t(256);
    for (std::size_t i = 0; i < bs.size(); ++i) t[bs[i]] = utf8_encode(cs[i]);
    return t;
  }();
  return table;
}

Tokenizer::Tokenizer(std::unordered_map<std::string, Token> vocab,
                     std::vector<std::pair<std::string, std::string>> merges)
    : bpe_(true), vocab_(std::move(vocab)) {
  Token max_id = -1;
  for (const auto& [tok, id] : vocab_) max_id = std::max(max_id, id);
  id_to_token_.assign(static_cast<std::size_t>(max_id + 1), std::string());
  for (const auto& [tok, id] : vocab_) id_to_token_[id] = tok;
  for (std::size_t r = 0; r < merges.size(); ++r) ranks_.emplace(merges[r], static_cast<int>(r));
}

Tokenizer Tokenizer::from_files(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) {
  std::ifstream vin(vocab_json);
  if (!vin) throw ValidationError("tokenizer: bpe mode requires vocab file '" + vocab_json.string() + "'");
  std::ifstream min(merges_txt);
  if (!min) throw ValidationError("tokenizer: bpe mode requires merges file '" + merges_txt.string() + "'");
  nlohmann::json j;
  try {
    vin >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("tokenizer: vocab is not valid JSON: ") + e.what());
  }
  std::unordered_map<std::string, Token> vocab;
  for (const auto& [k, v] : j.items()) vocab.emplace(k, v.get<Token>());
  std::vector<std::pair<std::string, std::string>> merges;
  std::string line;
  while (std::getline(min, line)) {
    if (line.empty() || line.rfind("#version", 0) == 0) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos) throw FormatError("tokenizer: malformed merge line '" + line + "'");
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return Tokenizer(std::move(vocab), std::move(merges));
}

std::vector<std::pair<std::string, std::string>> Tokenizer::merges() const {
  std::vector<std::pair<std::string, std::string>> out(ranks_.size());
  for (const auto& [pair, rank] : ranks_) out[static_cast<std::size_t>(rank)] = pair;
  return out;
}

void Tokenizer::save(const std::filesystem::path& dir) const {
  if (!bpe_) throw ValidationError("tokenizer: byte mode has no vocabulary files");
  std::filesystem::create_directories(dir);
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t id = 0; id < id_to_token_.size(); ++id) j[id_to_token_[id]] = id;
  std::ofstream vout(dir / "vocab.json");
  vout << j.dump() << '\n';
  std::ofstream mout(dir / "merges.txt");
  mout << "#version: 0.2\n";
  for (const auto& [a, b] : merges()) mout << a << ' ' << b << '\n';
  if (!vout || !mout) throw Error("tokenizer: cannot write vocabulary into '" + dir.string() + "'");
}

int Tokenizer::vocab_size() const { return bpe_ ? static_cast<int>(id_to_token_.size()) : 256; }

std::vector<std::string> Tokenizer::pretokenize(const std::string& text) {
  // Mirrors 's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
  // with every non-ASCII byte treated as a letter.
  std::vector<std::string> out;
  const std::size_t n = text.size();
  std::size_t i = 0;
  auto uc = [&](std::size_t k) { return static_cast<unsigned char>(text[k]); };
  while (i < n) {
    if (text[i] == '\'') {
      bool matched = false;
      for (const char* suf : {"s", "t", "re", "ve", "m", "ll", "d"}) {
        const std::size_t len = std::strlen(suf);
        if (text.compare(i + 1, len, suf) == 0) {
          out.push_back(text.substr(i, len + 1));
          i += len + 1;
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    std::size_t j = i;
    if (text[j] == ' ' && j + 1 < n && !is_space(uc(j + 1))) ++j;
    if (j < n && is_letter(uc(j))) {
      while (j < n && is_letter(uc(j))) ++j;
    } else if (j < n && is_digit(uc(j))) {
      while (j < n && is_digit(uc(j))) ++j;
    } else if (j < n && !is_space(uc(j))) {
      while (j < n && !is_space(uc(j)) && !is_letter(uc(j)) && !is_digit(uc(j))) ++j;
    } else {
      // Whitespace run; leave the last space for the following word.
      j = i;
      while (j < n && is_space(uc(j))) ++j;
      if (j < n && j - i > 1) --j;
    }
    out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::vector<std::string> Tokenizer::bpe_word(const std::string& word) const {
  std::vector<std::string> parts = utf8_chars(word);
  while (parts.size() > 1) {
    int best_rank = std::numeric_limits<int>::max();
    std::size_t best = 0;
    for (std::size_t k = 0; k + 1 < parts.size(); ++k) {
      const auto it = ranks_.find({parts[k], parts[k + 1]});
      if (it != ranks_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = k;
      }
    }
    if (best_rank == std::numeric_limits<int>::max()) break;
    // Merge every occurrence of the winning pair, left to right.
    const std::string a = parts[best], b = parts[best + 1];
    std::vector<std::string> merged;
    for (std::size_t k = 0; k < parts.size();) {
      if (k + 1 < parts.size() && parts[k] == a && parts[k + 1] == b) {
        merged.push_back(a + b);
        k += 2;
      } else {
        merged.push_back(parts[k]);
        ++k;
      }
    }
    parts = std::move(merged);
  }
  return parts;
}

Tokens Tokenizer::encode(const std::string& text) const {
  Tokens out;
  if (!bpe_) {
    for (unsigned char c : text) out.push_back(static_cast<Token>(c));
    return out;
  }
  const auto& b2u = byte_to_unicode();
  for (const auto& word : pretokenize(text)) {
    std::string mapped;
    for (unsigned char c : word) mapped += b2u[c];
    for (const auto& piece : bpe_word(mapped)) {
      const auto it = vocab_.find(piece);
      if (it == vocab_.end()) throw ValidationError("tokenizer: piece '" + piece + "' missing from vocab");
      out.push_back(it->second);
    }
  }
  return out;
}

std::string Tokenizer::decode(const Tokens& tokens) const {
  std::string out;
  if (!bpe_) {
    for (Token t : tokens) {
      if (t < 0 || t > 255) throw ValidationError("tokenizer: byte token out of range");
      out.push_back(static_cast<char>(t));
    }
    return out;
  }
  static const std::unordered_map<std::string, unsigned char> u2b = [] {
    std::unordered_map<std::string, unsigned char> m;
    const auto& t = byte_to_unicode();
    for (int b = 0; b < 256; ++b) m.emplace(t[b], static_cast<unsigned char>(b));
    return m;
  }();
  for (Token t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= id_to_token_.size())
      throw ValidationError("tokenizer: token id out of range");
    for (const auto& ch : utf8_chars(id_to_token_[t])) {
      const auto it = u2b.find(ch);
      if (it == u2b.end()) throw FormatError("tokenizer: vocab entry outside byte alphabet");
      out.push_back(static_cast<char>(it->second));
    }
  }
  return out;
}

}  // namespace wilke
