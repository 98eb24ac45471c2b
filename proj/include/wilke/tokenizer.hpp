#pragma once

#include "wilke/types.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace wilke {

/// Byte-level tokenizer (token id = byte value) or GPT-2 style byte-level BPE
/// with rank-greedy merges.
class Tokenizer {
 public:
  /// Byte mode; vocabulary is the 256 byte values.
  Tokenizer() = default;

  /// BPE mode from an in-memory vocabulary and ordered merge list.
  Tokenizer(std::unordered_map<std::string, Token> vocab, std::vector<std::pair<std::string, std::string>> merges);

  /// BPE mode from a GPT-2 style vocab.json + merges.txt pair.
  static Tokenizer from_files(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt);

  bool is_bpe() const { return bpe_; }
  int vocab_size() const;

  Tokens encode(const std::string& text) const;
  std::string decode(const Tokens& tokens) const;

  /// Applies merges to one pre-token (already in byte-to-unicode form).
  std::vector<std::string> bpe_word(const std::string& word) const;

  /// GPT-2 pre-tokenization of raw text into words.
  static std::vector<std::string> pretokenize(const std::string& text);

  /// Merge list in rank order (empty in byte mode).
  std::vector<std::pair<std::string, std::string>> merges() const;
  const std::unordered_map<std::string, Token>& vocab() const { return vocab_; }

  /// Writes vocab.json and merges.txt into `dir` (BPE mode only).
  void save(const std::filesystem::path& dir) const;

 private:
  bool bpe_ = false;
  std::unordered_map<std::string, Token> vocab_;
  std::vector<std::string> id_to_token_;
  std::map<std::pair<std::string, std::string>, int> ranks_;
};

/// GPT-2 reversible byte -> printable unicode code point mapping.
const std::vector<std::string>& byte_to_unicode();

}  // namespace wilke
