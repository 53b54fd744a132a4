#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace viscop {

/// Closed word-level vocabulary. Ids 0..3 are PAD, BOS, EOS, UNK.
class Vocabulary {
 public:
  static constexpr std::size_t pad = 0;
  static constexpr std::size_t bos = 1;
  static constexpr std::size_t eos = 2;
  static constexpr std::size_t unk = 3;

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& words);

  std::size_t add(const std::string& word);
  [[nodiscard]] std::size_t id(const std::string& word) const;
  [[nodiscard]] const std::string& word(std::size_t id) const;
  [[nodiscard]] std::size_t size() const noexcept { return words_.size(); }
  [[nodiscard]] bool contains(const std::string& word) const { return ids_.count(word) != 0; }

  /// Whitespace-split encoding; unknown words map to UNK.
  [[nodiscard]] std::vector<std::size_t> encode(const std::string& text) const;
  [[nodiscard]] std::string decode(const std::vector<std::size_t>& ids) const;

  [[nodiscard]] const std::vector<std::string>& words() const noexcept { return words_; }

  /// {"tokens": [...]}, position = id.
  [[nodiscard]] std::string to_json() const;
  static Vocabulary from_json(const std::string& text);

  bool operator==(const Vocabulary& other) const { return words_ == other.words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, std::size_t> ids_;
};

}  // namespace viscop
