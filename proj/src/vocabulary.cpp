#include "viscop/vocabulary.hpp"

#include <sstream>

#include <json.hpp>

#include "viscop/errors.hpp"

namespace viscop {

Vocabulary::Vocabulary() {
  for (const char* w : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(w);
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
  for (const auto& w : words) add(w);
}

std::size_t Vocabulary::add(const std::string& word) {
  if (auto it = ids_.find(word); it != ids_.end()) return it->second;
  const std::size_t id = words_.size();
  words_.push_back(word);
  ids_.emplace(word, id);
  return id;
}

std::size_t Vocabulary::id(const std::string& word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? unk : it->second;
}

const std::string& Vocabulary::word(std::size_t id) const {
  if (id >= words_.size()) throw DimensionError("token id " + std::to_string(id) + " outside vocabulary");
  return words_[id];
}

std::vector<std::size_t> Vocabulary::encode(const std::string& text) const {
  std::istringstream is(text);
  std::vector<std::size_t> out;
  for (std::string w; is >> w;) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(const std::vector<std::size_t>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

std::string Vocabulary::to_json() const {
  nlohmann::json j;
  j["tokens"] = words_;
  return j.dump(2);
}

Vocabulary Vocabulary::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  const auto tokens = j.at("tokens").get<std::vector<std::string>>();
  if (tokens.size() < 4 || tokens[pad] != "<pad>" || tokens[bos] != "<bos>" || tokens[eos] != "<eos>" ||
      tokens[unk] != "<unk>") {
    throw ConfigError("vocabulary file does not start with the reserved tokens");
  }
  Vocabulary v;
  for (std::size_t i = 4; i < tokens.size(); ++i) v.add(tokens[i]);
  return v;
}

}  // namespace viscop
