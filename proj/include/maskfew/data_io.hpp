/*
 * Copyright 2026 The maskfew Authors. All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Corpus files, the word-level tokenizer, base/novel splitting, synthetic
// corpora and checkpoint persistence.

#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "maskfew/encoder.hpp"
#include "maskfew/errors.hpp"

namespace maskfew {

using json = nlohmann::json;

enum class SplitTag { train, test };

struct Record {
  std::string text;
  std::string label;
  bool operator==(const Record&) const = default;
};

struct Corpus {
  std::vector<Record> records;
  std::map<std::string, std::size_t> label_map;  // sorted label -> index
  SplitTag split = SplitTag::train;

  std::size_t size() const { return records.size(); }

  /// Rebuilds label_map from the records, indices in lexicographic order.
  void index_labels() {
    label_map.clear();
    for (const Record& r : records) label_map.emplace(r.label, 0);
    std::size_t i = 0;
    for (auto& [label, index] : label_map) index = i++;
  }
};

/// Reads UTF-8 JSON lines of the form {"text": ..., "label": ...}.
inline Corpus load_corpus(const std::string& path, SplitTag split = SplitTag::train) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file " + path);
  Corpus corpus;
  corpus.split = split;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw SchemaError(path + ":" + std::to_string(line_no) + ": expected a JSON object");
    for (const char* field : {"text", "label"}) {
      if (!j.contains(field) || !j[field].is_string()) {
        throw SchemaError(path + ":" + std::to_string(line_no) + ": missing string field \"" + field + "\"");
      }
    }
    Record r{j["text"].get<std::string>(), j["label"].get<std::string>()};
    if (r.text.empty()) throw SchemaError(path + ":" + std::to_string(line_no) + ": empty text");
    corpus.records.push_back(std::move(r));
  }
  corpus.index_labels();
  return corpus;
}

inline void write_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write corpus file " + path);
  for (const Record& r : corpus.records) out << json{{"label", r.label}, {"text", r.text}}.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Tokenizer

/// Lowercased words; each ASCII punctuation character is its own token.
inline std::vector<std::string> split_words(const std::string& text, bool lowercase = true) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (c < 128 && std::ispunct(c)) {
      flush();
      words.emplace_back(1, static_cast<char>(c));
    } else {
      current.push_back(lowercase && c < 128 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
    }
  }
  flush();
  return words;
}

class Tokenizer {
 public:
  Tokenizer() : Tokenizer(std::vector<std::string>{}, 64) {}

  Tokenizer(std::vector<std::string> words, std::size_t max_len, bool lowercase = true)
      : max_len_(max_len), lowercase_(lowercase) {
    tokens_ = {"[CLS]", "[PAD]", "[UNK]", "[MASK]"};
    for (auto& w : words) tokens_.push_back(std::move(w));
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second) throw DataError("duplicate vocabulary entry " + tokens_[i]);
    }
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t max_len() const { return max_len_; }
  bool lowercase() const { return lowercase_; }

  TokenId id_of(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? special::kUnk : it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw VocabularyError("token id " + std::to_string(id) + " not in vocabulary");
    return tokens_[static_cast<std::size_t>(id)];
  }

  /// CLS followed by the word ids, truncated to max_len positions.
  TokenSequence encode(const std::string& text) const {
    std::vector<TokenId> ids{special::kCls};
    for (const std::string& w : split_words(text, lowercase_)) {
      if (ids.size() >= max_len_) break;
      ids.push_back(id_of(w));
    }
    return TokenSequence::all_active(std::move(ids));
  }

  std::vector<std::string> decode(std::span<const TokenId> ids) const {
    std::vector<std::string> out;
    for (TokenId id : ids) out.push_back(token(id));
    return out;
  }

  json to_json() const {
    return json{{"lowercase", lowercase_},
                {"max_len", max_len_},
                {"words", std::vector<std::string>(tokens_.begin() + special::kCount, tokens_.end())}};
  }

  static Tokenizer from_json(const json& j) {
    try {
      return Tokenizer(j.at("words").get<std::vector<std::string>>(), j.at("max_len").get<std::size_t>(),
                       j.at("lowercase").get<bool>());
    } catch (const json::exception& e) {
      throw SchemaError(std::string("tokenizer block: ") + e.what());
    }
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  std::size_t max_len_;
  bool lowercase_;
};

/// Keeps the (vocab_size - 4) most frequent words; ties go to the
/// lexicographically smaller word.
inline Tokenizer build_tokenizer(const Corpus& corpus, std::size_t vocab_size, std::size_t max_len = 64) {
  if (vocab_size < special::kCount) throw ConfigError("vocab_size must cover the reserved tokens");
  std::map<std::string, std::size_t> counts;
  for (const Record& r : corpus.records)
    for (auto& w : split_words(r.text)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  for (auto& [w, n] : ranked) {
    if (words.size() + special::kCount >= vocab_size) break;
    words.push_back(w);
  }
  return Tokenizer(std::move(words), max_len);
}

inline TokenSequence encode_text(const Tokenizer& tok, const std::string& text) { return tok.encode(text); }

// ---------------------------------------------------------------------------
// Label spaces

/// Union label space: base labels first, then novel, each sorted.
struct LabelSpace {
  std::vector<std::string> names;
  std::size_t n_base = 0;

  std::size_t size() const { return names.size(); }
  bool is_novel(std::size_t index) const { return index >= n_base && index < names.size(); }

  std::size_t index_of(const std::string& label) const {
    auto it = std::find(names.begin(), names.end(), label);
    if (it == names.end()) throw DataError("label \"" + label + "\" is not in the label space");
    return static_cast<std::size_t>(it - names.begin());
  }

  std::vector<std::size_t> novel_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = n_base; i < names.size(); ++i) out.push_back(i);
    return out;
  }

  json to_json() const { return json{{"names", names}, {"n_base", n_base}}; }
  static LabelSpace from_json(const json& j) {
    try {
      return LabelSpace{j.at("names").get<std::vector<std::string>>(), j.at("n_base").get<std::size_t>()};
    } catch (const json::exception& e) {
      throw SchemaError(std::string("label space block: ") + e.what());
    }
  }
};

struct BaseNovelSplit {
  Corpus base;
  Corpus novel;
  LabelSpace labels;
};

/// Partitions records by label. Both halves carry the union label map.
inline BaseNovelSplit split_base_novel(const Corpus& corpus, const std::vector<std::string>& novel_labels) {
  std::set<std::string> novel(novel_labels.begin(), novel_labels.end());
  if (novel.empty()) throw ContractError("novel label list is empty");
  if (novel.size() != novel_labels.size()) throw ContractError("novel label list has duplicates");
  for (const std::string& l : novel) {
    if (!corpus.label_map.contains(l)) throw ContractError("novel label \"" + l + "\" does not occur in the corpus");
  }
  if (novel.size() >= corpus.label_map.size()) throw ContractError("novel labels must be a strict subset of the corpus labels");

  BaseNovelSplit out;
  for (const auto& [label, idx] : corpus.label_map)
    if (!novel.contains(label)) out.labels.names.push_back(label);
  out.labels.n_base = out.labels.names.size();
  out.labels.names.insert(out.labels.names.end(), novel.begin(), novel.end());

  std::map<std::string, std::size_t> union_map;
  for (std::size_t i = 0; i < out.labels.names.size(); ++i) union_map[out.labels.names[i]] = i;
  out.base.split = out.novel.split = corpus.split;
  out.base.label_map = out.novel.label_map = union_map;
  for (const Record& r : corpus.records) (novel.contains(r.label) ? out.novel : out.base).records.push_back(r);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

/// Each class owns a set of signal words; a sentence is filler words with one
/// contiguous run of its class's signal words inserted at a random offset.
struct SynthSpec {
  std::size_t n_base_classes = 4;
  std::size_t n_novel_classes = 2;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 40;
  std::size_t filler_words = 150;
  std::size_t signal_words = 8;
  std::size_t min_len = 8;
  std::size_t max_len = 16;
  std::size_t segment_len = 3;
  std::uint64_t seed = 7;

  std::vector<std::string> class_names() const {
    std::vector<std::string> names;
    for (std::size_t c = 0; c < n_base_classes; ++c) names.push_back("base" + std::to_string(c));
    for (std::size_t c = 0; c < n_novel_classes; ++c) names.push_back("novel" + std::to_string(c));
    return names;
  }
  std::vector<std::string> novel_names() const {
    auto names = class_names();
    return {names.begin() + static_cast<std::ptrdiff_t>(n_base_classes), names.end()};
  }
};

inline std::pair<Corpus, Corpus> generate_synthetic(const SynthSpec& spec) {
  if (spec.min_len < spec.segment_len || spec.max_len < spec.min_len || spec.segment_len == 0) {
    throw ConfigError("synthetic sentence lengths must satisfy segment_len <= min_len <= max_len");
  }
  std::mt19937_64 rng(spec.seed);
  const auto names = spec.class_names();
  auto sentence = [&](std::size_t cls) {
    const std::size_t len = std::uniform_int_distribution<std::size_t>(spec.min_len, spec.max_len)(rng);
    const std::size_t at = std::uniform_int_distribution<std::size_t>(0, len - spec.segment_len)(rng);
    std::uniform_int_distribution<std::size_t> filler(0, spec.filler_words - 1);
    std::uniform_int_distribution<std::size_t> signal(0, spec.signal_words - 1);
    std::string text;
    for (std::size_t i = 0; i < len; ++i) {
      if (i) text += ' ';
      if (i >= at && i < at + spec.segment_len) {
        text += "c" + std::to_string(cls) + "t" + std::to_string(signal(rng));
      } else {
        text += "w" + std::to_string(filler(rng));
      }
    }
    return text;
  };
  Corpus train, test;
  train.split = SplitTag::train;
  test.split = SplitTag::test;
  for (auto [corpus, per_class] : {std::pair{&train, spec.train_per_class}, std::pair{&test, spec.test_per_class}}) {
    for (std::size_t i = 0; i < per_class; ++i)
      for (std::size_t c = 0; c < names.size(); ++c) corpus->records.push_back({sentence(c), names[c]});
    corpus->index_labels();
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout, all integers little-endian uint32:
//   "MBFT" | version | config_len | config JSON bytes | tensor_count |
//   per tensor: name_len | name | rank | extents... | float32 values

inline constexpr char kCheckpointMagic[4] = {'M', 'B', 'F', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline json encoder_config_to_json(const EncoderConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"max_len", c.max_len}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},       {"d_ff", c.d_ff},       {"n_classes", c.n_classes}};
}

inline EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.n_classes = j.at("n_classes").get<std::size_t>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("encoder config: ") + e.what());
  }
  return c;
}

struct Checkpoint {
  json config;  // must hold an "encoder" object
  EncoderConfig encoder;
  ModelParams params;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string checkpoint_bytes(const ModelParams& params, const json& config) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  const std::string cfg = config.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  const auto named = params.named();
  detail::put_u32(out, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

inline void save_checkpoint(const ModelParams& params, const json& config, const std::string& path) {
  const std::string bytes = checkpoint_bytes(params, config);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint parse_checkpoint(std::string bytes) {
  detail::ByteReader in(std::move(bytes));
  if (in.take(4) != std::string(kCheckpointMagic, 4)) throw FormatError("bad checkpoint magic");
  if (const auto v = in.u32(); v != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(v));
  Checkpoint ck;
  try {
    ck.config = json::parse(in.take(in.u32()));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("checkpoint config block is not JSON: ") + e.what());
  }
  if (!ck.config.contains("encoder")) throw FormatError("checkpoint config block has no encoder section");
  ck.encoder = encoder_config_from_json(ck.config["encoder"]);
  ck.encoder.validate();

  const auto layout = parameter_layout(ck.encoder);
  const std::uint32_t count = in.u32();
  if (count != layout.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, encoder expects " + std::to_string(layout.size()));
  }
  std::map<std::string, Tensor> tensors;
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = in.take(in.u32());
    const std::uint32_t rank = in.u32();
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(in.u32());
    if (name != layout[k].first || shape != layout[k].second) {
      throw FormatError("checkpoint tensor " + std::to_string(k) + " is " + name + shape_string(shape) + ", expected " +
                        layout[k].first + shape_string(layout[k].second));
    }
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = static_cast<double>(std::bit_cast<float>(in.u32()));
    if (!tensors.emplace(name, Tensor::from(shape, std::move(values), true)).second) {
      throw FormatError("duplicate tensor name " + name);
    }
  }
  if (!in.done()) throw FormatError("trailing bytes after the last checkpoint tensor");

  ck.params.layers.resize(ck.encoder.n_layers);
  ck.params.for_each([&](const std::string& name, Tensor& t) { t = tensors.at(name); });
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str());
}

}  // namespace maskfew
