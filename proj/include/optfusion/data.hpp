#pragma once

#include <nlohmann/json.hpp>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "optfusion/core/random.hpp"
#include "optfusion/errors.hpp"
#include "optfusion/supernet.hpp"

namespace optfusion {

// Raw Criteo-style row: a binary label plus optional-valued columns.
struct RawRecord {
  int label = 0;
  std::vector<std::optional<double>> numeric;
  std::vector<std::optional<std::string>> categorical;
};

struct RawLayout {
  std::size_t num_numeric = 13;
  std::size_t num_categorical = 26;

  std::size_t columns() const { return 1 + num_numeric + num_categorical; }
  std::size_t fields() const { return num_numeric + num_categorical; }
};

// Numeric bucketing: non-positive and missing collapse to a sentinel, small
// values to "1", the rest to floor(ln(x)^2) (or log2 when base2 is set).
inline std::string discretize_numeric(const std::optional<double>& x,
                                      bool base2 = false) {
  if (!x.has_value() || *x <= 0.0) return "MISS";
  if (*x <= 2.0) return "1";
  double lg = base2 ? std::log2(*x) : std::log(*x);
  return std::to_string(static_cast<long long>(std::floor(lg * lg)));
}

// Turns a raw record into one categorical token per field.
using TransformHook = std::function<std::vector<std::string>(const RawRecord&)>;

inline std::vector<std::string> criteo_transform(const RawRecord& r,
                                                 bool base2 = false) {
  std::vector<std::string> out;
  out.reserve(r.numeric.size() + r.categorical.size());
  for (const auto& x : r.numeric) out.push_back(discretize_numeric(x, base2));
  for (const auto& c : r.categorical)
    out.push_back(c.has_value() ? *c : "MISS");
  return out;
}

inline std::vector<RawRecord> parse_tsv(const std::string& path,
                                        const RawLayout& layout = {}) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::vector<RawRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
      std::size_t tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() != layout.columns())
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected " +
                       std::to_string(layout.columns()) + " columns, got " +
                       std::to_string(cols.size()));
    RawRecord r;
    if (cols[0] == "0")
      r.label = 0;
    else if (cols[0] == "1")
      r.label = 1;
    else
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": label must be 0 or 1, got '" + cols[0] + "'");
    for (std::size_t i = 0; i < layout.num_numeric; ++i) {
      const std::string& c = cols[1 + i];
      if (c.empty()) {
        r.numeric.push_back(std::nullopt);
        continue;
      }
      double v;
      auto [p, ec] = std::from_chars(c.data(), c.data() + c.size(), v);
      if (ec != std::errc() || p != c.data() + c.size())
        throw ParseError(path + ":" + std::to_string(lineno) +
                         ": bad numeric value '" + c + "'");
      r.numeric.push_back(v);
    }
    for (std::size_t i = 0; i < layout.num_categorical; ++i) {
      const std::string& c = cols[1 + layout.num_numeric + i];
      if (c.empty())
        r.categorical.push_back(std::nullopt);
      else
        r.categorical.push_back(c);
    }
    out.push_back(std::move(r));
  }
  return out;
}

// Per-field token -> index map. Index 0 is the OOV/infrequent bucket; real
// tokens get 1..m in lexicographic order so rebuilds are reproducible.
struct Vocabulary {
  std::vector<std::map<std::string, std::size_t>> fields;
  std::size_t min_count = 2;

  std::size_t num_fields() const { return fields.size(); }
  std::size_t vocab_size(std::size_t f) const {
    return fields.at(f).size() + 1;
  }
  std::vector<std::size_t> vocab_sizes() const {
    std::vector<std::size_t> out;
    for (std::size_t f = 0; f < fields.size(); ++f)
      out.push_back(vocab_size(f));
    return out;
  }
  std::size_t encode(std::size_t f, const std::string& token) const {
    const auto& m = fields.at(f);
    auto it = m.find(token);
    return it == m.end() ? 0 : it->second;
  }
};

inline Vocabulary build_vocab(
    const std::vector<std::vector<std::string>>& token_rows,
    std::size_t min_count = 2) {
  Vocabulary v;
  v.min_count = min_count;
  if (token_rows.empty()) return v;
  std::size_t f = token_rows[0].size();
  std::vector<std::map<std::string, std::size_t>> freq(f);
  for (const auto& row : token_rows) {
    if (row.size() != f)
      throw ArgumentError("build_vocab: ragged token rows");
    for (std::size_t i = 0; i < f; ++i) ++freq[i][row[i]];
  }
  v.fields.resize(f);
  for (std::size_t i = 0; i < f; ++i) {
    std::size_t next = 1;
    for (const auto& [token, count] : freq[i])
      if (count >= min_count) v.fields[i][token] = next++;
  }
  return v;
}

// Fully index-encoded rows, the only thing the trainer ever touches.
struct EncodedDataset {
  std::size_t num_fields = 0;
  std::vector<std::size_t> vocab_sizes;
  std::vector<std::vector<std::size_t>> rows;  // [N][num_fields]
  std::vector<double> labels;                  // 0.0 / 1.0
  std::string split = "train";

  std::size_t size() const { return rows.size(); }

  FieldSchema schema(std::size_t emb_dim) const {
    return FieldSchema{num_fields, vocab_sizes, emb_dim};
  }

  void validate() const {
    if (vocab_sizes.size() != num_fields)
      throw ArgumentError("dataset: vocab_sizes/num_fields mismatch");
    if (labels.size() != rows.size())
      throw ArgumentError("dataset: label/row count mismatch");
    for (const auto& r : rows) {
      if (r.size() != num_fields)
        throw ArgumentError("dataset: ragged row");
      for (std::size_t f = 0; f < num_fields; ++f)
        if (r[f] >= vocab_sizes[f])
          throw ArgumentError("dataset: index out of vocab range");
    }
    for (double y : labels)
      if (y != 0.0 && y != 1.0)
        throw ArgumentError("dataset: non-binary label");
  }
};

inline EncodedDataset encode(const std::vector<std::vector<std::string>>& token_rows,
                             const std::vector<int>& labels,
                             const Vocabulary& vocab) {
  if (token_rows.size() != labels.size())
    throw ArgumentError("encode: token/label count mismatch");
  EncodedDataset d;
  d.num_fields = vocab.num_fields();
  d.vocab_sizes = vocab.vocab_sizes();
  for (std::size_t r = 0; r < token_rows.size(); ++r) {
    std::vector<std::size_t> row;
    for (std::size_t f = 0; f < d.num_fields; ++f)
      row.push_back(vocab.encode(f, token_rows[r].at(f)));
    d.rows.push_back(std::move(row));
    d.labels.push_back(labels[r] ? 1.0 : 0.0);
  }
  return d;
}

// Deterministic shuffled split, sizes floor(r*N) with the remainder going to
// the last part.
inline std::vector<EncodedDataset> split(const EncodedDataset& d,
                                         const std::vector<double>& ratios,
                                         std::uint64_t seed) {
  if (ratios.empty()) throw ArgumentError("split: no ratios");
  double sum = 0.0;
  for (double r : ratios) {
    if (r <= 0.0) throw ArgumentError("split: ratios must be positive");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ArgumentError("split: ratios must sum to 1");

  std::vector<std::size_t> order(d.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  static const char* kTags[] = {"train", "val", "test"};
  std::vector<EncodedDataset> parts;
  std::size_t at = 0;
  for (std::size_t p = 0; p < ratios.size(); ++p) {
    std::size_t take = p + 1 == ratios.size()
                           ? d.size() - at
                           : static_cast<std::size_t>(
                                 std::floor(ratios[p] * static_cast<double>(d.size())));
    EncodedDataset part;
    part.num_fields = d.num_fields;
    part.vocab_sizes = d.vocab_sizes;
    part.split = p < 3 ? kTags[p] : "part" + std::to_string(p);
    for (std::size_t i = 0; i < take; ++i, ++at) {
      part.rows.push_back(d.rows[order[at]]);
      part.labels.push_back(d.labels[order[at]]);
    }
    parts.push_back(std::move(part));
  }
  return parts;
}

// Field-major view of a set of rows, ready for embedding_forward.
struct Batch {
  std::vector<std::vector<std::size_t>> field_idx;  // [f][b]
  std::vector<double> labels;

  std::size_t size() const { return labels.size(); }
};

inline Batch gather_batch(const EncodedDataset& d,
                          const std::vector<std::size_t>& row_ids) {
  Batch b;
  b.field_idx.assign(d.num_fields, {});
  for (auto& v : b.field_idx) v.reserve(row_ids.size());
  b.labels.reserve(row_ids.size());
  for (std::size_t r : row_ids) {
    const auto& row = d.rows.at(r);
    for (std::size_t f = 0; f < d.num_fields; ++f)
      b.field_idx[f].push_back(row[f]);
    b.labels.push_back(d.labels[r]);
  }
  return b;
}

// One epoch's batch index sets: a seeded shuffle chunked by batch_size, last
// chunk short.
inline std::vector<std::vector<std::size_t>> batch_indices(
    std::size_t n, std::size_t batch_size, std::uint64_t shuffle_seed) {
  if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(shuffle_seed);
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t at = 0; at < n; at += batch_size) {
    std::size_t take = std::min(batch_size, n - at);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                     order.begin() + static_cast<std::ptrdiff_t>(at + take));
  }
  return out;
}

// Planted-structure generator: a frozen teacher supernet scores uniformly
// drawn rows, labels are Bernoulli draws from the (temperature-sharpened)
// teacher probability, optionally noise-flipped. Three forked streams keep
// features, label draws, and noise independent of each other.
struct SyntheticSpec {
  std::size_t num_fields = 10;
  std::size_t vocab_size = 100;
  std::size_t emb_dim = 8;
  std::size_t samples = 10000;
  ArchitectureDescriptor teacher;
  std::uint64_t teacher_seed = 1;
  std::uint64_t data_seed = 2;
  double noise = 0.0;
  // logit temperature: >1 spreads teacher probabilities toward 0/1 so the
  // planted signal is learnable well above chance
  double logit_scale = 4.0;

  FieldSchema schema() const {
    return FieldSchema{num_fields,
                       std::vector<std::size_t>(num_fields, vocab_size),
                       emb_dim};
  }
};

// Builds the frozen teacher model a SyntheticSpec describes.
inline Supernet make_teacher(const SyntheticSpec& spec) {
  spec.teacher.validate();
  SupernetConfig cfg;
  cfg.n = spec.teacher.n;
  cfg.with_s0 = spec.teacher.with_s0;
  cfg.mode = SupernetMode::fixed;
  cfg.op_set = spec.teacher.op_set;
  Supernet teacher(spec.schema(), cfg, spec.teacher_seed);
  teacher.set_descriptor(spec.teacher);
  return teacher;
}

inline EncodedDataset generate_synthetic(const SyntheticSpec& spec,
                                         Supernet& teacher) {
  FieldSchema sc = spec.schema();
  Rng root(spec.data_seed);
  Rng feat = root.fork(1);
  Rng lab = root.fork(2);
  Rng noise = root.fork(3);

  EncodedDataset d;
  d.num_fields = spec.num_fields;
  d.vocab_sizes = sc.vocab_sizes;
  d.rows.reserve(spec.samples);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    std::vector<std::size_t> row;
    row.reserve(spec.num_fields);
    for (std::size_t f = 0; f < spec.num_fields; ++f)
      row.push_back(feat.uniform_int(spec.vocab_size));
    d.rows.push_back(std::move(row));
  }

  // score in chunks to bound tape memory
  const std::size_t chunk = 4096;
  d.labels.reserve(spec.samples);
  for (std::size_t at = 0; at < spec.samples; at += chunk) {
    std::size_t take = std::min(chunk, spec.samples - at);
    std::vector<std::size_t> ids(take);
    for (std::size_t i = 0; i < take; ++i) ids[i] = at + i;
    Batch b = gather_batch(d, ids);
    Tape t;
    const Tensor& p = t.value(teacher.forward(t, b.field_idx));
    for (std::size_t i = 0; i < take; ++i) {
      double pi = std::min(std::max(p[i], 1e-12), 1.0 - 1e-12);
      double logit = std::log(pi / (1.0 - pi)) * spec.logit_scale;
      double sharpened = 1.0 / (1.0 + std::exp(-logit));
      double y = lab.bernoulli(sharpened) ? 1.0 : 0.0;
      if (spec.noise > 0.0 && noise.bernoulli(spec.noise)) y = 1.0 - y;
      d.labels.push_back(y);
    }
  }
  return d;
}

inline EncodedDataset generate_synthetic(const SyntheticSpec& spec) {
  Supernet teacher = make_teacher(spec);
  return generate_synthetic(spec, teacher);
}

// Teacher scores for existing rows (for oracle-superiority checks); ranking
// is invariant to the logit sharpening, so raw probabilities suffice.
inline std::vector<double> teacher_scores(Supernet& teacher,
                                          const EncodedDataset& d) {
  std::vector<double> scores;
  scores.reserve(d.size());
  const std::size_t chunk = 4096;
  for (std::size_t at = 0; at < d.size(); at += chunk) {
    std::size_t take = std::min(chunk, d.size() - at);
    std::vector<std::size_t> ids(take);
    for (std::size_t i = 0; i < take; ++i) ids[i] = at + i;
    Batch b = gather_batch(d, ids);
    Tape t;
    const Tensor& p = t.value(teacher.forward(t, b.field_idx));
    for (std::size_t i = 0; i < take; ++i) scores.push_back(p[i]);
  }
  return scores;
}

inline constexpr int kDataFormatVersion = 1;

inline std::string serialize_dataset(const EncodedDataset& d) {
  d.validate();
  nlohmann::ordered_json j;
  j["format"] = "optfusion-data";
  j["version"] = kDataFormatVersion;
  j["num_fields"] = d.num_fields;
  j["vocab_sizes"] = d.vocab_sizes;
  j["split"] = d.split;
  j["labels"] = nlohmann::ordered_json::array();
  for (double y : d.labels) j["labels"].push_back(static_cast<int>(y));
  j["rows"] = d.rows;
  return j.dump() + "\n";
}

inline EncodedDataset deserialize_dataset(const std::string& text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("dataset cache is not valid JSON: ") +
                      e.what());
  }
  if (detail::json_get<std::string>(j, "format") != "optfusion-data")
    throw SchemaError("format: expected 'optfusion-data'");
  if (detail::json_get<int>(j, "version") != kDataFormatVersion)
    throw SchemaError("version: expected " +
                      std::to_string(kDataFormatVersion));
  EncodedDataset d;
  d.num_fields = detail::json_get<std::size_t>(j, "num_fields");
  d.split = detail::json_get<std::string>(j, "split");
  try {
    d.vocab_sizes = j.at("vocab_sizes").get<std::vector<std::size_t>>();
    d.rows = j.at("rows").get<std::vector<std::vector<std::size_t>>>();
    for (const auto& y : j.at("labels"))
      d.labels.push_back(y.get<int>() ? 1.0 : 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("dataset cache: ") + e.what());
  }
  try {
    d.validate();
  } catch (const ArgumentError& e) {
    throw SchemaError(std::string("dataset cache: ") + e.what());
  }
  return d;
}

inline std::string serialize_vocab(const Vocabulary& v) {
  nlohmann::ordered_json j;
  j["format"] = "optfusion-vocab";
  j["version"] = kDataFormatVersion;
  j["min_count"] = v.min_count;
  j["fields"] = nlohmann::ordered_json::array();
  for (const auto& m : v.fields) {
    nlohmann::ordered_json fj = nlohmann::ordered_json::object();
    for (const auto& [token, idx] : m) fj[token] = idx;
    j["fields"].push_back(std::move(fj));
  }
  return j.dump() + "\n";
}

inline Vocabulary deserialize_vocab(const std::string& text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("vocabulary file is not valid JSON: ") +
                      e.what());
  }
  if (detail::json_get<std::string>(j, "format") != "optfusion-vocab")
    throw SchemaError("format: expected 'optfusion-vocab'");
  if (detail::json_get<int>(j, "version") != kDataFormatVersion)
    throw SchemaError("version: expected " +
                      std::to_string(kDataFormatVersion));
  Vocabulary v;
  v.min_count = detail::json_get<std::size_t>(j, "min_count");
  if (!j.contains("fields") || !j["fields"].is_array())
    throw SchemaError("fields: missing or not an array");
  for (const auto& fj : j["fields"]) {
    std::map<std::string, std::size_t> m;
    for (auto it = fj.begin(); it != fj.end(); ++it)
      m[it.key()] = it.value().get<std::size_t>();
    v.fields.push_back(std::move(m));
  }
  return v;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  out << content;
}

}  // namespace optfusion
