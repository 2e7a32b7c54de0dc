#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "optfusion/core/random.hpp"
#include "optfusion/core/tape.hpp"
#include "optfusion/core/tensor.hpp"
#include "optfusion/errors.hpp"

namespace optfusion {

// Input field structure. Every component operates at the common width
// d = num_fields * emb_dim, so any component output can feed any other.
struct FieldSchema {
  std::size_t num_fields = 0;
  std::vector<std::size_t> vocab_sizes;
  std::size_t emb_dim = 0;

  std::size_t width() const { return num_fields * emb_dim; }

  void validate() const {
    if (num_fields < 1) throw ArgumentError("schema: num_fields must be >= 1");
    if (vocab_sizes.size() != num_fields)
      throw ArgumentError("schema: vocab_sizes count " +
                          std::to_string(vocab_sizes.size()) + " vs " +
                          std::to_string(num_fields) + " fields");
    if (emb_dim < 1) throw ArgumentError("schema: emb_dim must be >= 1");
    for (std::size_t v : vocab_sizes)
      if (v < 2)
        throw ArgumentError("schema: vocab size must be >= 2 (value + OOV)");
  }
};

enum class ComponentKind { Embedding, Cross, Deep, Output };

inline const char* kind_str(ComponentKind k) {
  switch (k) {
    case ComponentKind::Embedding: return "embedding";
    case ComponentKind::Cross: return "cross";
    case ComponentKind::Deep: return "deep";
    case ComponentKind::Output: return "output";
  }
  return "?";
}

inline ComponentKind kind_from_str(const std::string& s) {
  if (s == "embedding") return ComponentKind::Embedding;
  if (s == "cross") return ComponentKind::Cross;
  if (s == "deep") return ComponentKind::Deep;
  if (s == "output") return ComponentKind::Output;
  throw ArgumentError("unknown component kind '" + s + "'");
}

struct EmbeddingParams {
  std::vector<Parameter> tables;  // one [V_i x e] per field

  void init(const std::string& prefix, const FieldSchema& schema, Rng& rng,
            double stddev = 0.1) {
    tables.clear();
    for (std::size_t i = 0; i < schema.num_fields; ++i) {
      Tensor t({schema.vocab_sizes[i], schema.emb_dim});
      for (std::size_t k = 0; k < t.size(); ++k) t[k] = rng.normal(0.0, stddev);
      tables.emplace_back(prefix + ".table" + std::to_string(i), std::move(t));
    }
  }
  void collect(std::vector<Parameter*>& out) {
    for (Parameter& p : tables) out.push_back(&p);
  }
};

struct CrossParams {
  Parameter w, b;  // both length d

  void init(const std::string& prefix, std::size_t d, Rng& rng) {
    Tensor wv({d});
    double s = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < d; ++i) wv[i] = rng.normal(0.0, s);
    w = Parameter(prefix + ".w", std::move(wv));
    b = Parameter(prefix + ".b", Tensor({d}));
  }
  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct DeepParams {
  Parameter w;  // [d x d]
  Parameter b;  // [d]

  void init(const std::string& prefix, std::size_t d, Rng& rng) {
    Tensor wv({d, d});
    double s = std::sqrt(2.0 / static_cast<double>(d));
    for (std::size_t i = 0; i < wv.size(); ++i) wv[i] = rng.normal(0.0, s);
    w = Parameter(prefix + ".w", std::move(wv));
    b = Parameter(prefix + ".b", Tensor({d}));
  }
  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

struct OutputParams {
  Parameter w;  // [d]
  Parameter b;  // [1]

  void init(const std::string& prefix, std::size_t d, Rng& rng) {
    Tensor wv({d});
    double s = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < d; ++i) wv[i] = rng.normal(0.0, s);
    w = Parameter(prefix + ".w", std::move(wv));
    b = Parameter(prefix + ".b", Tensor({1}));
  }
  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

// field_idx: one index vector per field, all of batch length. Output [B x d],
// per-field embeddings side by side in field order.
inline Var embedding_forward(Tape& t, const FieldSchema& schema,
                             EmbeddingParams& params,
                             const std::vector<std::vector<std::size_t>>& field_idx) {
  if (field_idx.size() != schema.num_fields)
    throw DimensionError("embedding_forward: " +
                         std::to_string(field_idx.size()) + " index vectors vs " +
                         std::to_string(schema.num_fields) + " fields");
  std::vector<Var> pieces;
  pieces.reserve(schema.num_fields);
  for (std::size_t i = 0; i < schema.num_fields; ++i)
    pieces.push_back(t.gather_rows(t.leaf(params.tables[i]), field_idx[i]));
  return pieces.size() == 1 ? pieces[0] : t.concat_cols(pieces);
}

// x_{l+1} = x0 * (xl . w) + b + xl; x0 is always the embedding output.
inline Var cross_layer_forward(Tape& t, CrossParams& params, Var x0, Var xl) {
  return t.cross_combine(x0, xl, t.leaf(params.w), t.leaf(params.b));
}

inline Var deep_layer_forward(Tape& t, DeepParams& params, Var x) {
  return t.relu(
      t.add_rowvec(t.matmul(x, t.leaf(params.w), false, true), t.leaf(params.b)));
}

// sigmoid(w . x + b) per row -> [B] probabilities.
inline Var output_forward(Tape& t, OutputParams& params, Var x) {
  return t.sigmoid(t.add_scalar(t.matvec(x, t.leaf(params.w)), t.leaf(params.b)));
}

}  // namespace optfusion
