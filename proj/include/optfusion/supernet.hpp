#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "optfusion/components.hpp"
#include "optfusion/fusion.hpp"

namespace optfusion {

enum class SupernetMode { search, retrain_soft, retrain_hard, fixed };

inline const char* mode_str(SupernetMode m) {
  switch (m) {
    case SupernetMode::search: return "search";
    case SupernetMode::retrain_soft: return "retrain_soft";
    case SupernetMode::retrain_hard: return "retrain_hard";
    case SupernetMode::fixed: return "fixed";
  }
  return "?";
}

inline SupernetMode mode_from_str(const std::string& s) {
  if (s == "search") return SupernetMode::search;
  if (s == "retrain_soft") return SupernetMode::retrain_soft;
  if (s == "retrain_hard") return SupernetMode::retrain_hard;
  if (s == "fixed") return SupernetMode::fixed;
  throw ArgumentError("unknown supernet mode '" + s + "'");
}

inline std::vector<FusionOpKind> default_op_set() {
  return {FusionOpKind::ADD, FusionOpKind::PROD, FusionOpKind::CONCAT,
          FusionOpKind::ATT};
}

struct SupernetConfig {
  std::size_t n = 3;
  bool with_s0 = true;
  SupernetMode mode = SupernetMode::search;
  std::vector<FusionOpKind> op_set = default_op_set();

  void validate() const {
    if (n < 1) throw ArgumentError("supernet config: n must be >= 1");
    if (op_set.empty()) throw ArgumentError("supernet config: empty op set");
  }
};

// One fusion site's operation choice: a single hard kind, or a probability
// vector aligned with the descriptor's op_set.
struct OpChoice {
  bool soft = false;
  FusionOpKind hard = FusionOpKind::ADD;
  std::vector<double> probs;

  bool operator==(const OpChoice& o) const {
    return soft == o.soft && (soft ? probs == o.probs : hard == o.hard);
  }
};

struct DescriptorMetadata {
  std::uint64_t seed = 0;
  std::string dataset;
  std::string stage;

  bool operator==(const DescriptorMetadata&) const = default;
};

struct ArchitectureDescriptor {
  std::size_t n = 0;
  bool with_s0 = false;
  std::vector<FusionOpKind> op_set;
  std::vector<std::vector<bool>> connections;  // [C][C], row = source
  std::vector<OpChoice> operations;            // fusion-capable, id order
  std::vector<bool> dead;                      // per component id
  DescriptorMetadata metadata;

  bool operator==(const ArchitectureDescriptor&) const = default;

  ComponentGraph graph() const { return ComponentGraph::make(n, with_s0); }

  std::size_t edge_count() const {
    std::size_t k = 0;
    for (const auto& row : connections)
      for (bool b : row) k += b ? 1 : 0;
    return k;
  }

  std::size_t incoming(std::size_t dst) const {
    std::size_t k = 0;
    for (const auto& row : connections) k += row[dst] ? 1 : 0;
    return k;
  }

  void recompute_dead() {
    ComponentGraph g = graph();
    dead.assign(g.count(), false);
    for (std::size_t id = 0; id < g.count(); ++id)
      if (g.fusion_capable(id)) dead[id] = incoming(id) == 0;
  }

  void validate() const {
    ComponentGraph g = graph();
    std::size_t c = g.count();
    if (op_set.empty()) throw SchemaError("op_set: must not be empty");
    if (connections.size() != c)
      throw SchemaError("connections: expected " + std::to_string(c) +
                        " rows, got " + std::to_string(connections.size()));
    for (std::size_t i = 0; i < c; ++i) {
      if (connections[i].size() != c)
        throw SchemaError("connections[" + std::to_string(i) +
                          "]: expected " + std::to_string(c) + " entries");
      for (std::size_t j = 0; j < c; ++j)
        if (connections[i][j] && !g.edge_allowed(i, j))
          throw SchemaError("connections[" + std::to_string(i) + "][" +
                            std::to_string(j) + "]: level(" + g.components[i].name +
                            ") >= level(" + g.components[j].name + ")");
    }
    std::vector<std::size_t> fids = g.fusion_ids();
    if (operations.size() != fids.size())
      throw SchemaError("operations: expected " + std::to_string(fids.size()) +
                        " entries, got " + std::to_string(operations.size()));
    for (std::size_t i = 0; i < operations.size(); ++i) {
      const OpChoice& oc = operations[i];
      std::string path = "operations[" + std::to_string(i) + "]";
      if (oc.soft) {
        if (oc.probs.size() != op_set.size())
          throw SchemaError(path + ".soft: expected " +
                            std::to_string(op_set.size()) + " probabilities");
        double sum = 0.0;
        for (double p : oc.probs) {
          if (p < 0.0) throw SchemaError(path + ".soft: negative probability");
          sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-6)
          throw SchemaError(path + ".soft: probabilities sum to " +
                            std::to_string(sum));
      } else {
        bool in_set = false;
        for (FusionOpKind o : op_set) in_set = in_set || o == oc.hard;
        if (!in_set)
          throw SchemaError(path + ".hard: " + op_str(oc.hard) +
                            " not in op_set");
      }
    }
    if (dead.size() != c)
      throw SchemaError("dead: expected " + std::to_string(c) + " flags");
    for (std::size_t id = 0; id < c; ++id) {
      bool expect = g.fusion_capable(id) && incoming(id) == 0;
      if (dead[id] != expect)
        throw SchemaError("dead[" + std::to_string(id) +
                          "]: inconsistent with connections");
    }
  }
};

enum class DiscretizeVariant { soft, hard };
enum class PresetKind { parallel, stacked };

inline PresetKind preset_from_str(const std::string& s) {
  if (s == "parallel") return PresetKind::parallel;
  if (s == "stacked") return PresetKind::stacked;
  throw ArgumentError("unknown preset '" + s + "'");
}

// Fixed reference wirings: the two mainstream fusion designs the search is
// benchmarked against.
inline ArchitectureDescriptor preset(PresetKind kind, std::size_t n,
                                     std::vector<FusionOpKind> op_set =
                                         default_op_set()) {
  ArchitectureDescriptor d;
  d.n = n;
  d.op_set = std::move(op_set);
  auto connect = [&](std::size_t s, std::size_t t) {
    d.connections[s][t] = true;
  };
  if (kind == PresetKind::parallel) {
    // E feeds two independent towers; the head concatenates their tops.
    d.with_s0 = false;
    ComponentGraph g = d.graph();
    d.connections.assign(g.count(), std::vector<bool>(g.count(), false));
    auto s_id = [&](std::size_t i) { return 2 * i - 1; };
    auto d_id = [&](std::size_t i) { return 2 * i; };
    std::size_t h = g.count() - 1;
    connect(0, s_id(1));
    connect(0, d_id(1));
    for (std::size_t i = 1; i < n; ++i) {
      connect(s_id(i), s_id(i + 1));
      connect(d_id(i), d_id(i + 1));
    }
    connect(s_id(n), h);
    connect(d_id(n), h);
    for (std::size_t col = 0; col < g.fusion_ids().size(); ++col)
      d.operations.push_back({false, FusionOpKind::ADD, {}});
    d.operations.back().hard = FusionOpKind::CONCAT;
    d.metadata.stage = "preset:parallel";
  } else {
    // E -> cross block -> deep chain -> head, with the first deep layer
    // concatenating the cross output with the raw embedding.
    d.with_s0 = true;
    ComponentGraph g = d.graph();
    d.connections.assign(g.count(), std::vector<bool>(g.count(), false));
    auto d_id = [&](std::size_t i) { return 2 * i + 1; };
    std::size_t h = g.count() - 1;
    connect(0, 1);        // E -> S0
    connect(0, d_id(1));  // E -> D1
    connect(1, d_id(1));  // S0 -> D1
    for (std::size_t i = 1; i < n; ++i) connect(d_id(i), d_id(i + 1));
    connect(d_id(n), h);
    for (std::size_t col = 0; col < g.fusion_ids().size(); ++col)
      d.operations.push_back({false, FusionOpKind::ADD, {}});
    d.operations[g.fusion_col(d_id(1))].hard = FusionOpKind::CONCAT;
    d.metadata.stage = "preset:stacked";
  }
  d.recompute_dead();
  d.validate();
  return d;
}

// The differentiable search model: every component is materialized once, the
// wiring among them is whatever alpha/beta (search) or a descriptor (fixed)
// says. Parameter registration order is construction order and never changes,
// so optimizer state and reinitialization line up run to run.
class Supernet {
 public:
  Supernet(FieldSchema schema, SupernetConfig cfg, std::uint64_t seed)
      : schema_(std::move(schema)), cfg_(std::move(cfg)),
        graph_(ComponentGraph::make(cfg_.n, cfg_.with_s0)) {
    cfg_.validate();
    schema_.validate();
    sites_.resize(graph_.count());
    reinit_theta(seed);
    reset_arch();
  }

  const ComponentGraph& graph() const { return graph_; }
  const SupernetConfig& config() const { return cfg_; }
  void set_mode(SupernetMode m) { cfg_.mode = m; }
  const FieldSchema& schema() const { return schema_; }
  std::size_t width() const { return schema_.width(); }

  ConnectionParams& conn() { return conn_; }
  OperationParams& ops() { return ops_; }

  // Model weights Theta: embeddings, component transforms, fusion-op weights.
  std::vector<Parameter*> theta_params() {
    std::vector<Parameter*> out;
    emb_.collect(out);
    for (std::size_t id = 1; id < graph_.count(); ++id) {
      Site& s = sites_[id];
      switch (graph_.components[id].kind) {
        case ComponentKind::Cross: s.cross.collect(out); break;
        case ComponentKind::Deep: s.deep.collect(out); break;
        case ComponentKind::Output: s.out.collect(out); break;
        case ComponentKind::Embedding: break;
      }
      s.fusion.collect(out);
    }
    return out;
  }

  // Architecture parameters: alpha then beta.
  std::vector<Parameter*> arch_params() { return {&conn_.alpha, &ops_.beta}; }

  // Draws fresh component weights in registration order; used both at
  // construction and for the from-scratch retrain stage.
  void reinit_theta(std::uint64_t seed) {
    Rng rng(seed);
    emb_ = EmbeddingParams();
    emb_.init("emb", schema_, rng);
    std::size_t d = width();
    for (std::size_t id = 1; id < graph_.count(); ++id) {
      const Component& c = graph_.components[id];
      Site site;
      switch (c.kind) {
        case ComponentKind::Cross: site.cross.init(c.name, d, rng); break;
        case ComponentKind::Deep: site.deep.init(c.name, d, rng); break;
        case ComponentKind::Output: site.out.init(c.name, d, rng); break;
        case ComponentKind::Embedding: break;
      }
      site.fusion.init(c.name, d, graph_.predecessors(id).size(), cfg_.op_set,
                       rng);
      sites_[id] = std::move(site);
    }
  }

  void reset_arch() {
    conn_.init(graph_);
    ops_.init(graph_, cfg_.op_set);
  }

  void set_descriptor(ArchitectureDescriptor d) {
    d.validate();
    if (d.n != cfg_.n || d.with_s0 != cfg_.with_s0)
      throw ArgumentError("descriptor graph shape does not match supernet");
    if (d.op_set != cfg_.op_set)
      throw ArgumentError("descriptor op_set does not match supernet");
    desc_ = std::move(d);
  }

  const std::optional<ArchitectureDescriptor>& descriptor() const {
    return desc_;
  }

  // field-major batch: field_idx[f][b] is field f's vocab index in row b.
  Var forward(Tape& t, const std::vector<std::vector<std::size_t>>& field_idx) {
    if (cfg_.mode == SupernetMode::search) return forward_search(t, field_idx);
    if (!desc_)
      throw ContractError(std::string(mode_str(cfg_.mode)) +
                          " forward requires a descriptor");
    return forward_fixed(t, field_idx, *desc_);
  }

  Var forward_search(Tape& t,
                     const std::vector<std::vector<std::size_t>>& field_idx) {
    Var alpha = t.leaf(conn_.alpha);
    Var beta = t.leaf(ops_.beta);
    std::vector<Var> outs(graph_.count(), Var{});
    outs[0] = embedding_forward(t, schema_, emb_, field_idx);
    for (std::size_t id = 1; id < graph_.count(); ++id) {
      std::vector<std::size_t> preds = graph_.predecessors(id);
      std::vector<Var> slots, gates;
      for (std::size_t p : preds) {
        slots.push_back(outs[p]);
        gates.push_back(gate(t, alpha, conn_, p, id));
      }
      Var probs =
          t.softmax_rows(t.slice_col(beta, graph_.fusion_col(id)));
      std::vector<Var> ws;
      for (std::size_t o = 0; o < cfg_.op_set.size(); ++o)
        ws.push_back(t.slice_scalar(probs, o));
      Var fused =
          mix_operations(t, cfg_.op_set, ws, sites_[id].fusion, slots, gates);
      outs[id] = component_forward(t, id, outs[0], fused);
    }
    return outs[graph_.count() - 1];
  }

  Var forward_fixed(Tape& t,
                    const std::vector<std::vector<std::size_t>>& field_idx,
                    const ArchitectureDescriptor& d) {
    if (d.n != cfg_.n || d.with_s0 != cfg_.with_s0)
      throw ArgumentError("descriptor graph shape does not match supernet");
    if (d.op_set != cfg_.op_set)
      throw ArgumentError("descriptor op_set does not match supernet");
    std::vector<Var> outs(graph_.count(), Var{});
    outs[0] = embedding_forward(t, schema_, emb_, field_idx);
    for (std::size_t id = 1; id < graph_.count(); ++id) {
      std::vector<std::size_t> preds = graph_.predecessors(id);
      std::vector<Var> slots, gates;
      for (std::size_t p : preds) {
        slots.push_back(outs[p]);
        gates.push_back(t.scalar_const(d.connections[p][id] ? 1.0 : 0.0));
      }
      const OpChoice& oc = d.operations[graph_.fusion_col(id)];
      Var fused;
      if (oc.soft) {
        std::vector<Var> ws;
        for (double p : oc.probs) ws.push_back(t.scalar_const(p));
        fused = mix_operations(t, d.op_set, ws, sites_[id].fusion, slots,
                               gates);
      } else {
        fused = fuse(t, oc.hard, sites_[id].fusion, slots, gates);
      }
      outs[id] = component_forward(t, id, outs[0], fused);
    }
    return outs[graph_.count() - 1];
  }

  // Reads the current alpha/beta into a standalone architecture.
  ArchitectureDescriptor discretize(DiscretizeVariant v) const {
    ArchitectureDescriptor d;
    d.n = cfg_.n;
    d.with_s0 = cfg_.with_s0;
    d.op_set = cfg_.op_set;
    std::size_t c = graph_.count();
    d.connections.assign(c, std::vector<bool>(c, false));
    for (std::size_t s = 0; s < c; ++s)
      for (std::size_t t = 0; t < c; ++t)
        if (conn_.masked_true(s, t))
          d.connections[s][t] = conn_.alpha.value[s * c + t] > 0.0;
    for (std::size_t id : graph_.fusion_ids()) {
      std::size_t col = graph_.fusion_col(id);
      OpChoice oc;
      if (v == DiscretizeVariant::hard) {
        std::size_t best = 0;
        for (std::size_t o = 1; o < cfg_.op_set.size(); ++o)
          if (ops_.beta.value.at(o, col) > ops_.beta.value.at(best, col))
            best = o;
        oc.hard = cfg_.op_set[best];
      } else {
        oc.soft = true;
        double m = ops_.beta.value.at(0, col);
        for (std::size_t o = 1; o < cfg_.op_set.size(); ++o)
          m = std::max(m, ops_.beta.value.at(o, col));
        double sum = 0.0;
        for (std::size_t o = 0; o < cfg_.op_set.size(); ++o) {
          oc.probs.push_back(std::exp(ops_.beta.value.at(o, col) - m));
          sum += oc.probs.back();
        }
        for (double& p : oc.probs) p /= sum;
      }
      d.operations.push_back(std::move(oc));
    }
    d.recompute_dead();
    d.validate();
    return d;
  }

 private:
  struct Site {
    CrossParams cross;
    DeepParams deep;
    OutputParams out;
    FusionParams fusion;
  };

  Var component_forward(Tape& t, std::size_t id, Var emb_out, Var fused) {
    Site& s = sites_[id];
    switch (graph_.components[id].kind) {
      case ComponentKind::Cross:
        return cross_layer_forward(t, s.cross, emb_out, fused);
      case ComponentKind::Deep: return deep_layer_forward(t, s.deep, fused);
      case ComponentKind::Output: return output_forward(t, s.out, fused);
      case ComponentKind::Embedding: break;
    }
    throw ContractError("component_forward on embedding");
  }

  FieldSchema schema_;
  SupernetConfig cfg_;
  ComponentGraph graph_;
  EmbeddingParams emb_;
  std::vector<Site> sites_;
  ConnectionParams conn_;
  OperationParams ops_;
  std::optional<ArchitectureDescriptor> desc_;
};

inline constexpr int kArchFormatVersion = 1;

inline std::string serialize(const ArchitectureDescriptor& d) {
  d.validate();
  ComponentGraph g = d.graph();
  nlohmann::ordered_json j;
  j["format"] = "optfusion-arch";
  j["version"] = kArchFormatVersion;
  j["n"] = d.n;
  j["with_s0"] = d.with_s0;
  j["op_set"] = nlohmann::ordered_json::array();
  for (FusionOpKind o : d.op_set) j["op_set"].push_back(op_str(o));
  j["components"] = nlohmann::ordered_json::array();
  for (const Component& c : g.components) {
    nlohmann::ordered_json cj;
    cj["id"] = c.id;
    cj["name"] = c.name;
    cj["kind"] = kind_str(c.kind);
    cj["level"] = c.level;
    cj["dead"] = static_cast<bool>(d.dead[c.id]);
    j["components"].push_back(std::move(cj));
  }
  j["edges"] = nlohmann::ordered_json::array();
  for (std::size_t s = 0; s < g.count(); ++s)
    for (std::size_t t = 0; t < g.count(); ++t)
      if (d.connections[s][t]) j["edges"].push_back({s, t});
  j["operations"] = nlohmann::ordered_json::array();
  for (std::size_t id : g.fusion_ids()) {
    const OpChoice& oc = d.operations[g.fusion_col(id)];
    nlohmann::ordered_json oj;
    oj["component"] = g.components[id].name;
    if (oc.soft)
      oj["soft"] = oc.probs;
    else
      oj["hard"] = op_str(oc.hard);
    j["operations"].push_back(std::move(oj));
  }
  j["metadata"] = {{"seed", d.metadata.seed},
                   {"dataset", d.metadata.dataset},
                   {"stage", d.metadata.stage}};
  return j.dump(2) + "\n";
}

namespace detail {
template <typename T>
T json_get(const nlohmann::ordered_json& j, const std::string& path) {
  const nlohmann::ordered_json* cur = &j;
  std::string walked;
  std::istringstream ss(path);
  std::string key;
  while (std::getline(ss, key, '.')) {
    walked += walked.empty() ? key : "." + key;
    if (!cur->is_object() || !cur->contains(key))
      throw SchemaError(walked + ": missing field");
    cur = &(*cur)[key];
  }
  try {
    return cur->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw SchemaError(path + ": wrong type");
  }
}
}  // namespace detail

inline ArchitectureDescriptor deserialize(const std::string& text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("document is not valid JSON: ") + e.what());
  }
  if (detail::json_get<std::string>(j, "format") != "optfusion-arch")
    throw SchemaError("format: expected 'optfusion-arch'");
  if (detail::json_get<int>(j, "version") != kArchFormatVersion)
    throw SchemaError("version: expected " +
                      std::to_string(kArchFormatVersion));

  ArchitectureDescriptor d;
  d.n = detail::json_get<std::size_t>(j, "n");
  d.with_s0 = detail::json_get<bool>(j, "with_s0");
  if (d.n < 1) throw SchemaError("n: must be >= 1");
  ComponentGraph g = d.graph();
  std::size_t c = g.count();

  if (!j.contains("op_set") || !j["op_set"].is_array())
    throw SchemaError("op_set: missing or not an array");
  for (const auto& o : j["op_set"]) {
    if (!o.is_string()) throw SchemaError("op_set: entries must be strings");
    try {
      d.op_set.push_back(op_from_str(o.get<std::string>()));
    } catch (const ArgumentError& e) {
      throw SchemaError(std::string("op_set: ") + e.what());
    }
  }

  if (!j.contains("components") || !j["components"].is_array() ||
      j["components"].size() != c)
    throw SchemaError("components: expected " + std::to_string(c) +
                      " entries");
  d.dead.assign(c, false);
  for (std::size_t i = 0; i < c; ++i) {
    const auto& cj = j["components"][i];
    std::string path = "components[" + std::to_string(i) + "]";
    if (detail::json_get<std::size_t>(cj, "id") != i)
      throw SchemaError(path + ".id: expected " + std::to_string(i));
    if (detail::json_get<std::string>(cj, "name") != g.components[i].name)
      throw SchemaError(path + ".name: expected " + g.components[i].name);
    if (detail::json_get<std::string>(cj, "kind") !=
        kind_str(g.components[i].kind))
      throw SchemaError(path + ".kind: expected " +
                        std::string(kind_str(g.components[i].kind)));
    if (detail::json_get<std::size_t>(cj, "level") != g.components[i].level)
      throw SchemaError(path + ".level: expected " +
                        std::to_string(g.components[i].level));
    d.dead[i] = detail::json_get<bool>(cj, "dead");
  }

  d.connections.assign(c, std::vector<bool>(c, false));
  if (!j.contains("edges") || !j["edges"].is_array())
    throw SchemaError("edges: missing or not an array");
  for (std::size_t k = 0; k < j["edges"].size(); ++k) {
    const auto& e = j["edges"][k];
    std::string path = "edges[" + std::to_string(k) + "]";
    if (!e.is_array() || e.size() != 2)
      throw SchemaError(path + ": expected [src, dst]");
    std::size_t s, t;
    try {
      s = e[0].get<std::size_t>();
      t = e[1].get<std::size_t>();
    } catch (const nlohmann::json::exception&) {
      throw SchemaError(path + ": endpoints must be integers");
    }
    if (s >= c || t >= c)
      throw SchemaError(path + ": component id out of range");
    if (!g.edge_allowed(s, t))
      throw SchemaError(path + ": level(" + g.components[s].name +
                        ") >= level(" + g.components[t].name + ")");
    d.connections[s][t] = true;
  }

  std::vector<std::size_t> fids = g.fusion_ids();
  if (!j.contains("operations") || !j["operations"].is_array() ||
      j["operations"].size() != fids.size())
    throw SchemaError("operations: expected " + std::to_string(fids.size()) +
                      " entries");
  for (std::size_t i = 0; i < fids.size(); ++i) {
    const auto& oj = j["operations"][i];
    std::string path = "operations[" + std::to_string(i) + "]";
    if (detail::json_get<std::string>(oj, "component") !=
        g.components[fids[i]].name)
      throw SchemaError(path + ".component: expected " +
                        g.components[fids[i]].name);
    OpChoice oc;
    if (oj.contains("soft")) {
      oc.soft = true;
      try {
        oc.probs = oj["soft"].get<std::vector<double>>();
      } catch (const nlohmann::json::exception&) {
        throw SchemaError(path + ".soft: expected an array of numbers");
      }
    } else if (oj.contains("hard")) {
      try {
        oc.hard = op_from_str(detail::json_get<std::string>(oj, "hard"));
      } catch (const ArgumentError& e) {
        throw SchemaError(path + ".hard: " + e.what());
      }
    } else {
      throw SchemaError(path + ": needs either 'hard' or 'soft'");
    }
    d.operations.push_back(std::move(oc));
  }

  if (j.contains("metadata")) {
    d.metadata.seed = detail::json_get<std::uint64_t>(j, "metadata.seed");
    d.metadata.dataset =
        detail::json_get<std::string>(j, "metadata.dataset");
    d.metadata.stage = detail::json_get<std::string>(j, "metadata.stage");
  }

  d.validate();
  return d;
}

// Graphviz rendering of a descriptor; node order is id order, so the output
// is byte-stable for equal descriptors.
inline std::string export_dot(const ArchitectureDescriptor& d) {
  d.validate();
  ComponentGraph g = d.graph();
  std::ostringstream out;
  out << "digraph optfusion {\n  rankdir=LR;\n";
  for (const Component& c : g.components) {
    out << "  c" << c.id << " [label=\"" << c.name << "\\n" << kind_str(c.kind);
    if (g.fusion_capable(c.id)) {
      const OpChoice& oc = d.operations[g.fusion_col(c.id)];
      if (oc.soft) {
        std::size_t best = 0;
        for (std::size_t o = 1; o < oc.probs.size(); ++o)
          if (oc.probs[o] > oc.probs[best]) best = o;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.3f", oc.probs[best]);
        out << " " << op_str(d.op_set[best]) << "~" << buf;
      } else {
        out << " " << op_str(oc.hard);
      }
    }
    if (d.dead[c.id]) out << " (dead)";
    out << "\"";
    if (d.dead[c.id]) out << " style=dashed";
    out << "];\n";
  }
  for (std::size_t s = 0; s < g.count(); ++s)
    for (std::size_t t = 0; t < g.count(); ++t)
      if (d.connections[s][t]) out << "  c" << s << " -> c" << t << ";\n";
  out << "}\n";
  return out.str();
}

}  // namespace optfusion
