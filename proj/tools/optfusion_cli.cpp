// optfusion: preprocess -> search -> retrain -> report pipeline driver.
//
// Every artifact embeds the resolved config hash and seed, and every command
// is byte-deterministic given identical inputs, config, and seed; wall-clock
// timings therefore go to stdout only, never into persisted logs.
#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "optfusion/data.hpp"
#include "optfusion/search.hpp"
#include "optfusion/supernet.hpp"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using namespace optfusion;

namespace {

// Flat key set shared by the config file and the command-line flags; flags
// always win over file values.
struct RunConfig {
  // model
  std::size_t n = 3;
  std::size_t emb_dim = 8;
  bool with_s0 = true;
  std::string ops = "ADD,PROD,CONCAT,ATT";
  std::string mode = "soft";     // soft | hard
  std::string algo = "oneshot";  // oneshot | sequential
  // training
  std::uint64_t seed = 0;
  double lr = 1e-3;
  double arch_lr = -1.0;  // < 0: same as lr
  double l2 = 0.0;
  std::size_t batch_size = 4096;
  std::size_t epochs_search = 1;
  std::size_t epochs_retrain = 10;
  std::size_t patience = 2;
  // data
  std::string dataset = "synthetic";  // synthetic | criteo-tsv | encoded-cache
  std::string input;                  // the one field without a default
  std::string splits = "0.8,0.1,0.1";
  std::uint64_t split_seed = 0;
  std::size_t min_count = 2;
  bool base2 = false;
  std::size_t fields = 10;
  std::size_t vocab = 100;
  std::size_t samples = 20000;
  double noise = 0.0;
  std::string teacher = "stacked";  // parallel | stacked
  std::size_t teacher_n = 2;
  std::uint64_t teacher_seed = 1;
  std::uint64_t data_seed = 2;
  double logit_scale = 4.0;
  // artifacts / orchestration
  std::string out = "run";
  std::string descriptor;  // file, or a run dir resolved through --mode
  std::string preset_name;
  std::string seeds;  // csv fan-out list
  std::size_t jobs = 1;
};

ojson config_json(const RunConfig& c) {
  ojson j;
  j["n"] = c.n;
  j["emb-dim"] = c.emb_dim;
  j["with-s0"] = c.with_s0;
  j["ops"] = c.ops;
  j["mode"] = c.mode;
  j["algo"] = c.algo;
  j["seed"] = c.seed;
  j["lr"] = c.lr;
  j["arch-lr"] = c.arch_lr;
  j["l2"] = c.l2;
  j["batch-size"] = c.batch_size;
  j["epochs-search"] = c.epochs_search;
  j["epochs-retrain"] = c.epochs_retrain;
  j["patience"] = c.patience;
  j["dataset"] = c.dataset;
  j["input"] = c.input;
  j["splits"] = c.splits;
  j["split-seed"] = c.split_seed;
  j["min-count"] = c.min_count;
  j["base2"] = c.base2;
  j["fields"] = c.fields;
  j["vocab"] = c.vocab;
  j["samples"] = c.samples;
  j["noise"] = c.noise;
  j["teacher"] = c.teacher;
  j["teacher-n"] = c.teacher_n;
  j["teacher-seed"] = c.teacher_seed;
  j["data-seed"] = c.data_seed;
  j["logit-scale"] = c.logit_scale;
  j["out"] = c.out;
  j["descriptor"] = c.descriptor;
  j["preset"] = c.preset_name;
  j["seeds"] = c.seeds;
  j["jobs"] = c.jobs;
  return j;
}

// Identity of the experiment, not of its location: output paths and fan-out
// bookkeeping stay out so reruns into fresh directories hash identically.
std::string config_hash(const RunConfig& c) {
  ojson j = config_json(c);
  j.erase("out");
  j.erase("seeds");
  j.erase("jobs");
  std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <class T>
void take_number(const ojson& v, const std::string& key, T& dst) {
  if (!v.is_number())
    throw InputError("config: key '" + key + "': expected a number");
  dst = v.get<T>();
}

void take(const ojson& v, const std::string& key, std::string& dst) {
  if (!v.is_string())
    throw InputError("config: key '" + key + "': expected a string");
  dst = v.get<std::string>();
}

void take(const ojson& v, const std::string& key, bool& dst) {
  if (!v.is_boolean())
    throw InputError("config: key '" + key + "': expected a boolean");
  dst = v.get<bool>();
}

void apply_config_file(RunConfig& c, const std::string& path) {
  ojson j;
  try {
    j = ojson::parse(read_file(path));
  } catch (const ojson::exception& e) {
    throw InputError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw InputError("config " + path + ": not an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "n") take_number(v, key, c.n);
    else if (key == "emb-dim") take_number(v, key, c.emb_dim);
    else if (key == "with-s0") take(v, key, c.with_s0);
    else if (key == "ops") take(v, key, c.ops);
    else if (key == "mode") take(v, key, c.mode);
    else if (key == "algo") take(v, key, c.algo);
    else if (key == "seed") take_number(v, key, c.seed);
    else if (key == "lr") take_number(v, key, c.lr);
    else if (key == "arch-lr") take_number(v, key, c.arch_lr);
    else if (key == "l2") take_number(v, key, c.l2);
    else if (key == "batch-size") take_number(v, key, c.batch_size);
    else if (key == "epochs-search") take_number(v, key, c.epochs_search);
    else if (key == "epochs-retrain") take_number(v, key, c.epochs_retrain);
    else if (key == "patience") take_number(v, key, c.patience);
    else if (key == "dataset") take(v, key, c.dataset);
    else if (key == "input") take(v, key, c.input);
    else if (key == "splits") take(v, key, c.splits);
    else if (key == "split-seed") take_number(v, key, c.split_seed);
    else if (key == "min-count") take_number(v, key, c.min_count);
    else if (key == "base2") take(v, key, c.base2);
    else if (key == "fields") take_number(v, key, c.fields);
    else if (key == "vocab") take_number(v, key, c.vocab);
    else if (key == "samples") take_number(v, key, c.samples);
    else if (key == "noise") take_number(v, key, c.noise);
    else if (key == "teacher") take(v, key, c.teacher);
    else if (key == "teacher-n") take_number(v, key, c.teacher_n);
    else if (key == "teacher-seed") take_number(v, key, c.teacher_seed);
    else if (key == "data-seed") take_number(v, key, c.data_seed);
    else if (key == "logit-scale") take_number(v, key, c.logit_scale);
    else if (key == "out") take(v, key, c.out);
    else if (key == "descriptor") take(v, key, c.descriptor);
    else if (key == "preset") take(v, key, c.preset_name);
    else if (key == "seeds") take(v, key, c.seeds);
    else if (key == "jobs") take_number(v, key, c.jobs);
    else throw InputError("config " + path + ": unknown key '" + key + "'");
  }
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    std::size_t comma = s.find(',', start);
    out.push_back(s.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.size() == 1 && out[0].empty()) out.clear();
  return out;
}

std::vector<FusionOpKind> parse_ops(const std::string& csv) {
  std::vector<FusionOpKind> ops;
  for (const std::string& tok : split_csv(csv)) ops.push_back(op_from_str(tok));
  if (ops.empty()) throw InputError("--ops: empty operation set");
  return ops;
}

std::vector<double> parse_splits(const std::string& csv) {
  std::vector<std::string> toks = split_csv(csv);
  if (toks.size() != 3)
    throw InputError("--splits: expected three ratios, got '" + csv + "'");
  std::vector<double> r;
  for (const std::string& t : toks) {
    try {
      r.push_back(std::stod(t));
    } catch (const std::exception&) {
      throw InputError("--splits: bad ratio '" + t + "'");
    }
  }
  return r;
}

std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
  std::vector<std::uint64_t> out;
  for (const std::string& t : split_csv(csv)) {
    try {
      out.push_back(std::stoull(t));
    } catch (const std::exception&) {
      throw InputError("--seeds: bad seed '" + t + "'");
    }
  }
  return out;
}

void check_choice(const std::string& value, const char* flag,
                  std::initializer_list<const char*> allowed) {
  for (const char* a : allowed)
    if (value == a) return;
  std::string msg = std::string(flag) + ": got '" + value + "', expected one of";
  for (const char* a : allowed) msg += std::string(" ") + a;
  throw InputError(msg);
}

TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.learning_rate = c.lr;
  t.arch_learning_rate = c.arch_lr;
  t.l2 = c.l2;
  t.batch_size = c.batch_size;
  t.selection_epochs = c.epochs_search;
  t.retrain_epochs = c.epochs_retrain;
  t.early_stop_patience = c.patience;
  t.seed = c.seed;
  return t;
}

struct LoadedData {
  EncodedDataset train, val, test;
  std::string describe;
};

LoadedData load_data(const RunConfig& c) {
  check_choice(c.dataset, "--dataset",
               {"synthetic", "criteo-tsv", "encoded-cache"});
  LoadedData d;
  if (c.dataset == "synthetic") {
    check_choice(c.teacher, "--teacher", {"parallel", "stacked"});
    SyntheticSpec spec;
    spec.num_fields = c.fields;
    spec.vocab_size = c.vocab;
    spec.emb_dim = c.emb_dim;
    spec.samples = c.samples;
    spec.teacher = preset(preset_from_str(c.teacher), c.teacher_n);
    spec.teacher_seed = c.teacher_seed;
    spec.data_seed = c.data_seed;
    spec.noise = c.noise;
    spec.logit_scale = c.logit_scale;
    EncodedDataset all = generate_synthetic(spec);
    auto parts = optfusion::split(all, parse_splits(c.splits), c.split_seed);
    d.train = std::move(parts[0]);
    d.val = std::move(parts[1]);
    d.test = std::move(parts[2]);
    char buf[192];
    std::snprintf(buf, sizeof buf,
                  "synthetic(fields=%zu,vocab=%zu,emb=%zu,samples=%zu,"
                  "teacher=%s:%zu,teacher_seed=%llu,data_seed=%llu,noise=%g,"
                  "logit_scale=%g)",
                  c.fields, c.vocab, c.emb_dim, c.samples, c.teacher.c_str(),
                  c.teacher_n, static_cast<unsigned long long>(c.teacher_seed),
                  static_cast<unsigned long long>(c.data_seed), c.noise,
                  c.logit_scale);
    d.describe = buf;
  } else if (c.dataset == "encoded-cache") {
    if (c.input.empty())
      throw InputError("--input: required for --dataset encoded-cache");
    d.train = deserialize_dataset(read_file(c.input + "/train.json"));
    d.val = deserialize_dataset(read_file(c.input + "/val.json"));
    d.test = deserialize_dataset(read_file(c.input + "/test.json"));
    d.describe = "encoded-cache:" + c.input;
  } else {
    if (c.input.empty())
      throw InputError("--input: required for --dataset criteo-tsv");
    std::vector<RawRecord> records = parse_tsv(c.input);
    std::vector<std::vector<std::string>> token_rows;
    std::vector<int> labels;
    for (const RawRecord& r : records) {
      token_rows.push_back(criteo_transform(r, c.base2));
      labels.push_back(r.label);
    }
    Vocabulary v = build_vocab(token_rows, c.min_count);
    EncodedDataset all = encode(token_rows, labels, v);
    auto parts = optfusion::split(all, parse_splits(c.splits), c.split_seed);
    d.train = std::move(parts[0]);
    d.val = std::move(parts[1]);
    d.test = std::move(parts[2]);
    d.describe = "criteo-tsv:" + c.input;
  }
  return d;
}

void write_artifact(const std::string& path, const ojson& j, int indent = 2) {
  write_file(path, j.dump(indent) + "\n");
}

void write_abort(const RunConfig& c, const std::string& stage,
                 const std::string& error) {
  ojson j;
  j["format"] = "optfusion-abort";
  j["version"] = 1;
  j["stage"] = stage;
  j["error"] = error;
  j["seed"] = c.seed;
  j["config_hash"] = config_hash(c);
  write_artifact(c.out + "/abort.json", j);
}

std::string log_header(const RunConfig& c, const std::string& command) {
  ojson j;
  j["format"] = "optfusion-log";
  j["version"] = 1;
  j["command"] = command;
  j["seed"] = c.seed;
  j["config_hash"] = config_hash(c);
  return j.dump();
}

// Persisted log lines carry only the deterministic fields; timings go to
// stdout, keeping reruns byte-identical.
std::string log_lines(const RunConfig& c, const std::string& command,
                      const std::vector<EpochLog>& logs) {
  std::string out = log_header(c, command) + "\n";
  for (const EpochLog& l : logs) {
    ojson j;
    j["stage"] = l.stage;
    j["epoch"] = l.epoch;
    j["train_loss"] = l.train_loss;
    j["val_auc"] = l.val_auc;
    j["val_logloss"] = l.val_logloss;
    out += j.dump() + "\n";
  }
  return out;
}

void echo_logs(const std::vector<EpochLog>& logs) {
  for (const EpochLog& l : logs)
    std::printf("[%s] epoch %zu train_loss=%.6f val_auc=%.6f val_logloss=%.6f "
                "(%.2fs)\n",
                l.stage.c_str(), l.epoch, l.train_loss, l.val_auc,
                l.val_logloss, l.wall_time_s);
}

void write_run_record(const RunConfig& c, const std::string& command) {
  ojson j;
  j["format"] = "optfusion-run";
  j["version"] = 1;
  j["command"] = command;
  j["config_hash"] = config_hash(c);
  j["seed"] = c.seed;
  j["config"] = config_json(c);
  write_artifact(c.out + "/run.json", j);
}

int cmd_preprocess(const RunConfig& c) {
  if (c.input.empty()) throw InputError("preprocess: --input is required");
  std::vector<RawRecord> records = parse_tsv(c.input);
  std::vector<std::vector<std::string>> token_rows;
  std::vector<int> labels;
  for (const RawRecord& r : records) {
    token_rows.push_back(criteo_transform(r, c.base2));
    labels.push_back(r.label);
  }
  Vocabulary vocab = build_vocab(token_rows, c.min_count);
  EncodedDataset all = encode(token_rows, labels, vocab);
  auto parts = optfusion::split(all, parse_splits(c.splits), c.split_seed);

  fs::create_directories(c.out);
  write_file(c.out + "/vocab.json", serialize_vocab(vocab));
  write_file(c.out + "/train.json", serialize_dataset(parts[0]));
  write_file(c.out + "/val.json", serialize_dataset(parts[1]));
  write_file(c.out + "/test.json", serialize_dataset(parts[2]));

  double positives = 0.0;
  for (double y : all.labels) positives += y;
  ojson stats;
  stats["format"] = "optfusion-stats";
  stats["version"] = 1;
  stats["rows"] = all.size();
  stats["positives"] = static_cast<std::size_t>(positives);
  stats["pos_ratio"] = positives / static_cast<double>(all.size());
  stats["fields"] = vocab.num_fields();
  stats["vocab_sizes"] = vocab.vocab_sizes();
  stats["splits"] = {{"train", parts[0].size()},
                     {"val", parts[1].size()},
                     {"test", parts[2].size()}};
  stats["seed"] = c.split_seed;
  stats["config_hash"] = config_hash(c);
  stats["config"] = config_json(c);
  write_artifact(c.out + "/stats.json", stats);

  std::printf("preprocess: %zu rows, %zu fields, pos_ratio=%.6f -> %s\n",
              all.size(), vocab.num_fields(),
              positives / static_cast<double>(all.size()), c.out.c_str());
  return 0;
}

int run_search_once(const RunConfig& c) {
  check_choice(c.algo, "--algo", {"oneshot", "sequential"});
  LoadedData data = load_data(c);
  FieldSchema schema = data.train.schema(c.emb_dim);
  SupernetConfig scfg{c.n, c.with_s0, SupernetMode::search, parse_ops(c.ops)};
  Supernet net(schema, scfg, c.seed);
  TrainConfig tcfg = train_config(c);

  fs::create_directories(c.out);
  std::vector<EpochLog> logs;
  try {
    logs = c.algo == "oneshot"
               ? selection_stage(net, tcfg, data.train, data.val)
               : sequential_selection(net, tcfg, data.train, data.val);
  } catch (const DivergenceError& e) {
    write_abort(c, "search", e.what());
    throw;
  }
  echo_logs(logs);
  write_file(c.out + "/search_log.jsonl", log_lines(c, "search", logs));

  ojson ab;
  ab["format"] = "optfusion-arch-params";
  ab["version"] = 1;
  ab["n"] = c.n;
  ab["with_s0"] = c.with_s0;
  ojson names = ojson::array();
  for (FusionOpKind k : net.config().op_set) names.push_back(op_str(k));
  ab["op_set"] = names;
  ab["alpha"] = {{"shape", net.conn().alpha.value.shape()},
                 {"values", net.conn().alpha.value.vec()}};
  ab["beta"] = {{"shape", net.ops().beta.value.shape()},
                {"values", net.ops().beta.value.vec()}};
  ab["seed"] = c.seed;
  ab["config_hash"] = config_hash(c);
  write_artifact(c.out + "/alpha_beta.json", ab);

  ArchitectureDescriptor soft = net.discretize(DiscretizeVariant::soft);
  ArchitectureDescriptor hard = net.discretize(DiscretizeVariant::hard);
  soft.metadata = {c.seed, data.describe, "search:" + c.algo + ":soft"};
  hard.metadata = {c.seed, data.describe, "search:" + c.algo + ":hard"};
  write_file(c.out + "/descriptor_soft.json", serialize(soft));
  write_file(c.out + "/descriptor_hard.json", serialize(hard));
  write_file(c.out + "/architecture_soft.dot", export_dot(soft));
  write_file(c.out + "/architecture_hard.dot", export_dot(hard));
  write_run_record(c, "search");

  std::printf("search: %s val_auc=%.6f -> %s/descriptor_{soft,hard}.json\n",
              c.algo.c_str(), logs.empty() ? 0.0 : logs.back().val_auc,
              c.out.c_str());
  return 0;
}

// Fans one search per seed across at most `jobs` worker processes, each
// writing into <out>/seed-<s>/ with its console captured alongside.
int run_search_fanout(const RunConfig& c,
                      const std::vector<std::uint64_t>& seeds) {
  if (c.jobs < 1) throw InputError("--jobs: must be >= 1");
  char exe[4096];
  ssize_t len = readlink("/proc/self/exe", exe, sizeof exe - 1);
  if (len <= 0) throw InputError("fan-out: cannot resolve own binary path");
  exe[len] = '\0';

  fs::create_directories(c.out);
  ojson parent;
  parent["format"] = "optfusion-run";
  parent["version"] = 1;
  parent["command"] = "search-fanout";
  parent["seeds"] = seeds;
  parent["jobs"] = c.jobs;
  parent["config"] = config_json(c);
  write_artifact(c.out + "/run.json", parent);

  std::vector<std::string> dirs;
  for (std::uint64_t s : seeds) {
    RunConfig child = c;
    child.seed = s;
    child.out = c.out + "/seed-" + std::to_string(s);
    child.seeds.clear();
    child.jobs = 1;
    fs::create_directories(child.out);
    write_artifact(child.out + "/config.json", config_json(child));
    dirs.push_back(child.out);
  }

  std::vector<pid_t> pids(seeds.size(), -1);
  std::vector<int> codes(seeds.size(), -1);
  std::size_t launched = 0, running = 0, done = 0;
  while (done < seeds.size()) {
    while (launched < seeds.size() && running < c.jobs) {
      const std::string cfg_path = dirs[launched] + "/config.json";
      const std::string log_path = dirs[launched] + "/console.log";
      pid_t pid = fork();
      if (pid < 0) throw InputError("fan-out: fork failed");
      if (pid == 0) {
        if (!std::freopen(log_path.c_str(), "w", stdout)) _exit(127);
        if (!std::freopen(log_path.c_str(), "a", stderr)) _exit(127);
        execl(exe, exe, "search", "--config", cfg_path.c_str(),
              static_cast<char*>(nullptr));
        _exit(127);
      }
      pids[launched] = pid;
      ++launched;
      ++running;
    }
    int status = 0;
    pid_t pid = waitpid(-1, &status, 0);
    if (pid < 0) throw InputError("fan-out: waitpid failed");
    for (std::size_t i = 0; i < pids.size(); ++i)
      if (pids[i] == pid) {
        codes[i] = WIFEXITED(status) ? WEXITSTATUS(status) : 127;
        --running;
        ++done;
      }
  }

  int rc = 0;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    std::printf("seed %llu: exit %d -> %s\n",
                static_cast<unsigned long long>(seeds[i]), codes[i],
                dirs[i].c_str());
    if (codes[i] != 0 && rc == 0) rc = codes[i];
  }
  return rc;
}

int cmd_search(const RunConfig& c) {
  std::vector<std::uint64_t> seeds = parse_seeds(c.seeds);
  if (seeds.empty()) return run_search_once(c);
  return run_search_fanout(c, seeds);
}

ArchitectureDescriptor resolve_descriptor(const RunConfig& c) {
  if (!c.preset_name.empty()) {
    check_choice(c.preset_name, "--preset", {"parallel", "stacked"});
    return preset(preset_from_str(c.preset_name), c.n, parse_ops(c.ops));
  }
  if (c.descriptor.empty())
    throw InputError("retrain: need --descriptor or --preset");
  check_choice(c.mode, "--mode", {"soft", "hard"});
  std::string path = fs::is_directory(c.descriptor)
                         ? c.descriptor + "/descriptor_" + c.mode + ".json"
                         : c.descriptor;
  return deserialize(read_file(path));
}

int cmd_retrain(const RunConfig& c) {
  ArchitectureDescriptor desc = resolve_descriptor(c);
  LoadedData data = load_data(c);
  FieldSchema schema = data.train.schema(c.emb_dim);
  SupernetConfig scfg{desc.n, desc.with_s0, SupernetMode::fixed, desc.op_set};
  Supernet net(schema, scfg, c.seed);
  TrainConfig tcfg = train_config(c);

  fs::create_directories(c.out);
  RetrainResult r;
  try {
    r = retrain_stage(net, tcfg, desc, data.train, data.val, data.test);
  } catch (const DivergenceError& e) {
    write_abort(c, "retrain", e.what());
    throw;
  }
  echo_logs(r.logs);

  const std::string suffix =
      !desc.operations.empty() && desc.operations.front().soft ? "soft"
                                                               : "hard";
  write_file(c.out + "/retrain_log_" + suffix + ".jsonl",
             log_lines(c, "retrain", r.logs));

  ojson m;
  m["format"] = "optfusion-metrics";
  m["version"] = 1;
  m["stage"] = "retrain_" + suffix;
  m["auc"] = r.test.auc;
  m["logloss"] = r.test.logloss;
  m["best_epoch"] = r.best_epoch;
  m["epochs_run"] = r.logs.size();
  m["seed"] = c.seed;
  m["config_hash"] = config_hash(c);
  m["config"] = config_json(c);
  write_artifact(c.out + "/metrics_" + suffix + ".json", m);

  ojson model;
  model["format"] = "optfusion-model";
  model["version"] = 1;
  model["stage"] = "retrain_" + suffix;
  model["num_fields"] = schema.num_fields;
  model["vocab_sizes"] = schema.vocab_sizes;
  model["emb_dim"] = schema.emb_dim;
  ojson params = ojson::object();
  for (Parameter* p : net.theta_params())
    params[p->name] = {{"shape", p->value.shape()}, {"values", p->value.vec()}};
  model["params"] = params;
  model["seed"] = c.seed;
  model["config_hash"] = config_hash(c);
  write_artifact(c.out + "/model_" + suffix + ".json", model);

  std::printf("retrain_%s: test auc=%.6f logloss=%.6f best_epoch=%zu -> "
              "%s/metrics_%s.json\n",
              suffix.c_str(), r.test.auc, r.test.logloss, r.best_epoch,
              c.out.c_str(), suffix.c_str());
  return 0;
}

// ---- report ----------------------------------------------------------------

bool try_read(const std::string& path, std::string& out) {
  try {
    out = read_file(path);
    return true;
  } catch (const InputError&) {
    return false;
  }
}

struct StageRow {
  std::string stage;
  std::size_t epochs = 0;
  double train_loss = 0.0, val_auc = 0.0, val_logloss = 0.0;
};

void collect_log(const std::string& text, std::vector<StageRow>& rows) {
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t nl = text.find('\n', start);
    std::string line = text.substr(start, nl - start);
    start = nl == std::string::npos ? text.size() : nl + 1;
    if (line.empty()) continue;
    ojson j = ojson::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("stage")) continue;
    std::string stage = j["stage"].get<std::string>();
    auto it = std::find_if(rows.begin(), rows.end(),
                           [&](const StageRow& r) { return r.stage == stage; });
    if (it == rows.end()) {
      rows.push_back({stage, 0, 0, 0, 0});
      it = rows.end() - 1;
    }
    ++it->epochs;
    it->train_loss = j.value("train_loss", 0.0);
    it->val_auc = j.value("val_auc", 0.0);
    it->val_logloss = j.value("val_logloss", 0.0);
  }
}

int cmd_report(const std::string& run_dir) {
  if (!fs::is_directory(run_dir))
    throw InputError("report: no such run directory: " + run_dir);
  std::vector<std::string> warnings;
  std::string text;

  std::printf("optfusion run report: %s\n", run_dir.c_str());

  if (try_read(run_dir + "/run.json", text)) {
    ojson j = ojson::parse(text);
    ojson cfg = j.value("config", ojson::object());
    std::printf("command: %s  seed: %s  config_hash: %s\n",
                j.value("command", std::string("?")).c_str(),
                j.contains("seed") ? j["seed"].dump().c_str() : "?",
                j.value("config_hash", std::string("?")).c_str());
    if (cfg.is_object() && !cfg.empty())
      std::printf("config: dataset=%s algo=%s mode=%s n=%s seed=%s\n",
                  cfg.value("dataset", std::string("?")).c_str(),
                  cfg.value("algo", std::string("?")).c_str(),
                  cfg.value("mode", std::string("?")).c_str(),
                  cfg.contains("n") ? cfg["n"].dump().c_str() : "?",
                  cfg.contains("seed") ? cfg["seed"].dump().c_str() : "?");
  } else {
    warnings.push_back("run.json missing");
  }

  if (try_read(run_dir + "/stats.json", text)) {
    ojson j = ojson::parse(text);
    std::printf("data: rows=%s pos_ratio=%s fields=%s\n",
                j["rows"].dump().c_str(), j["pos_ratio"].dump().c_str(),
                j["fields"].dump().c_str());
  }

  std::vector<StageRow> rows;
  if (try_read(run_dir + "/search_log.jsonl", text)) collect_log(text, rows);
  else warnings.push_back("search_log.jsonl missing");
  for (const char* s : {"soft", "hard"})
    if (try_read(run_dir + "/retrain_log_" + std::string(s) + ".jsonl", text))
      collect_log(text, rows);

  if (!rows.empty()) {
    std::printf("\nstages:\n");
    std::printf("  %-18s %6s %12s %10s %12s\n", "stage", "epochs",
                "train_loss", "val_auc", "val_logloss");
    for (const StageRow& r : rows)
      std::printf("  %-18s %6zu %12.6f %10.6f %12.6f\n", r.stage.c_str(),
                  r.epochs, r.train_loss, r.val_auc, r.val_logloss);
  }

  bool any_metrics = false;
  for (const char* s : {"soft", "hard"}) {
    if (!try_read(run_dir + "/metrics_" + std::string(s) + ".json", text))
      continue;
    ojson j = ojson::parse(text);
    if (!any_metrics) std::printf("\ntest metrics:\n");
    any_metrics = true;
    // metric values are re-dumped, not re-formatted, so they match the
    // metrics record byte for byte
    std::printf("  %s: auc=%s logloss=%s best_epoch=%s\n",
                j.value("stage", std::string("?")).c_str(),
                j["auc"].dump().c_str(), j["logloss"].dump().c_str(),
                j["best_epoch"].dump().c_str());
  }
  if (!any_metrics) warnings.push_back("no metrics records (retrain not run)");

  std::string desc_text;
  std::string desc_which;
  if (try_read(run_dir + "/descriptor_hard.json", desc_text))
    desc_which = "hard";
  else if (try_read(run_dir + "/descriptor_soft.json", desc_text))
    desc_which = "soft";
  if (desc_which.empty()) {
    warnings.push_back("no architecture descriptor found");
  } else {
    ArchitectureDescriptor d = deserialize(desc_text);
    ComponentGraph g = d.graph();
    std::printf("\narchitecture (%s, %zu components, %zu edges):\n",
                desc_which.c_str(), g.count(), d.edge_count());
    std::printf("  %-4s %-6s %-10s %-6s %-8s %s\n", "id", "name", "kind",
                "level", "op", "dead");
    for (const Component& comp : g.components) {
      std::string op = "-";
      if (comp.kind != ComponentKind::Embedding) {
        const OpChoice& oc = d.operations[g.fusion_col(comp.id)];
        if (oc.soft) {
          std::size_t best = 0;
          for (std::size_t i = 1; i < oc.probs.size(); ++i)
            if (oc.probs[i] > oc.probs[best]) best = i;
          op = op_str(d.op_set[best]);
        } else {
          op = op_str(oc.hard);
        }
      }
      std::printf("  %-4zu %-6s %-10s %-6zu %-8s %s\n", comp.id,
                  comp.name.c_str(), kind_str(comp.kind), comp.level,
                  op.c_str(), d.dead[comp.id] ? "yes" : "no");
    }
    for (const char* s : {"hard", "soft"}) {
      std::string dot = run_dir + "/architecture_" + std::string(s) + ".dot";
      if (fs::exists(dot)) std::printf("dot: %s\n", dot.c_str());
    }
  }

  for (const std::string& w : warnings)
    std::printf("warning: %s\n", w.c_str());
  return 0;
}

void add_model_flags(CLI::App* cmd, RunConfig& c) {
  cmd->add_option("--n", c.n, "Shallow/deep tower depth n");
  cmd->add_option("--emb-dim", c.emb_dim, "Embedding dimension per field");
  cmd->add_flag("--with-s0,!--no-with-s0", c.with_s0,
                "Include the S0 shallow entry component");
  cmd->add_option("--ops", c.ops, "Fusion operation set (csv)");
}

void add_data_flags(CLI::App* cmd, RunConfig& c) {
  cmd->add_option("--dataset", c.dataset,
                  "Data source: synthetic | criteo-tsv | encoded-cache");
  cmd->add_option("--input", c.input, "TSV file or encoded-cache directory");
  cmd->add_option("--splits", c.splits, "Train/val/test ratios (csv)");
  cmd->add_option("--split-seed", c.split_seed, "Shuffle seed for the split");
  cmd->add_option("--min-count", c.min_count, "Vocabulary frequency floor");
  cmd->add_flag("--base2,!--no-base2", c.base2,
                "Bucket numerics with log2 instead of ln");
  cmd->add_option("--fields", c.fields, "Synthetic: number of fields");
  cmd->add_option("--vocab", c.vocab, "Synthetic: per-field vocabulary size");
  cmd->add_option("--samples", c.samples, "Synthetic: number of samples");
  cmd->add_option("--noise", c.noise, "Synthetic: label flip probability");
  cmd->add_option("--teacher", c.teacher,
                  "Synthetic: teacher preset (parallel | stacked)");
  cmd->add_option("--teacher-n", c.teacher_n, "Synthetic: teacher depth");
  cmd->add_option("--teacher-seed", c.teacher_seed,
                  "Synthetic: teacher weight seed");
  cmd->add_option("--data-seed", c.data_seed, "Synthetic: sampling seed");
  cmd->add_option("--logit-scale", c.logit_scale,
                  "Synthetic: label sharpening temperature");
}

void add_train_flags(CLI::App* cmd, RunConfig& c) {
  cmd->add_option("--seed", c.seed, "Training seed");
  cmd->add_option("--lr", c.lr, "Learning rate");
  cmd->add_option("--l2", c.l2, "L2 regularization weight");
  cmd->add_option("--batch-size", c.batch_size, "Mini-batch size");
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig cfg;
  std::string config_path, run_dir;

  // The config file seeds the defaults before CLI11 parses, so flags given on
  // the command line always override file values.
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) config_path = argv[i + 1];
    else if (a.rfind("--config=", 0) == 0) config_path = a.substr(9);
  }

  CLI::App app{"optfusion: learned fusion search for CTR models"};
  app.require_subcommand(1);

  CLI::App* pre = app.add_subcommand(
      "preprocess", "Encode a label+13+26 TSV into a cached dataset");
  pre->add_option("--config", config_path, "JSON config file");
  pre->add_option("--input", cfg.input, "TSV file");
  pre->add_option("--out", cfg.out, "Output directory");
  pre->add_option("--splits", cfg.splits, "Train/val/test ratios (csv)");
  pre->add_option("--split-seed", cfg.split_seed, "Shuffle seed");
  pre->add_option("--min-count", cfg.min_count, "Vocabulary frequency floor");
  pre->add_flag("--base2,!--no-base2", cfg.base2,
                "Bucket numerics with log2 instead of ln");

  CLI::App* sea = app.add_subcommand(
      "search", "Run the selection stage and emit discretized descriptors");
  sea->add_option("--config", config_path, "JSON config file");
  sea->add_option("--out", cfg.out, "Output directory");
  sea->add_option("--algo", cfg.algo,
                  "Selection algorithm: oneshot | sequential");
  sea->add_option("--arch-lr", cfg.arch_lr,
                  "Architecture learning rate (< 0: same as --lr)");
  sea->add_option("--epochs-search", cfg.epochs_search, "Selection epochs");
  sea->add_option("--seeds", cfg.seeds, "Fan out one run per seed (csv)");
  sea->add_option("--jobs", cfg.jobs, "Concurrent fan-out worker processes");
  add_model_flags(sea, cfg);
  add_train_flags(sea, cfg);
  add_data_flags(sea, cfg);

  CLI::App* ret = app.add_subcommand(
      "retrain", "Retrain a frozen architecture from scratch and evaluate");
  ret->add_option("--config", config_path, "JSON config file");
  ret->add_option("--out", cfg.out, "Output directory");
  ret->add_option("--descriptor", cfg.descriptor,
                  "Descriptor file, or a search run directory");
  ret->add_option("--preset", cfg.preset_name,
                  "Fixed baseline: parallel | stacked");
  ret->add_option("--mode", cfg.mode,
                  "Which descriptor to pick from a run directory");
  ret->add_option("--epochs-retrain", cfg.epochs_retrain, "Retrain epochs");
  ret->add_option("--patience", cfg.patience, "Early-stop patience (epochs)");
  add_model_flags(ret, cfg);
  add_train_flags(ret, cfg);
  add_data_flags(ret, cfg);

  CLI::App* rep =
      app.add_subcommand("report", "Summarize a run directory's artifacts");
  rep->add_option("run,--run", run_dir, "Run directory");

  try {
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    app.parse(argc, argv);
    if (pre->parsed()) return cmd_preprocess(cfg);
    if (sea->parsed()) return cmd_search(cfg);
    if (ret->parsed()) return cmd_retrain(cfg);
    if (run_dir.empty()) throw InputError("report: --run is required");
    return cmd_report(run_dir);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const SchemaError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
