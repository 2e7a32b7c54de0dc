#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include "optfusion/data.hpp"

using namespace optfusion;
using Catch::Approx;

namespace {
const std::string kFixture =
    std::string(OPTFUSION_FIXTURE_DIR) + "/criteo_sample.tsv";

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name, const std::string& content)
      : path(name) {
    write_file(path, content);
  }
  ~TempFile() { std::remove(path.c_str()); }
};
}  // namespace

TEST_CASE("numeric discretization", "[data][numeric]") {
  CHECK(discretize_numeric(std::nullopt) == "MISS");
  CHECK(discretize_numeric(-5.0) == "MISS");
  CHECK(discretize_numeric(0.0) == "MISS");
  CHECK(discretize_numeric(0.5) == "1");
  CHECK(discretize_numeric(1.0) == "1");
  CHECK(discretize_numeric(2.0) == "1");
  CHECK(discretize_numeric(2.5) == "0");    // (ln 2.5)^2 = 0.8396
  CHECK(discretize_numeric(100.0) == "21");  // (ln 100)^2 = 21.2076
  CHECK(discretize_numeric(500.0) == "38");  // (ln 500)^2 = 38.6214

  SECTION("base-2 switch") {
    CHECK(discretize_numeric(8.0, true) == "9");    // (log2 8)^2 = 9
    CHECK(discretize_numeric(100.0, true) == "44");  // 6.6439^2 = 44.14
    CHECK(discretize_numeric(std::nullopt, true) == "MISS");
    CHECK(discretize_numeric(1.5, true) == "1");
  }
}

TEST_CASE("criteo transform tokens", "[data][transform]") {
  RawRecord r;
  r.label = 1;
  r.numeric = {std::nullopt, 100.0, 1.0};
  r.categorical = {std::string("abcd1234"), std::nullopt};
  auto tokens = criteo_transform(r);
  REQUIRE(tokens.size() == 5);
  CHECK(tokens[0] == "MISS");
  CHECK(tokens[1] == "21");
  CHECK(tokens[2] == "1");
  CHECK(tokens[3] == "abcd1234");
  CHECK(tokens[4] == "MISS");
}

TEST_CASE("tsv parsing", "[data][parse]") {
  SECTION("fixture parses with full row count") {
    auto records = parse_tsv(kFixture);
    REQUIRE(records.size() == 100);
    std::size_t pos = 0, missing_numeric = 0, missing_cat = 0;
    for (const auto& r : records) {
      REQUIRE(r.numeric.size() == 13);
      REQUIRE(r.categorical.size() == 26);
      REQUIRE((r.label == 0 || r.label == 1));
      pos += static_cast<std::size_t>(r.label);
      for (const auto& x : r.numeric) missing_numeric += !x.has_value();
      for (const auto& c : r.categorical) missing_cat += !c.has_value();
    }
    CHECK(pos == 28);
    CHECK(missing_numeric > 0);
    CHECK(missing_cat > 0);
  }

  SECTION("empty field means missing") {
    RawLayout tiny{2, 1};
    TempFile f("tmp_parse_ok.tsv", "1\t3\t\tfoo\n0\t\t-1\t\n");
    auto rs = parse_tsv(f.path, tiny);
    REQUIRE(rs.size() == 2);
    CHECK(rs[0].label == 1);
    CHECK(rs[0].numeric[0].value() == 3.0);
    CHECK_FALSE(rs[0].numeric[1].has_value());
    CHECK(rs[0].categorical[0].value() == "foo");
    CHECK_FALSE(rs[1].numeric[0].has_value());
    CHECK(rs[1].numeric[1].value() == -1.0);
    CHECK_FALSE(rs[1].categorical[0].has_value());
  }

  SECTION("wrong column count reports the line") {
    RawLayout tiny{2, 1};
    TempFile f("tmp_parse_cols.tsv", "1\t3\t4\tfoo\n0\t1\t2\n");
    CHECK_THROWS_WITH(parse_tsv(f.path, tiny),
                      Catch::Matchers::ContainsSubstring(":2:"));
  }

  SECTION("bad label and bad numeric rejected") {
    RawLayout tiny{1, 0};
    TempFile f1("tmp_parse_label.tsv", "2\t1\n");
    CHECK_THROWS_AS(parse_tsv(f1.path, tiny), ParseError);
    TempFile f2("tmp_parse_num.tsv", "1\tx9\n");
    CHECK_THROWS_AS(parse_tsv(f2.path, tiny), ParseError);
  }

  SECTION("unreadable path is an input error") {
    CHECK_THROWS_AS(parse_tsv("/nonexistent/nope.tsv"), InputError);
  }
}

TEST_CASE("vocabulary build and encode", "[data][vocab]") {
  std::vector<std::vector<std::string>> rows = {
      {"b", "x"}, {"a", "x"}, {"b", "y"}, {"a", "z"}, {"c", "x"}};
  Vocabulary v = build_vocab(rows, 2);

  SECTION("min_count and lexicographic assignment") {
    // field 0: a(2) b(2) c(1) -> a=1, b=2, c=OOV
    CHECK(v.encode(0, "a") == 1);
    CHECK(v.encode(0, "b") == 2);
    CHECK(v.encode(0, "c") == 0);
    CHECK(v.encode(0, "never-seen") == 0);
    CHECK(v.vocab_size(0) == 3);
    // field 1: x(3) keeps, y(1) z(1) drop
    CHECK(v.encode(1, "x") == 1);
    CHECK(v.encode(1, "y") == 0);
    CHECK(v.vocab_size(1) == 2);
  }

  SECTION("rebuild is identical") {
    Vocabulary v2 = build_vocab(rows, 2);
    CHECK(v2.fields == v.fields);
  }

  SECTION("encoding never mutates the vocabulary") {
    const Vocabulary& cv = v;
    std::size_t before = cv.fields[0].size();
    (void)cv.encode(0, "brand-new-token");
    CHECK(cv.fields[0].size() == before);
  }

  SECTION("encode dataset round numbers") {
    std::vector<int> labels = {1, 0, 1, 0, 1};
    EncodedDataset d = encode(rows, labels, v);
    d.validate();
    REQUIRE(d.size() == 5);
    CHECK(d.rows[0] == std::vector<std::size_t>{2, 1});
    CHECK(d.rows[4] == std::vector<std::size_t>{0, 1});
    CHECK(d.labels[0] == 1.0);
  }
}

TEST_CASE("fixture end-to-end encode", "[data][vocab]") {
  auto records = parse_tsv(kFixture);
  std::vector<std::vector<std::string>> tokens;
  std::vector<int> labels;
  for (const auto& r : records) {
    tokens.push_back(criteo_transform(r));
    labels.push_back(r.label);
  }
  Vocabulary v = build_vocab(tokens, 2);
  EncodedDataset d = encode(tokens, labels, v);
  d.validate();
  CHECK(d.size() == 100);
  CHECK(d.num_fields == 39);
  double mean = 0.0;
  for (double y : d.labels) mean += y;
  CHECK(mean / 100.0 == Approx(0.28));
}

TEST_CASE("split protocol", "[data][split]") {
  EncodedDataset d;
  d.num_fields = 1;
  d.vocab_sizes = {1001};
  for (std::size_t i = 0; i < 1000; ++i) {
    d.rows.push_back({i});
    d.labels.push_back(i % 2 ? 1.0 : 0.0);
  }

  auto parts = split(d, {0.8, 0.1, 0.1}, 7);
  REQUIRE(parts.size() == 3);
  CHECK(parts[0].size() == 800);
  CHECK(parts[1].size() == 100);
  CHECK(parts[2].size() == 100);
  CHECK(parts[0].split == "train");
  CHECK(parts[1].split == "val");
  CHECK(parts[2].split == "test");

  SECTION("same seed reproduces the split") {
    auto parts2 = split(d, {0.8, 0.1, 0.1}, 7);
    CHECK(parts2[0].rows == parts[0].rows);
    CHECK(parts2[2].rows == parts[2].rows);
  }

  SECTION("union is the original multiset") {
    std::vector<std::size_t> seen;
    for (const auto& p : parts)
      for (const auto& r : p.rows) seen.push_back(r[0]);
    std::sort(seen.begin(), seen.end());
    for (std::size_t i = 0; i < 1000; ++i) REQUIRE(seen[i] == i);
  }

  SECTION("it actually shuffles") {
    bool moved = false;
    for (std::size_t i = 0; i < parts[0].size(); ++i)
      moved = moved || parts[0].rows[i][0] != i;
    CHECK(moved);
  }

  SECTION("bad ratios rejected") {
    CHECK_THROWS_AS(split(d, {0.8, 0.3}, 1), ArgumentError);
    CHECK_THROWS_AS(split(d, {0.9, -0.1, 0.2}, 1), ArgumentError);
    CHECK_THROWS_AS(split(d, {}, 1), ArgumentError);
  }
}

TEST_CASE("batch iteration", "[data][batch]") {
  EncodedDataset d;
  d.num_fields = 2;
  d.vocab_sizes = {20, 20};
  for (std::size_t i = 0; i < 10; ++i) {
    d.rows.push_back({i, 10 + i});
    d.labels.push_back(i < 5 ? 1.0 : 0.0);
  }

  auto bs = batch_indices(10, 4, 99);
  REQUIRE(bs.size() == 3);
  CHECK(bs[0].size() == 4);
  CHECK(bs[1].size() == 4);
  CHECK(bs[2].size() == 2);

  SECTION("same seed, same order; full coverage") {
    auto bs2 = batch_indices(10, 4, 99);
    CHECK(bs2 == bs);
    std::vector<std::size_t> all;
    for (const auto& b : bs)
      all.insert(all.end(), b.begin(), b.end());
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < 10; ++i) REQUIRE(all[i] == i);
  }

  SECTION("gather is field-major and label-aligned") {
    Batch b = gather_batch(d, {3, 7});
    REQUIRE(b.size() == 2);
    CHECK(b.field_idx[0] == std::vector<std::size_t>{3, 7});
    CHECK(b.field_idx[1] == std::vector<std::size_t>{13, 17});
    CHECK(b.labels == std::vector<double>{1.0, 0.0});
  }

  SECTION("zero batch size rejected") {
    CHECK_THROWS_AS(batch_indices(10, 0, 1), ArgumentError);
  }
}

TEST_CASE("synthetic generator", "[data][synthetic]") {
  SyntheticSpec spec;
  spec.num_fields = 4;
  spec.vocab_size = 20;
  spec.emb_dim = 2;
  spec.samples = 10000;
  spec.teacher = preset(PresetKind::parallel, 1);
  spec.teacher_seed = 5;
  spec.data_seed = 9;

  SECTION("zero-weight teacher gives a fair coin") {
    Supernet teacher = make_teacher(spec);
    for (Parameter* p : teacher.theta_params())
      p->value.fill(0.0);
    EncodedDataset d = generate_synthetic(spec, teacher);
    REQUIRE(d.size() == 10000);
    double mean = 0.0;
    for (double y : d.labels) mean += y;
    mean /= 10000.0;
    CHECK(mean > 0.48);
    CHECK(mean < 0.52);
  }

  SECTION("same spec twice is identical") {
    EncodedDataset a = generate_synthetic(spec);
    EncodedDataset b = generate_synthetic(spec);
    CHECK(a.rows == b.rows);
    CHECK(a.labels == b.labels);
  }

  SECTION("noise flips at the configured rate") {
    EncodedDataset clean = generate_synthetic(spec);
    SyntheticSpec noisy_spec = spec;
    noisy_spec.noise = 0.1;
    EncodedDataset noisy = generate_synthetic(noisy_spec);
    REQUIRE(clean.rows == noisy.rows);
    double flips = 0.0;
    for (std::size_t i = 0; i < clean.size(); ++i)
      flips += clean.labels[i] != noisy.labels[i] ? 1.0 : 0.0;
    double rate = flips / static_cast<double>(clean.size());
    double sigma = std::sqrt(0.1 * 0.9 / static_cast<double>(clean.size()));
    CHECK(rate > 0.1 - 3.0 * sigma);
    CHECK(rate < 0.1 + 3.0 * sigma);
  }

  SECTION("planted signal is learnable in principle") {
    // the teacher's own scores must rank its labels far above chance once
    // the sharpening temperature pushes labels toward determinism
    SyntheticSpec sharp = spec;
    sharp.logit_scale = 32.0;
    EncodedDataset d = generate_synthetic(sharp);
    Supernet teacher = make_teacher(sharp);
    std::vector<double> scores = teacher_scores(teacher, d);
    double pos_rank = 0.0;
    std::size_t pos = 0, neg = 0;
    for (std::size_t i = 0; i < d.size(); ++i)
      for (std::size_t j = 0; j < 200 && j < d.size(); ++j) {
        if (d.labels[i] == 1.0 && d.labels[j] == 0.0) {
          pos_rank += scores[i] > scores[j]   ? 1.0
                      : scores[i] == scores[j] ? 0.5
                                               : 0.0;
          ++pos;
        }
      }
    (void)neg;
    double auc_est = pos_rank / static_cast<double>(pos);
    CHECK(auc_est > 0.80);
  }
}

TEST_CASE("dataset and vocab serialization round trips",
          "[data][serialize]") {
  std::vector<std::vector<std::string>> rows = {
      {"b", "x"}, {"a", "x"}, {"b", "y"}, {"a", "z"}};
  Vocabulary v = build_vocab(rows, 2);
  EncodedDataset d = encode(rows, {1, 0, 0, 1}, v);
  d.split = "val";

  SECTION("dataset") {
    std::string text = serialize_dataset(d);
    EncodedDataset back = deserialize_dataset(text);
    CHECK(back.rows == d.rows);
    CHECK(back.labels == d.labels);
    CHECK(back.vocab_sizes == d.vocab_sizes);
    CHECK(back.split == "val");
    CHECK(serialize_dataset(back) == text);
    CHECK_THROWS_AS(deserialize_dataset("{]"), SchemaError);
    CHECK_THROWS_AS(
        deserialize_dataset(R"({"format":"other","version":1})"),
        SchemaError);
  }

  SECTION("vocabulary") {
    std::string text = serialize_vocab(v);
    Vocabulary back = deserialize_vocab(text);
    CHECK(back.fields == v.fields);
    CHECK(back.min_count == v.min_count);
    CHECK(serialize_vocab(back) == text);
  }
}
