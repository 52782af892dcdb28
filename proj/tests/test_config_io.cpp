#include <gtest/gtest.h>

#include <sstream>

#include "darl/config.hpp"
#include "darl/io.hpp"

using namespace darl;

TEST(Config, ParsesKeysCommentsAndOverrides) {
  const auto cfg = parse_config(R"(
# comment line
task.family = mirror
task.classes = 4   # trailing comment
train.lr = 0.002
dc = false
dr_divergence = KL
transform = rotate90
ablate.arms = baseline,dc+dr
)");
  EXPECT_EQ(cfg.task.family, TaskFamily::MirrorSymmetricPatterns);
  EXPECT_EQ(cfg.task.num_classes, 4);
  EXPECT_EQ(cfg.train.learning_rate, 0.002);
  EXPECT_FALSE(cfg.train.dc);
  EXPECT_EQ(cfg.train.dr_divergence, DivergenceKind::KL);
  EXPECT_EQ(cfg.train.transform, TransformKind::Rotate90);
  EXPECT_EQ(cfg.arms, (std::vector<std::string>{"baseline", "dc+dr"}));

  ExperimentConfig c2 = cfg;
  apply_override(c2, "transform=auto");
  EXPECT_FALSE(c2.train.transform.has_value());
}

TEST(Config, DefaultsMatchDocumentedValues) {
  const ExperimentConfig c;
  EXPECT_EQ(c.train.group_size, 8);
  EXPECT_EQ(c.train.beta, 0.04);
  EXPECT_EQ(c.train.learning_rate, 5e-5);
  EXPECT_EQ(c.train.batch_size, 4);
  EXPECT_EQ(c.train.repeat_factor, 50);
  EXPECT_EQ(c.train.dc_divergence, DivergenceKind::KL);
  EXPECT_EQ(c.train.dr_divergence, DivergenceKind::JS);
  EXPECT_EQ(c.train.clip, 0.0);
  EXPECT_EQ(c.train.log_interval, 10);
  EXPECT_EQ(c.train.reward.accuracy_weight, 1.0);
  EXPECT_EQ(c.train.reward.format_weight, 1.0);
}

TEST(Config, ErrorsNameTheKey) {
  try {
    parse_config("train.bogus = 3\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "train.bogus");
  }
  try {
    parse_config("task.classes = six\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "task.classes");
  }
  EXPECT_THROW(parse_config("dc = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("dc_divergence = TV\n"), ConfigError);
  EXPECT_THROW(parse_config("just words\n"), ConfigError);
  ExperimentConfig c;
  EXPECT_THROW(apply_override(c, "dc"), ConfigError);
}

TEST(Config, TextRoundTrip) {
  ExperimentConfig c;
  apply_override(c, "train.lr=0.00123456789012345");
  apply_override(c, "task.seed=77");
  apply_override(c, "train.clip=0.2");
  apply_override(c, "policy.output_gain=0.5");
  const auto back = parse_config(to_text(c));
  EXPECT_EQ(to_text(back), to_text(c));
  EXPECT_EQ(back.train.learning_rate, c.train.learning_rate);
  EXPECT_EQ(back.task.seed, 77u);
}

TEST(Snapshot, RoundTripIsExact) {
  InitOptions o;
  o.output_gain = 1.0;
  const auto p = init_policy(PolicyArch{7, 3, 3, 2, 4, 5, 4}, 3, o);
  std::stringstream ss;
  save_snapshot(ss, snapshot(p, SnapshotRole::Reference));
  const auto back = load_snapshot(ss);
  EXPECT_EQ(back.params(), p);
  EXPECT_EQ(back.role(), SnapshotRole::Reference);
}

TEST(Snapshot, RejectsMalformedInput) {
  std::stringstream bad("not-a-snapshot 1\n");
  EXPECT_THROW(load_snapshot(bad), FormatError);
  std::stringstream version("darl-policy-snapshot 9\n");
  EXPECT_THROW(load_snapshot(version), FormatError);
  const auto p = zero_policy(PolicyArch{4, 3, 2, 2, 2, 2, 3});
  std::stringstream ss;
  save_snapshot(ss, snapshot(p, SnapshotRole::Old));
  std::string text = ss.str();
  text.resize(text.size() / 2);
  std::stringstream truncated(text);
  EXPECT_THROW(load_snapshot(truncated), FormatError);
}

TEST(DatasetIo, RoundTrip) {
  TaskSpec s;
  s.num_classes = 3;
  s.grid_size = 4;
  s.shots = 2;
  s.test_size = 9;
  const auto ds = generate_dataset(s);
  std::stringstream ss;
  dump_dataset(ss, ds);
  const auto back = load_dataset(ss);
  EXPECT_EQ(back.train, ds.train);
  EXPECT_EQ(back.test_canonical, ds.test_canonical);
  EXPECT_EQ(back.test_transformed, ds.test_transformed);
  EXPECT_EQ(back.spec.seed, s.seed);
  std::stringstream wrong(R"({"schema":"other","version":1})");
  EXPECT_THROW(load_dataset(wrong), FormatError);
}

TEST(Checksum, Fnv1a64) {
  EXPECT_EQ(checksum(""), "cbf29ce484222325");
  EXPECT_EQ(checksum("a"), "af63dc4c8601ec8c");
}

TEST(Metrics, JsonOmitsWallClock) {
  MetricsRecord r;
  r.step = 3;
  r.wall_clock_s = 12.5;
  r.canonical_accuracy = 0.5;
  const auto j = metrics_json(r);
  EXPECT_FALSE(j.contains("wall_clock_s"));
  EXPECT_EQ(j["step"], 3);
  EXPECT_TRUE(j["transformed_accuracy"].is_null());
  EXPECT_EQ(j["canonical_accuracy"], 0.5);
}
