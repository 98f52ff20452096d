#include <gtest/gtest.h>

#include <string>
#include <vector>

#include "lewel/config.hpp"

namespace {

using lewel::apply_override;
using lewel::canonical_config_text;
using lewel::ConfigMap;
using lewel::parse_config_text;
using lewel::resolve_train_config;
using lewel::TrainConfig;

TEST(ConfigParse, SectionsCommentsAndQuotes) {
  const std::string text =
      "# full-line comment\n"
      "top = 1\n"
      "\n"
      "[train]\n"
      "beta = 0.3   # trailing comment\n"
      "variant = \"lewel_m\"\n"
      "[data]\n"
      "path = \"with # hash and \\\"quotes\\\"\"\n"
      "seed = 9\n";
  const ConfigMap map = parse_config_text(text);
  ASSERT_EQ(map.entries.size(), 5u);
  EXPECT_EQ(*map.get("top"), "1");
  EXPECT_EQ(*map.get("train.beta"), "0.3");
  EXPECT_EQ(*map.get("train.variant"), "lewel_m");
  EXPECT_EQ(*map.get("data.path"), "with # hash and \"quotes\"");
  EXPECT_EQ(*map.get("data.seed"), "9");
}

TEST(ConfigParse, MalformedInputRejected) {
  EXPECT_THROW(parse_config_text("[train\nbeta = 1\n"), lewel::ConfigError);
  EXPECT_THROW(parse_config_text("beta 0.5\n"), lewel::ConfigError);
  EXPECT_THROW(parse_config_text("bad key = 1\n"), lewel::ConfigError);
  EXPECT_THROW(parse_config_text("a..b = 1\n"), lewel::ConfigError);
  EXPECT_THROW(parse_config_text("x = \"unterminated\n"), lewel::ConfigError);
  EXPECT_THROW(parse_config_text("x = \"bad \\q escape\"\n"), lewel::ConfigError);
  EXPECT_THROW(parse_config_text("x = two words\n"), lewel::ConfigError);
  EXPECT_THROW(parse_config_text("x = 1\nx = 2\n"), lewel::ConfigError);
  EXPECT_THROW(parse_config_text("[train]\nx = 1\n[train]\nx = 2\n"), lewel::ConfigError);
}

TEST(ConfigResolve, EmptyMapYieldsDefaults) {
  const TrainConfig cfg = resolve_train_config(ConfigMap{});
  EXPECT_EQ(cfg.variant, lewel::Variant::LewelB);
  EXPECT_EQ(cfg.epochs, 100u);
  EXPECT_EQ(cfg.batch_size, 128u);
  EXPECT_DOUBLE_EQ(cfg.lr0, 0.2);
  EXPECT_DOUBLE_EQ(cfg.weight_decay, 1e-6);
  EXPECT_DOUBLE_EQ(cfg.beta, 0.5);
  EXPECT_DOUBLE_EQ(cfg.tau, 0.2);
  EXPECT_DOUBLE_EQ(cfg.momentum_base, 0.98);
  EXPECT_TRUE(cfg.wd_exempt_bias_bn);
  EXPECT_EQ(cfg.head.embed_dim, 32u);
  EXPECT_EQ(cfg.head.aligned_dim, 32u);
  EXPECT_EQ(cfg.head.groups, 4u);
  EXPECT_EQ(cfg.head.encoder_dim, 64u);
  EXPECT_EQ(cfg.head.map_source, lewel::MapSource::Learned);
  EXPECT_EQ(cfg.queue_capacity, 4096u);
  EXPECT_EQ(cfg.data.num_classes, 8u);
  EXPECT_EQ(cfg.data.canvas, 64u);
  EXPECT_EQ(cfg.data.train_size, 4096u);
  EXPECT_EQ(cfg.data.test_size, 1024u);
  EXPECT_EQ(cfg.probe_epochs, 30u);
  EXPECT_DOUBLE_EQ(cfg.probe_lr0, 0.4);
}

TEST(ConfigResolve, VariantSwitchesDependentDefaults) {
  ConfigMap map;
  map.set("train.variant", "lewel_m");
  const TrainConfig cfg = resolve_train_config(map);
  EXPECT_EQ(cfg.variant, lewel::Variant::LewelM);
  EXPECT_DOUBLE_EQ(cfg.lr0, 0.06);
  EXPECT_DOUBLE_EQ(cfg.weight_decay, 1e-4);
  EXPECT_DOUBLE_EQ(cfg.momentum_base, 0.999);
  EXPECT_FALSE(cfg.wd_exempt_bias_bn);
  EXPECT_EQ(cfg.head.variant, lewel::Variant::LewelM);

  // An explicit value beats the variant-dependent default.
  map.set("train.lr0", "0.5");
  EXPECT_DOUBLE_EQ(resolve_train_config(map).lr0, 0.5);
}

TEST(ConfigResolve, OverridesBeatFileValues) {
  const ConfigMap file = parse_config_text("[train]\nbeta = 0.3\n");
  const TrainConfig cfg = resolve_train_config(file, {"train.beta=0.7"});
  EXPECT_DOUBLE_EQ(cfg.beta, 0.7);

  EXPECT_THROW(resolve_train_config(file, {"train.beta"}), lewel::ConfigError);
  EXPECT_THROW(resolve_train_config(file, {"bad key=1"}), lewel::ConfigError);
  const TrainConfig quoted = resolve_train_config(file, {"data.path=\"a b\""});
  EXPECT_EQ(quoted.data_path, "a b");
}

TEST(ConfigResolve, UnknownKeysAndBadTypesRejected) {
  {
    ConfigMap map;
    map.set("train.betta", "0.5");
    EXPECT_THROW(resolve_train_config(map), lewel::ConfigError);
  }
  const auto reject = [](const char* key, const char* value) {
    ConfigMap map;
    map.set(key, value);
    EXPECT_THROW(resolve_train_config(map), lewel::ConfigError) << key << "=" << value;
  };
  reject("train.epochs", "abc");
  reject("train.epochs", "-3");
  reject("train.beta", "yes");
  reject("train.beta", "");
  reject("train.wd_exempt_bias_bn", "1");
  reject("train.variant", "byol");
  reject("head.map_source", "fixed");
}

TEST(ConfigResolve, InvariantViolationsRejected) {
  const auto reject = [](std::vector<std::string> overrides) {
    EXPECT_THROW(resolve_train_config(ConfigMap{}, overrides), lewel::ConfigError);
  };
  reject({"train.batch_size=1"});
  reject({"train.lr0=0"});
  reject({"train.tau=0"});
  reject({"train.beta=1.5"});
  reject({"train.epochs=0"});
  reject({"train.momentum_base=0"});
  reject({"data.image_size=60"});
  reject({"train.variant=lewel_m", "train.queue_capacity=64"});  // queue smaller than batch
}

TEST(ConfigResolve, GroupDivisibilityRejectedWithKeyPath) {
  try {
    resolve_train_config(ConfigMap{}, {"head.h=3"});  // 3 does not divide d=32
    FAIL() << "expected a config error";
  } catch (const lewel::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("groups"), std::string::npos) << e.what();
  }
}

TEST(ConfigCanonical, TextRoundtripsToIdenticalConfig) {
  const TrainConfig cfg = resolve_train_config(
      ConfigMap{}, {"train.variant=lewel_m", "train.beta=0.3", "train.lr0=0.07",
                    "train.seed=42", "head.h=2", "head.c=24", "data.path=/tmp/corpus dir",
                    "data.clutter_intensity=0.25", "probe.epochs=5"});
  const std::string text = canonical_config_text(cfg);
  const TrainConfig back = resolve_train_config(parse_config_text(text));
  EXPECT_TRUE(back == cfg);
  EXPECT_EQ(canonical_config_text(back), text);
  EXPECT_EQ(lewel::config_fingerprint(back), lewel::config_fingerprint(cfg));
}

TEST(ConfigCanonical, FingerprintSeparatesConfigs) {
  const TrainConfig a = resolve_train_config(ConfigMap{});
  const TrainConfig b = resolve_train_config(ConfigMap{}, {"train.beta=0.49999"});
  const TrainConfig c = resolve_train_config(ConfigMap{}, {"train.seed=2"});
  EXPECT_NE(lewel::config_fingerprint(a), lewel::config_fingerprint(b));
  EXPECT_NE(lewel::config_fingerprint(a), lewel::config_fingerprint(c));
}

}  // namespace
