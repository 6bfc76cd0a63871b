#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "gcl4sr/gcl4sr.hpp"

using namespace gcl4sr;

namespace {

ModelParams sample_params() { return ModelParams::initialized(ModelConfig{7, 3, 8, 2, 1, 6, 0.1}, 21); }

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  const ModelParams p = sample_params();
  const ModelParams q = deserialize_checkpoint(serialize_checkpoint(p));
  EXPECT_EQ(p, q);
  EXPECT_EQ(q.config().dropout, 0.1);
  EXPECT_EQ(checkpoint_hash(p), checkpoint_hash(q));
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "gcl4sr_ckpt_roundtrip.bin";
  const ModelParams p = sample_params();
  save_checkpoint(path, p);
  EXPECT_EQ(load_checkpoint(path), p);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(Checkpoint, RejectsCorruption) {
  const std::string bytes = serialize_checkpoint(sample_params());
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x01;
  EXPECT_THROW(deserialize_checkpoint(flipped), IoError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
  EXPECT_THROW(deserialize_checkpoint("GCL4SR"), IoError);
}

TEST(Checkpoint, RejectsBadMagicWithValidChecksum) {
  std::string bytes = serialize_checkpoint(sample_params());
  std::string body = bytes.substr(0, bytes.size() - 8);
  body[0] = 'X';
  detail::ByteWriter w;
  w.bytes(body);
  w.u64(fnv1a64(body));
  try {
    deserialize_checkpoint(w.str());
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
}

TEST(Checkpoint, HashChangesWithAnyValue) {
  ModelParams p = sample_params();
  const auto h = checkpoint_hash(p);
  p.value(p.count() - 1)[0] += 1e-12;
  EXPECT_NE(checkpoint_hash(p), h);
}

TEST(Config, ParsesKeyValuesWithComments) {
  std::istringstream in("# header\n dim = 16 \nlearning_rate=0.01 # inline\n\nablation = no_gcl\n");
  TrainConfig c;
  apply_key_values(c, parse_key_values(in));
  EXPECT_EQ(c.dim, 16u);
  EXPECT_EQ(c.learning_rate, 0.01);
  EXPECT_EQ(c.ablation, Ablation::kNoGcl);
}

TEST(Config, RejectsUnknownKeyAndBadValues) {
  TrainConfig c;
  EXPECT_THROW(apply_key_values(c, {{"dimension", "3"}}), Error);
  EXPECT_THROW(apply_key_values(c, {{"dim", "-3"}}), Error);
  EXPECT_THROW(apply_key_values(c, {{"lambda1", "0.1x"}}), Error);
  EXPECT_THROW(apply_key_values(c, {{"gcl_symmetric", "maybe"}}), Error);
  std::istringstream bad("dim 3\n");
  EXPECT_THROW(parse_key_values(bad), IoError);
}

TEST(Config, RoundTripsThroughKeyValues) {
  TrainConfig c;
  c.weights.lambda1 = 0.3;
  c.sampler.size = 7;
  c.resample_per_epoch = false;
  c.ablation = Ablation::kUnweightedEdges;
  TrainConfig d;
  apply_key_values(d, to_key_values(c));
  EXPECT_EQ(to_key_values(d), to_key_values(c));
  EXPECT_EQ(d.weights.lambda1, 0.3);
  EXPECT_EQ(d.sampler.size, 7u);
}

TEST(Config, EnvironmentOverrides) {
  ::setenv("GCL4SR_LAMBDA2", "0.25", 1);
  ::setenv("GCL4SR_SAMPLER_SIZE", "9", 1);
  const KeyValues kv = environment_overrides(train_config_keys());
  ::unsetenv("GCL4SR_LAMBDA2");
  ::unsetenv("GCL4SR_SAMPLER_SIZE");
  ASSERT_EQ(kv.size(), 2u);
  TrainConfig c;
  apply_key_values(c, kv);
  EXPECT_EQ(c.weights.lambda2, 0.25);
  EXPECT_EQ(c.sampler.size, 9u);
}

TEST(Config, SynthKeysArePartitioned) {
  const KeyValues kv{{"dim", "8"}, {"synth_items", "12"}, {"synth_pattern", "random"}, {"synth_noise", "0.3"}};
  const auto [train_kv, synth_kv] = partition_keys(kv);
  EXPECT_EQ(train_kv.size(), 1u);
  const SynthConfig s = resolve_synth(parse_synth_settings(synth_kv));
  EXPECT_EQ(s.item_count, 12u);
  EXPECT_EQ(s.noise, 0.3);
  EXPECT_EQ(s.transitions.size(), 12u);
  EXPECT_THROW(parse_synth_settings({{"synth_pattern", "zigzag"}}), Error);
  EXPECT_THROW(parse_synth_settings({{"synth_bogus", "1"}}), Error);
}
