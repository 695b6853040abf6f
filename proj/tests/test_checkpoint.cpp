#include <gtest/gtest.h>

#include <filesystem>

#include "graftlab/checkpoint.hpp"

using namespace graftlab;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 12;
  c.vocab_size = 10;
  c.max_seq_len = 6;
  return c;
}

std::filesystem::path tmp(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "graftlab_ckpt_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  ModelParams p = init_params(small(), 4);
  p.at(ComponentId::at(1, ComponentKind::W_O)).bias.data[3] = -0.0;
  p.at(ComponentId::at(0, ComponentKind::FFN_UP)).weight.data[0] = 1e-310;
  auto path = tmp("rt.ckpt");
  save_checkpoint(p, path, {{"note", "x"}});
  auto loaded = load_checkpoint_with_meta(path);
  EXPECT_TRUE(loaded.params == p);
  EXPECT_EQ(params_hash(loaded.params), params_hash(p));
  EXPECT_TRUE(std::signbit(loaded.params.at(ComponentId::at(1, ComponentKind::W_O)).bias.data[3]));
  EXPECT_EQ(loaded.meta.at("note"), "x");
}

TEST(Checkpoint, TiedRoundTrip) {
  ModelConfig c = small();
  c.tie_embeddings = true;
  ModelParams p = init_params(c, 5);
  EXPECT_TRUE(decode_checkpoint(encode_checkpoint(p)).params == p);
}

TEST(Checkpoint, EncodingIsDeterministic) {
  ModelParams p = init_params(small(), 6);
  EXPECT_EQ(encode_checkpoint(p), encode_checkpoint(p));
}

TEST(Checkpoint, HeaderLayout) {
  std::string bytes = encode_checkpoint(init_params(small(), 1));
  EXPECT_EQ(bytes.substr(0, 10), "GRAFTCKPT1");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[10 + i])) << (8 * i);
  auto header = nlohmann::json::parse(bytes.substr(18, len));
  EXPECT_EQ(header["format_version"], 1);
  EXPECT_EQ(header["config"]["d_model"], 8);
  EXPECT_EQ(bytes.size(), 18 + len + header["data_bytes"].get<std::size_t>());
}

TEST(Checkpoint, CorruptMagic) {
  std::string bytes = encode_checkpoint(init_params(small(), 1));
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
  EXPECT_THROW(decode_checkpoint("short"), FormatError);
}

TEST(Checkpoint, VersionMismatch) {
  std::string bytes = encode_checkpoint(init_params(small(), 1));
  auto pos = bytes.find("\"format_version\":1");
  ASSERT_NE(pos, std::string::npos);
  bytes[pos + 17] = '9';
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, MismatchedDModel) {
  std::string bytes = encode_checkpoint(init_params(small(), 1));
  ModelConfig other = small();
  other.d_model = 16;
  EXPECT_THROW(decode_checkpoint(bytes, other), ShapeError);

  // Header config edited to disagree with the stored tensor shapes.
  auto pos = bytes.find("\"d_model\":8");
  ASSERT_NE(pos, std::string::npos);
  bytes[pos + 10] = '4';
  EXPECT_THROW(decode_checkpoint(bytes), ShapeError);
}

TEST(Checkpoint, Truncated) {
  std::string bytes = encode_checkpoint(init_params(small(), 1));
  bytes.resize(bytes.size() - 8);
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}
