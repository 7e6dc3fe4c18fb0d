#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "whc/checkpoint.hpp"

using namespace whc;
namespace fs = std::filesystem;

namespace {

RunConfig small_run() {
  RunConfig c = RunConfig::desk();
  c.model.width = 16;
  c.model.heads = 2;
  c.model.encoder_layers = 1;
  c.model.compressor = CompressorConfig{2, 16, 1, 2, 2, 1, true};
  return c;
}

fs::path temp_file(const std::string& name) {
  auto dir = fs::temp_directory_path() / "whc_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

struct ScopedEnv {
  std::string name;
  ScopedEnv(std::string n, const char* v) : name(std::move(n)) { ::setenv(name.c_str(), v, 1); }
  ~ScopedEnv() { ::unsetenv(name.c_str()); }
};

}  // namespace

TEST(Checkpoint, RoundTripRestoresEveryValue) {
  auto cfg = small_run();
  auto p = init_model<double>(cfg.model, 11);
  auto path = temp_file("roundtrip.whc");
  save_checkpoint(path, p, cfg);
  auto [q, qcfg] = load_checkpoint<double>(path);
  auto a = p.parameters(), b = q.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_TRUE(std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(),
                           b[i].tensor.data().begin()))
        << a[i].name;
  }
  EXPECT_EQ(run_config_to_json(qcfg).dump(), run_config_to_json(cfg).dump());
}

TEST(Checkpoint, ResaveIsByteIdentical) {
  auto cfg = small_run();
  cfg.precision = 32;
  auto p = init_model<float>(cfg.model, 12);
  auto first = temp_file("first.whc"), second = temp_file("second.whc");
  save_checkpoint(first, p, cfg);
  auto [q, qcfg] = load_checkpoint<float>(first);
  save_checkpoint(second, q, qcfg);
  EXPECT_EQ(file_bytes(first), file_bytes(second));
}

TEST(Checkpoint, CorruptByteIsDetected) {
  auto cfg = small_run();
  auto p = init_model<double>(cfg.model, 13);
  auto path = temp_file("corrupt.whc");
  save_checkpoint(path, p, cfg);
  auto bytes = file_bytes(path);
  bytes[bytes.size() / 2] ^= 0x01;
  write_bytes(path, bytes);
  try {
    load_checkpoint<double>(path);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
}

TEST(Checkpoint, VersionMismatchNamesBothVersions) {
  auto cfg = small_run();
  auto p = init_model<double>(cfg.model, 14);
  auto ck = make_checkpoint(p, cfg);
  ck.version = kCheckpointVersion + 1;
  try {
    parse_checkpoint(serialize_checkpoint(ck));
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(std::to_string(kCheckpointVersion + 1)), std::string::npos);
    EXPECT_NE(msg.find(std::to_string(kCheckpointVersion)), std::string::npos);
  }
}

TEST(Checkpoint, MissingFileAndBadMagic) {
  EXPECT_THROW(read_checkpoint(temp_file("does_not_exist.whc")), CheckpointNotFound);
  auto path = temp_file("junk.whc");
  write_bytes(path, {'n', 'o', 'p', 'e', 0, 0, 0, 0});
  EXPECT_THROW(read_checkpoint(path), CheckpointError);
  write_bytes(path, {'W', 'H', 'C'});
  EXPECT_THROW(read_checkpoint(path), CheckpointError);
}

TEST(Checkpoint, PrecisionAndShapeMismatches) {
  auto cfg = small_run();
  auto p = init_model<double>(cfg.model, 15);
  auto ck = make_checkpoint(p, cfg);
  EXPECT_THROW(load_model<float>(ck), CheckpointError);
  auto bad = ck;
  bad.config["model"]["width"] = 32;
  EXPECT_THROW(load_model<double>(bad), CheckpointError);
  bad = ck;
  bad.tensors.pop_back();
  EXPECT_THROW(load_model<double>(bad), CheckpointError);
}

TEST(Checkpoint, TruncatedValuesAreRejected) {
  auto cfg = small_run();
  auto p = init_model<double>(cfg.model, 16);
  auto ck = make_checkpoint(p, cfg);
  ck.tensors[0].shape[0] += 1;  // claims more values than are stored
  EXPECT_THROW(parse_checkpoint(serialize_checkpoint(ck)), CheckpointError);
}

TEST(RunConfigJson, RoundTrip) {
  auto cfg = RunConfig::paper();
  auto j = run_config_to_json(cfg);
  auto back = run_config_from_json(j);
  EXPECT_EQ(run_config_to_json(back).dump(), j.dump());
  EXPECT_EQ(back.model.width, 768u);
  EXPECT_TRUE(back.paper_strict);
}

TEST(RunConfigJson, PartialDocumentLayersOverDefaults) {
  auto c = run_config_from_json(nlohmann::ordered_json::parse(
      R"({"seed": 3, "model": {"compressor": {"queries": 4}}, "history": "prune"})"));
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.model.compressor.queries, 4u);
  EXPECT_EQ(c.model.history, HistoryEncoding::prune);
  EXPECT_EQ(c.model.width, RunConfig::desk().model.width);
}

TEST(RunConfigJson, RejectsUnknownKeysAndBadTypes) {
  using nlohmann::ordered_json;
  EXPECT_THROW(run_config_from_json(ordered_json::parse(R"({"sed": 3})")), ConfigError);
  EXPECT_THROW(run_config_from_json(ordered_json::parse(R"({"model": {"widht": 3}})")), ConfigError);
  EXPECT_THROW(run_config_from_json(ordered_json::parse(R"({"seed": -1})")), ConfigError);
  EXPECT_THROW(run_config_from_json(ordered_json::parse(R"({"paper_strict": 1})")), ConfigError);
  EXPECT_THROW(run_config_from_json(ordered_json::parse(R"({"history": "lingua"})")), ConfigError);
  EXPECT_THROW(run_config_from_json(ordered_json::parse(R"({"data": {"tasks": []}})")), ConfigError);
  try {
    run_config_from_json(ordered_json::parse(R"({"training": {"stage1": {"lrr": 1}}})"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("training.stage1.lrr"), std::string::npos);
  }
}

TEST(RunConfigJson, StrictModeCapsHistories) {
  auto c = RunConfig::desk();
  c.model.compressor.max_histories = 6;
  EXPECT_NO_THROW(c.validate());
  c.paper_strict = true;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(RunConfigJson, LoadFromFile) {
  auto path = temp_file("cfg.json");
  {
    std::ofstream out(path);
    out << R"({"seed": 5, "data": {"train": 10}})";
  }
  auto c = load_run_config(path);
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.data.train, 10u);
  {
    std::ofstream out(path);
    out << "{not json";
  }
  EXPECT_THROW(load_run_config(path), ConfigError);
  EXPECT_THROW(load_run_config(temp_file("no_such.json")), ConfigError);
}

TEST(EnvOverrides, SeedAndPrecision) {
  auto c = RunConfig::desk();
  {
    ScopedEnv s("WHC_SEED", "123"), p("WHC_PRECISION", "64");
    apply_env_overrides(c);
  }
  EXPECT_EQ(c.seed, 123u);
  EXPECT_EQ(c.precision, 64);
  {
    ScopedEnv s("WHC_SEED", "12x");
    EXPECT_THROW(apply_env_overrides(c), ConfigError);
  }
  {
    ScopedEnv p("WHC_PRECISION", "16");
    EXPECT_THROW(apply_env_overrides(c), ConfigError);
  }
}
