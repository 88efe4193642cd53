#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "radicalign/pipeline.hpp"
#include "support/checks.hpp"

using namespace radicalign;

TEST_CASE("key-value parsing") {
  const auto kv = config::KeyValues::parse("# comment\n a = 1 \nb=x y\n\nlist = 1, 2,3\nflag = true\n");
  CHECK(kv.get_int("a", 0) == 1);
  CHECK(kv.get("b", "") == "x y");
  CHECK(kv.get_ints("list", {}) == std::vector<int>{1, 2, 3});
  CHECK(kv.get_bool("flag", false));
  CHECK(kv.get_double("missing", 2.5) == 2.5);
  CHECK_THROWS_KIND(kv.require("missing"), ErrorKind::Config);
}

TEST_CASE("config errors carry file and line") {
  const auto path = std::filesystem::temp_directory_path() / "radicalign_bad.cfg";
  {
    std::ofstream f(path);
    f << "seed = 1\nthis line has no equals sign\n";
  }
  try {
    config::KeyValues::load(path);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
    CHECK(std::string(e.what()).find("radicalign_bad.cfg:2") != std::string::npos);
  }
  {
    std::ofstream f(path);
    f << "seed = 1\npretrain.epochs = many\n";
  }
  const auto kv = config::KeyValues::load(path);
  try {
    pipeline::RunConfig::from_kv(kv);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("run config round trip") {
  pipeline::RunConfig c;
  c.apply_seed(7);
  c.pretrain.lambda = 0.0;
  c.ctr.head_mode = ctr::HeadMode::Fc;
  c.clip.image_widths = {8, 16};
  c.split = eval::SplitSpec::parse("radical_zero_shot:n=3");
  const std::string text = c.to_text();
  const auto back = pipeline::RunConfig::from_text(text);
  CHECK(back.to_text() == text);
  CHECK(back.hash() == c.hash());
  CHECK(back.ctr.seed == c.ctr.seed);

  pipeline::RunConfig other;
  other.apply_seed(8);
  CHECK(other.pretrain.seed != c.pretrain.seed);
  CHECK_THROWS_KIND(pipeline::RunConfig::from_text("pretrain.lambda = -1\n"), ErrorKind::Config);
}

TEST_CASE("run lock is exclusive") {
  const auto dir = std::filesystem::temp_directory_path() / "radicalign_lock_test";
  std::filesystem::remove_all(dir);
  {
    pipeline::RunLock lock(dir);
    CHECK_THROWS_KIND(pipeline::RunLock{dir}, ErrorKind::Io);
  }
  CHECK_NOTHROW(pipeline::RunLock{dir});
  pipeline::RunManifest m;
  m.checkpoints.push_back(dir / "nope.ckpt");
  CHECK_THROWS_KIND(m.save(dir), ErrorKind::Io);
  std::filesystem::remove_all(dir);
}
