#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dddr/config.hpp"
#include "json.hpp"

using namespace dddr;
using nlohmann::json;

TEST_CASE("empty config gives the defaults") {
  for (const std::string text : {"", "  \n", "{}"}) {
    const auto c = parse_config_text(text);
    CHECK(c.method == Method::Dddr);
    CHECK(c.partition.clients == 5);
    CHECK(c.partition.alpha == 0.5);
    CHECK(c.partition.mode == PartitionMode::Dirichlet);
    CHECK(c.train.weights.w1 == 1.0);
    CHECK(c.train.weights.w2 == 0.5);
    CHECK(c.train.weights.w3 == 10.0);
    CHECK(c.inversion.rounds == 10);
    CHECK(c.inversion.local_steps == 50);
    CHECK(c.train.rounds == 100);
    CHECK(c.train.epochs == 5);
    CHECK(c.replay.past == 50);
    CHECK(c.replay.current == 50);
    CHECK(c.train.sigma_c == 0.0);
    CHECK(c.inversion.sigma_g == 0.0);
  }
}

TEST_CASE("file values and overrides") {
  const auto c = parse_config_text(R"({"federation": {"clients": 4, "alpha": 0.1},
                                       "loss": {"w3": 2.5},
                                       "experiment": {"method": "fedewc", "seed": 7}})",
                                   {"federation.clients=3", "training.use_past_replay=false", "data.source=shapeworld"});
  CHECK(c.partition.clients == 3);
  CHECK(c.partition.alpha == 0.1);
  CHECK(c.train.weights.w3 == 2.5);
  CHECK(c.method == Method::FedEwc);
  CHECK(c.seed == 7);
  CHECK_FALSE(c.train.use_past_replay);

  const json echoed = json::parse(config_to_json(c));
  CHECK(echoed["federation"]["clients"] == 3);
  CHECK(echoed["experiment"]["method"] == "fedewc");

  // The echoed config reproduces itself.
  const auto again = parse_config_text(config_to_json(c));
  CHECK(config_to_json(again) == config_to_json(c));
}

TEST_CASE("every key appears in the effective config") {
  const json echoed = json::parse(config_to_json(ExperimentConfig{}));
  for (const auto& key : config_keys()) {
    const auto dot = key.find('.');
    CHECK_MESSAGE(echoed[key.substr(0, dot)].contains(key.substr(dot + 1)), key);
  }
}

TEST_CASE("config errors name the key") {
  CHECK_THROWS_WITH_AS(parse_config_text(R"({"loss": {"w2": "abc"}})"), doctest::Contains("loss.w2"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("", {"loss.w2=abc"}), doctest::Contains("loss.w2"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text(R"({"loss": {"w9": 1}})"), doctest::Contains("loss.w9"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text(R"({"bogus": {}})"), doctest::Contains("bogus"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text(R"({"loss": 3})"), doctest::Contains("loss"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("", {"federation.clients=0"}), doctest::Contains("federation.clients"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("", {"federation.clients=-2"}), doctest::Contains("federation.clients"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("", {"federation.clients=2.5"}), doctest::Contains("integer"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("", {"experiment.method=sgd"}), doctest::Contains("experiment.method"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("", {"data.test_fraction=1"}), doctest::Contains("data.test_fraction"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("", {"noise.sigma_g=-0.1"}), doctest::Contains("noise.sigma_g"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("", {"experiment.n_tasks=9"}), doctest::Contains("experiment.n_tasks"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("", {"data.source=idx"}), doctest::Contains("data.idx_images"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("", {"nokey"}), doctest::Contains("key=value"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("{not json"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[1, 2]"), ConfigError);
  CHECK_THROWS_AS(parse_config("/nonexistent/dddr.json"), ConfigError);
}

TEST_CASE("config file on disk") {
  const auto path = std::filesystem::temp_directory_path() / "dddr_test_config.json";
  {
    std::ofstream out(path);
    out << R"({"training": {"rounds": 20, "epochs": 2}})";
  }
  const auto c = parse_config(path, {"training.epochs=3"});
  CHECK(c.train.rounds == 20);
  CHECK(c.train.epochs == 3);
  std::filesystem::remove(path);
}
