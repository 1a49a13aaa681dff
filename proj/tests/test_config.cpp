#include <doctest.h>

#include <fstream>
#include <map>
#include <sstream>

#include "fixtures.hpp"
#include "skeldiff/bvh.hpp"
#include "skeldiff/commands.hpp"
#include "skeldiff/error.hpp"

using namespace skeldiff;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::string straight_path_csv(int rows) {
  std::ostringstream out;
  out << "x,z,yaw_deg\n";
  for (int i = 0; i < rows; ++i) out << 0.03 * i << ",0,0\n";
  return out.str();
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults and env names") {
    const RunConfig c;
    CHECK(c.seed() == 0);
    CHECK(c.get_int("diffusion.train_steps") == 50);
    CHECK(c.get_int("diffusion.infer_steps") == 4);
    CHECK(c.get_double("diffusion.cfg_scale") == 2.5);
    CHECK(c.get_int("model.F") == 56);
    CHECK(c.get_int("model.F_past") == 8);
    CHECK(env_name("optim.lr") == "SKELDIFF_OPTIM_LR");
    CHECK(env_name("model.F_past") == "SKELDIFF_MODEL_F_PAST");
  }

  TEST_CASE("TOML subset") {
    const auto j = parse_toml(R"(seed = 7  # comment
[model]
F = 16
positional_encoding = false
[data]
toe_names = ["A_End",
  'B_End']
scale = 1e-2
)");
    CHECK(j["seed"] == 7);
    CHECK(j["model.F"] == 16);
    CHECK(j["model.positional_encoding"] == false);
    CHECK(j["data.toe_names"] == nlohmann::json::array({"A_End", "B_End"}));
    CHECK(j["data.scale"].get<double>() == doctest::Approx(0.01));
    CHECK_THROWS_AS(parse_toml("a = 1\na = 2\n"), ParseError);
    try {
      parse_toml("x = 1\ny = @\n");
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 2);
    }
  }

  TEST_CASE("files, environment and overrides layer in order") {
    fixtures::TempDir dir("cfg");
    write_file(dir.path() / "run.toml", "seed = 3\n[optim]\nlr = 0.01\nsteps = 20\n");
    write_file(dir.path() / "run.json", R"({"optim": {"steps": 40}, "model.heads": 2})");
    RunConfig c;
    c.merge_file(dir.path() / "run.toml");
    c.merge_file(dir.path() / "run.json");
    CHECK(c.seed() == 3);
    CHECK(c.get_double("optim.lr") == 0.01);
    CHECK(c.get_int("optim.steps") == 40);
    CHECK(c.get_int("model.heads") == 2);

    const std::map<std::string, std::string> env{{"SKELDIFF_OPTIM_STEPS", "60"}, {"SKELDIFF_DIFFUSION_KIND", "linear"}};
    c.apply_environment([&](const char* name) -> const char* {
      auto it = env.find(name);
      return it == env.end() ? nullptr : it->second.c_str();
    });
    CHECK(c.get_int("optim.steps") == 60);
    CHECK(c.get_string("diffusion.kind") == "linear");
    c.set("optim.steps", "80");
    CHECK(c.get_int("optim.steps") == 80);

    write_file(dir.path() / "bad.toml", "[optim]\nlearning_rate = 1\n");
    CHECK_THROWS_AS(RunConfig().merge_file(dir.path() / "bad.toml"), ConfigError);
    write_file(dir.path() / "run.yaml", "seed: 1\n");
    CHECK_THROWS_AS(RunConfig().merge_file(dir.path() / "run.yaml"), ConfigError);
  }

  TEST_CASE("values are type checked") {
    RunConfig c;
    CHECK_THROWS_AS(c.set("optim.steps", "many"), ConfigError);
    CHECK_THROWS_AS(c.set("model.positional_encoding", "1"), ConfigError);
    CHECK_THROWS_AS(c.set_value("optim.lr", "fast"), ConfigError);
    CHECK_THROWS_AS(c.set("no.such_key", "1"), ConfigError);
    c.set("data.manifest", "clips/m.jsonl");
    CHECK(c.get_string("data.manifest") == "clips/m.jsonl");
    c.set_value("optim.steps", 12.0);
    CHECK(c.get("optim.steps").is_number_integer());
    CHECK_THROWS_AS(c.set_value("optim.steps", 12.5), ConfigError);
  }

  TEST_CASE("help lists every key with its default") {
    const std::string help = config_help();
    for (const auto& k : config_keys()) {
      CHECK_MESSAGE(help.find(k.name) != std::string::npos, k.name);
      CHECK_MESSAGE(help.find(k.default_value.dump()) != std::string::npos, k.name);
    }
  }

  TEST_CASE("typed builders") {
    RunConfig c = fixtures::tiny_run_config();
    const DenoiserConfig m = c.model_config(3);
    CHECK(m.base_channels == 8);
    CHECK(m.frames == 8);
    CHECK(m.past_frames == 4);
    CHECK(m.style_count == 3);
    CHECK(c.schedule().steps == 10);
    CHECK(c.sampler_settings().ddim_steps == 2);
    CHECK(c.sampler_settings().guidance.scale == 2.5);
    c.set("model.F", "10");
    CHECK_THROWS_AS(c.model_config(3), ConfigError);
  }

  TEST_CASE("trajectory CSV") {
    fixtures::TempDir dir("csv");
    write_file(dir.path() / "ok.csv", "x, z, yaw_deg\n0,0,0\n1,0,90\n\n2,0.5,90\n");
    const TrajectorySignal t = read_trajectory_csv(dir.path() / "ok.csv");
    CHECK(t.frame_count() == 3);
    write_file(dir.path() / "header.csv", "x,y,z\n0,0,0\n");
    CHECK_THROWS_AS(read_trajectory_csv(dir.path() / "header.csv"), ParseError);
    write_file(dir.path() / "bad.csv", "x,z,yaw_deg\n0,0,0\n1,zero,0\n");
    try {
      read_trajectory_csv(dir.path() / "bad.csv");
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
    }
    write_file(dir.path() / "empty.csv", "x,z,yaw_deg\n");
    CHECK_THROWS_AS(read_trajectory_csv(dir.path() / "empty.csv"), ConfigError);
  }

  TEST_CASE("style weights and names") {
    const auto w = parse_style_weights("happy=0.25, walks/sad=0.75");
    REQUIRE(w.size() == 2);
    CHECK(w[0] == std::pair<std::string, double>{"happy", 0.25});
    CHECK(w[1].first == "walks/sad");
    CHECK_THROWS_AS(parse_style_weights("happy"), ConfigError);
    CHECK_THROWS_AS(parse_style_weights("happy=x"), ConfigError);

    const std::vector<std::string> names{"walks/happy", "walks/sad", "runs/happy"};
    CHECK(resolve_style(names, "walks/happy") == 0);
    CHECK(resolve_style(names, "sad") == 1);
    CHECK(resolve_style(names, "runs/happy") == 2);
    CHECK_THROWS_AS(resolve_style(names, "happy"), ConfigError);
    CHECK_THROWS_AS(resolve_style(names, "angry"), ConfigError);
  }

  TEST_CASE("prepare splits and is deterministic") {
    fixtures::TempDir dir("prepare");
    const fs::path manifest = fixtures::write_walk_corpus(dir.path(), 10, 24);
    const RunConfig c = fixtures::tiny_run_config();
    std::ostringstream log;
    cmd_prepare(c, manifest, dir.path() / "a", log);
    cmd_prepare(c, manifest, dir.path() / "b", log);
    CHECK(slurp(dir.path() / "a" / "dataset.json") == slurp(dir.path() / "b" / "dataset.json"));
    const Dataset ds = load_dataset(dir.path() / "a" / "dataset.json");
    CHECK(ds.train.size() == 15);
    CHECK(ds.val.size() == 3);
    CHECK(ds.test.size() == 2);
    CHECK(log.str().find("train: 15 clips") != std::string::npos);

    write_file(dir.path() / "empty.jsonl", "\n");
    CHECK_THROWS_AS(cmd_prepare(c, dir.path() / "empty.jsonl", dir.path() / "c", log), ConfigError);
  }

  TEST_CASE("train, generate, blend and evaluate") {
    fixtures::TempDir dir("pipeline");
    const fs::path manifest = fixtures::write_walk_corpus(dir.path(), 4, 24);
    const RunConfig c = fixtures::tiny_run_config();
    std::ostringstream log;
    cmd_prepare(c, manifest, dir.path() / "data", log);
    cmd_train(c, dir.path() / "data", dir.path() / "run", std::nullopt, log);
    const fs::path ckpt = dir.path() / "run" / "checkpoint.skd";
    REQUIRE(fs::exists(ckpt));
    CHECK(fs::exists(dir.path() / "run" / "config.json"));
    std::istringstream metrics(slurp(dir.path() / "run" / "metrics.csv"));
    std::string line;
    int rows = 0;
    while (std::getline(metrics, line)) ++rows;
    CHECK(rows == 1 + c.get_int("optim.steps"));

    write_file(dir.path() / "path.csv", straight_path_csv(16));
    write_file(dir.path() / "req.json", R"({"styles": {"calm": 1.0}, "trajectory": "path.csv"})");
    cmd_generate(c, ckpt, dir.path() / "req.json", dir.path() / "out" / "g1.bvh", log);
    cmd_generate(c, ckpt, dir.path() / "req.json", dir.path() / "out" / "g2.bvh", log);
    const std::string g1 = slurp(dir.path() / "out" / "g1.bvh");
    CHECK(!g1.empty());
    CHECK(g1 == slurp(dir.path() / "out" / "g2.bvh"));
    CHECK(read_bvh_file(dir.path() / "out" / "g1.bvh", c.bvh_options()).frame_count() == 16);

    cmd_blend(c, ckpt, "calm=1.0", dir.path() / "path.csv", "", dir.path() / "blend.bvh", log);
    CHECK(slurp(dir.path() / "blend.bvh") == g1);
    CHECK_THROWS_AS(cmd_blend(c, ckpt, "calm=0.5", dir.path() / "path.csv", "", dir.path() / "x.bvh", log),
                    ConfigError);

    write_file(dir.path() / "noway.json", R"({"styles": {"calm": 1.0}})");
    CHECK_THROWS_AS(cmd_generate(c, ckpt, dir.path() / "noway.json", dir.path() / "x.bvh", log), ConfigError);

    cmd_evaluate(c, {dir.path() / "calm", dir.path() / "brisk"}, {dir.path() / "calm", dir.path() / "brisk"},
                 dir.path() / "report", log);
    const auto report = nlohmann::json::parse(slurp(dir.path() / "report" / "report.json"));
    CHECK(report["fid"]["aggregate"].get<double>() < 1e-6);
    CHECK(report["trajectory_position_m"]["mean"].get<double>() < 1e-9);
    CHECK(report["clips"]["generated"] == 8);
    CHECK(fs::exists(dir.path() / "report" / "report.csv"));
  }
}
