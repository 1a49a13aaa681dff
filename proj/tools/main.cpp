#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "skeldiff/commands.hpp"
#include "skeldiff/error.hpp"

namespace {

using namespace skeldiff;

struct CommonOptions {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_file, "JSON or TOML configuration file");
  cmd->add_option("--seed", o.seed, "overrides the 'seed' key");
  cmd->add_option("--set", o.overrides, "key=value override, repeatable");
}

RunConfig resolve(const CommonOptions& o) {
  RunConfig c;
  if (!o.config_file.empty()) c.merge_file(o.config_file);
  c.apply_environment([](const char* name) { return std::getenv(name); });
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) c.set_value("seed", *o.seed);
  std::cerr << "config: " << c.to_json().dump() << "\n";
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skeleton-agnostic motion diffusion toolkit"};
  app.footer(config_help());
  app.require_subcommand(1);
  CommonOptions common;

  std::string manifest, out, data_dir, resume, checkpoint, request, styles, trajectory, skeleton;
  std::vector<std::string> generated, reference;

  auto* prepare = app.add_subcommand("prepare", "parse a manifest into a split dataset cache");
  add_common(prepare, common);
  prepare->add_option("manifest", manifest, "JSON-lines manifest (defaults to data.manifest)");
  prepare->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train a denoiser on a prepared dataset");
  add_common(train, common);
  train->add_option("data", data_dir, "prepared dataset directory or dataset.json")->required();
  train->add_option("--out", out, "output directory")->required();
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* generate = app.add_subcommand("generate", "generate motion from a request file");
  add_common(generate, common);
  generate->add_option("checkpoint", checkpoint, "checkpoint file")->required();
  generate->add_option("request", request, "JSON request")->required();
  generate->add_option("--out", out, "output BVH")->required();

  auto* blend = app.add_subcommand("blend", "generate a blend of styles along a trajectory");
  add_common(blend, common);
  blend->add_option("checkpoint", checkpoint, "checkpoint file")->required();
  blend->add_option("--styles", styles, "name=weight,name=weight")->required();
  blend->add_option("--trajectory", trajectory, "CSV with header x,z,yaw_deg")->required();
  blend->add_option("--skeleton", skeleton, "dataset name of the skeleton to animate");
  blend->add_option("--out", out, "output BVH")->required();

  auto* evaluate = app.add_subcommand("evaluate", "compute motion metrics");
  add_common(evaluate, common);
  evaluate->add_option("--generated", generated, "BVH files or directories")->required();
  evaluate->add_option("--reference", reference, "BVH files, directories or a dataset.json")->required();
  evaluate->add_option("--out", out, "report directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig config = resolve(common);
    if (prepare->parsed()) {
      const std::string m = manifest.empty() ? config.get_string("data.manifest") : manifest;
      if (m.empty()) throw ConfigError("no manifest given (argument or data.manifest)");
      cmd_prepare(config, m, out, std::cout);
    } else if (train->parsed()) {
      cmd_train(config, data_dir, out, resume.empty() ? std::nullopt : std::optional<fs::path>(resume), std::cout);
    } else if (generate->parsed()) {
      cmd_generate(config, checkpoint, request, out, std::cout);
    } else if (blend->parsed()) {
      cmd_blend(config, checkpoint, styles, trajectory, skeleton, out, std::cout);
    } else if (evaluate->parsed()) {
      cmd_evaluate(config, std::vector<fs::path>(generated.begin(), generated.end()),
                   std::vector<fs::path>(reference.begin(), reference.end()), out, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
