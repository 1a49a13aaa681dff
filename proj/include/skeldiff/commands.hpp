#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "skeldiff/config.hpp"

namespace skeldiff {

namespace fs = std::filesystem;

/// Reads a `x,z,yaw_deg` CSV with a header row.
TrajectorySignal read_trajectory_csv(const fs::path& path);

/// "name=weight,name=weight" -> pairs, in order.
std::vector<std::pair<std::string, double>> parse_style_weights(const std::string& spec);

/// Resolves a style by full "<dataset>/<style>" name or an unambiguous bare style name.
int resolve_style(const std::vector<std::string>& style_names, const std::string& name);

/// Parses the manifest, splits it and writes <out>/dataset.json.
void cmd_prepare(const RunConfig& config, const fs::path& manifest, const fs::path& out_dir, std::ostream& log);

/// Trains on <data_dir>/dataset.json and writes <out>/checkpoint.skd,
/// <out>/metrics.csv and <out>/config.json.
void cmd_train(const RunConfig& config, const fs::path& data_dir, const fs::path& out_dir,
               const std::optional<fs::path>& resume, std::ostream& log);

/// Generates from a JSON request file and writes a BVH.
void cmd_generate(const RunConfig& config, const fs::path& checkpoint, const fs::path& request, const fs::path& out,
                  std::ostream& log);

/// Generates a blend of named styles along a CSV trajectory.
void cmd_blend(const RunConfig& config, const fs::path& checkpoint, const std::string& styles,
               const fs::path& trajectory_csv, const std::string& skeleton, const fs::path& out, std::ostream& log);

/// Computes metrics for a generated BVH set against a reference set (BVH files,
/// directories, or a dataset.json) and writes <out>/report.json and report.csv.
void cmd_evaluate(const RunConfig& config, const std::vector<fs::path>& generated,
                  const std::vector<fs::path>& reference, const fs::path& out_dir, std::ostream& log);

}  // namespace skeldiff
