#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "skeldiff/classifier.hpp"
#include "skeldiff/dataio.hpp"
#include "skeldiff/denoiser.hpp"
#include "skeldiff/generation.hpp"
#include "skeldiff/metrics.hpp"
#include "skeldiff/schedule.hpp"
#include "skeldiff/training.hpp"

namespace skeldiff {

struct ConfigKey {
  std::string name;
  nlohmann::json default_value;
  std::string help;
};

/// Every recognised key with its default, in display order.
const std::vector<ConfigKey>& config_keys();

inline constexpr const char* kEnvPrefix = "SKELDIFF_";

/// Environment variable that overrides `key`, e.g. optim.lr -> SKELDIFF_OPTIM_LR.
std::string env_name(const std::string& key);

/// Parses the supported TOML subset into flat dotted keys: [tables], dotted
/// keys, strings, numbers, booleans, arrays and # comments.
nlohmann::json parse_toml(const std::string& text);

/// Flat dotted-key configuration. Layers: defaults, file, environment, command line.
class RunConfig {
 public:
  RunConfig();

  /// JSON (nested or flat) or TOML by extension. Throws ConfigError on unknown keys.
  void merge_file(const std::filesystem::path& path);
  void merge_json(const nlohmann::json& values);
  void apply_environment(const std::function<const char*(const char*)>& getenv_fn);
  /// Parses `text` as a JSON literal, falling back to a bare string for string keys.
  void set(const std::string& key, const std::string& text);
  void set_value(const std::string& key, const nlohmann::json& value);

  const nlohmann::json& get(const std::string& key) const;
  int get_int(const std::string& key) const { return get(key).get<int>(); }
  double get_double(const std::string& key) const { return get(key).get<double>(); }
  bool get_bool(const std::string& key) const { return get(key).get<bool>(); }
  std::string get_string(const std::string& key) const { return get(key).get<std::string>(); }
  std::uint64_t seed() const { return get(key_seed).get<std::uint64_t>(); }

  /// Flat object of every key, sorted.
  nlohmann::json to_json() const;

  DenoiserConfig model_config(int style_count) const;
  TrainingConfig training_config() const;
  WindowSpec window_spec() const;
  ContactThresholds contact_thresholds() const;
  BvhOptions bvh_options() const;
  DatasetOptions dataset_options() const;
  DiffusionSchedule schedule() const;
  SamplerSettings sampler_settings() const;
  FootMetricConfig foot_metric_config() const;
  ClassifierConfig classifier_config() const;

 private:
  static constexpr const char* key_seed = "seed";
  std::map<std::string, nlohmann::json> values_;
};

/// Help text listing every key, its default and description.
std::string config_help();

}  // namespace skeldiff
