#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "ppc/layers.hpp"
#include "ppc/tensor.hpp"

namespace ppc {

// Orders dotted keys segment by segment, comparing all-digit segments
// numerically, so "encoder.10" sorts after "encoder.2".
struct KeyOrder {
  bool operator()(const std::string& a, const std::string& b) const;
};

// Flat "a.b.c = value" tree. The serialized form is canonical: one entry per
// line, keys in KeyOrder, single spaces around '='.
class ConfigTree {
 public:
  static ConfigTree parse(std::string_view text);
  static ConfigTree load(const std::string& path);

  std::string serialize() const;

  void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }
  void erase(const std::string& key) { entries_.erase(key); }
  bool contains(const std::string& key) const { return entries_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  const std::map<std::string, std::string, KeyOrder>& entries() const { return entries_; }

  // Keys under `prefix.` with the prefix stripped.
  std::vector<std::string> children(const std::string& prefix) const;

  bool operator==(const ConfigTree&) const = default;

 private:
  std::map<std::string, std::string, KeyOrder> entries_;
};

// Typed accessors recording which keys were consumed, so callers can reject
// unknown keys afterwards.
class ConfigReader {
 public:
  explicit ConfigReader(const ConfigTree& tree) : tree_(tree) {}

  std::string text(const std::string& key);
  std::string text(const std::string& key, const std::string& fallback);
  double real(const std::string& key);
  double real(const std::string& key, double fallback);
  std::uint64_t count(const std::string& key);
  std::uint64_t count(const std::string& key, std::uint64_t fallback);
  bool flag(const std::string& key, bool fallback);
  Shape extents(const std::string& key);
  std::vector<LayerSpec> layers(const std::string& prefix);

  // Throws ConfigError naming the first key that was never read.
  void reject_unknown() const;

 private:
  const ConfigTree& tree_;
  std::set<std::string> used_;
};

std::string format_real(double v);
std::string format_extents(const Shape& s);  // "256x1"
Shape parse_extents(std::string_view text);

struct OptimizerConfig {
  double lr = 1e-4;
  double rho = 0.9;
  double epsilon = 1e-8;

  bool operator==(const OptimizerConfig&) const = default;
};

struct TrainSchedule {
  std::size_t warmup_iters = 1000;
  std::size_t max_iters = 50000;   // total, warm-up included
  std::size_t eval_every = 500;
  std::size_t patience = 10;       // evaluations without improvement before stopping
  std::size_t batch_size = 32;
  std::size_t val_size = 2048;     // validation sequences per evaluation

  bool operator==(const TrainSchedule&) const = default;
};

struct PipelineConfig {
  std::size_t past_steps = 1;
  std::size_t future_steps = 1;
  std::size_t latent_size = 4;
  std::size_t gru_units = 8;
  Shape segment_shape{1};
  std::vector<LayerSpec> encoder;
  std::vector<LayerSpec> decoder;
  std::vector<LayerSpec> forecaster;  // hidden stack; the mean/std heads are implicit
  double lambda = 0.0;
  OptimizerConfig optimizer;
  TrainSchedule schedule;
  std::uint64_t seed = 0;

  std::size_t steps() const { return past_steps + future_steps; }
  std::size_t segment_size() const { return numel(segment_shape); }

  // Checks scalar invariants and static layer shapes; throws ConfigError naming the field.
  void validate() const;

  void write(ConfigTree& tree) const;
  static PipelineConfig read(ConfigReader& reader);

  ConfigTree to_tree() const;
  static PipelineConfig from_tree(const ConfigTree& tree);

  bool operator==(const PipelineConfig&) const = default;
};

// Architectures of the proportionality test, the sine-wave experiment and the
// spectroscopy (dense) pipeline: "proportionality", "sine", "mrsi".
PipelineConfig preset(std::string_view name);
std::vector<std::string> preset_names();

}  // namespace ppc
