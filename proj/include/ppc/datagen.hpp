#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ppc/config.hpp"
#include "ppc/random.hpp"
#include "ppc/training.hpp"

namespace ppc {

// x2 ~ N(mu(x1), sigma(x1)^2) with x1 drawn uniformly from x1_values.
struct PropTestConfig {
  std::vector<double> x1_values{-10.0, 0.0, 10.0};
  double mean_slope = 1.0;   // mu(x1) = mean_slope * x1
  double std_slope = 0.1;    // sigma(x1) = std_slope * x1 + std_offset
  double std_offset = 2.0;

  double mean(double x1) const { return mean_slope * x1; }
  double stddev(double x1) const { return std_slope * x1 + std_offset; }
  void validate() const;
};

struct PropSample {
  double x1 = 0.0;
  double x2 = 0.0;
};

PropSample gen_prop_sample(Rng& rng, const PropTestConfig& config);

struct SineConfig {
  double f_min = 0.5;
  double f_max = 10.0;
  double f_band = 0.25;
  double amp_min = 0.5;
  double amp_max = 2.0;
  double baseline_min = -1.0;
  double baseline_max = 1.0;
  double noise_sigma_max = 0.2;
  double sample_rate = 128.0;
  std::size_t segment_len = 256;
  std::size_t n_segments = 8;
  std::size_t change_segment = 5;  // 0-based segment that may hold the change point
  double freq_step = 0.01;
  double amp_step = 0.002;
  double baseline_step = 0.002;

  std::size_t length() const { return segment_len * n_segments; }
  void validate() const;
  void write(ConfigTree& tree, const std::string& prefix) const;
  static SineConfig read(ConfigReader& reader, const std::string& prefix);
};

enum class Label : std::uint8_t { no_change = 0, anomalous_change = 1 };

struct LabeledSequence {
  std::vector<float> samples;  // n_segments * segment_len
  Label label = Label::no_change;
  double f_before = 0.0;
  double f_after = 0.0;
  std::optional<std::size_t> change_sample;
};

// Latent processes behind a generated signal, one value per sample.
struct SignalTrace {
  std::vector<double> center;
  std::vector<double> frequency;
  std::vector<double> amplitude;
  std::vector<double> baseline;
  double noise_sigma = 0.0;
};

// Starts uniformly in [lo, hi], adds N(0, step_std^2) increments and reflects
// at the bounds. With `increments` non-null the raw increments are recorded.
std::vector<double> bounded_random_walk(Rng& rng, double lo, double hi, double step_std, std::size_t n,
                                        std::vector<double>* increments = nullptr);

// s = a * sin(phi) + b + noise with phi accumulated per sample from the
// instantaneous frequency, which wanders within +-f_band/2 of the center
// frequency; the center switches from f_before to f_after at change_sample.
LabeledSequence gen_sine_signal(Rng& rng, const SineConfig& config, double f_before, double f_after,
                                std::optional<std::size_t> change_sample, SignalTrace* trace = nullptr);

enum class ChangeMode { none, all, paired };

std::string_view to_string(ChangeMode m);
ChangeMode parse_change_mode(std::string_view s);

enum class DatasetKind { sine, prop };

std::string_view to_string(DatasetKind k);
DatasetKind parse_dataset_kind(std::string_view s);

struct DatasetSpec {
  DatasetKind kind = DatasetKind::sine;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  ChangeMode changes = ChangeMode::none;
  SineConfig sine;
  PropTestConfig prop;

  std::size_t steps() const { return kind == DatasetKind::sine ? sine.n_segments : 2; }
  std::size_t segment_size() const { return kind == DatasetKind::sine ? sine.segment_len : 1; }
  Shape segment_shape() const;
};

// Item `index` of a dataset, drawn from Rng(seed, index) so it does not depend on
// any other item. Proportionality items hold (x1, x2) with f_before = mu(x1),
// f_after = sigma(x1).
LabeledSequence gen_item(const DatasetSpec& spec, std::size_t index);

// Generates items on demand.
class GeneratedSource : public SequenceSource {
 public:
  explicit GeneratedSource(DatasetSpec spec);
  std::size_t size() const override { return spec_.count; }
  std::size_t steps() const override { return spec_.steps(); }
  std::size_t segment_size() const override { return spec_.segment_size(); }
  void read(std::size_t index, std::span<float> out) const override;
  const DatasetSpec& spec() const { return spec_; }

 private:
  DatasetSpec spec_;
};

struct ItemMeta {
  Label label = Label::no_change;
  double f_before = 0.0;
  double f_after = 0.0;
  std::optional<std::size_t> change_sample;
};

// In-memory dataset with its generation metadata.
class Dataset : public SequenceSource {
 public:
  Dataset() = default;
  Dataset(ConfigTree header, std::size_t steps, std::size_t segment_size);

  static Dataset generate(const DatasetSpec& spec);
  static Dataset load(const std::string& path);

  // "PPCD", u32 version, u32 header length, header text, u32 record floats, then
  // per item: label, f_before, f_after, change_sample (-1 when absent), samples; all f32 little-endian.
  void save(const std::string& path) const;
  void write_csv(std::ostream& out) const;

  void push(const LabeledSequence& item);

  std::size_t size() const override { return meta_.size(); }
  std::size_t steps() const override { return steps_; }
  std::size_t segment_size() const override { return segment_size_; }
  void read(std::size_t index, std::span<float> out) const override;

  const ConfigTree& header() const { return header_; }
  const ItemMeta& meta(std::size_t index) const { return meta_.at(index); }
  std::span<const float> samples(std::size_t index) const;
  Shape segment_shape() const;

 private:
  ConfigTree header_;
  std::size_t steps_ = 0;
  std::size_t segment_size_ = 0;
  std::vector<ItemMeta> meta_;
  std::vector<float> data_;
};

inline constexpr std::uint32_t kDatasetVersion = 1;

// Header entries describing a spec (generator, seed, counts, data model).
ConfigTree describe(const DatasetSpec& spec);
DatasetSpec read_spec(ConfigReader& reader);

// Cartesian grid of center frequencies over [f_min, f_max]^2 with cell centers
// f_min + (j + 1/2) * resolution.
struct FrequencyGrid {
  double resolution = 0.05;
  std::size_t reps = 10;
  std::uint64_t seed = 0;
  SineConfig sine;

  std::size_t cells_per_axis() const;
  std::size_t cell_count() const { return cells_per_axis() * cells_per_axis(); }
  std::size_t signal_count() const { return cell_count() * reps; }
  double center(std::size_t j) const;

  // Signal `rep` of cell (i, j): f_before = center(i), f_after = center(j).
  LabeledSequence signal(std::size_t i, std::size_t j, std::size_t rep) const;
};

FrequencyGrid make_frequency_grid(double resolution, std::size_t reps, std::uint64_t seed, SineConfig sine = {});

// All signals of a grid in (i, j, rep) order.
class GridSource : public SequenceSource {
 public:
  explicit GridSource(FrequencyGrid grid) : grid_(std::move(grid)) {}
  std::size_t size() const override { return grid_.signal_count(); }
  std::size_t steps() const override { return grid_.sine.n_segments; }
  std::size_t segment_size() const override { return grid_.sine.segment_len; }
  void read(std::size_t index, std::span<float> out) const override;
  const FrequencyGrid& grid() const { return grid_; }

 private:
  FrequencyGrid grid_;
};

}  // namespace ppc
