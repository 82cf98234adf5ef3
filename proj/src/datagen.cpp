#include "ppc/datagen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <ostream>

namespace ppc {

void PropTestConfig::validate() const {
  if (x1_values.empty()) throw ConfigError("prop.x1_values must not be empty");
  for (double x1 : x1_values) {
    if (!(stddev(x1) > 0.0)) {
      throw ConfigError("prop: sigma(" + format_real(x1) + ") = " + format_real(stddev(x1)) + " is not positive");
    }
  }
}

PropSample gen_prop_sample(Rng& rng, const PropTestConfig& config) {
  PropSample s;
  s.x1 = config.x1_values[rng.uniform_int(config.x1_values.size())];
  s.x2 = rng.normal(config.mean(s.x1), config.stddev(s.x1));
  return s;
}

void SineConfig::validate() const {
  auto range = [](double lo, double hi, const char* name) {
    if (!(lo <= hi)) throw ConfigError(std::string("sine.") + name + ": lower bound exceeds upper bound");
  };
  range(f_min, f_max, "f_min/f_max");
  range(amp_min, amp_max, "amp_min/amp_max");
  range(baseline_min, baseline_max, "baseline_min/baseline_max");
  if (!(f_min > 0.0)) throw ConfigError("sine.f_min must be > 0");
  if (!(f_band >= 0.0)) throw ConfigError("sine.f_band must be >= 0");
  if (!(noise_sigma_max >= 0.0)) throw ConfigError("sine.noise_sigma_max must be >= 0");
  if (!(sample_rate > 0.0)) throw ConfigError("sine.sample_rate must be > 0");
  if (segment_len == 0 || n_segments == 0) throw ConfigError("sine: segment_len and n_segments must be >= 1");
  if (change_segment >= n_segments) throw ConfigError("sine.change_segment must be < sine.n_segments");
  if (!(freq_step >= 0.0 && amp_step >= 0.0 && baseline_step >= 0.0)) {
    throw ConfigError("sine: walk steps must be >= 0");
  }
}

void SineConfig::write(ConfigTree& tree, const std::string& p) const {
  tree.set(p + ".f_min", format_real(f_min));
  tree.set(p + ".f_max", format_real(f_max));
  tree.set(p + ".f_band", format_real(f_band));
  tree.set(p + ".amp_min", format_real(amp_min));
  tree.set(p + ".amp_max", format_real(amp_max));
  tree.set(p + ".baseline_min", format_real(baseline_min));
  tree.set(p + ".baseline_max", format_real(baseline_max));
  tree.set(p + ".noise_sigma_max", format_real(noise_sigma_max));
  tree.set(p + ".sample_rate", format_real(sample_rate));
  tree.set(p + ".segment_len", std::to_string(segment_len));
  tree.set(p + ".n_segments", std::to_string(n_segments));
  tree.set(p + ".change_segment", std::to_string(change_segment));
  tree.set(p + ".freq_step", format_real(freq_step));
  tree.set(p + ".amp_step", format_real(amp_step));
  tree.set(p + ".baseline_step", format_real(baseline_step));
}

SineConfig SineConfig::read(ConfigReader& r, const std::string& p) {
  SineConfig c;
  c.f_min = r.real(p + ".f_min", c.f_min);
  c.f_max = r.real(p + ".f_max", c.f_max);
  c.f_band = r.real(p + ".f_band", c.f_band);
  c.amp_min = r.real(p + ".amp_min", c.amp_min);
  c.amp_max = r.real(p + ".amp_max", c.amp_max);
  c.baseline_min = r.real(p + ".baseline_min", c.baseline_min);
  c.baseline_max = r.real(p + ".baseline_max", c.baseline_max);
  c.noise_sigma_max = r.real(p + ".noise_sigma_max", c.noise_sigma_max);
  c.sample_rate = r.real(p + ".sample_rate", c.sample_rate);
  c.segment_len = r.count(p + ".segment_len", c.segment_len);
  c.n_segments = r.count(p + ".n_segments", c.n_segments);
  c.change_segment = r.count(p + ".change_segment", c.change_segment);
  c.freq_step = r.real(p + ".freq_step", c.freq_step);
  c.amp_step = r.real(p + ".amp_step", c.amp_step);
  c.baseline_step = r.real(p + ".baseline_step", c.baseline_step);
  c.validate();
  return c;
}

namespace {

double reflect(double v, double lo, double hi) {
  if (lo == hi) return lo;
  while (v < lo || v > hi) {
    if (v < lo) v = 2.0 * lo - v;
    if (v > hi) v = 2.0 * hi - v;
  }
  return v;
}

}  // namespace

std::vector<double> bounded_random_walk(Rng& rng, double lo, double hi, double step_std, std::size_t n,
                                        std::vector<double>* increments) {
  if (!(lo <= hi)) throw ConfigError("bounded_random_walk: lo must not exceed hi");
  if (!(step_std >= 0.0)) throw ConfigError("bounded_random_walk: step_std must be >= 0");
  std::vector<double> out;
  out.reserve(n);
  if (increments) increments->clear();
  if (n == 0) return out;
  double v = rng.uniform(lo, hi);
  out.push_back(v);
  for (std::size_t t = 1; t < n; ++t) {
    const double step = step_std > 0.0 ? rng.normal(0.0, step_std) : 0.0;
    if (increments) increments->push_back(step);
    v = reflect(v + step, lo, hi);
    out.push_back(v);
  }
  return out;
}

LabeledSequence gen_sine_signal(Rng& rng, const SineConfig& c, double f_before, double f_after,
                                std::optional<std::size_t> change_sample, SignalTrace* trace) {
  for (double f : {f_before, f_after}) {
    if (!(f >= c.f_min && f <= c.f_max)) {
      throw ConfigError("gen_sine_signal: center frequency " + format_real(f) + " Hz outside [" + format_real(c.f_min) +
                        ", " + format_real(c.f_max) + "]");
    }
  }
  const std::size_t n = c.length();
  if (change_sample && *change_sample >= n) throw ConfigError("gen_sine_signal: change sample beyond signal end");

  const double noise_sigma = rng.uniform(0.0, c.noise_sigma_max);
  const auto offset = bounded_random_walk(rng, -0.5 * c.f_band, 0.5 * c.f_band, c.freq_step, n);
  const auto amp = bounded_random_walk(rng, c.amp_min, c.amp_max, c.amp_step, n);
  const auto base = bounded_random_walk(rng, c.baseline_min, c.baseline_max, c.baseline_step, n);

  LabeledSequence out;
  out.f_before = f_before;
  out.f_after = f_after;
  out.label = f_before != f_after ? Label::anomalous_change : Label::no_change;
  if (out.label == Label::anomalous_change) out.change_sample = change_sample.value_or(0);
  out.samples.resize(n);
  if (trace) {
    *trace = {};
    trace->noise_sigma = noise_sigma;
  }

  const std::size_t switch_at = out.change_sample.value_or(n);
  double phase = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double center = t < switch_at ? f_before : f_after;
    const double f = center + offset[t];
    const double noise = noise_sigma > 0.0 ? rng.normal(0.0, noise_sigma) : 0.0;
    out.samples[t] = static_cast<float>(amp[t] * std::sin(phase) + base[t] + noise);
    phase += 2.0 * std::numbers::pi * f / c.sample_rate;
    if (trace) {
      trace->center.push_back(center);
      trace->frequency.push_back(f);
      trace->amplitude.push_back(amp[t]);
      trace->baseline.push_back(base[t]);
    }
  }
  return out;
}

std::string_view to_string(ChangeMode m) {
  switch (m) {
    case ChangeMode::none: return "none";
    case ChangeMode::all: return "all";
    case ChangeMode::paired: return "paired";
  }
  return "none";
}

ChangeMode parse_change_mode(std::string_view s) {
  if (s == "none") return ChangeMode::none;
  if (s == "all") return ChangeMode::all;
  if (s == "paired") return ChangeMode::paired;
  throw ConfigError("unknown change mode '" + std::string(s) + "' (none|all|paired)");
}

std::string_view to_string(DatasetKind k) { return k == DatasetKind::sine ? "sine" : "prop"; }

DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "sine") return DatasetKind::sine;
  if (s == "prop") return DatasetKind::prop;
  throw ConfigError("unknown dataset kind '" + std::string(s) + "' (sine|prop)");
}

Shape DatasetSpec::segment_shape() const {
  return kind == DatasetKind::sine ? Shape{sine.segment_len, 1} : Shape{1};
}

LabeledSequence gen_item(const DatasetSpec& spec, std::size_t index) {
  Rng rng(spec.seed, index);
  if (spec.kind == DatasetKind::prop) {
    const PropSample s = gen_prop_sample(rng, spec.prop);
    LabeledSequence out;
    out.samples = {static_cast<float>(s.x1), static_cast<float>(s.x2)};
    out.f_before = spec.prop.mean(s.x1);
    out.f_after = spec.prop.stddev(s.x1);
    return out;
  }
  const SineConfig& c = spec.sine;
  const bool change = spec.changes == ChangeMode::all || (spec.changes == ChangeMode::paired && index % 2 == 1);
  const double f_before = rng.uniform(c.f_min, c.f_max);
  double f_after = f_before;
  std::optional<std::size_t> at;
  if (change) {
    f_after = rng.uniform(c.f_min, c.f_max);
    at = c.change_segment * c.segment_len + rng.uniform_int(c.segment_len);
  }
  return gen_sine_signal(rng, c, f_before, f_after, at);
}

GeneratedSource::GeneratedSource(DatasetSpec spec) : spec_(std::move(spec)) {
  spec_.sine.validate();
  spec_.prop.validate();
}

void GeneratedSource::read(std::size_t index, std::span<float> out) const {
  const LabeledSequence item = gen_item(spec_, index);
  std::copy(item.samples.begin(), item.samples.end(), out.begin());
}

// ---------------------------------------------------------------------------
// Dataset

ConfigTree describe(const DatasetSpec& spec) {
  ConfigTree t;
  t.set("dataset.generator", std::string(Rng::kName));
  t.set("dataset.kind", std::string(to_string(spec.kind)));
  t.set("dataset.seed", std::to_string(spec.seed));
  t.set("dataset.count", std::to_string(spec.count));
  t.set("dataset.changes", std::string(to_string(spec.changes)));
  t.set("dataset.steps", std::to_string(spec.steps()));
  t.set("dataset.segment_shape", format_extents(spec.segment_shape()));
  if (spec.kind == DatasetKind::sine) {
    spec.sine.write(t, "sine");
  } else {
    std::string xs;
    for (std::size_t i = 0; i < spec.prop.x1_values.size(); ++i) {
      xs += (i ? "," : "") + format_real(spec.prop.x1_values[i]);
    }
    t.set("prop.x1_values", xs);
    t.set("prop.mean_slope", format_real(spec.prop.mean_slope));
    t.set("prop.std_slope", format_real(spec.prop.std_slope));
    t.set("prop.std_offset", format_real(spec.prop.std_offset));
  }
  return t;
}

DatasetSpec read_spec(ConfigReader& r) {
  DatasetSpec s;
  s.kind = parse_dataset_kind(r.text("dataset.kind", "sine"));
  s.seed = r.count("dataset.seed", 0);
  s.count = r.count("dataset.count", 0);
  s.changes = parse_change_mode(r.text("dataset.changes", "none"));
  if (s.kind == DatasetKind::sine) {
    s.sine = SineConfig::read(r, "sine");
  } else {
    const std::string xs = r.text("prop.x1_values", "-10,0,10");
    s.prop.x1_values.clear();
    std::size_t pos = 0;
    while (pos <= xs.size()) {
      const auto comma = std::min(xs.find(',', pos), xs.size());
      const std::string item = xs.substr(pos, comma - pos);
      try {
        std::size_t used = 0;
        s.prop.x1_values.push_back(std::stod(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw ConfigError("prop.x1_values: '" + item + "' is not a number");
      }
      pos = comma + 1;
    }
    s.prop.mean_slope = r.real("prop.mean_slope", s.prop.mean_slope);
    s.prop.std_slope = r.real("prop.std_slope", s.prop.std_slope);
    s.prop.std_offset = r.real("prop.std_offset", s.prop.std_offset);
    s.prop.validate();
  }
  // Recorded by describe(); accepted on replay only when they agree.
  if (const std::string g = r.text("dataset.generator", std::string(Rng::kName)); g != Rng::kName) {
    throw ConfigError("dataset.generator '" + g + "' is not supported (this build uses " + std::string(Rng::kName) + ")");
  }
  if (r.count("dataset.steps", s.steps()) != s.steps()) throw ConfigError("dataset.steps disagrees with dataset.kind");
  if (r.text("dataset.segment_shape", format_extents(s.segment_shape())) != format_extents(s.segment_shape())) {
    throw ConfigError("dataset.segment_shape disagrees with dataset.kind");
  }
  return s;
}

Dataset::Dataset(ConfigTree header, std::size_t steps, std::size_t segment_size)
    : header_(std::move(header)), steps_(steps), segment_size_(segment_size) {}

Dataset Dataset::generate(const DatasetSpec& spec) {
  spec.sine.validate();
  spec.prop.validate();
  Dataset d(describe(spec), spec.steps(), spec.segment_size());
  d.meta_.reserve(spec.count);
  d.data_.reserve(spec.count * spec.steps() * spec.segment_size());
  std::size_t anomalous = 0;
  for (std::size_t i = 0; i < spec.count; ++i) {
    const LabeledSequence item = gen_item(spec, i);
    anomalous += item.label == Label::anomalous_change;
    d.push(item);
  }
  d.header_.set("dataset.labels.no_change", std::to_string(spec.count - anomalous));
  d.header_.set("dataset.labels.anomalous_change", std::to_string(anomalous));
  return d;
}

void Dataset::push(const LabeledSequence& item) {
  if (item.samples.size() != steps_ * segment_size_) {
    throw DataError("dataset: item holds " + std::to_string(item.samples.size()) + " samples, expected " +
                    std::to_string(steps_ * segment_size_));
  }
  meta_.push_back({item.label, item.f_before, item.f_after, item.change_sample});
  data_.insert(data_.end(), item.samples.begin(), item.samples.end());
}

void Dataset::read(std::size_t index, std::span<float> out) const {
  const auto s = samples(index);
  std::copy(s.begin(), s.end(), out.begin());
}

std::span<const float> Dataset::samples(std::size_t index) const {
  if (index >= meta_.size()) throw DataError("dataset: item " + std::to_string(index) + " out of range");
  const std::size_t n = steps_ * segment_size_;
  return {data_.data() + index * n, n};
}

Shape Dataset::segment_shape() const {
  const auto text = header_.get("dataset.segment_shape");
  return text ? parse_extents(*text) : Shape{segment_size_};
}

namespace {

static_assert(std::endian::native == std::endian::little, "dataset I/O assumes a little-endian host");

constexpr char kMagic[4] = {'P', 'P', 'C', 'D'};

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

void put_f32(std::ostream& out, float v) { out.write(reinterpret_cast<const char*>(&v), 4); }

}  // namespace

void Dataset::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write dataset '" + path + "'");
  const std::string text = header_.serialize();
  out.write(kMagic, 4);
  put_u32(out, kDatasetVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const std::size_t n = steps_ * segment_size_;
  put_u32(out, static_cast<std::uint32_t>(n + 4));
  for (std::size_t i = 0; i < meta_.size(); ++i) {
    const ItemMeta& m = meta_[i];
    put_f32(out, static_cast<float>(m.label));
    put_f32(out, static_cast<float>(m.f_before));
    put_f32(out, static_cast<float>(m.f_after));
    put_f32(out, m.change_sample ? static_cast<float>(*m.change_sample) : -1.0f);
    out.write(reinterpret_cast<const char*>(data_.data() + i * n), static_cast<std::streamsize>(n * sizeof(float)));
  }
  if (!out) throw DataError("failed writing dataset '" + path + "'");
}

Dataset Dataset::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  auto fail = [&](const std::string& why) { return DataError("dataset '" + path + "': " + why); };
  auto get = [&](char* dst, std::size_t n, const char* what) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) throw fail(std::string("truncated while reading ") + what);
  };
  auto u32 = [&](const char* what) {
    std::uint32_t v = 0;
    get(reinterpret_cast<char*>(&v), 4, what);
    return v;
  };
  char magic[4];
  get(magic, 4, "magic");
  if (!std::equal(magic, magic + 4, kMagic)) throw fail("bad magic");
  const std::uint32_t version = u32("version");
  if (version != kDatasetVersion) throw fail("unsupported version " + std::to_string(version));
  std::string text(u32("header length"), '\0');
  get(text.data(), text.size(), "header");

  ConfigTree header;
  std::size_t steps = 0, count = 0;
  Shape shape;
  try {
    header = ConfigTree::parse(text);
    ConfigReader r(header);
    steps = r.count("dataset.steps");
    count = r.count("dataset.count");
    shape = r.extents("dataset.segment_shape");
  } catch (const ConfigError& e) {
    throw fail(std::string("header: ") + e.what());
  }
  const std::size_t n = steps * numel(shape);
  if (u32("record size") != n + 4) throw fail("record size does not match header");

  Dataset d(std::move(header), steps, numel(shape));
  d.meta_.reserve(count);
  d.data_.resize(count * n);
  float lead[4];
  for (std::size_t i = 0; i < count; ++i) {
    get(reinterpret_cast<char*>(lead), sizeof(lead), "record");
    ItemMeta m;
    m.label = lead[0] != 0.0f ? Label::anomalous_change : Label::no_change;
    m.f_before = lead[1];
    m.f_after = lead[2];
    if (lead[3] >= 0.0f) m.change_sample = static_cast<std::size_t>(lead[3]);
    d.meta_.push_back(m);
    get(reinterpret_cast<char*>(d.data_.data() + i * n), n * sizeof(float), "record");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw fail("trailing bytes after " + std::to_string(count) + " records");
  return d;
}

void Dataset::write_csv(std::ostream& out) const {
  const std::size_t n = steps_ * segment_size_;
  out << "index,label,f_before,f_after,change_sample";
  for (std::size_t j = 0; j < n; ++j) out << ",x" << j;
  out << '\n';
  for (std::size_t i = 0; i < meta_.size(); ++i) {
    const ItemMeta& m = meta_[i];
    out << i << ',' << static_cast<int>(m.label) << ',' << format_real(m.f_before) << ',' << format_real(m.f_after)
        << ',' << (m.change_sample ? std::to_string(*m.change_sample) : std::string("NA"));
    for (float v : samples(i)) out << ',' << format_real(v);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Frequency grid

std::size_t FrequencyGrid::cells_per_axis() const {
  const double span = sine.f_max - sine.f_min;
  const double cells = span / resolution;
  const double rounded = std::round(cells);
  if (rounded < 1.0 || std::abs(cells - rounded) > 1e-9 * std::max(1.0, cells)) {
    throw ConfigError("grid resolution " + format_real(resolution) + " does not divide the frequency span " +
                      format_real(span));
  }
  return static_cast<std::size_t>(rounded);
}

double FrequencyGrid::center(std::size_t j) const {
  return sine.f_min + (static_cast<double>(j) + 0.5) * resolution;
}

LabeledSequence FrequencyGrid::signal(std::size_t i, std::size_t j, std::size_t rep) const {
  const std::size_t cells = cells_per_axis();
  Rng rng(seed, (i * cells + j) * reps + rep);
  const std::size_t at = sine.change_segment * sine.segment_len + rng.uniform_int(sine.segment_len);
  return gen_sine_signal(rng, sine, center(i), center(j), i == j ? std::nullopt : std::optional<std::size_t>(at));
}

FrequencyGrid make_frequency_grid(double resolution, std::size_t reps, std::uint64_t seed, SineConfig sine) {
  if (!(resolution > 0.0)) throw ConfigError("grid resolution must be > 0");
  if (reps == 0) throw ConfigError("grid reps must be >= 1");
  sine.validate();
  FrequencyGrid g{resolution, reps, seed, sine};
  g.cells_per_axis();
  return g;
}

void GridSource::read(std::size_t index, std::span<float> out) const {
  const std::size_t cells = grid_.cells_per_axis();
  const std::size_t rep = index % grid_.reps;
  const std::size_t cell = index / grid_.reps;
  const LabeledSequence s = grid_.signal(cell / cells, cell % cells, rep);
  std::copy(s.samples.begin(), s.samples.end(), out.begin());
}

}  // namespace ppc
