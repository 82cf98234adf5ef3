#include "ppc/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace ppc {

template <typename T>
Forecaster<T>::Forecaster(const std::vector<LayerSpec>& hidden, std::size_t context_size, std::size_t latent,
                          std::string_view what)
    : hidden_(hidden, Shape{context_size}, what), head_(numel(hidden_.output_shape()), latent) {}

template <typename T>
MveOutput<T> Forecaster<T>::forward(Tape<T>& tape, Var<T> c) const {
  return head_.forward(tape, hidden_.forward(tape, c));
}

template <typename T>
Var<T> Forecaster<T>::mean(Tape<T>& tape, Var<T> c) const {
  return head_.mean(tape, hidden_.forward(tape, c));
}

template <typename T>
void Forecaster<T>::init(Rng& rng) {
  hidden_.init(rng);
  head_.init(rng);
}

template <typename T>
void Forecaster<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
  hidden_.collect(prefix + ".hidden", out);
  head_.collect(prefix + ".head", out);
}

// ---------------------------------------------------------------------------

template <typename T>
PpcModel<T>::PpcModel(PipelineConfig config)
    : config_((config.validate(), std::move(config))),
      encoder_(config_.encoder, config_.segment_shape, "model.encoder"),
      gru_(config_.latent_size, config_.gru_units),
      decoder_(config_.decoder, Shape{config_.latent_size}, "model.decoder") {
  for (std::size_t i = 0; i < config_.future_steps; ++i) {
    forecasters_.emplace_back(config_.forecaster, config_.gru_units, config_.latent_size, "model.forecaster");
  }
  Rng rng(config_.seed, streams::kInit);
  encoder_.init(rng);
  gru_.init(rng);
  for (auto& f : forecasters_) f.init(rng);
  decoder_.init(rng);
}

template <typename T>
std::vector<ParamRef<T>> PpcModel<T>::parameters() {
  std::vector<ParamRef<T>> out;
  encoder_.collect("encoder", out);
  gru_.collect("sequence", out);
  for (std::size_t i = 0; i < forecasters_.size(); ++i) forecasters_[i].collect("forecaster." + std::to_string(i), out);
  decoder_.collect("decoder", out);
  return out;
}

template <typename T>
std::size_t PpcModel<T>::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters()) {
    if (p.trainable) n += p.tensor->size();
  }
  return n;
}

template <typename T>
Shape PpcModel<T>::batch_shape(std::size_t batch) const {
  Shape s{batch};
  s.insert(s.end(), config_.segment_shape.begin(), config_.segment_shape.end());
  return s;
}

template <typename T>
Var<T> PpcModel<T>::encode_graph(Tape<T>& tape, Var<T> x) const {
  return encoder_.forward(tape, x);
}

template <typename T>
Var<T> PpcModel<T>::encode_training(Tape<T>& tape, Var<T> x) {
  return encoder_.forward_train(tape, x);
}

template <typename T>
Var<T> PpcModel<T>::context(Tape<T>& tape, std::span<const Var<T>> z_steps) const {
  if (z_steps.size() != config_.past_steps) {
    throw ShapeError("context: expected " + std::to_string(config_.past_steps) + " latent steps, got " +
                     std::to_string(z_steps.size()));
  }
  return gru_.run(tape, z_steps, gru_.zero_state(tape, z_steps.front().shape().at(0)));
}

template <typename T>
MveOutput<T> PpcModel<T>::forecast(Tape<T>& tape, std::size_t i, Var<T> c) const {
  return forecasters_.at(i).forward(tape, c);
}

template <typename T>
Var<T> PpcModel<T>::forecast_mean(Tape<T>& tape, std::size_t i, Var<T> c) const {
  return forecasters_.at(i).mean(tape, c);
}

template <typename T>
Var<T> PpcModel<T>::decode(Tape<T>& tape, Var<T> z) const {
  return decoder_.forward(tape, z);
}

template <typename T>
Var<T> PpcModel<T>::decode_training(Tape<T>& tape, Var<T> z) {
  return decoder_.forward_train(tape, z);
}

template <typename T>
Tensor<T> PpcModel<T>::encode_batch(const Tensor<T>& x) const {
  const Shape& s = x.shape();
  if (s.size() != config_.segment_shape.size() + 1 || !std::equal(s.begin() + 1, s.end(), config_.segment_shape.begin())) {
    throw ShapeError("encode: expected [batch] + " + to_string(config_.segment_shape) + ", got " + to_string(s));
  }
  Tape<T> tape;
  return encode_graph(tape, tape.parameter(x)).value();
}

template <typename T>
std::vector<BatchForecast<T>> PpcModel<T>::predict_batch(std::span<const Tensor<T>> z_past) const {
  if (z_past.size() != config_.past_steps) {
    throw ShapeError("predict: expected " + std::to_string(config_.past_steps) + " latents, got " +
                     std::to_string(z_past.size()));
  }
  Tape<T> tape;
  std::vector<Var<T>> zs;
  for (const auto& z : z_past) {
    if (z.rank() != 2 || z.shape()[1] != config_.latent_size || z.shape()[0] != z_past.front().shape()[0]) {
      throw ShapeError("predict: latent batch must be [batch, " + std::to_string(config_.latent_size) + "], got " +
                       to_string(z.shape()));
    }
    zs.push_back(tape.parameter(z));
  }
  Var<T> c = context(tape, zs);
  std::vector<BatchForecast<T>> out;
  for (std::size_t i = 0; i < forecasters_.size(); ++i) {
    MveOutput<T> f = forecast(tape, i, c);
    out.push_back({f.mean.value(), f.log_sigma.value()});
  }
  return out;
}

template <typename T>
std::vector<std::vector<double>> PpcModel<T>::encode(std::span<const std::vector<double>> segments) const {
  if (segments.empty()) return {};
  const std::size_t n = config_.segment_size();
  Tensor<T> x(batch_shape(segments.size()));
  for (std::size_t b = 0; b < segments.size(); ++b) {
    if (segments[b].size() != n) {
      throw ShapeError("encode: segment " + std::to_string(b) + " has " + std::to_string(segments[b].size()) +
                       " values, expected " + std::to_string(n) + " for shape " + to_string(config_.segment_shape));
    }
    std::transform(segments[b].begin(), segments[b].end(), x.data().begin() + b * n,
                   [](double v) { return static_cast<T>(v); });
  }
  const Tensor<T> z = encode_batch(x);
  const std::size_t e = config_.latent_size;
  std::vector<std::vector<double>> out(segments.size());
  for (std::size_t b = 0; b < segments.size(); ++b) {
    out[b].assign(z.data().begin() + b * e, z.data().begin() + (b + 1) * e);
  }
  return out;
}

template <typename T>
std::vector<Forecast> PpcModel<T>::predict(std::span<const std::vector<double>> z_past) const {
  const std::size_t e = config_.latent_size;
  std::vector<Tensor<T>> zs;
  for (const auto& z : z_past) {
    if (z.size() != e) {
      throw ShapeError("predict: latent of length " + std::to_string(z.size()) + ", expected " + std::to_string(e));
    }
    Tensor<T> t(Shape{1, e});
    std::transform(z.begin(), z.end(), t.data().begin(), [](double v) { return static_cast<T>(v); });
    zs.push_back(std::move(t));
  }
  const auto batch = predict_batch(zs);
  std::vector<Forecast> out;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Forecast f;
    f.step = i + 1;
    f.z_hat.assign(batch[i].mean.data().begin(), batch[i].mean.data().end());
    for (T s : batch[i].log_sigma.data()) f.sigma.push_back(std::exp(static_cast<double>(s)));
    out.push_back(std::move(f));
  }
  return out;
}

template <typename T>
std::vector<double> PpcModel<T>::reconstruct(std::span<const double> z) const {
  if (z.size() != config_.latent_size) {
    throw ShapeError("reconstruct: latent of length " + std::to_string(z.size()) + ", expected " +
                     std::to_string(config_.latent_size));
  }
  Tape<T> tape;
  Tensor<T> t(Shape{1, config_.latent_size});
  std::transform(z.begin(), z.end(), t.data().begin(), [](double v) { return static_cast<T>(v); });
  const Tensor<T>& x = decode(tape, tape.parameter(t)).value();
  return {x.data().begin(), x.data().end()};
}

template class Forecaster<float>;
template class Forecaster<double>;
template class PpcModel<float>;
template class PpcModel<double>;

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'P', 'P', 'C', 'K'};

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

class Reader {
 public:
  Reader(std::istream& in, const std::string& path) : in_(in), path_(path) {}

  void bytes(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw DataError("checkpoint '" + path_ + "': truncated while reading " + what);
    }
  }

  std::uint32_t u32(const char* what) {
    std::uint32_t v = 0;
    bytes(reinterpret_cast<char*>(&v), 4, what);
    return v;
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& in_;
  const std::string& path_;
};

}  // namespace

void save_checkpoint(PpcModel<float>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  ConfigTree tree = model.config().to_tree();
  tree.set("checkpoint.iteration", std::to_string(model.iteration()));
  const std::string text = tree.serialize();
  out.write(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : model.parameters()) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_u32(out, static_cast<std::uint32_t>(p.tensor->rank()));
    for (auto d : p.tensor->shape()) put_u32(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(p.tensor->data().data()),
              static_cast<std::streamsize>(p.tensor->size() * sizeof(float)));
  }
  if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

PpcModel<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  Reader r(in, path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (!std::equal(magic, magic + 4, kMagic)) throw DataError("checkpoint '" + path + "': bad magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
  }
  const std::uint32_t len = r.u32("config length");
  std::string text(len, '\0');
  r.bytes(text.data(), len, "config text");

  PipelineConfig config;
  std::uint64_t iteration = 0;
  try {
    const ConfigTree tree = ConfigTree::parse(text);
    ConfigReader reader(tree);
    iteration = reader.count("checkpoint.iteration", 0);
    config = PipelineConfig::read(reader);
    reader.reject_unknown();
  } catch (const ConfigError& e) {
    throw DataError("checkpoint '" + path + "': embedded config: " + e.what());
  }

  PpcModel<float> model(config);
  model.set_iteration(iteration);
  std::map<std::string, Tensor<float>*> expected;
  for (const auto& p : model.parameters()) expected.emplace(p.name, p.tensor);

  std::map<std::string, bool> seen;
  while (!r.at_end()) {
    const std::uint32_t name_len = r.u32("record name length");
    if (name_len > 4096) throw DataError("checkpoint '" + path + "': corrupt record header");
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len, "record name");
    auto it = expected.find(name);
    if (it == expected.end()) throw DataError("checkpoint '" + path + "': unexpected tensor '" + name + "'");
    if (seen[name]) throw DataError("checkpoint '" + path + "': duplicate tensor '" + name + "'");
    seen[name] = true;
    const std::uint32_t rank = r.u32("record rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u32("record dims");
    Tensor<float>& target = *it->second;
    if (shape != target.shape()) {
      throw DataError("checkpoint '" + path + "': tensor '" + name + "' has shape " + to_string(shape) +
                      ", model expects " + to_string(target.shape()));
    }
    r.bytes(reinterpret_cast<char*>(target.data().data()), target.size() * sizeof(float), ("tensor '" + name + "'").c_str());
  }
  for (const auto& [name, t] : expected) {
    if (!seen[name]) throw DataError("checkpoint '" + path + "': missing tensor '" + name + "'");
  }
  return model;
}

}  // namespace ppc
