#include "marf/trainer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "marf/error.hpp"
#include "marf/parallel.hpp"

namespace marf {

// --- TrainConfig -----------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate >= 0) || !(final_learning_rate >= 0)) throw ConfigError("learning rates must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must be in [0,1)");
  if (!(epsilon > 0)) throw ConfigError("Adam epsilon must be > 0");
  if (batch_rays < 1) throw ConfigError("batch_rays must be >= 1");
  if (samples < 1) throw ConfigError("samples must be >= 1");
  if (!max_steps && !max_seconds) throw ConfigError("training needs a step or time budget");
  if (max_seconds && !(*max_seconds >= 0)) throw ConfigError("max_seconds must be >= 0");
  if (deterministic && !max_steps) throw ConfigError("deterministic training needs a step budget");
  for (double s : checkpoint_seconds) {
    if (!(s > 0)) throw ConfigError("checkpoint times must be > 0");
  }
  if (!(grid_init_scale >= 0)) throw ConfigError("grid_init_scale must be >= 0");
  if (!(termination_threshold > 0 && termination_threshold < 1)) {
    throw ConfigError("termination_threshold must be in (0,1)");
  }
  for (double c : background) {
    if (!(c >= 0 && c <= 1)) throw ConfigError("background components must be in [0,1]");
  }
  grid.validate();
  field.validate();
}

int TrainConfig::worker_count() const { return deterministic ? 1 : resolve_threads(threads); }

RenderOptions TrainConfig::render_options() const {
  RenderOptions o;
  o.samples = samples;
  o.background = background;
  o.early_termination = early_termination;
  o.termination_threshold = termination_threshold;
  o.threads = deterministic ? 1 : resolve_threads(threads);
  return o;
}

std::vector<std::string> TrainConfig::keys() {
  return {"learning_rate", "final_learning_rate", "beta1", "beta2", "epsilon", "batch_rays", "samples",
          "max_steps", "max_seconds", "checkpoint_seconds", "grid_levels", "grid_features",
          "grid_min_resolution", "grid_max_resolution", "grid_table_size", "hidden_width", "geo_features",
          "dir_frequencies", "seed", "background", "deterministic", "threads", "grid_init_scale",
          "early_termination", "termination_threshold"};
}

void TrainConfig::write(KeyValueConfig& out, const std::string& section) const {
  const std::string p = section + ".";
  out.set(p + "learning_rate", format_double(learning_rate));
  out.set(p + "final_learning_rate", format_double(final_learning_rate));
  out.set(p + "beta1", format_double(beta1));
  out.set(p + "beta2", format_double(beta2));
  out.set(p + "epsilon", format_double(epsilon));
  out.set(p + "batch_rays", std::to_string(batch_rays));
  out.set(p + "samples", std::to_string(samples));
  if (max_steps) out.set(p + "max_steps", std::to_string(*max_steps));
  if (max_seconds) out.set(p + "max_seconds", format_double(*max_seconds));
  std::string marks;
  for (double s : checkpoint_seconds) marks += (marks.empty() ? "" : ",") + format_double(s);
  out.set(p + "checkpoint_seconds", marks);
  out.set(p + "grid_levels", std::to_string(grid.levels));
  out.set(p + "grid_features", std::to_string(grid.features_per_level));
  out.set(p + "grid_min_resolution", std::to_string(grid.min_resolution));
  out.set(p + "grid_max_resolution", std::to_string(grid.max_resolution));
  out.set(p + "grid_table_size", std::to_string(grid.table_size));
  out.set(p + "hidden_width", std::to_string(field.hidden_width));
  out.set(p + "geo_features", std::to_string(field.geo_features));
  out.set(p + "dir_frequencies", std::to_string(field.dir_frequencies));
  out.set(p + "seed", std::to_string(seed));
  out.set(p + "background", format_triplet(background));
  out.set(p + "deterministic", deterministic ? "true" : "false");
  out.set(p + "threads", std::to_string(threads));
  out.set(p + "grid_init_scale", format_double(grid_init_scale));
  out.set(p + "early_termination", early_termination ? "true" : "false");
  out.set(p + "termination_threshold", format_double(termination_threshold));
}

TrainConfig TrainConfig::read(const KeyValueConfig& in, const std::string& section) {
  in.require_known(section, keys());
  const std::string p = section + ".";
  TrainConfig c;
  c.learning_rate = in.get_double(p + "learning_rate", c.learning_rate);
  c.final_learning_rate = in.get_double(p + "final_learning_rate", c.final_learning_rate);
  c.beta1 = in.get_double(p + "beta1", c.beta1);
  c.beta2 = in.get_double(p + "beta2", c.beta2);
  c.epsilon = in.get_double(p + "epsilon", c.epsilon);
  c.batch_rays = static_cast<int>(in.get_int(p + "batch_rays", c.batch_rays));
  c.samples = static_cast<int>(in.get_int(p + "samples", c.samples));
  c.max_steps = in.get_optional_u64(p + "max_steps");
  c.max_seconds = in.get_optional_double(p + "max_seconds");
  if (const auto marks = in.get(p + "checkpoint_seconds")) {
    c.checkpoint_seconds.clear();
    std::stringstream ss(*marks);
    std::string part;
    while (std::getline(ss, part, ',')) {
      KeyValueConfig one;
      one.set("v", part);
      c.checkpoint_seconds.push_back(one.get_double("v", 0));
    }
  }
  c.grid.levels = static_cast<int>(in.get_int(p + "grid_levels", c.grid.levels));
  c.grid.features_per_level = static_cast<int>(in.get_int(p + "grid_features", c.grid.features_per_level));
  c.grid.min_resolution = static_cast<int>(in.get_int(p + "grid_min_resolution", c.grid.min_resolution));
  c.grid.max_resolution = static_cast<int>(in.get_int(p + "grid_max_resolution", c.grid.max_resolution));
  c.grid.table_size = static_cast<std::uint32_t>(in.get_u64(p + "grid_table_size", c.grid.table_size));
  c.field.hidden_width = static_cast<int>(in.get_int(p + "hidden_width", c.field.hidden_width));
  c.field.geo_features = static_cast<int>(in.get_int(p + "geo_features", c.field.geo_features));
  c.field.dir_frequencies = static_cast<int>(in.get_int(p + "dir_frequencies", c.field.dir_frequencies));
  c.seed = in.get_u64(p + "seed", c.seed);
  if (const auto bg = in.get(p + "background")) {
    try {
      c.background = parse_triplet(*bg);
    } catch (const ArgumentError& e) {
      throw ConfigError(std::string("config key '") + p + "background': " + e.what());
    }
  }
  c.deterministic = in.get_bool(p + "deterministic", c.deterministic);
  c.threads = static_cast<int>(in.get_int(p + "threads", c.threads));
  c.grid_init_scale = in.get_double(p + "grid_init_scale", c.grid_init_scale);
  c.early_termination = in.get_bool(p + "early_termination", c.early_termination);
  c.termination_threshold = in.get_double(p + "termination_threshold", c.termination_threshold);
  return c;
}

// --- Checkpoint ------------------------------------------------------------------

Checkpoint initial_checkpoint(const TrainConfig& config) {
  config.validate();
  Checkpoint ck;
  ck.config = config;
  ck.grid = HashGrid<float>(config.grid);
  ck.params = MlpParams<float>(config.grid.output_dim(), config.field);
  std::mt19937_64 rng(config.seed);
  ck.grid.initialize_uniform(static_cast<float>(config.grid_init_scale), rng);
  ck.params.initialize(rng);
  return ck;
}

namespace {

constexpr char kMagic[4] = {'M', 'A', 'R', 'F'};

template <typename T>
void put(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    out.append(bytes.data(), sizeof(T));
  } else {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    out.append(bytes, sizeof(T));
  }
}

void put_text(std::string& out, std::string_view text) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.append(text);
}

void put_section(std::string& out, const std::string& name, std::vector<std::uint64_t> dims,
                 std::span<const float> values) {
  put_text(out, name);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) put<std::uint64_t>(out, d);
  if constexpr (std::endian::native == std::endian::little) {
    out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(float));
  } else {
    for (float v : values) put<float>(out, v);
  }
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
      auto raw = std::bit_cast<std::array<char, sizeof(T)>>(value);
      std::reverse(raw.begin(), raw.end());
      value = std::bit_cast<T>(raw);
    }
    pos_ += sizeof(T);
    return value;
  }

  std::string text() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string out(bytes_.substr(pos_, n));
    pos_ += n;
    return out;
  }

  void floats(std::span<float> out) {
    need(out.size() * sizeof(float));
    for (float& v : out) v = get<float>();
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint is truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

void read_section(Reader& in, const std::string& name, const std::vector<std::uint64_t>& dims, std::span<float> out) {
  const std::string got = in.text();
  if (got != name) throw FormatError("checkpoint section '" + got + "' found where '" + name + "' was expected");
  const auto rank = in.get<std::uint32_t>();
  if (rank != dims.size()) throw FormatError("checkpoint section '" + name + "' has the wrong rank");
  for (std::size_t i = 0; i < dims.size(); ++i) {
    const auto d = in.get<std::uint64_t>();
    if (d != dims[i]) {
      throw FormatError("checkpoint section '" + name + "' does not match the configured shape");
    }
  }
  in.floats(out);
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out;
  out.append(kMagic, 4);
  put<std::uint32_t>(out, ck.version);
  put<std::uint64_t>(out, ck.step);
  put<double>(out, ck.running_psnr);
  KeyValueConfig cfg;
  ck.config.write(cfg);
  put_text(out, cfg.to_text());
  put<std::uint32_t>(out, 1 + 2 * MlpParams<float>::kLayers);
  const auto F = static_cast<std::uint64_t>(ck.config.grid.features_per_level);
  put_section(out, "grid", {ck.grid.entry_count(), F}, ck.grid.params());
  for (int l = 0; l < MlpParams<float>::kLayers; ++l) {
    const auto w = ck.params.weight(l);
    const auto b = ck.params.bias(l);
    put_section(out, "mlp.W" + std::to_string(l),
                {static_cast<std::uint64_t>(w.rows()), static_cast<std::uint64_t>(w.cols())},
                {w.data(), static_cast<std::size_t>(w.size())});
    put_section(out, "mlp.b" + std::to_string(l), {static_cast<std::uint64_t>(b.rows())},
                {b.data(), static_cast<std::size_t>(b.size())});
  }
  return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint file");
  Reader in(bytes.substr(4));
  Checkpoint ck;
  ck.version = in.get<std::uint32_t>();
  if (ck.version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(ck.version));
  }
  ck.step = in.get<std::uint64_t>();
  ck.running_psnr = in.get<double>();
  ck.config = TrainConfig::read(KeyValueConfig::parse(in.text(), "checkpoint config"));
  ck.config.validate();
  ck.grid = HashGrid<float>(ck.config.grid);
  ck.params = MlpParams<float>(ck.config.grid.output_dim(), ck.config.field);
  const auto sections = in.get<std::uint32_t>();
  if (sections != 1 + 2 * MlpParams<float>::kLayers) throw FormatError("checkpoint has an unexpected section count");
  const auto F = static_cast<std::uint64_t>(ck.config.grid.features_per_level);
  read_section(in, "grid", {ck.grid.entry_count(), F}, ck.grid.params());
  for (int l = 0; l < MlpParams<float>::kLayers; ++l) {
    auto w = ck.params.weight(l);
    auto b = ck.params.bias(l);
    read_section(in, "mlp.W" + std::to_string(l),
                 {static_cast<std::uint64_t>(w.rows()), static_cast<std::uint64_t>(w.cols())},
                 {w.data(), static_cast<std::size_t>(w.size())});
    read_section(in, "mlp.b" + std::to_string(l), {static_cast<std::uint64_t>(b.rows())},
                 {b.data(), static_cast<std::size_t>(b.size())});
  }
  if (!in.done()) throw FormatError("trailing bytes after checkpoint");
  return ck;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(checkpoint);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

// --- metrics ---------------------------------------------------------------------

template <typename Real>
Real mse_loss(const Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>& rendered,
              const Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>& truth,
              Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>* gradient) {
  if (rendered.rows() != truth.rows() || rendered.cols() != truth.cols()) {
    throw ArgumentError("loss inputs differ in shape");
  }
  const Eigen::Index count = rendered.size();
  if (count == 0) {
    if (gradient) gradient->resize(rendered.rows(), rendered.cols());
    return 0;
  }
  const auto diff = (rendered - truth).eval();
  if (gradient) *gradient = diff * (Real(2) / static_cast<Real>(count));
  return diff.squaredNorm() / static_cast<Real>(count);
}

template float mse_loss<float>(const Eigen::MatrixXf&, const Eigen::MatrixXf&, Eigen::MatrixXf*);
template double mse_loss<double>(const Eigen::MatrixXd&, const Eigen::MatrixXd&, Eigen::MatrixXd*);

double psnr(const ImageBuffer& a, const ImageBuffer& b) {
  if (a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels()) {
    throw ArgumentError("PSNR inputs differ in shape");
  }
  if (a.empty()) throw ArgumentError("PSNR of empty images");
  const auto x = a.data(), y = b.data();
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    sum += d * d;
  }
  const double mse = sum / static_cast<double>(x.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double scene_psnr(std::span<const ImageBuffer> truth, std::span<const ImageBuffer> rendered) {
  if (truth.size() != rendered.size()) throw ArgumentError("scene PSNR needs matched view lists");
  if (truth.empty()) throw ArgumentError("scene PSNR of an empty view list");
  double sum = 0.0;
  std::size_t finite = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double p = psnr(truth[i], rendered[i]);
    if (std::isinf(p)) {
      spdlog::warn("view {} is reproduced exactly; left out of the scene PSNR mean", i);
      continue;
    }
    sum += p;
    ++finite;
  }
  if (finite == 0) return std::numeric_limits<double>::infinity();
  return sum / static_cast<double>(finite);
}

std::string format_psnr(double db) {
  if (std::isinf(db) && db > 0) return "inf";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", db);
  return buf;
}

// --- data ----------------------------------------------------------------------

std::size_t TrainingSet::pixel_count() const {
  std::size_t n = 0;
  for (const auto& v : views) n += v.image.pixel_count();
  return n;
}

TrainingSet TrainingSet::subset(const std::vector<std::size_t>& indices) const {
  TrainingSet out;
  out.box = box;
  for (auto i : indices) out.views.push_back(views.at(i));
  return out;
}

TrainingSet load_training_set(const SceneManifest& manifest) {
  if (manifest.entries.empty()) throw ConfigError("scene manifest has no views");
  manifest.validate();
  TrainingSet out;
  out.box = manifest.aabb;
  for (const auto& e : manifest.entries) {
    ImageBuffer img = load_image(e.image);
    if (img.width() != e.intrinsics.width || img.height() != e.intrinsics.height) {
      throw ConfigError("image " + e.image.string() + " is " + std::to_string(img.width()) + "x" +
                        std::to_string(img.height()) + " but its camera is " + std::to_string(e.intrinsics.width) +
                        "x" + std::to_string(e.intrinsics.height));
    }
    if (img.channels() == 1) {
      ImageBuffer rgb(img.width(), img.height(), 3);
      auto src = img.data();
      auto dst = rgb.data();
      for (std::size_t p = 0; p < src.size(); ++p) dst[3 * p] = dst[3 * p + 1] = dst[3 * p + 2] = src[p];
      img = std::move(rgb);
    }
    out.views.push_back({e.image.filename().string(), std::move(img), e.intrinsics, e.pose});
  }
  return out;
}

ViewSplit split_views(std::size_t count, double heldout_fraction, std::uint64_t seed) {
  if (count < 2) throw ConfigError("need at least two views to hold one out");
  if (!(heldout_fraction > 0 && heldout_fraction < 1)) throw ConfigError("held-out fraction must be in (0,1)");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto held = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(heldout_fraction * static_cast<double>(count))), 1, count - 1);
  ViewSplit split;
  split.heldout.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
  split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
  std::sort(split.heldout.begin(), split.heldout.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

RayBatch sample_ray_batch(const TrainingSet& data, int count, std::mt19937_64& rng) {
  std::vector<std::size_t> prefix{0};
  for (const auto& v : data.views) prefix.push_back(prefix.back() + v.image.pixel_count());
  if (prefix.back() == 0) throw ConfigError("training set has no pixels");
  std::uniform_int_distribution<std::size_t> pick(0, prefix.back() - 1);
  RayBatch batch;
  batch.rays.reserve(static_cast<std::size_t>(count));
  batch.colors.resize(3, count);
  for (int r = 0; r < count; ++r) {
    const std::size_t global = pick(rng);
    const auto view = static_cast<std::size_t>(std::upper_bound(prefix.begin(), prefix.end(), global) -
                                               prefix.begin() - 1);
    const auto& v = data.views[view];
    const std::size_t p = global - prefix[view];
    const int x = static_cast<int>(p % static_cast<std::size_t>(v.image.width()));
    const int y = static_cast<int>(p / static_cast<std::size_t>(v.image.width()));
    batch.rays.push_back(generate_ray(v.intrinsics, v.pose, x + 0.5, y + 0.5, data.box));
    for (int c = 0; c < 3; ++c) batch.colors(c, r) = v.image.at(x, y, c);
  }
  return batch;
}

// --- Trainer ---------------------------------------------------------------------

Trainer::Trainer(const TrainingSet& data, const TrainConfig& config) : Trainer(data, initial_checkpoint(config)) {}

Trainer::Trainer(const TrainingSet& data, Checkpoint start)
    : data_(&data),
      config_(std::move(start.config)),
      grid_(std::move(start.grid)),
      params_(std::move(start.params)),
      step_(start.step) {
  config_.validate();
  if (data.views.empty()) throw ConfigError("training set has no views");
  grid_m_.assign(grid_.params().size(), 0.0f);
  grid_v_.assign(grid_.params().size(), 0.0f);
  mlp_m_.assign(params_.size(), 0.0f);
  mlp_v_.assign(params_.size(), 0.0f);
  // Separate streams for batch selection and per-worker sample jitter.
  std::seed_seq seq{config_.seed, std::uint64_t{0x6d617266}};
  std::array<std::uint64_t, 1> s{};
  seq.generate(s.begin(), s.end());
  rng_.seed(s[0] ^ step_);
  const int workers = config_.worker_count();
  for (int w = 0; w < workers; ++w) {
    Worker worker{VolumeBatch<float>{}, MlpParams<float>(params_.encoding_dim(), config_.field),
                  GridGradient<float>(grid_), std::mt19937_64(s[0] + 1 + static_cast<std::uint64_t>(w))};
    workers_.push_back(std::move(worker));
  }
}

double Trainer::learning_rate() const {
  const double p = std::clamp(progress_, 0.0, 1.0);
  return config_.final_learning_rate +
         0.5 * (config_.learning_rate - config_.final_learning_rate) * (1.0 + std::cos(std::numbers::pi * p));
}

double Trainer::step() { return step(sample_ray_batch(*data_, config_.batch_rays, rng_)); }

double Trainer::step(const RayBatch& batch) {
  const std::size_t R = batch.rays.size();
  if (static_cast<std::size_t>(batch.colors.cols()) != R || batch.colors.rows() != 3) {
    throw ArgumentError("ray batch colors do not match its rays");
  }
  const RenderOptions options = config_.render_options();
  const float scale = R == 0 ? 0.0f : 2.0f / static_cast<float>(3 * R);
  std::vector<double> partial(workers_.size(), 0.0);

  parallel_chunks(R, static_cast<int>(workers_.size()), [&](std::size_t b, std::size_t e, int w) {
    Worker& worker = workers_[static_cast<std::size_t>(w)];
    std::vector<std::optional<Ray>> rays(batch.rays.begin() + static_cast<std::ptrdiff_t>(b),
                                         batch.rays.begin() + static_cast<std::ptrdiff_t>(e));
    worker.batch.evaluate(grid_, params_, rays, options, &worker.rng);
    Eigen::MatrixXf d_color(3, static_cast<Eigen::Index>(e - b));
    double loss = 0.0;
    for (std::size_t r = b; r < e; ++r) {
      const auto& c = worker.batch.color(r - b);
      for (int ch = 0; ch < 3; ++ch) {
        const float diff = c[ch] - batch.colors(ch, static_cast<Eigen::Index>(r));
        loss += static_cast<double>(diff) * diff;
        d_color(ch, static_cast<Eigen::Index>(r - b)) = scale * diff;
      }
    }
    partial[static_cast<std::size_t>(w)] = loss;
    worker.batch.backward(grid_, params_, d_color, worker.grad, worker.grid_grad, 1);
  });

  double loss = 0.0;
  for (double l : partial) loss += l;
  loss = R == 0 ? 0.0 : loss / static_cast<double>(3 * R);
  const double lr = learning_rate();
  if (!std::isfinite(loss)) {
    for (auto& w : workers_) {
      w.grad.set_zero();
      w.grid_grad.reset();
    }
    throw NumericalError("non-finite training loss at step " + std::to_string(step_) +
                         " (learning rate " + format_double(lr) + ")");
  }

  Worker& main = workers_.front();
  for (std::size_t w = 1; w < workers_.size(); ++w) {
    auto dst = main.grad.data();
    auto src = workers_[w].grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    workers_[w].grad.set_zero();
    main.grid_grad.merge(workers_[w].grid_grad);
    workers_[w].grid_grad.reset();
  }
  apply_adam(static_cast<float>(lr));
  main.grad.set_zero();
  main.grid_grad.reset();

  ++step_;
  mse_average_ = mse_average_ < 0 ? loss : 0.95 * mse_average_ + 0.05 * loss;
  return loss;
}

void Trainer::apply_adam(float lr) {
  const double t = static_cast<double>(step_ + 1);
  const float b1 = static_cast<float>(config_.beta1), b2 = static_cast<float>(config_.beta2);
  const float c1 = static_cast<float>(1.0 - std::pow(config_.beta1, t));
  const float c2 = static_cast<float>(1.0 - std::pow(config_.beta2, t));
  const float eps = static_cast<float>(config_.epsilon);
  auto update = [&](float& p, float& m, float& v, float g) {
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g * g;
    p -= lr * (m / c1) / (std::sqrt(v / c2) + eps);
  };

  auto params = params_.data();
  const auto grad = workers_.front().grad.data();
  for (std::size_t i = 0; i < params.size(); ++i) update(params[i], mlp_m_[i], mlp_v_[i], grad[i]);

  // Only table entries that received gradient this step are updated.
  const GridGradient<float>& gg = workers_.front().grid_grad;
  const int F = gg.features_per_level();
  auto table = grid_.params();
  for (const auto& level : gg.touched()) {
    for (std::uint32_t e : level) {
      for (int f = 0; f < F; ++f) {
        const std::size_t i = static_cast<std::size_t>(e) * F + f;
        update(table[i], grid_m_[i], grid_v_[i], gg.averaged(i));
      }
    }
  }
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.config = config_;
  ck.grid = grid_;
  ck.params = params_;
  ck.step = step_;
  ck.running_psnr = mse_average_ > 0 ? 10.0 * std::log10(1.0 / mse_average_) : 0.0;
  return ck;
}

Checkpoint train(const TrainingSet& data, const TrainConfig& config, const TrainCallbacks& callbacks) {
  config.validate();
  Trainer trainer(data, config);
  std::vector<double> marks = config.checkpoint_seconds;
  std::sort(marks.begin(), marks.end());
  if (config.max_seconds) std::erase_if(marks, [&](double m) { return m > *config.max_seconds; });
  std::size_t next_mark = 0;

  using clock = std::chrono::steady_clock;
  double elapsed = 0.0;
  const bool timed = config.max_seconds && !config.deterministic;
  if (config.deterministic && config.max_seconds) {
    spdlog::warn("deterministic training ignores the time budget; stopping after {} steps", *config.max_steps);
  }

  auto progress = [&] {
    double p = 0.0;
    if (config.max_steps) p = *config.max_steps == 0 ? 1.0 : double(trainer.steps()) / double(*config.max_steps);
    if (timed) p = std::max(p, *config.max_seconds == 0 ? 1.0 : elapsed / *config.max_seconds);
    return p;
  };

  while (true) {
    if (config.max_steps && trainer.steps() >= *config.max_steps) break;
    if (timed && elapsed >= *config.max_seconds) break;
    trainer.set_progress(progress());
    const auto t0 = clock::now();
    const double loss = trainer.step();
    elapsed += std::chrono::duration<double>(clock::now() - t0).count();
    if (callbacks.on_step) callbacks.on_step({trainer.steps(), elapsed, loss, trainer.learning_rate()});
    while (next_mark < marks.size() && elapsed >= marks[next_mark]) {
      if (callbacks.on_checkpoint) callbacks.on_checkpoint(trainer.checkpoint(), marks[next_mark]);
      ++next_mark;
    }
  }
  return trainer.checkpoint();
}

std::vector<ImageBuffer> render_views(const Checkpoint& checkpoint, const std::vector<TrainingView>& views,
                                      const Aabb& box, int threads) {
  RenderOptions options = checkpoint.config.render_options();
  options.threads = threads;
  std::vector<ImageBuffer> out;
  for (const auto& v : views) {
    out.push_back(render_view(checkpoint.grid, checkpoint.params, v.intrinsics, v.pose, box, options).image);
  }
  return out;
}

double evaluate_psnr(const Checkpoint& checkpoint, const TrainingSet& heldout, int threads) {
  const auto rendered = render_views(checkpoint, heldout.views, heldout.box, threads);
  std::vector<ImageBuffer> truth;
  for (const auto& v : heldout.views) truth.push_back(v.image);
  return scene_psnr(truth, rendered);
}

// --- random search ---------------------------------------------------------------

void SearchSpace::validate() const {
  if (!(learning_rate[0] > 0 && learning_rate[0] <= learning_rate[1])) {
    throw ConfigError("search learning-rate range must be positive and ordered");
  }
  for (auto t : table_size) {
    if (t == 0 || !std::has_single_bit(t)) throw ConfigError("search table sizes must be powers of two");
  }
  if (table_size[0] > table_size[1]) throw ConfigError("search table-size range is reversed");
  if (!(levels[0] >= 1 && levels[0] <= levels[1])) throw ConfigError("search level range must be >= 1 and ordered");
  if (!(samples[0] >= 1 && samples[0] <= samples[1])) throw ConfigError("search sample range must be >= 1 and ordered");
}

void SearchSpace::write(KeyValueConfig& out, const std::string& section) const {
  const std::string p = section + ".";
  out.set(p + "learning_rate_min", format_double(learning_rate[0]));
  out.set(p + "learning_rate_max", format_double(learning_rate[1]));
  out.set(p + "table_size_min", std::to_string(table_size[0]));
  out.set(p + "table_size_max", std::to_string(table_size[1]));
  out.set(p + "levels_min", std::to_string(levels[0]));
  out.set(p + "levels_max", std::to_string(levels[1]));
  out.set(p + "samples_min", std::to_string(samples[0]));
  out.set(p + "samples_max", std::to_string(samples[1]));
}

SearchSpace SearchSpace::read(const KeyValueConfig& in, const std::string& section) {
  in.require_known(section, {"learning_rate_min", "learning_rate_max", "table_size_min", "table_size_max",
                             "levels_min", "levels_max", "samples_min", "samples_max", "trials", "heldout_fraction"});
  const std::string p = section + ".";
  SearchSpace s;
  s.learning_rate[0] = in.get_double(p + "learning_rate_min", s.learning_rate[0]);
  s.learning_rate[1] = in.get_double(p + "learning_rate_max", s.learning_rate[1]);
  s.table_size[0] = static_cast<std::uint32_t>(in.get_u64(p + "table_size_min", s.table_size[0]));
  s.table_size[1] = static_cast<std::uint32_t>(in.get_u64(p + "table_size_max", s.table_size[1]));
  s.levels[0] = static_cast<int>(in.get_int(p + "levels_min", s.levels[0]));
  s.levels[1] = static_cast<int>(in.get_int(p + "levels_max", s.levels[1]));
  s.samples[0] = static_cast<int>(in.get_int(p + "samples_min", s.samples[0]));
  s.samples[1] = static_cast<int>(in.get_int(p + "samples_max", s.samples[1]));
  return s;
}

TrainConfig sample_config(const TrainConfig& base, const SearchSpace& space, std::mt19937_64& rng) {
  space.validate();
  TrainConfig c = base;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double lo = std::log(space.learning_rate[0]), hi = std::log(space.learning_rate[1]);
  c.learning_rate = std::clamp(std::exp(lo + (hi - lo) * unit(rng)), space.learning_rate[0], space.learning_rate[1]);
  c.final_learning_rate = std::min(c.final_learning_rate, c.learning_rate);
  const int e0 = std::countr_zero(space.table_size[0]), e1 = std::countr_zero(space.table_size[1]);
  c.grid.table_size = 1u << std::uniform_int_distribution<int>(e0, e1)(rng);
  c.grid.levels = std::uniform_int_distribution<int>(space.levels[0], space.levels[1])(rng);
  c.samples = std::uniform_int_distribution<int>(space.samples[0], space.samples[1])(rng);
  return c;
}

SearchResult random_search(const TrainingSet& data, const TrainConfig& base, const SearchSpace& space,
                           const SearchOptions& options, TrialEvaluator evaluator) {
  if (options.trials < 1) throw ConfigError("random search needs at least one trial");
  space.validate();
  const ViewSplit split = split_views(data.views.size(), options.heldout_fraction, options.seed);
  const TrainingSet train_set = data.subset(split.train);
  const TrainingSet heldout = data.subset(split.heldout);

  if (!evaluator) {
    evaluator = [&](const TrainConfig& config) {
      TrialOutcome outcome;
      TrainCallbacks cb;
      cb.on_checkpoint = [&](const Checkpoint& ck, double) {
        outcome.checkpoint_psnr.push_back(evaluate_psnr(ck, heldout, options.render_threads));
      };
      const Checkpoint final_ck = train(train_set, config, cb);
      outcome.psnr = evaluate_psnr(final_ck, heldout, options.render_threads);
      return outcome;
    };
  }

  SearchResult result;
  std::mt19937_64 rng(options.seed);
  for (int t = 0; t < options.trials; ++t) {
    Trial trial;
    trial.id = t;
    trial.config = sample_config(base, space, rng);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      trial.outcome = evaluator(trial.config);
    } catch (const NumericalError& e) {
      trial.error = e.what();
      trial.outcome.psnr = std::numeric_limits<double>::quiet_NaN();
      spdlog::warn("trial {} failed: {}", t, e.what());
    }
    trial.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::vector<double> series = trial.outcome.checkpoint_psnr;
    series.push_back(trial.outcome.psnr);
    for (std::size_t i = 1; i < series.size(); ++i) trial.psnr_decreased |= series[i] < series[i - 1];
    if (trial.psnr_decreased) spdlog::warn("trial {}: held-out PSNR decreased during training", t);
    if (!std::isnan(trial.outcome.psnr) &&
        (result.best_trial < 0 || trial.outcome.psnr > result.trials[result.best_trial].outcome.psnr)) {
      result.best_trial = t;
      result.best = trial.config;
    }
    result.trials.push_back(std::move(trial));
  }
  if (result.best_trial < 0) throw NumericalError("every random-search trial failed");
  return result;
}

std::string trial_table(const SearchResult& result) {
  std::string out = "trial\tlearning_rate\ttable_size\tlevels\tsamples\theldout_psnr\twall_seconds\twarning\n";
  for (const auto& t : result.trials) {
    char wall[32];
    std::snprintf(wall, sizeof(wall), "%.3f", t.wall_seconds);
    std::string warning = t.error.empty() ? (t.psnr_decreased ? "psnr_decreased" : "") : "failed: " + t.error;
    out += std::to_string(t.id) + "\t" + format_double(t.config.learning_rate) + "\t" +
           std::to_string(t.config.grid.table_size) + "\t" + std::to_string(t.config.grid.levels) + "\t" +
           std::to_string(t.config.samples) + "\t" +
           (std::isnan(t.outcome.psnr) ? std::string("nan") : format_psnr(t.outcome.psnr)) + "\t" + wall + "\t" +
           warning + "\n";
  }
  return out;
}

}  // namespace marf
