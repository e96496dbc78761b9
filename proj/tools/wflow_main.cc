// wflow: command-line front end for the wavelet flow library.
//
//   wflow synth     -o DIR [--count N] [--extent S]
//   wflow transform IMAGE --level K -o DIR
//   wflow train     --config C --level I|all [--parallel]
//   wflow eval      --config C --data DIR [--truncate K] [--filtered-dequant]
//   wflow sample    --config C -n N -T T [--mcmc|--direct] -o DIR
//   wflow superres  --config C --input IMG --from K --to J -T T -o OUT
//
// Every subcommand accepts --seed; without it WAVELETFLOW_SEED, then the
// config seed, is used. Results go to stdout as JSON, progress to stderr.

#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "wflow/checkpoint.h"
#include "wflow/config.h"
#include "wflow/image_io.h"
#include "wflow/mcmc.h"
#include "wflow/model.h"
#include "wflow/ops.h"
#include "wflow/synthetic.h"
#include "wflow/train.h"
#include "wflow/wavelet.h"

namespace wflow {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::mutex log_mutex;

void Log(const std::string& line) {
  std::lock_guard<std::mutex> lock(log_mutex);
  std::cerr << line << '\n';
}

std::string Fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

// --seed, then WAVELETFLOW_SEED, then the configured value.
uint64_t ResolveSeed(const std::optional<uint64_t>& flag, uint64_t configured) {
  if (flag) return *flag;
  if (const char* env = std::getenv("WAVELETFLOW_SEED")) {
    try {
      size_t used = 0;
      const uint64_t v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw Error(std::string("WAVELETFLOW_SEED is not an unsigned integer: ") + env);
  }
  return configured;
}

void PrintJson(const json& j) { std::cout << j.dump(2) << std::endl; }

// Pixel-space [N, S, S, C] images for the model's full resolution.
Tensor LoadImages(const std::string& dir, const ModelConfig& model) {
  WFLOW_CHECK(!dir.empty(), "no image directory configured");
  const Tensor images = ReadImageDir(dir);
  const int64_t extent = int64_t{1} << model.depth;
  WFLOW_CHECK(images.dim(1) == extent && images.dim(2) == extent && images.dim(3) == model.channels,
              dir + ": images are " + std::to_string(images.dim(1)) + "x" + std::to_string(images.dim(2)) +
                  "x" + std::to_string(images.dim(3)) + ", config expects " + std::to_string(extent) + "x" +
                  std::to_string(extent) + "x" + std::to_string(model.channels));
  return images;
}

WaveletFlowModel LoadConfiguredModel(const RunConfig& config) {
  WaveletFlowModel model = LoadModel(config.paths.checkpoint_dir);
  WFLOW_CHECK(model.depth() == config.model.depth && model.channels() == config.model.channels,
              "checkpoints in " + config.paths.checkpoint_dir + " do not match the config model");
  for (int l = 0; l <= model.depth(); ++l) {
    WFLOW_CHECK(model.level(l).spec() == LevelSpec(config.model, l),
                "level " + std::to_string(l) + " checkpoint does not match the config");
  }
  return model;
}

// Affine map of a plane onto [0, 255]; returns {scale, offset}.
std::pair<double, double> ViewMapping(const Tensor& t) {
  double lo = t.at(0), hi = t.at(0);
  for (double v : t.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double scale = hi > lo ? 255.0 / (hi - lo) : 1.0;
  return {scale, -lo * scale};
}

// ---- synth ----

int RunSynth(int64_t count, int extent, const std::optional<uint64_t>& seed_flag, const std::string& out) {
  const uint64_t seed = ResolveSeed(seed_flag, 0);
  fs::create_directories(out);
  SyntheticOptions opts;
  opts.extent = extent;
  const Tensor images = SyntheticImages(count, seed, opts);
  for (int64_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05lld.pgm", static_cast<long long>(i));
    const Tensor img = ops::Reshape(ops::SliceBatch(images, i, i + 1), {extent, extent, 1});
    WriteImage(TensorToImage(img), (fs::path(out) / name).string());
  }
  PrintJson({{"count", count}, {"extent", extent}, {"seed", seed}, {"directory", out}});
  return 0;
}

// ---- transform ----

int RunTransform(const std::string& path, int level, const std::string& out) {
  const Image8 image = ReadImage(path);
  WFLOW_CHECK(image.height == image.width, path + " is not square");
  const Tensor pixels = ImageToTensor(image);
  const int n = wavelet::LevelOf(pixels);
  WFLOW_CHECK(level >= 0 && level <= n, "--level must lie in [0, " + std::to_string(n) + "]");
  fs::create_directories(out);
  json files = json::array();
  const int c = image.channels;

  const Tensor low = wavelet::LowpassToLevel(pixels, level);
  // Low-pass planes are shown in pixel units.
  const double low_scale = std::ldexp(1.0, level - n);
  const std::string low_name = "low_" + std::to_string(level) + (c == 1 ? ".pgm" : ".ppm");
  WriteImage(TensorToImage(ops::Scale(low, low_scale)), (fs::path(out) / low_name).string());
  files.push_back({{"file", low_name}, {"plane", "I_" + std::to_string(level)}, {"scale", low_scale}, {"offset", 0.0}});

  Tensor current = pixels;
  std::vector<Tensor> details(n);
  for (int i = n - 1; i >= level; --i) {
    wavelet::HaarSplit split = wavelet::Analyze(current);
    details[i] = split.detail;
    current = split.low;
  }
  const char* orientation[3] = {"h", "v", "d"};
  for (int i = level; i < n; ++i) {
    const Tensor& d = details[i];
    const int64_t e = d.dim(0);
    for (int o = 0; o < 3; ++o) {
      std::vector<double> v;
      for (int64_t p = 0; p < e * e; ++p) {
        for (int ch = 0; ch < c; ++ch) v.push_back(d.at(p * 3 * c + 3 * ch + o));
      }
      const Tensor plane({e, e, c}, std::move(v));
      const auto [scale, offset] = ViewMapping(plane);
      const std::string name =
          "detail_" + std::to_string(i) + "_" + orientation[o] + (c == 1 ? ".pgm" : ".ppm");
      WriteImage(TensorToImage(ops::AddScalar(ops::Scale(plane, scale), offset)), (fs::path(out) / name).string());
      Log("transform: " + name + " = " + Fixed(scale, 6) + " * D_" + std::to_string(i) + "." + orientation[o] +
          " + " + Fixed(offset, 6));
      files.push_back({{"file", name},
                       {"plane", "D_" + std::to_string(i) + "." + orientation[o]},
                       {"scale", scale},
                       {"offset", offset}});
    }
  }
  PrintJson({{"input", path}, {"depth", n}, {"level", level}, {"files", files}});
  return 0;
}

// ---- train ----

json TrainOne(const RunConfig& config, int level, const Tensor& train, const Tensor& val, uint64_t seed) {
  LevelFlow flow = WaveletFlowModel::CreateLevel(config.model, level, seed);
  TrainConfig tc = config.train;
  tc.seed = seed;
  const int patch = config.model.levels[level].patch_size;
  Log("level " + std::to_string(level) + ": training " + std::to_string(flow.parameters().TrainableCount()) +
      " parameters" + (patch ? ", patch " + std::to_string(patch) : std::string()));
  const TrainHistory h = TrainLevel(flow, level, train, val, tc, patch,
                                    [](int l, int epoch, double tr, double va) {
                                      Log("level " + std::to_string(l) + " epoch " + std::to_string(epoch) +
                                          " train_nll " + Fixed(tr) + " val_nll " + Fixed(va));
                                    });
  json history = {{"initial_val_nll", h.initial_val_nll},
                  {"train_nll", h.train_nll},
                  {"val_nll", h.val_nll},
                  {"best_epoch", h.best_epoch},
                  {"stopped_early", h.stopped_early},
                  {"seed", seed},
                  {"learning_rate", tc.learning_rate},
                  {"batch_size", tc.batch_size},
                  {"patch_size", patch},
                  {"train_images", train.dim(0)},
                  {"val_images", val.dim(0)}};
  const ModelMeta meta{config.model.depth, config.model.channels, config.model.depth};
  fs::create_directories(config.paths.checkpoint_dir);
  const std::string path = (fs::path(config.paths.checkpoint_dir) / LevelFileName(level)).string();
  SaveCheckpoint({meta, level, flow, history}, path);
  history["level"] = level;
  history["checkpoint"] = path;
  return history;
}

int RunTrain(const std::string& config_path, const std::string& level_arg, bool parallel,
             const std::optional<uint64_t>& seed_flag) {
  const RunConfig config = LoadRunConfig(config_path);
  const uint64_t seed = ResolveSeed(seed_flag, config.train.seed);
  WFLOW_CHECK(!config.paths.checkpoint_dir.empty(), "config has no paths.checkpoint_dir");
  std::vector<int> levels;
  if (level_arg == "all") {
    for (int l = 0; l <= config.model.depth; ++l) levels.push_back(l);
  } else {
    int l = -1;
    try {
      size_t used = 0;
      l = std::stoi(level_arg, &used);
      if (used != level_arg.size()) l = -1;
    } catch (const std::exception&) {
    }
    WFLOW_CHECK(l >= 0 && l <= config.model.depth,
                "--level must be 'all' or an integer in [0, " + std::to_string(config.model.depth) + "]");
    levels.push_back(l);
  }
  const Tensor train = LoadImages(config.paths.train_dir, config.model);
  const Tensor val = LoadImages(config.paths.val_dir, config.model);
  Log("train: " + std::to_string(train.dim(0)) + " training and " + std::to_string(val.dim(0)) +
      " validation images, seed " + std::to_string(seed));

  std::vector<json> results(levels.size());
  if (parallel && levels.size() > 1) {
    std::vector<std::exception_ptr> errors(levels.size());
    std::vector<std::thread> workers;
    for (size_t i = 0; i < levels.size(); ++i) {
      workers.emplace_back([&, i] {
        try {
          results[i] = TrainOne(config, levels[i], train, val, seed);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    }
    for (std::thread& w : workers) w.join();
    for (const std::exception_ptr& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  } else {
    for (size_t i = 0; i < levels.size(); ++i) results[i] = TrainOne(config, levels[i], train, val, seed);
  }
  PrintJson({{"levels", results}});
  return 0;
}

// ---- eval ----

int RunEval(const std::string& config_path, const std::string& data_dir, std::optional<int> truncate,
            bool filtered, const std::optional<uint64_t>& seed_flag) {
  const RunConfig config = LoadRunConfig(config_path);
  const uint64_t seed = ResolveSeed(seed_flag, config.train.seed);
  const WaveletFlowModel full = LoadConfiguredModel(config);
  const int n = full.depth();
  const Tensor pixels = ReadImageDir(data_dir);
  WFLOW_CHECK(pixels.dim(3) == full.channels(), data_dir + ": channel count does not match the model");
  const int m = wavelet::LevelOf(pixels);
  WFLOW_CHECK(m <= n, data_dir + ": images are larger than the model resolution");
  const int k = truncate.value_or(m);
  WFLOW_CHECK(k >= 0 && k <= m, "--truncate must lie in [0, " + std::to_string(m) + "] for this data");

  // Coefficient-space images at level m, dequantized.
  Rng rng(seed);
  Tensor coef;
  if (filtered) {
    coef = DequantizeFiltered(pixels, n, rng);
  } else {
    coef = ops::Scale(Dequantize(pixels, rng), std::ldexp(1.0, n - m));
  }
  coef = wavelet::LowpassToLevel(coef, k);
  const WaveletFlowModel model = full.Truncate(k);
  const LogProbResult lp = model.LogProb(coef);

  const double d = static_cast<double>(model.dims());
  json per_level_bits = json::array(), per_level_bpd = json::array();
  for (const Tensor& t : lp.per_level) {
    const double bits = MeanBits(t);
    per_level_bits.push_back(bits);
    per_level_bpd.push_back(bits / d);
  }
  const double total_bits = MeanBits(lp.total);
  const double total_bpd = BitsPerDim(model, lp.total);
  Log("eval: " + std::to_string(pixels.dim(0)) + " images at level " + std::to_string(k) + ", " +
      Fixed(total_bpd) + " bits/dim");
  PrintJson({{"images", pixels.dim(0)},
             {"level", k},
             {"dims", model.dims()},
             {"dequantization", filtered ? "filtered" : "uniform"},
             {"seed", seed},
             {"per_level_bits", per_level_bits},
             {"per_level_bpd", per_level_bpd},
             {"total_bits", total_bits},
             {"total_bpd", total_bpd}});
  return 0;
}

// ---- sample / superres ----

json DiagnosticsJson(const std::vector<LevelDiagnostics>& diag, int levels_per_image) {
  json records = json::array();
  for (size_t i = 0; i < diag.size(); ++i) {
    const NutsDiagnostics& d = diag[i].nuts;
    records.push_back({{"image", static_cast<int>(i) / levels_per_image},
                       {"level", diag[i].level},
                       {"step_size", d.step_size},
                       {"divergences", d.divergences},
                       {"mean_tree_depth", d.mean_tree_depth},
                       {"transitions", d.transitions},
                       {"mean_accept", d.mean_accept}});
  }
  return records;
}

void WriteJsonFile(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << j.dump(2) << '\n';
}

int RunSample(const std::string& config_path, int64_t count, std::optional<double> temperature, bool direct,
              const std::string& out, const std::optional<uint64_t>& seed_flag) {
  const RunConfig config = LoadRunConfig(config_path);
  const uint64_t seed = ResolveSeed(seed_flag, config.sample.nuts.seed);
  const double t = temperature.value_or(config.sample.temperature);
  const WaveletFlowModel model = LoadConfiguredModel(config);
  WFLOW_CHECK(count >= 1, "-n must be positive");
  Rng rng(seed);
  Tensor images;
  std::vector<LevelDiagnostics> diag;
  bool approximate = false;
  if (direct) {
    WFLOW_CHECK(t >= 0.0 && t <= 1.0, "temperature must lie in [0, 1]");
    const SampleResult r = SampleDirect(model, count, t, rng);
    images = r.images;
    approximate = r.approximate;
    if (approximate) Log("sample: direct sampling at T != 1 with affine couplings is approximate");
  } else {
    NutsConfig nuts = config.sample.nuts;
    nuts.seed = seed;
    images = AnnealedSampleModel(model, count, AnnealSpec::FromTemperature(t), nuts, rng, &diag);
  }
  fs::create_directories(out);
  const int64_t s = images.dim(1);
  json files = json::array();
  for (int64_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05lld.%s", static_cast<long long>(i),
                  model.channels() == 1 ? "pgm" : "ppm");
    const Tensor img = ops::Reshape(ops::SliceBatch(images, i, i + 1), {s, s, model.channels()});
    WriteImage(TensorToImage(img), (fs::path(out) / name).string());
    files.push_back(name);
  }
  const json report = {{"count", count},
                       {"temperature", t},
                       {"sampler", direct ? "direct" : "mcmc"},
                       {"approximate", approximate},
                       {"seed", seed},
                       {"files", files},
                       {"diagnostics", DiagnosticsJson(diag, model.num_levels())}};
  WriteJsonFile(report, (fs::path(out) / "diagnostics.json").string());
  PrintJson(report);
  return 0;
}

int RunSuperres(const std::string& config_path, const std::string& input, int from, int to,
                std::optional<double> temperature, bool direct, const std::string& out,
                const std::optional<uint64_t>& seed_flag) {
  const RunConfig config = LoadRunConfig(config_path);
  const uint64_t seed = ResolveSeed(seed_flag, config.sample.nuts.seed);
  const double t = temperature.value_or(config.sample.temperature);
  const WaveletFlowModel model = LoadConfiguredModel(config);
  const int n = model.depth();
  WFLOW_CHECK(from >= 0 && from <= to && to <= n,
              "need 0 <= --from <= --to <= " + std::to_string(n));
  const Image8 image = ReadImage(input);
  WFLOW_CHECK(image.height == (1 << from) && image.width == (1 << from),
              input + " is " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                  ", --from " + std::to_string(from) + " expects " + std::to_string(1 << from) + " pixels");
  WFLOW_CHECK(image.channels == model.channels(), input + ": channel count does not match the model");
  const Tensor coef = ops::Scale(ImageToTensor(image), std::ldexp(1.0, n - from));

  Rng rng(seed);
  std::vector<LevelDiagnostics> diag;
  DetailSampler sampler;
  if (direct) {
    WFLOW_CHECK(t >= 0.0 && t <= 1.0, "temperature must lie in [0, 1]");
    sampler = DirectSampler(model, t, rng);
  } else {
    NutsConfig nuts = config.sample.nuts;
    nuts.seed = seed;
    sampler = AnnealedSampler(model, AnnealSpec::FromTemperature(t), nuts, rng, &diag);
  }
  const Tensor result = SuperResolve(model, coef, to, sampler);
  const int64_t s = int64_t{1} << to;
  const Tensor pixels = ops::Reshape(ops::Scale(result, std::ldexp(1.0, to - n)), {s, s, model.channels()});
  WriteImage(TensorToImage(pixels), out);
  PrintJson({{"input", input},
             {"output", out},
             {"from", from},
             {"to", to},
             {"temperature", t},
             {"sampler", direct ? "direct" : "mcmc"},
             {"seed", seed},
             {"diagnostics", DiagnosticsJson(diag, 1)}});
  return 0;
}

int Main(int argc, char** argv) {
  CLI::App app{"Wavelet flow density models: train, evaluate, sample and super-resolve"};
  app.require_subcommand(1);
  app.fallthrough();
  std::optional<uint64_t> seed;
  app.add_option("--seed", seed, "Random seed (default: $WAVELETFLOW_SEED, then the config)");

  int64_t synth_count = 2200;
  int synth_extent = 16;
  std::string synth_out;
  CLI::App* synth = app.add_subcommand("synth", "Write the synthetic texture corpus as PGM files");
  synth->add_option("--count", synth_count, "Number of images");
  synth->add_option("--extent", synth_extent, "Image side length (power of two)");
  synth->add_option("-o,--output", synth_out, "Output directory")->required();

  std::string transform_in, transform_out;
  int transform_level = 0;
  CLI::App* transform = app.add_subcommand("transform", "Write the Haar pyramid planes of an image");
  transform->add_option("image", transform_in, "Input PGM/PPM")->required();
  transform->add_option("--level", transform_level, "Coarsest level to decompose to")->required();
  transform->add_option("-o,--output", transform_out, "Output directory")->required();

  std::string config_path;
  std::string train_level;
  bool parallel = false;
  CLI::App* train = app.add_subcommand("train", "Train one level, or all levels, of a model");
  train->add_option("--config", config_path, "Run config JSON")->required();
  train->add_option("--level", train_level, "Level index or 'all'")->required();
  train->add_flag("--parallel", parallel, "Train levels concurrently with --level all");

  std::string data_dir;
  std::optional<int> truncate;
  bool filtered = false;
  CLI::App* eval = app.add_subcommand("eval", "Report per-level and total bits per dimension");
  eval->add_option("--config", config_path, "Run config JSON")->required();
  eval->add_option("--data", data_dir, "Directory of PGM/PPM images")->required();
  eval->add_option("--truncate", truncate, "Evaluate the embedded model of this level");
  eval->add_flag("--filtered-dequant", filtered, "Low-pass filtered dequantization noise");

  int64_t sample_count = 1;
  std::optional<double> temperature;
  bool use_mcmc = false, use_direct = false;
  std::string sample_out;
  CLI::App* sample = app.add_subcommand("sample", "Draw images from a trained model");
  sample->add_option("--config", config_path, "Run config JSON")->required();
  sample->add_option("-n", sample_count, "Number of images");
  sample->add_option("-T,--temperature", temperature, "Sampling temperature");
  auto* sample_mcmc = sample->add_flag("--mcmc", use_mcmc, "Annealed NUTS sampling (default)");
  sample->add_flag("--direct", use_direct, "Direct sampling through the inverse flows")->excludes(sample_mcmc);
  sample->add_option("-o,--output", sample_out, "Output directory")->required();

  std::string sr_input, sr_out;
  int sr_from = 0, sr_to = 0;
  CLI::App* superres = app.add_subcommand("superres", "Sample higher resolutions of a low-resolution image");
  superres->add_option("--config", config_path, "Run config JSON")->required();
  superres->add_option("--input", sr_input, "Input PGM/PPM at resolution 2^from")->required();
  superres->add_option("--from", sr_from, "Level of the input")->required();
  superres->add_option("--to", sr_to, "Target level")->required();
  superres->add_option("-T,--temperature", temperature, "Sampling temperature");
  auto* sr_mcmc = superres->add_flag("--mcmc", use_mcmc, "Annealed NUTS sampling (default)");
  superres->add_flag("--direct", use_direct, "Direct sampling through the inverse flows")->excludes(sr_mcmc);
  superres->add_option("-o,--output", sr_out, "Output image")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*synth) return RunSynth(synth_count, synth_extent, seed, synth_out);
    if (*transform) return RunTransform(transform_in, transform_level, transform_out);
    if (*train) return RunTrain(config_path, train_level, parallel, seed);
    if (*eval) return RunEval(config_path, data_dir, truncate, filtered, seed);
    if (*sample) return RunSample(config_path, sample_count, temperature, use_direct, sample_out, seed);
    if (*superres) {
      return RunSuperres(config_path, sr_input, sr_from, sr_to, temperature, use_direct, sr_out, seed);
    }
  } catch (const std::exception& e) {
    std::cerr << "wflow: error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace
}  // namespace wflow

int main(int argc, char** argv) { return wflow::Main(argc, argv); }
