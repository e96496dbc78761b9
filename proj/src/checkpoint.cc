#include "wflow/checkpoint.h"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace wflow {
namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'W', 'F', 'L', 'O', 'W', 'C', 'K', '\0'};

void PutU64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t GetU64(const std::string& in, size_t offset) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

json SpecToJson(const FlowSpec& s) {
  return {{"channels", s.channels},
          {"cond_channels", s.cond_channels},
          {"steps", s.steps},
          {"hidden_channels", s.hidden_channels},
          {"residual_blocks", s.residual_blocks},
          {"kernel_size", s.kernel_size},
          {"coupling", ToString(s.coupling)},
          {"cond_scale", s.cond_scale},
          {"extent", s.extent}};
}

FlowSpec SpecFromJson(const json& j) {
  FlowSpec s;
  s.channels = j.at("channels").get<int>();
  s.cond_channels = j.at("cond_channels").get<int>();
  s.steps = j.at("steps").get<int>();
  s.hidden_channels = j.at("hidden_channels").get<int>();
  s.residual_blocks = j.at("residual_blocks").get<int>();
  s.kernel_size = j.at("kernel_size").get<int>();
  s.coupling = ParseCouplingKind(j.at("coupling").get<std::string>());
  s.cond_scale = j.at("cond_scale").get<double>();
  s.extent = j.at("extent").get<int>();
  return s;
}

std::string ReadFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string LevelFileName(int level) { return "level_" + std::to_string(level) + ".wfck"; }

ModelMeta MetaOf(const WaveletFlowModel& model) {
  return {model.depth(), model.channels(), model.data_depth()};
}

std::string EncodeCheckpoint(const LevelCheckpoint& ckpt) {
  const ParameterSet& params = ckpt.flow.parameters();
  json manifest = json::object();
  std::string payload;
  for (int i = 0; i < params.size(); ++i) {
    manifest[params.name(i)] = {{"shape", params[i].shape()}, {"offset", payload.size()}};
    for (double v : params[i].data()) PutU64(payload, std::bit_cast<uint64_t>(v));
  }
  json header = {{"format_version", kCheckpointVersion},
                 {"model",
                  {{"depth", ckpt.model.depth},
                   {"channels", ckpt.model.channels},
                   {"data_depth", ckpt.model.data_depth}}},
                 {"level", ckpt.level},
                 {"flow", SpecToJson(ckpt.flow.spec())},
                 {"actnorm_initialized", ckpt.flow.actnorm_initialized()},
                 {"training", ckpt.training},
                 {"parameters", manifest},
                 {"payload_bytes", payload.size()}};
  const std::string text = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  PutU64(out, text.size());
  out += text;
  out += payload;
  return out;
}

LevelCheckpoint DecodeCheckpoint(const std::string& bytes) {
  WFLOW_CHECK(bytes.size() >= 16 && std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) == 0,
              "not a wavelet-flow checkpoint (bad magic)");
  const uint64_t header_len = GetU64(bytes, 8);
  WFLOW_CHECK(header_len <= bytes.size() - 16, "checkpoint header length exceeds file size");
  json header;
  try {
    header = json::parse(bytes.substr(16, header_len));
  } catch (const json::exception& e) {
    throw Error(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  try {
    const int version = header.at("format_version").get<int>();
    WFLOW_CHECK(version == kCheckpointVersion, "checkpoint format version " + std::to_string(version) +
                                                   " unsupported (expected " +
                                                   std::to_string(kCheckpointVersion) + ")");
    LevelCheckpoint ckpt;
    const json& m = header.at("model");
    ckpt.model = {m.at("depth").get<int>(), m.at("channels").get<int>(), m.at("data_depth").get<int>()};
    ckpt.level = header.at("level").get<int>();
    ckpt.training = header.at("training");
    Rng unused(0);
    ckpt.flow = LevelFlow(SpecFromJson(header.at("flow")), unused);
    ckpt.flow.set_actnorm_initialized(header.at("actnorm_initialized").get<bool>());

    const size_t payload_start = 16 + header_len;
    const size_t payload_size = bytes.size() - payload_start;
    WFLOW_CHECK(header.at("payload_bytes").get<size_t>() == payload_size,
                "checkpoint payload is " + std::to_string(payload_size) + " bytes, header declares " +
                    std::to_string(header.at("payload_bytes").get<size_t>()));
    const json& manifest = header.at("parameters");
    ParameterSet& params = ckpt.flow.parameters();
    WFLOW_CHECK(manifest.size() == static_cast<size_t>(params.size()),
                "checkpoint manifest lists " + std::to_string(manifest.size()) +
                    " parameters, flow expects " + std::to_string(params.size()));
    size_t total = 0;
    for (int i = 0; i < params.size(); ++i) {
      const auto it = manifest.find(params.name(i));
      WFLOW_CHECK(it != manifest.end(), "checkpoint manifest lacks parameter " + params.name(i));
      const Shape shape = it->at("shape").get<Shape>();
      const size_t offset = it->at("offset").get<size_t>();
      WFLOW_CHECK(shape == params[i].shape(), "parameter " + params.name(i) + " has shape " +
                                                  ShapeToString(shape) + ", expected " +
                                                  ShapeToString(params[i].shape()));
      const size_t n = static_cast<size_t>(NumElements(shape));
      WFLOW_CHECK(offset % 8 == 0 && offset + 8 * n <= payload_size,
                  "parameter " + params.name(i) + " lies outside the payload");
      std::vector<double> v(n);
      for (size_t k = 0; k < n; ++k) {
        v[k] = std::bit_cast<double>(GetU64(bytes, payload_start + offset + 8 * k));
      }
      params.Set(i, Tensor(shape, std::move(v)));
      total += 8 * n;
    }
    WFLOW_CHECK(total == payload_size, "checkpoint payload size does not match its manifest");
    return ckpt;
  } catch (const json::exception& e) {
    throw Error(std::string("malformed checkpoint header: ") + e.what());
  }
}

void SaveCheckpoint(const LevelCheckpoint& ckpt, const std::string& path) {
  const std::string bytes = EncodeCheckpoint(ckpt);
  // Write then rename so a reader never sees a partial file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

LevelCheckpoint LoadCheckpoint(const std::string& path) {
  try {
    return DecodeCheckpoint(ReadFile(path));
  } catch (const Error& e) {
    throw Error(path + ": " + e.what());
  }
}

void SaveModel(const WaveletFlowModel& model, const std::string& dir, const nlohmann::json& training) {
  std::filesystem::create_directories(dir);
  for (int l = 0; l <= model.depth(); ++l) {
    LevelCheckpoint ckpt{MetaOf(model), l, model.level(l), training};
    SaveCheckpoint(ckpt, (std::filesystem::path(dir) / LevelFileName(l)).string());
  }
}

WaveletFlowModel LoadModel(const std::string& dir) {
  namespace fs = std::filesystem;
  WFLOW_CHECK(fs::is_directory(dir), "checkpoint directory " + dir + " does not exist");
  const fs::path first = fs::path(dir) / LevelFileName(0);
  WFLOW_CHECK(fs::exists(first), "missing level 0 checkpoint in " + dir);
  LevelCheckpoint base = LoadCheckpoint(first.string());
  const ModelMeta meta = base.model;
  std::vector<LevelFlow> flows = {std::move(base.flow)};
  WFLOW_CHECK(base.level == 0, first.string() + " holds level " + std::to_string(base.level));
  for (int l = 1; l <= meta.depth; ++l) {
    const fs::path p = fs::path(dir) / LevelFileName(l);
    WFLOW_CHECK(fs::exists(p), "missing level " + std::to_string(l) + " checkpoint in " + dir);
    LevelCheckpoint c = LoadCheckpoint(p.string());
    WFLOW_CHECK(c.level == l, p.string() + " holds level " + std::to_string(c.level));
    WFLOW_CHECK(c.model == meta, p.string() + ": model metadata conflicts with level 0");
    flows.push_back(std::move(c.flow));
  }
  return WaveletFlowModel(meta.depth, meta.channels, meta.data_depth, std::move(flows));
}

}  // namespace wflow
