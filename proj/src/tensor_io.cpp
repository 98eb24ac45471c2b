#include "wilke/tensor_io.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace wilke {

namespace {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

std::uint64_t read_u64_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

void write_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

std::vector<float> TensorContainer::read_f32(const std::string& name) const {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw FormatError("tensor '" + name + "' not in container");
  const auto& info = it->second;
  if (info.dtype != "F32") throw FormatError(name + ": dtype " + info.dtype + " (expected F32)");
  std::vector<float> out((info.end - info.begin) / sizeof(float));
  std::memcpy(out.data(), payload.data() + info.begin, out.size() * sizeof(float));
  return out;
}

TensorContainer parse_container(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw FormatError("malformed header length: file shorter than 8 bytes");
  const std::uint64_t n = read_u64_le(bytes.data());
  if (n > bytes.size() - 8) throw FormatError("truncated payload: header length exceeds file size");
  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
  } catch (const json::exception& e) {
    throw FormatError(std::string("non-decodable metadata: ") + e.what());
  }
  if (!header.is_object()) throw FormatError("non-decodable metadata: header is not an object");

  TensorContainer c;
  c.payload.assign(bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n), bytes.end());
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) c.metadata[k] = v.is_string() ? v.get<std::string>() : v.dump();
      continue;
    }
    try {
      TensorInfo info;
      info.dtype = entry.at("dtype").get<std::string>();
      info.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (offsets.size() != 2 || offsets[0] > offsets[1]) throw FormatError(name + ": bad data_offsets");
      info.begin = offsets[0];
      info.end = offsets[1];
      c.tensors.emplace(name, std::move(info));
    } catch (const json::exception& e) {
      throw FormatError("non-decodable metadata for '" + name + "': " + e.what());
    }
  }
  for (const auto& [name, info] : c.tensors) {
    if (info.end > c.payload.size()) throw FormatError("truncated payload: tensor '" + name + "' runs past end");
    std::uint64_t count = 1;
    for (auto s : info.shape) count *= static_cast<std::uint64_t>(s);
    const std::uint64_t width = info.dtype == "F32" ? 4 : info.dtype == "F64" ? 8 : info.dtype == "F16" ? 2 : 0;
    if (width != 0 && count * width != info.end - info.begin)
      throw FormatError(name + ": byte range does not match shape");
  }
  return c;
}

TensorContainer read_container(const std::filesystem::path& path) { return parse_container(read_file(path)); }

std::map<std::string, std::string> config_to_metadata(const ModelConfig& config) {
  std::ostringstream eps;
  eps << std::setprecision(17) << config.ln_eps;
  return {{"n_layers", std::to_string(config.n_layers)},
          {"d_model", std::to_string(config.d_model)},
          {"d_mlp", std::to_string(config.d_mlp)},
          {"n_heads", std::to_string(config.n_heads)},
          {"vocab_size", std::to_string(config.vocab_size)},
          {"max_seq", std::to_string(config.max_seq)},
          {"ln_eps", eps.str()},
          {"activation", "gelu"},
          {"tokenizer_mode", config.tokenizer_mode == TokenizerMode::byte ? "byte" : "bpe"}};
}

ModelConfig config_from_metadata(const std::map<std::string, std::string>& md) {
  ModelConfig c;
  auto get_int = [&](const char* key, int& out) {
    const auto it = md.find(key);
    if (it == md.end()) throw FormatError(std::string("metadata: missing '") + key + "'");
    try {
      out = std::stoi(it->second);
    } catch (const std::exception&) {
      throw FormatError(std::string("metadata: '") + key + "' is not an integer");
    }
  };
  get_int("n_layers", c.n_layers);
  get_int("d_model", c.d_model);
  get_int("d_mlp", c.d_mlp);
  get_int("n_heads", c.n_heads);
  get_int("vocab_size", c.vocab_size);
  get_int("max_seq", c.max_seq);
  if (auto it = md.find("ln_eps"); it != md.end()) c.ln_eps = std::stod(it->second);
  if (auto it = md.find("activation"); it != md.end() && it->second != "gelu")
    throw FormatError("metadata: unsupported activation '" + it->second + "'");
  if (auto it = md.find("tokenizer_mode"); it != md.end())
    c.tokenizer_mode = it->second == "bpe" ? TokenizerMode::bpe : TokenizerMode::byte;
  c.validate();
  return c;
}

LoadedModel load_weights(const std::filesystem::path& path, std::optional<ModelConfig> config) {
  const TensorContainer c = read_container(path);
  ModelConfig cfg;
  if (!c.metadata.empty() && c.metadata.count("n_layers")) {
    cfg = config_from_metadata(c.metadata);
    if (config && !(*config == cfg)) throw ValidationError("config: container metadata disagrees with given config");
  } else if (config) {
    cfg = *config;
  } else {
    throw FormatError("metadata: container carries no model config and none was given");
  }
  LoadedModel out{ModelF::zeros(cfg), {}, {}};
  std::map<std::string, bool> seen;
  out.model.for_each_tensor(ModelF::TensorVisitor(
      [&](const std::string& name, const std::vector<std::int64_t>& shape, float* data) {
        seen[name] = true;
        const auto it = c.tensors.find(name);
        if (it == c.tensors.end()) {
          out.missing.push_back(name);
          return;
        }
        if (it->second.dtype != "F32") throw ValidationError(name + ": dtype mismatch (expected F32, got " + it->second.dtype + ")");
        if (it->second.shape != shape) throw ValidationError(name + ": shape mismatch vs config");
        std::memcpy(data, c.payload.data() + it->second.begin, it->second.end - it->second.begin);
      }));
  for (const auto& [name, info] : c.tensors)
    if (!seen.count(name)) out.extra.push_back(name);
  return out;
}

std::vector<std::uint8_t> serialize_weights(const ModelF& model) {
  json header = json::object();
  std::vector<std::uint8_t> payload;
  model.for_each_tensor(ModelF::ConstTensorVisitor(
      [&](const std::string& name, const std::vector<std::int64_t>& shape, const float* data) {
        std::uint64_t count = 1;
        for (auto s : shape) count *= static_cast<std::uint64_t>(s);
        const std::uint64_t begin = payload.size();
        payload.resize(begin + count * sizeof(float));
        std::memcpy(payload.data() + begin, data, count * sizeof(float));
        header[name] = {{"dtype", "F32"}, {"shape", shape}, {"data_offsets", {begin, payload.size()}}};
      }));
  header["__metadata__"] = config_to_metadata(model.config);
  std::string text = header.dump();
  // Pad with spaces so the payload starts 8-byte aligned.
  while ((text.size() + 8) % 8 != 0) text.push_back(' ');
  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + payload.size());
  write_u64_le(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

void save_weights(const ModelF& model, const std::filesystem::path& path) {
  const auto bytes = serialize_weights(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string bytes_checksum(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string file_checksum(const std::filesystem::path& path) { return bytes_checksum(read_file(path)); }

}  // namespace wilke
