// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <cstring>
#include <fstream>

#include "uniwrv/errors.hpp"
#include "uniwrv/model.hpp"

namespace uniwrv::model {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'U', 'W', 'R', 'V'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), sizeof b);
}

template <typename T>
bool get_le(std::istream& in, T& v) {
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof b)) return false;
  v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
  return true;
}

struct Parsed {
  Checkpoint meta;
  json manifest;
  std::ifstream stream;  // positioned at the first payload byte
};

Parsed parse_header(const fs::path& path) {
  Parsed p;
  p.stream.open(path, std::ios::binary);
  if (!p.stream) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  if (!p.stream.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError(path.string() + " is not a checkpoint (bad magic)");
  }
  if (!get_le(p.stream, version) || version != kVersion) {
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  if (!get_le(p.stream, length) || length > (1ull << 30)) throw IoError(path.string() + ": bad manifest length");
  std::string text(length, '\0');
  if (!p.stream.read(text.data(), static_cast<std::streamsize>(length))) {
    throw IoError(path.string() + ": truncated manifest");
  }
  try {
    p.manifest = json::parse(text);
    p.meta.iteration = p.manifest.at("iteration").get<std::size_t>();
    p.meta.config = ModelConfig::from_json(p.manifest.at("config"));
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": corrupt manifest: " + e.what());
  }
  return p;
}

void read_payload(Parsed& p, Model& model, const fs::path& path) {
  ParameterList params = model.parameters();
  const json& list = p.manifest.at("tensors");
  if (!list.is_array() || list.size() != params.size()) {
    throw IoError(path.string() + ": manifest lists " + std::to_string(list.size()) + " tensors, model has " +
                  std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    const json& entry = list[i];
    const std::string mname = entry.value("name", std::string{});
    if (mname != name) throw IoError(path.string() + ": tensor " + std::to_string(i) + " is '" + mname + "', expected '" + name + "'");
    const auto shape = entry.at("shape").get<tensorkit::Shape>();
    if (shape != t.shape()) {
      throw IoError(path.string() + ": tensor '" + name + "' has shape " + tensorkit::shape_str(shape) + ", model expects " +
                    tensorkit::shape_str(t.shape()));
    }
    auto w = t.mutable_data();
    for (double& v : w) {
      std::uint32_t bits = 0;
      if (!get_le(p.stream, bits)) throw IoError(path.string() + ": payload truncated inside tensor '" + name + "'");
      v = static_cast<double>(std::bit_cast<float>(bits));
    }
  }
  if (p.stream.peek() != std::char_traits<char>::eof()) {
    throw IoError(path.string() + ": payload has trailing bytes after tensor '" + params.back().first + "'");
  }
  const auto names = model.bank_names();
  auto banks = model.banks();
  const json& usage = p.manifest.at("usage");
  for (std::size_t b = 0; b < banks.size(); ++b) {
    if (!usage.contains(names[b])) throw IoError(path.string() + ": missing usage counters for '" + names[b] + "'");
    auto counts = usage.at(names[b]).get<std::vector<std::uint64_t>>();
    if (counts.size() != banks[b]->entries()) throw IoError(path.string() + ": usage length mismatch for '" + names[b] + "'");
    banks[b]->usage = std::move(counts);
  }
}

}  // namespace

void save_checkpoint(const Model& model, std::size_t iteration, const fs::path& path) {
  json tensors = json::array();
  const ParameterList params = model.parameters();
  for (const auto& [name, t] : params) tensors.push_back({{"name", name}, {"shape", t.shape()}});
  json usage = json::object();
  const auto names = model.bank_names();
  const auto banks = model.banks();
  for (std::size_t b = 0; b < banks.size(); ++b) usage[names[b]] = banks[b]->usage;
  const json manifest{{"config", model.config().to_json()},
                      {"iteration", iteration},
                      {"dtype", "float32-le"},
                      {"tensors", tensors},
                      {"usage", usage}};
  const std::string text = manifest.dump();

  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(kMagic, 4);
    put_le<std::uint32_t>(out, kVersion);
    put_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [_, t] : params)
      for (double v : t.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

std::pair<Model, Checkpoint> load_checkpoint(const fs::path& path) {
  Parsed p = parse_header(path);
  Model model(p.meta.config);
  read_payload(p, model, path);
  return {std::move(model), p.meta};
}

Checkpoint load_checkpoint_into(Model& model, const fs::path& path) {
  Parsed p = parse_header(path);
  const auto diff = model.config().diff(p.meta.config);
  if (!diff.empty()) {
    std::string msg = "checkpoint " + path.string() + " was saved with a different model config (model vs file):";
    for (const auto& line : diff) msg += "\n  " + line;
    throw ConfigError(msg);
  }
  read_payload(p, model, path);
  return p.meta;
}

}  // namespace uniwrv::model
