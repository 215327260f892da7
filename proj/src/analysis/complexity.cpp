// SPDX-License-Identifier: Apache-2.0
#include <fstream>

#include "uniwrv/analysis.hpp"
#include "uniwrv/errors.hpp"

namespace uniwrv::analysis {

std::string scheme_name(Scheme s) {
  switch (s) {
    case Scheme::kStatic: return "static";
    case Scheme::kVanillaRouting: return "vanilla_routing";
    case Scheme::kParameterRouting: return "parameter_routing";
    case Scheme::kModifyWeight: return "modify_weight";
  }
  throw UsageError("unknown scheme");
}

std::vector<Scheme> all_schemes() {
  return {Scheme::kStatic, Scheme::kVanillaRouting, Scheme::kParameterRouting, Scheme::kModifyWeight};
}

std::vector<ConvShape> dra_convolutions(const model::ModelConfig& cfg, std::size_t height, std::size_t width) {
  if (height % 4 || width % 4 || height == 0 || width == 0) {
    throw ConfigError("input size must be a positive multiple of 4");
  }
  const std::size_t C = cfg.fusion_channels(), h = height / 4, w = width / 4;
  const std::size_t slots = cfg.dma.slots();
  std::vector<ConvShape> out;
  for (std::size_t n = 0; n < cfg.dma.layers; ++n) {
    const std::string p = "dra" + std::to_string(n) + ".";
    out.push_back({p + "attention", 3, 3 * C, slots, h, w});
    out.push_back({p + "offsets", 3, 3 * C, 2 * slots, h, w});
    out.push_back({p + "values", 3, 3 * C, cfg.dma.frames * C, h, w});
    out.push_back({p + "output", 3, C, C, h, w});
  }
  return out;
}

ComplexityRow count_complexity(std::span<const ConvShape> convs, std::size_t paths, Scheme scheme) {
  if (paths == 0) throw ConfigError("paths must be positive");
  ComplexityRow row{scheme_name(scheme), 0, 0};
  const std::uint64_t P = paths;
  for (const auto& c : convs) {
    const std::uint64_t kernel = static_cast<std::uint64_t>(c.k) * c.k * c.cin * c.cout;
    const std::uint64_t conv_macs = kernel * c.height * c.width;
    switch (scheme) {
      case Scheme::kStatic:
        row.params += kernel;
        row.macs += conv_macs;
        break;
      case Scheme::kVanillaRouting:
        row.params += P * kernel;
        row.macs += P * conv_macs;
        break;
      case Scheme::kParameterRouting:
        row.params += P * kernel;
        row.macs += conv_macs + P * kernel;
        break;
      case Scheme::kModifyWeight:
        row.params += kernel + P * (2 * c.k + c.cin + c.cout);
        row.macs += conv_macs + (P + 1) * kernel;
        break;
    }
  }
  return row;
}

ComplexityRow count_complexity(const model::ModelConfig& cfg, std::size_t height, std::size_t width, Scheme scheme) {
  const auto convs = dra_convolutions(cfg, height, width);
  return count_complexity(convs, cfg.dma.paths, scheme);
}

void write_complexity_csv(std::span<const ComplexityRow> rows, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << "scheme,params,macs\n";
  for (const auto& r : rows) f << r.scheme << ',' << r.params << ',' << r.macs << '\n';
  if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace uniwrv::analysis
