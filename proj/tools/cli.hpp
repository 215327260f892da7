// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uniwrv/model.hpp"
#include "uniwrv/weathergen.hpp"

namespace uniwrv::cli {

enum ExitCode : int { kOk = 0, kVerificationFailed = 1, kUsageError = 2, kIoError = 3 };

/// Sections: model, data, train, flags. Every section is optional; unknown
/// keys at any level are rejected. `flags` overrides model.hard_routing and
/// train.grad_mode_64bit, and must not contradict them when both are given.
struct RunConfig {
  model::ModelConfig model;
  weathergen::DatasetConfig data;
  model::TrainConfig train;
  std::optional<std::filesystem::path> data_dir;  // data.dir

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

/// Runs one subcommand. Output goes to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace uniwrv::cli
