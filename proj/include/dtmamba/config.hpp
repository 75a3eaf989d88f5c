#pragma once

#include <filesystem>
#include <string>

#include "dtmamba/train.hpp"

// JSON configuration: {"model": {...}, "train": {...}, "optimizer": {...}}.
// Missing fields keep their defaults; unknown fields are rejected.
namespace dtmamba::config {

train::TrainConfig parse(const std::string& text);
train::TrainConfig load(const std::filesystem::path& path);
std::string to_json(const train::TrainConfig& config);

}  // namespace dtmamba::config
