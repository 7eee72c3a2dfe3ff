// Binary checkpoint format: magic "DRCK", little-endian, config block followed
// by named parameter records. Round-trips are bit-exact; extra named records
// (optimizer state) ride along and are ignored by plain loads.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "diffrate/vit.hpp"

namespace diffrate {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

void save_checkpoint(const std::string& path, const BackboneParams& params,
                     const std::map<std::string, Tensor>& extras = {});

BackboneParams load_checkpoint(const std::string& path,
                               std::map<std::string, Tensor>* extras = nullptr);

}  // namespace diffrate
