// Synthetic planted-patch dataset and IDX image ingestion. Labels depend only
// on the foreground patches, so the background tokens carry no class signal.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffrate/tensor.hpp"

namespace diffrate {

struct DataRecipe {
    int image_size = 16;
    int patch_size = 4;
    int channels = 1;
    int class_count = 4;
    int foreground_patches = 4;
    double noise = 0.08;
    double amplitude = 0.35;
    int train_size = 2048;
    int val_size = 512;
    uint64_t seed = 1;

    int grid() const { return image_size / patch_size; }
    int patch_count() const { return grid() * grid(); }
    int patch_dim() const { return patch_size * patch_size * channels; }
    void validate() const;
};

struct ToyDataset {
    int image_size = 0;
    int channels = 1;
    int class_count = 0;
    std::string split;
    uint64_t seed = 0;
    std::vector<std::vector<double>> images;  // values in [0,1], row-major HWC
    std::vector<int> labels;

    size_t size() const { return images.size(); }
    ToyDataset head(size_t n) const;      // first n examples
    ToyDataset stride(size_t step) const;  // every step-th example
};

// Deterministic under (recipe.seed, split). Pixel values are quantized to the
// 8-bit grid so IDX round-trips are exact.
ToyDataset gen_dataset(const DataRecipe& recipe, const std::string& split);

// The planted pattern for one class, over patch_dim values in {-1, +1}.
std::vector<double> class_pattern(const DataRecipe& recipe, int cls);

// For each image, the patch positions that carry the planted pattern.
std::vector<int> foreground_positions(const DataRecipe& recipe, const std::string& split,
                                      size_t index);

ToyDataset ingest_idx(const std::string& images_path, const std::string& labels_path);
void write_idx(const ToyDataset& data, const std::string& images_path,
               const std::string& labels_path);

}  // namespace diffrate
