// AdamW optimizer, backbone training with thread-sharded batches, and
// accuracy evaluation (optionally under a compression schedule).
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "diffrate/cost_model.hpp"
#include "diffrate/data.hpp"
#include "diffrate/vit.hpp"

namespace diffrate {

struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0.0;
    int64_t step_count = 0;
    std::vector<std::vector<double>> m, v;

    void init(const std::vector<Tensor*>& params);
    bool initialized() const { return !m.empty(); }
    // applies one update from the accumulated grads and clears them
    void step(const std::vector<Tensor*>& params, double lr);

    std::map<std::string, Tensor> to_extras(const std::vector<std::string>& names) const;
    void from_extras(const std::map<std::string, Tensor>& extras,
                     const std::vector<std::string>& names);
};

double cosine_lr(int step, int total_steps, double lr, double min_lr, bool cosine);

struct TrainConfig {
    int epochs = 20;
    int batch_size = 32;
    double lr = 1e-3;
    double min_lr = 0.0;
    bool cosine = true;
    double weight_decay = 0.0;
    double label_smoothing = 0.0;
    double aug_noise = 0.0;
    uint64_t seed = 1;
    int threads = 0;  // 0: hardware concurrency
};

struct EpochMetrics {
    double train_loss = 0;
    double val_accuracy = 0;
};
struct TrainResult {
    std::vector<EpochMetrics> epochs;
};

// Supervised training of the backbone; when `schedule` is set the forward
// physically drops tokens (fine-tuning a compressed model). Resumable at
// epoch boundaries given the optimizer state.
TrainResult train_model(BackboneParams& params, const ToyDataset& train,
                        const ToyDataset& val, const TrainConfig& cfg,
                        const CompressionSchedule* schedule = nullptr,
                        const ForwardOptions& fw = {}, Adam* optimizer = nullptr,
                        int start_epoch = 0, int stop_epoch = -1);

double evaluate_accuracy(const BackboneParams& params, const ToyDataset& data,
                         const CompressionSchedule* schedule, const ForwardOptions& fw,
                         int threads);

int resolve_threads(int requested);

std::vector<size_t> epoch_permutation(size_t n, uint64_t seed, int epoch);
std::vector<double> augment_image(const std::vector<double>& image, double noise,
                                  uint64_t key);

}  // namespace diffrate
