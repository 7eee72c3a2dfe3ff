// Differentiable search over per-block compression rates under FLOPs (and
// optional latency/power) constraints, the iterative hardware co-search, and
// the brute-force schedule enumeration oracle.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffrate/cost_model.hpp"
#include "diffrate/data.hpp"
#include "diffrate/train.hpp"
#include "diffrate/vit.hpp"

namespace diffrate {

struct InfeasibleTarget : std::runtime_error {
    uint64_t min_flops;
    InfeasibleTarget(const std::string& msg, uint64_t min_f)
        : std::runtime_error(msg), min_flops(min_f) {}
};

struct SearchConfig {
    double target_flops = 0;     // raw multiply-accumulate units
    double target_latency = -1;  // ms, < 0 disables the term
    double target_power = -1;    // mW, < 0 disables the term
    double lambda_cls = 1.0;
    double lambda_flops = 5.0;
    double lambda_latency = 1.0;
    double lambda_power = 1.0;
    int epochs = 3;
    double lr = 0.01;
    double min_lr = 0.001;
    bool cosine = true;
    double weight_decay = 0.0;
    int batch_size = 32;
    bool warmup_first_epoch = false;  // lambda_flops = 0 during epoch 0
    double flops_unit = 0;            // loss scale for (F-T); <= 0 means use target
    CompressionOption option = CompressionOption::PruneMerge;
    SortMetric metric = SortMetric::ClassAttention;
    double label_smoothing = 0.0;
    double aug_noise = 0.0;
    uint64_t seed = 1;
    int threads = 0;
};

struct SearchStep {
    int step = 0;
    double l_cls = 0, l_f = 0, l_la = 0, l_pw = 0;
    double flops_cont = 0;    // differentiable model value
    uint64_t flops_hard = 0;  // exact count of the hard schedule
    std::vector<int> kept;    // effective kept tokens per block
};

struct SearchTrace {
    std::vector<SearchStep> steps;
    double wall_seconds = 0;
};

struct SearchResult {
    CompressionSchedule schedule;
    SearchTrace trace;
    uint64_t achieved_flops = 0;
    bool feasible = false;  // some iterate satisfied F <= T
};

// The hard schedule implied by the current rate logits (data independent).
CompressionSchedule hard_schedule(const SearchRates& rates, int token_count);

// Algorithm: per batch, forward with masks, backward the combined loss to the
// rate logits, update with AdamW under a cosine schedule. The backbone stays
// frozen. Returns the last feasible iterate's schedule.
SearchResult search_rates(const BackboneParams& backbone, const ToyDataset& data,
                          const SearchConfig& cfg, SearchRates* rates = nullptr,
                          const CostModel* cm = nullptr, const HwConfig* hw = nullptr);

struct CoSearchConfig {
    SearchConfig rates;
    int alternations = 2;
    int hw_steps = 150;
    double hw_lr = 0.05;
    double tau = 1.0;
};

struct CoSearchResult {
    CompressionSchedule schedule;
    HwConfig hw;
    SearchTrace trace;
    double latency_ms = 0;
    double power_mw = 0;
    uint64_t achieved_flops = 0;
};

// Iterative co-optimization: rates with the design fixed (gradient through
// the expected-cost alpha form), then design logits with rates fixed
// (Gumbel-Softmax sampling), alternating.
CoSearchResult cosearch_hw(const BackboneParams& backbone, const ToyDataset& data,
                           const CoSearchConfig& cfg, const CostModel& cm);

struct EnumerateConfig {
    int samples = 2000;            // random mode sample count
    std::vector<int> grid_kept;    // non-empty: exhaustive prune-only grid instead
    double budget = 0;             // FLOPs budget (raw units); 0 disables the filter
    uint64_t seed = 1;
    int threads = 0;
    int max_attempts_factor = 200;  // rejection budget per sample
    CompressionOption option = CompressionOption::PruneMerge;
    SortMetric metric = SortMetric::ClassAttention;
};

struct EnumeratedSchedule {
    CompressionSchedule schedule;
    uint64_t flops = 0;
    double accuracy = 0;
};

struct EnumerateResult {
    std::vector<EnumeratedSchedule> all;
    std::vector<size_t> pareto;  // indices, ascending flops
    double best_accuracy = 0;    // best at flops <= budget (or overall if 0)
    size_t best_index = 0;
    bool complete = true;  // false when the rejection budget ran out
};

// Evaluates candidate schedules off-the-shelf and ranks them; the independent
// oracle for near-optimality claims.
EnumerateResult enumerate_schedules(const BackboneParams& backbone,
                                    const ToyDataset& eval_data, const EnumerateConfig& cfg);

struct FinetuneConfig {
    int epochs = 2;
    double lr = 1e-5;
    double min_lr = 1e-6;
    int batch_size = 32;
    double label_smoothing = 0.0;
    double aug_noise = 0.0;
    uint64_t seed = 1;
    int threads = 0;
};

// Updates backbone weights with the schedule fixed and tokens physically
// dropped; the rate parameters are not touched.
TrainResult finetune(BackboneParams& params, const CompressionSchedule& schedule,
                     const ToyDataset& train, const ToyDataset& val,
                     const FinetuneConfig& cfg);

}  // namespace diffrate
