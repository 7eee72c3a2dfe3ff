// Toy vision transformer: patch embedding, pre-norm blocks with masked
// attention, a compression hook between attention and MLP, and a class-token
// classifier head. Two execution modes share the block code: search mode
// simulates compression with masks, apply mode physically drops tokens.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "diffrate/cost_model.hpp"
#include "diffrate/ddp.hpp"
#include "diffrate/tensor.hpp"
#include "diffrate/token_ops.hpp"

namespace diffrate {

struct ModelConfig {
    int depth = 4;
    int token_count = 17;
    int embed_dim = 32;
    int head_count = 4;
    int patch_size = 4;
    int image_size = 16;
    int class_count = 4;
    int channels = 1;

    int patch_dim() const { return patch_size * patch_size * channels; }
    int image_tokens() const { return token_count - 1; }
    int head_dim() const { return embed_dim / head_count; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct BlockParams {
    Tensor ln1_gamma, ln1_beta;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gamma, ln2_beta;
    Tensor w1, b1, w2, b2;
};

struct BackboneParams {
    ModelConfig config;
    Tensor patch_weight;  // [patch_dim, D]
    Tensor patch_bias;    // [D]
    Tensor cls_token;     // [1, D]
    Tensor pos_embed;     // [N, D]
    std::vector<BlockParams> blocks;
    Tensor head_weight;  // [D, class_count]
    Tensor head_bias;    // [class_count]

    static BackboneParams init(const ModelConfig& cfg, uint64_t seed);
    std::vector<std::pair<std::string, Tensor*>> named_params();
    std::vector<std::pair<std::string, const Tensor*>> named_params() const;
    std::vector<Tensor*> params();
    void set_requires_grad(bool on);
    BackboneParams clone(bool requires_grad) const;
    std::vector<uint8_t> raw_bytes() const;  // packed parameter values, LE
};

struct AttentionState {
    int tokens = 0;
    std::vector<double> class_attention;  // head-averaged masked softmax row 0
    std::vector<double> image_attention;  // mean attention received from image rows
    std::vector<double> value_norms;      // per-token L2 norm of the value row
    std::vector<std::vector<double>> head_scores;  // pre-softmax, when collected
    std::vector<std::vector<double>> head_probs;   // masked post-softmax, when collected
};

struct ForwardOptions {
    CompressionOption option = CompressionOption::PruneMerge;
    SortMetric metric = SortMetric::ClassAttention;
    uint64_t sort_seed = 0;
    bool collect_scores = false;
    uint64_t* mac_counter = nullptr;  // counts block matmul MACs when set
};

// X + Attention(LN(X)) with the attention softmax masked by mask_tok
// (pass an all-ones mask for plain attention).
Tensor attention_sublayer(const Tensor& x, const BlockParams& bp, const ModelConfig& cfg,
                          const Tensor& mask_tok, AttentionState* state,
                          const ForwardOptions& opts);
Tensor mlp_sublayer(const Tensor& x, const BlockParams& bp, uint64_t* mac_counter);

// Full block with a compression hook between attention and MLP.
using CompressionHook = std::function<Tensor(const Tensor& xhat, const AttentionState&)>;
std::pair<Tensor, AttentionState> block_forward(const Tensor& x, const BlockParams& bp,
                                                const ModelConfig& cfg,
                                                const Tensor& mask_tok,
                                                const CompressionHook& hook,
                                                const ForwardOptions& opts);

// [N, D] tokens from a raw image: class token row 0, then linearly projected
// non-overlapping patches, all with positional embeddings added.
Tensor patch_embed(const std::vector<double>& image, const BackboneParams& params);

// Per-block shared tensors produced from the rate parameters once per step:
// expected rates and STE rank masks (data independent, reused across a batch).
struct BlockRates {
    Tensor alpha_p, alpha_m;  // scalars
    Tensor mask_p, mask_m;    // [N] rank-space STE masks
    Tensor pi_p, pi_m;        // [N] token-level probabilities
};

struct SearchRates {
    std::vector<RateParam> prune;  // one per block
    std::vector<RateParam> merge;  // empty for the prune-only option
    CompressionOption option = CompressionOption::PruneMerge;

    static SearchRates uniform(const ModelConfig& cfg, CompressionOption option);
    std::vector<Tensor*> all_logits();
};

std::vector<BlockRates> build_block_rates(const SearchRates& rates, int token_count);

struct MaskSnapshot {
    ImportanceOrder order;
    Tensor mask_rank;  // combined m over ranks (graph tensor)
    Tensor mask_tok;   // token-space mask used by the next block
    int kept_prune = 0;  // tokens surviving the prune stage
    int kept_merge = 0;  // tokens surviving both stages
    MergeMap merges;     // by token index
};

struct SearchImageResult {
    Tensor logits;  // [1, class_count]
    std::vector<MaskSnapshot> block_masks;
    std::vector<AttentionState> states;
};

SearchImageResult forward_search(const BackboneParams& params,
                                 const std::vector<double>& image,
                                 const std::vector<BlockRates>& rates,
                                 CompressionOption option, const ForwardOptions& opts);

struct ApplyImageResult {
    Tensor logits;  // [1, class_count]
    std::vector<int> token_counts;  // per block, after compression
    uint64_t macs = 0;
    TokenTrace trace;
    std::vector<AttentionState> states;
};

ApplyImageResult forward_apply(const BackboneParams& params, const std::vector<double>& image,
                               const CompressionSchedule& schedule, const ForwardOptions& opts);

// Mean over the batch of -log softmax(logits)[label]; optional uniform label
// smoothing.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     double label_smoothing = 0.0);

// Hard schedule read off the final search-mode masks.
CompressionSchedule schedule_from_masks(const std::vector<MaskSnapshot>& masks,
                                        int token_count);

// Stage bookkeeping shared by both execution modes: kept counts after each
// stage and the rank zones removed by each, given the tokens present and the
// per-role mask prefix lengths.
struct StageZones {
    int kept_prune = 0;
    int kept_merge = 0;
    int prune_begin = 0, prune_end = 0;
    int merge_begin = 0, merge_end = 0;
};
StageZones compute_stage_zones(CompressionOption option, int present, int c_p, int c_m);

}  // namespace diffrate
