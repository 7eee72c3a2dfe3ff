// Token sorting, pruning, merging, and uncompression: the per-block
// compression pipeline shared by the masked (search) and physical (apply)
// execution modes.
#pragma once

#include <cstdint>
#include <vector>

#include "diffrate/tensor.hpp"

namespace diffrate {

enum class SortMetric { ClassAttention, ClassAttentionValueNorm, ImageAttention, Random };
enum class CompressionOption { PruneMerge, MergePrune, PruneOnly, MergeOnly };

const char* to_string(SortMetric m);
const char* to_string(CompressionOption o);
SortMetric sort_metric_from_string(const std::string& s);
CompressionOption compression_option_from_string(const std::string& s);

struct ImportanceOrder {
    std::vector<int> order;     // current indices by descending importance, class first
    std::vector<double> metric;  // aligned with order
    std::vector<int> rank_of;   // rank_of[index] = position in order

    int tokens() const { return static_cast<int>(order.size()); }
};

// Sorts the current tokens by the chosen importance metric. Index 0 (the
// class token) is always rank 0; masked tokens are forced to the tail; ties
// break by ascending origin id. Random scores are keyed by (seed, block,
// origin) so both execution modes see the same draw.
ImportanceOrder sort_tokens(const std::vector<double>& class_attention,
                            const std::vector<double>& value_norms,
                            const std::vector<double>& image_attention,
                            const std::vector<double>& mask, const std::vector<int>& origins,
                            SortMetric metric, uint64_t seed, int block);

// Indices of the tokens that survive pruning the n_prune lowest ranks,
// in rank order. The class token must survive: n_prune < token count.
std::vector<int> prune(const ImportanceOrder& order, int n_prune);

struct MergeEntry {
    int source = 0;
    int dest = 0;
    int group_size = 0;  // destination group size after the merge
};
struct MergeMap {
    std::vector<MergeEntry> entries;
    bool empty() const { return entries.empty(); }
};

// Assigns each source row to the destination candidate with maximal cosine
// similarity of the feature rows (ties: earliest candidate in the list).
MergeMap plan_merge(const Tensor& feats, const std::vector<int>& sources,
                    const std::vector<int>& dest_candidates);

// Each destination row becomes the joint mean of itself and all its sources.
// Differentiable in feats; source rows are left in place for the caller to
// drop or mask.
Tensor apply_merge(const Tensor& feats, const MergeMap& map);

// Spec-shaped convenience: rows must be rank-ordered with the class token at
// row 0. Merges the n_merge lowest-ranked rows into the remaining non-class
// rows and drops them. Errors when a source has no eligible destination.
std::pair<Tensor, MergeMap> merge(const Tensor& ranked_tokens, int n_merge);

// Restores a compressed sequence to full length: kept rows return to their
// origin positions, merged sources receive a copy of their destination's
// current value, pruned positions become zero. The three origin sets must
// partition [0, full_len).
Tensor uncompress(const Tensor& tokens, const std::vector<int>& kept_origins,
                  const MergeMap& map_by_origin, const std::vector<int>& pruned_origins,
                  int full_len);

// Cumulative per-block provenance of an apply-mode run, for rendering and
// uncompression: which origins each surviving token covers and which origins
// are gone.
struct TokenTrace {
    struct BlockRecord {
        std::vector<std::vector<int>> kept_groups;  // one list per surviving row
        std::vector<int> pruned_origins;
    };
    std::vector<BlockRecord> blocks;
};

}  // namespace diffrate
