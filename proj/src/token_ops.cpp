#include "diffrate/token_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "diffrate/rng.hpp"

namespace diffrate {

using detail::require;

const char* to_string(SortMetric m) {
    switch (m) {
        case SortMetric::ClassAttention: return "class-attention";
        case SortMetric::ClassAttentionValueNorm: return "class-attention-value-norm";
        case SortMetric::ImageAttention: return "image-attention";
        case SortMetric::Random: return "random";
    }
    return "?";
}

const char* to_string(CompressionOption o) {
    switch (o) {
        case CompressionOption::PruneMerge: return "prune-merge";
        case CompressionOption::MergePrune: return "merge-prune";
        case CompressionOption::PruneOnly: return "prune-only";
        case CompressionOption::MergeOnly: return "merge-only";
    }
    return "?";
}

SortMetric sort_metric_from_string(const std::string& s) {
    if (s == "class-attention") return SortMetric::ClassAttention;
    if (s == "class-attention-value-norm") return SortMetric::ClassAttentionValueNorm;
    if (s == "image-attention") return SortMetric::ImageAttention;
    if (s == "random") return SortMetric::Random;
    detail::fail("unknown sort metric: " + s);
}

CompressionOption compression_option_from_string(const std::string& s) {
    if (s == "prune-merge") return CompressionOption::PruneMerge;
    if (s == "merge-prune") return CompressionOption::MergePrune;
    if (s == "prune-only") return CompressionOption::PruneOnly;
    if (s == "merge-only") return CompressionOption::MergeOnly;
    detail::fail("unknown compression option: " + s);
}

ImportanceOrder sort_tokens(const std::vector<double>& class_attention,
                            const std::vector<double>& value_norms,
                            const std::vector<double>& image_attention,
                            const std::vector<double>& mask, const std::vector<int>& origins,
                            SortMetric metric, uint64_t seed, int block) {
    const size_t n = class_attention.size();
    require(n >= 1, "sort_tokens: empty token set");
    require(mask.size() == n && origins.size() == n, "sort_tokens: length mismatch");
    if (metric == SortMetric::ClassAttentionValueNorm)
        require(value_norms.size() == n, "sort_tokens: value norms missing");
    if (metric == SortMetric::ImageAttention)
        require(image_attention.size() == n, "sort_tokens: image attention missing");

    std::vector<double> score(n);
    for (size_t t = 0; t < n; ++t) {
        double s = 0.0;
        switch (metric) {
            case SortMetric::ClassAttention: s = class_attention[t]; break;
            case SortMetric::ClassAttentionValueNorm:
                s = class_attention[t] * value_norms[t];
                break;
            case SortMetric::ImageAttention: s = image_attention[t]; break;
            case SortMetric::Random: {
                Rng rng(mix_keys(seed, static_cast<uint64_t>(block),
                                 static_cast<uint64_t>(origins[t])));
                s = rng.uniform();
                break;
            }
        }
        if (mask[t] == 0.0) s = -std::numeric_limits<double>::infinity();
        score[t] = s;
    }

    ImportanceOrder out;
    out.order.resize(n);
    std::iota(out.order.begin(), out.order.end(), 0);
    std::sort(out.order.begin() + 1, out.order.end(), [&](int a, int b) {
        if (score[a] != score[b]) return score[a] > score[b];
        return origins[a] < origins[b];
    });
    out.metric.resize(n);
    out.rank_of.assign(n, 0);
    for (size_t r = 0; r < n; ++r) {
        out.metric[r] = score[static_cast<size_t>(out.order[r])];
        out.rank_of[static_cast<size_t>(out.order[r])] = static_cast<int>(r);
    }
    return out;
}

std::vector<int> prune(const ImportanceOrder& order, int n_prune) {
    const int n = order.tokens();
    require(n_prune >= 0, "prune: negative count");
    require(n_prune < n, "prune: cannot drop " + std::to_string(n_prune) + " of " +
                             std::to_string(n) + " tokens, the class token must survive");
    return std::vector<int>(order.order.begin(), order.order.end() - n_prune);
}

namespace {

double cosine(const double* a, const double* b, int64_t d) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    double denom = std::sqrt(na) * std::sqrt(nb);
    if (denom < 1e-300) return 0.0;
    return dot / denom;
}

}  // namespace

MergeMap plan_merge(const Tensor& feats, const std::vector<int>& sources,
                    const std::vector<int>& dest_candidates) {
    require(feats.shape().size() == 2, "plan_merge: features must be rank-2");
    MergeMap map;
    if (sources.empty()) return map;
    require(!dest_candidates.empty(), "plan_merge: no eligible destination");
    const int64_t d = feats.cols();
    const double* base = feats.data().data();
    std::vector<int> group_count(static_cast<size_t>(feats.rows()), 1);
    for (int s : sources) {
        require(s >= 0 && s < feats.rows(), "plan_merge: source index out of range");
        double best = -2.0;
        int best_dest = dest_candidates.front();
        for (int c : dest_candidates) {
            require(c >= 0 && c < feats.rows(), "plan_merge: destination index out of range");
            double sim = cosine(base + static_cast<int64_t>(s) * d,
                                base + static_cast<int64_t>(c) * d, d);
            if (sim > best) {
                best = sim;
                best_dest = c;
            }
        }
        group_count[static_cast<size_t>(best_dest)]++;
        map.entries.push_back({s, best_dest, 0});
    }
    for (MergeEntry& e : map.entries)
        e.group_size = group_count[static_cast<size_t>(e.dest)];
    return map;
}

Tensor apply_merge(const Tensor& feats, const MergeMap& map) {
    if (map.empty()) return feats;
    // group sources per destination, keeping the entry order so the joint
    // mean sums identically in both execution modes
    std::vector<std::pair<int, std::vector<int>>> by_dest;
    for (const MergeEntry& e : map.entries) {
        auto it = std::find_if(by_dest.begin(), by_dest.end(),
                               [&](const auto& p) { return p.first == e.dest; });
        if (it == by_dest.end())
            by_dest.push_back({e.dest, {e.source}});
        else
            it->second.push_back(e.source);
    }
    std::vector<int64_t> dest_idx;
    std::vector<Tensor> new_rows;
    for (auto& [dest, srcs] : by_dest) {
        std::vector<int64_t> members{dest};
        for (int s : srcs) members.push_back(s);
        Tensor rows = gather_rows(feats, members);
        Tensor ones({1, static_cast<int64_t>(members.size())}, 1.0);
        Tensor mean = scale(matmul(ones, rows), 1.0 / static_cast<double>(members.size()));
        dest_idx.push_back(dest);
        new_rows.push_back(mean);
    }
    return scatter_rows(feats, dest_idx, concat_rows(new_rows));
}

std::pair<Tensor, MergeMap> merge(const Tensor& ranked_tokens, int n_merge) {
    require(ranked_tokens.shape().size() == 2, "merge: tokens must be rank-2");
    const int n = static_cast<int>(ranked_tokens.rows());
    require(n_merge >= 0, "merge: negative count");
    if (n_merge == 0) return {ranked_tokens, MergeMap{}};
    require(n_merge < n - 1, "merge: no eligible destination");
    std::vector<int> sources, dests;
    for (int r = n - n_merge; r < n; ++r) sources.push_back(r);
    for (int r = 1; r < n - n_merge; ++r) dests.push_back(r);
    MergeMap map = plan_merge(ranked_tokens, sources, dests);
    Tensor merged = apply_merge(ranked_tokens, map);
    std::vector<int64_t> keep;
    for (int r = 0; r < n - n_merge; ++r) keep.push_back(r);
    return {gather_rows(merged, keep), map};
}

Tensor uncompress(const Tensor& tokens, const std::vector<int>& kept_origins,
                  const MergeMap& map_by_origin, const std::vector<int>& pruned_origins,
                  int full_len) {
    require(tokens.shape().size() == 2, "uncompress: tokens must be rank-2");
    require(static_cast<int>(kept_origins.size()) == tokens.rows(),
            "uncompress: kept origins do not match token rows");
    const int64_t d = tokens.cols();
    std::vector<int> row_of(static_cast<size_t>(full_len), -1);
    std::vector<int> covered(static_cast<size_t>(full_len), 0);
    for (size_t r = 0; r < kept_origins.size(); ++r) {
        int o = kept_origins[r];
        require(o >= 0 && o < full_len, "uncompress: kept origin out of range");
        row_of[static_cast<size_t>(o)] = static_cast<int>(r);
        covered[static_cast<size_t>(o)]++;
    }
    std::vector<double> out(static_cast<size_t>(full_len) * static_cast<size_t>(d), 0.0);
    for (size_t r = 0; r < kept_origins.size(); ++r) {
        for (int64_t j = 0; j < d; ++j)
            out[static_cast<size_t>(kept_origins[r]) * d + j] =
                tokens.data()[r * d + j];
    }
    for (const MergeEntry& e : map_by_origin.entries) {
        require(e.source >= 0 && e.source < full_len, "uncompress: source origin out of range");
        require(e.dest >= 0 && e.dest < full_len && row_of[static_cast<size_t>(e.dest)] >= 0,
                "uncompress: merge destination is not a kept token");
        int dr = row_of[static_cast<size_t>(e.dest)];
        for (int64_t j = 0; j < d; ++j)
            out[static_cast<size_t>(e.source) * d + j] = tokens.data()[dr * d + j];
        covered[static_cast<size_t>(e.source)]++;
    }
    for (int o : pruned_origins) {
        require(o >= 0 && o < full_len, "uncompress: pruned origin out of range");
        covered[static_cast<size_t>(o)]++;
    }
    for (int o = 0; o < full_len; ++o)
        require(covered[static_cast<size_t>(o)] == 1,
                "uncompress: origin " + std::to_string(o) +
                    " covered " + std::to_string(covered[static_cast<size_t>(o)]) +
                    " times, kept/merged/pruned must partition the sequence");
    return Tensor({full_len, d}, std::move(out));
}

}  // namespace diffrate
