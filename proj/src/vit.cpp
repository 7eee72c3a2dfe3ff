#include "diffrate/vit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "diffrate/rng.hpp"

namespace diffrate {

using detail::make_op;
using detail::require;

void ModelConfig::validate() const {
    require(depth >= 1, "config: depth must be positive");
    require(token_count >= 2, "config: need the class token plus at least one image token");
    require(embed_dim >= 1 && head_count >= 1, "config: embed dim and heads must be positive");
    require(embed_dim % head_count == 0, "config: head count must divide embed dim");
    require(patch_size >= 1 && image_size >= 1, "config: patch and image sizes must be positive");
    require(image_size % patch_size == 0, "config: patch size must divide image size");
    int grid = image_size / patch_size;
    require(grid * grid + 1 == token_count,
            "config: (image_size/patch_size)^2 + 1 = " + std::to_string(grid * grid + 1) +
                " does not equal token_count " + std::to_string(token_count));
    require(class_count >= 2, "config: need at least two classes");
    require(channels == 1 || channels == 3, "config: channels must be 1 or 3");
}

// ---- parameters --------------------------------------------------------------

namespace {

Tensor trunc_normal(Rng& rng, std::vector<int64_t> shape, double std_dev) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    std::vector<double> data(static_cast<size_t>(n));
    for (double& v : data) {
        double z;
        do {
            z = rng.normal();
        } while (std::abs(z) > 2.0);
        v = z * std_dev;
    }
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace

BackboneParams BackboneParams::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(mix_keys(seed, 0x564954ULL));  // parameter stream
    const int64_t d = cfg.embed_dim;
    BackboneParams p;
    p.config = cfg;
    p.patch_weight = trunc_normal(rng, {cfg.patch_dim(), d}, 0.02);
    p.patch_bias = Tensor({d}, 0.0);
    p.cls_token = trunc_normal(rng, {1, d}, 0.02);
    p.pos_embed = trunc_normal(rng, {cfg.token_count, d}, 0.02);
    for (int l = 0; l < cfg.depth; ++l) {
        BlockParams b;
        b.ln1_gamma = Tensor({d}, 1.0);
        b.ln1_beta = Tensor({d}, 0.0);
        b.wq = trunc_normal(rng, {d, d}, 0.02);
        b.bq = Tensor({d}, 0.0);
        b.wk = trunc_normal(rng, {d, d}, 0.02);
        b.bk = Tensor({d}, 0.0);
        b.wv = trunc_normal(rng, {d, d}, 0.02);
        b.bv = Tensor({d}, 0.0);
        b.wo = trunc_normal(rng, {d, d}, 0.02);
        b.bo = Tensor({d}, 0.0);
        b.ln2_gamma = Tensor({d}, 1.0);
        b.ln2_beta = Tensor({d}, 0.0);
        b.w1 = trunc_normal(rng, {d, 4 * d}, 0.02);
        b.b1 = Tensor({4 * d}, 0.0);
        b.w2 = trunc_normal(rng, {4 * d, d}, 0.02);
        b.b2 = Tensor({d}, 0.0);
        p.blocks.push_back(std::move(b));
    }
    p.head_weight = trunc_normal(rng, {d, cfg.class_count}, 0.02);
    p.head_bias = Tensor({cfg.class_count}, 0.0);
    return p;
}

std::vector<std::pair<std::string, Tensor*>> BackboneParams::named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.push_back({"patch.weight", &patch_weight});
    out.push_back({"patch.bias", &patch_bias});
    out.push_back({"cls_token", &cls_token});
    out.push_back({"pos_embed", &pos_embed});
    for (size_t l = 0; l < blocks.size(); ++l) {
        std::string b = "block" + std::to_string(l) + ".";
        BlockParams& bp = blocks[l];
        out.push_back({b + "ln1.gamma", &bp.ln1_gamma});
        out.push_back({b + "ln1.beta", &bp.ln1_beta});
        out.push_back({b + "attn.wq", &bp.wq});
        out.push_back({b + "attn.bq", &bp.bq});
        out.push_back({b + "attn.wk", &bp.wk});
        out.push_back({b + "attn.bk", &bp.bk});
        out.push_back({b + "attn.wv", &bp.wv});
        out.push_back({b + "attn.bv", &bp.bv});
        out.push_back({b + "attn.wo", &bp.wo});
        out.push_back({b + "attn.bo", &bp.bo});
        out.push_back({b + "ln2.gamma", &bp.ln2_gamma});
        out.push_back({b + "ln2.beta", &bp.ln2_beta});
        out.push_back({b + "mlp.w1", &bp.w1});
        out.push_back({b + "mlp.b1", &bp.b1});
        out.push_back({b + "mlp.w2", &bp.w2});
        out.push_back({b + "mlp.b2", &bp.b2});
    }
    out.push_back({"head.weight", &head_weight});
    out.push_back({"head.bias", &head_bias});
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> BackboneParams::named_params() const {
    auto mut = const_cast<BackboneParams*>(this)->named_params();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mut.size());
    for (auto& [name, t] : mut) out.push_back({name, t});
    return out;
}

std::vector<Tensor*> BackboneParams::params() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
}

void BackboneParams::set_requires_grad(bool on) {
    for (Tensor* t : params()) {
        Tensor fresh(t->shape(), t->data(), on);
        *t = fresh;
    }
}

BackboneParams BackboneParams::clone(bool requires_grad) const {
    BackboneParams copy = *this;
    copy.set_requires_grad(requires_grad);
    return copy;
}

std::vector<uint8_t> BackboneParams::raw_bytes() const {
    std::vector<uint8_t> bytes;
    for (const auto& [name, t] : named_params()) {
        for (double v : t->data()) {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            for (int i = 0; i < 8; ++i)
                bytes.push_back(static_cast<uint8_t>((bits >> (8 * i)) & 0xff));
        }
    }
    return bytes;
}

// ---- forward pieces -----------------------------------------------------------

Tensor patch_embed(const std::vector<double>& image, const BackboneParams& params) {
    const ModelConfig& cfg = params.config;
    const int s = cfg.image_size, ps = cfg.patch_size, ch = cfg.channels;
    require(static_cast<int>(image.size()) == s * s * ch,
            "patch_embed: image has " + std::to_string(image.size()) + " values, expected " +
                std::to_string(s * s * ch));
    const int grid = s / ps;
    const int pd = cfg.patch_dim();
    std::vector<double> patches(static_cast<size_t>(grid * grid * pd));
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            double* row = patches.data() + static_cast<size_t>(gy * grid + gx) * pd;
            int i = 0;
            for (int py = 0; py < ps; ++py)
                for (int px = 0; px < ps; ++px)
                    for (int c = 0; c < ch; ++c)
                        row[i++] = image[((gy * ps + py) * s + (gx * ps + px)) * ch + c];
        }
    Tensor p({grid * grid, pd}, std::move(patches));
    Tensor tokens = add_rowwise(matmul(p, params.patch_weight), params.patch_bias);
    return add(concat_rows({params.cls_token, tokens}), params.pos_embed);
}

Tensor attention_sublayer(const Tensor& x, const BlockParams& bp, const ModelConfig& cfg,
                          const Tensor& mask_tok, AttentionState* state,
                          const ForwardOptions& opts) {
    const int64_t n = x.rows();
    const int64_t d = cfg.embed_dim;
    const int heads = cfg.head_count;
    const int64_t hd = cfg.head_dim();
    require(x.cols() == d, "attention: token width mismatch");
    require(mask_tok.size() == n, "attention: mask length " + std::to_string(mask_tok.size()) +
                                      " vs token count " + std::to_string(n));

    Tensor h = layer_norm(x, bp.ln1_gamma, bp.ln1_beta);
    Tensor q = add_rowwise(matmul(h, bp.wq), bp.bq);
    Tensor k = add_rowwise(matmul(h, bp.wk), bp.bk);
    Tensor v = add_rowwise(matmul(h, bp.wv), bp.bv);
    if (opts.mac_counter) *opts.mac_counter += 3ull * n * d * d;

    Tensor big_mask = attention_mask(mask_tok);
    const double scl = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<Tensor> head_outs;
    std::vector<double> a_c(static_cast<size_t>(n), 0.0);
    std::vector<double> a_i(static_cast<size_t>(n), 0.0);
    int image_rows = 0;
    for (int64_t t = 1; t < n; ++t)
        if (mask_tok.at(t) > 0.0) ++image_rows;

    for (int hidx = 0; hidx < heads; ++hidx) {
        std::vector<int64_t> cols(static_cast<size_t>(hd));
        std::iota(cols.begin(), cols.end(), static_cast<int64_t>(hidx) * hd);
        Tensor qh = gather_cols(q, cols);
        Tensor kh = gather_cols(k, cols);
        Tensor vh = gather_cols(v, cols);
        Tensor scores = scale(matmul(qh, transpose(kh)), scl);
        Tensor probs = masked_softmax(scores, big_mask);
        head_outs.push_back(matmul(probs, vh));
        if (opts.mac_counter) *opts.mac_counter += 2ull * n * n * hd;

        for (int64_t j = 0; j < n; ++j) a_c[j] += probs.at(0, j) / heads;
        if (image_rows > 0) {
            for (int64_t i = 1; i < n; ++i) {
                if (mask_tok.at(i) == 0.0) continue;
                for (int64_t j = 0; j < n; ++j)
                    a_i[j] += probs.at(i, j) / (static_cast<double>(heads) * image_rows);
            }
        }
        if (state && opts.collect_scores) {
            state->head_scores.push_back(scores.data());
            state->head_probs.push_back(probs.data());
        }
    }

    Tensor attn_out = add_rowwise(matmul(concat_cols(head_outs), bp.wo), bp.bo);
    if (opts.mac_counter) *opts.mac_counter += 1ull * n * d * d;

    if (state) {
        state->tokens = static_cast<int>(n);
        state->class_attention = std::move(a_c);
        state->image_attention = std::move(a_i);
        state->value_norms.assign(static_cast<size_t>(n), 0.0);
        for (int64_t t = 0; t < n; ++t) {
            double s = 0.0;
            for (int64_t j = 0; j < d; ++j) s += v.at(t, j) * v.at(t, j);
            state->value_norms[t] = std::sqrt(s);
        }
    }
    return add(x, attn_out);
}

Tensor mlp_sublayer(const Tensor& x, const BlockParams& bp, uint64_t* mac_counter) {
    Tensor h = layer_norm(x, bp.ln2_gamma, bp.ln2_beta);
    Tensor mid = gelu(add_rowwise(matmul(h, bp.w1), bp.b1));
    Tensor out = add_rowwise(matmul(mid, bp.w2), bp.b2);
    if (mac_counter)
        *mac_counter += 2ull * x.rows() * x.cols() * static_cast<uint64_t>(bp.w1.cols());
    return add(x, out);
}

std::pair<Tensor, AttentionState> block_forward(const Tensor& x, const BlockParams& bp,
                                                const ModelConfig& cfg,
                                                const Tensor& mask_tok,
                                                const CompressionHook& hook,
                                                const ForwardOptions& opts) {
    require(mask_tok.at(0) == 1.0, "block_forward: class token must stay unmasked");
    AttentionState state;
    Tensor xhat = attention_sublayer(x, bp, cfg, mask_tok, &state, opts);
    if (hook) xhat = hook(xhat, state);
    Tensor out = mlp_sublayer(xhat, bp, opts.mac_counter);
    return {out, std::move(state)};
}

// ---- search-mode forward -------------------------------------------------------

SearchRates SearchRates::uniform(const ModelConfig& cfg, CompressionOption option) {
    SearchRates r;
    r.option = option;
    const bool want_prune =
        option != CompressionOption::MergeOnly;
    const bool want_merge =
        option != CompressionOption::PruneOnly;
    for (int l = 0; l < cfg.depth; ++l) {
        if (want_prune)
            r.prune.push_back(RateParam::uniform(cfg.token_count, RateParam::Role::Prune, l));
        if (want_merge)
            r.merge.push_back(RateParam::uniform(cfg.token_count, RateParam::Role::Merge, l));
    }
    return r;
}

std::vector<Tensor*> SearchRates::all_logits() {
    std::vector<Tensor*> out;
    for (RateParam& rp : prune) out.push_back(&rp.logits);
    for (RateParam& rp : merge) out.push_back(&rp.logits);
    return out;
}

std::vector<BlockRates> build_block_rates(const SearchRates& rates, int token_count) {
    const size_t depth = std::max(rates.prune.size(), rates.merge.size());
    require(depth > 0, "build_block_rates: no rate parameters");
    std::vector<BlockRates> out;
    for (size_t l = 0; l < depth; ++l) {
        BlockRates br;
        if (l < rates.prune.size()) {
            Tensor rho = rate_probs(rates.prune[l]);
            br.alpha_p = expected_rate(rho);
            br.pi_p = token_probs(rho);
            br.mask_p = token_mask(br.pi_p, br.alpha_p.value());
        } else {
            br.alpha_p = Tensor::scalar(0.0);
            br.pi_p = Tensor({token_count}, 0.0);
            br.mask_p = Tensor({token_count}, 1.0);
        }
        if (l < rates.merge.size()) {
            Tensor rho = rate_probs(rates.merge[l]);
            br.alpha_m = expected_rate(rho);
            br.pi_m = token_probs(rho);
            br.mask_m = token_mask(br.pi_m, br.alpha_m.value());
        } else {
            br.alpha_m = Tensor::scalar(0.0);
            br.pi_m = Tensor({token_count}, 0.0);
            br.mask_m = Tensor({token_count}, 1.0);
        }
        out.push_back(std::move(br));
    }
    return out;
}

StageZones compute_stage_zones(CompressionOption option, int present, int c_p, int c_m) {
    StageZones s;
    switch (option) {
        case CompressionOption::PruneMerge: {
            int kp = std::min(present, c_p);
            int km = std::min(kp, c_m);
            s.kept_prune = kp;
            s.kept_merge = km;
            s.prune_begin = kp;
            s.prune_end = present;
            s.merge_begin = km;
            s.merge_end = kp;
            break;
        }
        case CompressionOption::MergePrune: {
            int km = std::min(present, c_m);
            int kp = std::min(km, c_p);
            s.kept_prune = kp;
            s.kept_merge = km;
            s.merge_begin = km;
            s.merge_end = present;
            s.prune_begin = kp;
            s.prune_end = km;
            break;
        }
        case CompressionOption::PruneOnly: {
            int kp = std::min(present, c_p);
            s.kept_prune = kp;
            s.kept_merge = kp;
            s.prune_begin = kp;
            s.prune_end = present;
            s.merge_begin = s.merge_end = kp;
            break;
        }
        case CompressionOption::MergeOnly: {
            int km = std::min(present, c_m);
            s.kept_prune = present;
            s.kept_merge = km;
            s.merge_begin = km;
            s.merge_end = present;
            s.prune_begin = s.prune_end = km;
            break;
        }
    }
    return s;
}

namespace {

int prefix_ones(const Tensor& mask) {
    int count = 0;
    while (count < mask.size() && mask.at(count) == 1.0) ++count;
    return count;
}

}  // namespace

SearchImageResult forward_search(const BackboneParams& params,
                                 const std::vector<double>& image,
                                 const std::vector<BlockRates>& rates,
                                 CompressionOption option, const ForwardOptions& opts) {
    const ModelConfig& cfg = params.config;
    require(static_cast<int>(rates.size()) == cfg.depth,
            "forward_search: rate list length " + std::to_string(rates.size()) +
                " does not match depth " + std::to_string(cfg.depth));
    const int n = cfg.token_count;
    std::vector<int> origins(static_cast<size_t>(n));
    std::iota(origins.begin(), origins.end(), 0);

    SearchImageResult res;
    Tensor x = patch_embed(image, params);
    Tensor mask_tok({n}, 1.0);

    for (int l = 0; l < cfg.depth; ++l) {
        AttentionState state;
        Tensor xhat = attention_sublayer(x, params.blocks[l], cfg, mask_tok, &state, opts);

        ImportanceOrder order =
            sort_tokens(state.class_attention, state.value_norms, state.image_attention,
                        mask_tok.data(), origins, opts.metric, opts.sort_seed, l);
        std::vector<int64_t> order64(order.order.begin(), order.order.end());
        std::vector<int64_t> rank64(order.rank_of.begin(), order.rank_of.end());

        Tensor m_prev_rank = gather_rows(mask_tok, order64);
        Tensor m_rank = combine_masks(m_prev_rank, rates[l].mask_p, rates[l].mask_m);

        const int present = prefix_ones(m_prev_rank);
        const int c_p = prefix_ones(rates[l].mask_p);
        const int c_m = prefix_ones(rates[l].mask_m);
        StageZones zones = compute_stage_zones(option, present, c_p, c_m);

        // merge sources into surviving non-class tokens; if no destination
        // exists the sources fall back to plain dropping
        MergeMap merges;
        if (zones.merge_end > zones.merge_begin && zones.kept_merge > 1) {
            std::vector<int> sources, dests;
            for (int r = zones.merge_begin; r < zones.merge_end; ++r)
                sources.push_back(order.order[r]);
            for (int r = 1; r < zones.kept_merge; ++r) dests.push_back(order.order[r]);
            merges = plan_merge(xhat, sources, dests);
            xhat = apply_merge(xhat, merges);
        }

        Tensor mask_new = gather_rows(m_rank, rank64);
        require(mask_new.at(0) == 1.0, "forward_search: class token lost its mask");

        MaskSnapshot snap;
        snap.order = std::move(order);
        snap.mask_rank = m_rank;
        snap.mask_tok = mask_new;
        snap.kept_prune = zones.kept_prune;
        snap.kept_merge = zones.kept_merge;
        snap.merges = std::move(merges);
        res.block_masks.push_back(std::move(snap));
        res.states.push_back(std::move(state));

        x = mlp_sublayer(xhat, params.blocks[l], opts.mac_counter);
        mask_tok = mask_new;
    }

    Tensor cls = gather_rows(x, {0});
    res.logits = add_rowwise(matmul(cls, params.head_weight), params.head_bias);
    return res;
}

// ---- apply-mode forward ---------------------------------------------------------

ApplyImageResult forward_apply(const BackboneParams& params, const std::vector<double>& image,
                               const CompressionSchedule& schedule,
                               const ForwardOptions& opts) {
    const ModelConfig& cfg = params.config;
    schedule.validate();
    require(schedule.token_count == cfg.token_count,
            "forward_apply: schedule token count mismatch");
    require(schedule.depth() == cfg.depth, "forward_apply: schedule depth " +
                                               std::to_string(schedule.depth()) +
                                               " does not match model depth " +
                                               std::to_string(cfg.depth));

    ApplyImageResult res;
    uint64_t local_macs = 0;
    ForwardOptions inner = opts;
    inner.mac_counter = &local_macs;

    Tensor x = patch_embed(image, params);
    std::vector<int> origins(static_cast<size_t>(cfg.token_count));
    std::iota(origins.begin(), origins.end(), 0);
    std::vector<std::vector<int>> groups;
    for (int t = 0; t < cfg.token_count; ++t) groups.push_back({t});
    std::vector<int> pruned_origins;
    MergeMap merges_by_origin;

    for (int l = 0; l < cfg.depth; ++l) {
        const int present = static_cast<int>(x.rows());
        Tensor ones({present}, 1.0);
        AttentionState state;
        Tensor xhat = attention_sublayer(x, params.blocks[l], cfg, ones, &state, inner);

        ImportanceOrder order =
            sort_tokens(state.class_attention, state.value_norms, state.image_attention,
                        ones.data(), origins, opts.metric, opts.sort_seed, l);

        StageZones zones = compute_stage_zones(opts.option, present,
                                               std::min(present, schedule.prune_kept[l]),
                                               std::min(present, schedule.merge_kept[l]));

        // reorder rows by rank (class token stays at row 0)
        std::vector<int64_t> order64(order.order.begin(), order.order.end());
        xhat = gather_rows(xhat, order64);
        std::vector<int> new_origins(order.order.size());
        std::vector<std::vector<int>> new_groups(order.order.size());
        for (size_t r = 0; r < order.order.size(); ++r) {
            new_origins[r] = origins[static_cast<size_t>(order.order[r])];
            new_groups[r] = groups[static_cast<size_t>(order.order[r])];
        }
        origins = std::move(new_origins);
        groups = std::move(new_groups);

        // merge stage over rank rows [merge_begin, merge_end)
        if (zones.merge_end > zones.merge_begin) {
            std::vector<int> sources, dests;
            for (int r = zones.merge_begin; r < zones.merge_end; ++r) sources.push_back(r);
            for (int r = 1; r < zones.kept_merge; ++r) dests.push_back(r);
            if (!dests.empty()) {
                MergeMap mm = plan_merge(xhat, sources, dests);
                xhat = apply_merge(xhat, mm);
                for (const MergeEntry& e : mm.entries) {
                    merges_by_origin.entries.push_back(
                        {origins[static_cast<size_t>(e.source)],
                         origins[static_cast<size_t>(e.dest)], e.group_size});
                    auto& dg = groups[static_cast<size_t>(e.dest)];
                    auto& sg = groups[static_cast<size_t>(e.source)];
                    dg.insert(dg.end(), sg.begin(), sg.end());
                }
            } else {
                for (int r = zones.merge_begin; r < zones.merge_end; ++r)
                    for (int o : groups[static_cast<size_t>(r)]) pruned_origins.push_back(o);
            }
        }
        // prune stage: everything at rank >= kept after both stages is gone
        for (int r = zones.prune_begin; r < zones.prune_end; ++r)
            for (int o : groups[static_cast<size_t>(r)]) pruned_origins.push_back(o);

        const int kept = std::min(zones.kept_prune, zones.kept_merge);
        std::vector<int64_t> keep_rows;
        for (int r = 0; r < kept; ++r) keep_rows.push_back(r);
        xhat = gather_rows(xhat, keep_rows);
        origins.resize(static_cast<size_t>(kept));
        groups.resize(static_cast<size_t>(kept));

        x = mlp_sublayer(xhat, params.blocks[l], inner.mac_counter);
        res.token_counts.push_back(kept);
        TokenTrace::BlockRecord rec;
        rec.kept_groups = groups;
        rec.pruned_origins = pruned_origins;
        res.trace.blocks.push_back(std::move(rec));
        res.states.push_back(std::move(state));
    }

    Tensor cls = gather_rows(x, {0});
    res.logits = add_rowwise(matmul(cls, params.head_weight), params.head_bias);
    res.macs = local_macs;
    if (opts.mac_counter) *opts.mac_counter += local_macs;
    return res;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     double label_smoothing) {
    require(logits.shape().size() == 2, "cross_entropy: logits must be rank-2");
    const int64_t b = logits.rows(), k = logits.cols();
    require(static_cast<int64_t>(labels.size()) == b,
            "cross_entropy: batch size " + std::to_string(b) + " vs " +
                std::to_string(labels.size()) + " labels");
    require(label_smoothing >= 0.0 && label_smoothing < 1.0,
            "cross_entropy: smoothing must be in [0,1)");
    for (int y : labels)
        require(y >= 0 && y < k, "cross_entropy: label " + std::to_string(y) +
                                     " outside [0, " + std::to_string(k) + ")");
    detail::check_finite(logits, "cross_entropy");

    auto probs = std::make_shared<std::vector<double>>(logits.data().size());
    double loss = 0.0;
    const double eps = label_smoothing;
    for (int64_t i = 0; i < b; ++i) {
        const double* row = logits.data().data() + i * k;
        double mx = row[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        double lse = mx + std::log(z);
        for (int64_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - mx) / z;
        double mean_logit = 0.0;
        for (int64_t j = 0; j < k; ++j) mean_logit += row[j];
        mean_logit /= static_cast<double>(k);
        loss += (1.0 - eps) * (lse - row[labels[static_cast<size_t>(i)]]) +
                eps * (lse - mean_logit);
    }
    loss /= static_cast<double>(b);

    std::vector<int> labels_copy = labels;
    return make_op({1}, {loss}, {logits}, [b, k, probs, labels_copy, eps](detail::OpCtx& ctx) {
        auto* g = ctx.input_grad(0);
        if (!g) return;
        const double gout = ctx.out_grad[0] / static_cast<double>(b);
        for (int64_t i = 0; i < b; ++i) {
            for (int64_t j = 0; j < k; ++j) {
                double target = (j == labels_copy[static_cast<size_t>(i)] ? (1.0 - eps) : 0.0) +
                                eps / static_cast<double>(k);
                (*g)[i * k + j] += gout * ((*probs)[i * k + j] - target);
            }
        }
    });
}

CompressionSchedule schedule_from_masks(const std::vector<MaskSnapshot>& masks,
                                        int token_count) {
    CompressionSchedule s;
    s.token_count = token_count;
    for (const MaskSnapshot& m : masks) {
        s.prune_kept.push_back(m.kept_prune);
        s.merge_kept.push_back(m.kept_merge);
    }
    s.validate();
    return s;
}

}  // namespace diffrate
