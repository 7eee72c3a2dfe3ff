// Backbone tests: patch embedding, a from-scratch reference block as the
// oracle for the masked block, search/apply equivalence, cross entropy, and
// checkpoint round-trips.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <numeric>
#include <vector>

#include "diffrate/checkpoint.hpp"
#include "diffrate/cost_model.hpp"
#include "diffrate/rng.hpp"
#include "diffrate/vit.hpp"

using namespace diffrate;

namespace {

std::vector<double> random_image(Rng& rng, const ModelConfig& cfg) {
    std::vector<double> img(static_cast<size_t>(cfg.image_size) * cfg.image_size *
                            cfg.channels);
    for (double& v : img) v = rng.uniform(0, 1);
    return img;
}

// Plain-array transformer block, written independently of the tensor library.
std::vector<double> reference_block(const std::vector<double>& x_in, const BlockParams& bp,
                                    int n, int d, int heads) {
    auto ln = [&](const std::vector<double>& x, const Tensor& g, const Tensor& b) {
        std::vector<double> out(x.size());
        for (int i = 0; i < n; ++i) {
            double mu = 0;
            for (int j = 0; j < d; ++j) mu += x[i * d + j];
            mu /= d;
            double var = 0;
            for (int j = 0; j < d; ++j) var += (x[i * d + j] - mu) * (x[i * d + j] - mu);
            var /= d;
            double is = 1.0 / std::sqrt(var + 1e-6);
            for (int j = 0; j < d; ++j)
                out[i * d + j] = g.at(j) * (x[i * d + j] - mu) * is + b.at(j);
        }
        return out;
    };
    auto affine = [&](const std::vector<double>& x, const Tensor& w, const Tensor& b,
                      int cols_in, int cols_out) {
        std::vector<double> out(static_cast<size_t>(n) * cols_out, 0.0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < cols_out; ++j) {
                double s = b.at(j);
                for (int p = 0; p < cols_in; ++p) s += x[i * cols_in + p] * w.at(p, j);
                out[i * cols_out + j] = s;
            }
        return out;
    };

    std::vector<double> h = ln(x_in, bp.ln1_gamma, bp.ln1_beta);
    std::vector<double> q = affine(h, bp.wq, bp.bq, d, d);
    std::vector<double> k = affine(h, bp.wk, bp.bk, d, d);
    std::vector<double> v = affine(h, bp.wv, bp.bv, d, d);

    const int hd = d / heads;
    std::vector<double> ctx(static_cast<size_t>(n) * d, 0.0);
    for (int hh = 0; hh < heads; ++hh) {
        for (int i = 0; i < n; ++i) {
            std::vector<double> row(n);
            double mx = -1e300;
            for (int j = 0; j < n; ++j) {
                double s = 0;
                for (int p = 0; p < hd; ++p)
                    s += q[i * d + hh * hd + p] * k[j * d + hh * hd + p];
                row[j] = s / std::sqrt(double(hd));
                mx = std::max(mx, row[j]);
            }
            double z = 0;
            for (int j = 0; j < n; ++j) {
                row[j] = std::exp(row[j] - mx);
                z += row[j];
            }
            for (int j = 0; j < n; ++j) row[j] /= z;
            for (int p = 0; p < hd; ++p) {
                double s = 0;
                for (int j = 0; j < n; ++j) s += row[j] * v[j * d + hh * hd + p];
                ctx[i * d + hh * hd + p] = s;
            }
        }
    }
    std::vector<double> attn = affine(ctx, bp.wo, bp.bo, d, d);
    std::vector<double> xhat(x_in.size());
    for (size_t i = 0; i < xhat.size(); ++i) xhat[i] = x_in[i] + attn[i];

    std::vector<double> h2 = ln(xhat, bp.ln2_gamma, bp.ln2_beta);
    std::vector<double> mid = affine(h2, bp.w1, bp.b1, d, 4 * d);
    for (double& m : mid) m = 0.5 * m * (1.0 + std::erf(m / std::sqrt(2.0)));
    std::vector<double> out = affine(mid, bp.w2, bp.b2, 4 * d, d);
    for (size_t i = 0; i < out.size(); ++i) out[i] += xhat[i];
    return out;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.depth = 3;
    cfg.token_count = 10;  // 3x3 patch grid plus the class token
    cfg.embed_dim = 16;
    cfg.head_count = 4;
    cfg.patch_size = 2;
    cfg.image_size = 6;
    cfg.class_count = 3;
    return cfg;
}

SearchRates forced_rates(const ModelConfig& cfg, const std::vector<int>& prune_kept,
                         const std::vector<int>& merge_kept) {
    SearchRates r;
    r.option = CompressionOption::PruneMerge;
    const int n = cfg.token_count;
    for (int l = 0; l < cfg.depth; ++l) {
        // one-hot candidate j keeps exactly n - j + 1 tokens
        r.prune.push_back(RateParam::one_hot(n, n + 1 - prune_kept[l],
                                             RateParam::Role::Prune, l));
        r.merge.push_back(RateParam::one_hot(n, n + 1 - merge_kept[l],
                                             RateParam::Role::Merge, l));
    }
    return r;
}

}  // namespace

TEST_CASE("patch_embed") {
    ModelConfig cfg;
    cfg.depth = 1;
    cfg.token_count = 5;
    cfg.embed_dim = 8;
    cfg.head_count = 2;
    cfg.patch_size = 4;
    cfg.image_size = 8;
    cfg.class_count = 2;
    BackboneParams p = BackboneParams::init(cfg, 3);

    SUBCASE("token count from an 8x8 image with patch 4") {
        std::vector<double> img(64, 0.3);
        CHECK(patch_embed(img, p).rows() == 5);
    }
    SUBCASE("zero image, zero projection, zero positions") {
        BackboneParams z = p;
        z.patch_weight = Tensor(z.patch_weight.shape(), 0.0);
        z.patch_bias = Tensor(z.patch_bias.shape(), 0.0);
        z.pos_embed = Tensor(z.pos_embed.shape(), 0.0);
        std::vector<double> img(64, 0.0);
        Tensor t = patch_embed(img, z);
        for (int j = 0; j < 8; ++j) CHECK(t.at(0, j) == z.cls_token.at(0, j));
        for (int r = 1; r < 5; ++r)
            for (int j = 0; j < 8; ++j) CHECK(t.at(r, j) == 0.0);
    }
    SUBCASE("permuting two patches permutes token rows") {
        BackboneParams z = p;
        z.pos_embed = Tensor(z.pos_embed.shape(), 0.0);
        Rng rng(4);
        std::vector<double> img(64);
        for (double& v : img) v = rng.uniform(0, 1);
        std::vector<double> swapped = img;
        // swap patch (0,0) with patch (0,1): columns 0-3 vs 4-7 of rows 0-3
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x)
                std::swap(swapped[y * 8 + x], swapped[y * 8 + 4 + x]);
        Tensor a = patch_embed(img, z);
        Tensor b = patch_embed(swapped, z);
        for (int j = 0; j < 8; ++j) {
            CHECK(a.at(1, j) == b.at(2, j));
            CHECK(a.at(2, j) == b.at(1, j));
            CHECK(a.at(3, j) == b.at(3, j));
        }
    }
}

TEST_CASE("degenerate mask equals the reference block within 1e-12") {
    Rng rng(71);
    ModelConfig cfg = tiny_config();
    for (int trial = 0; trial < 10; ++trial) {
        BackboneParams p = BackboneParams::init(cfg, rng.next_u64());
        std::vector<double> img = random_image(rng, cfg);
        Tensor x = patch_embed(img, p);
        ForwardOptions opts;
        Tensor ones({cfg.token_count}, 1.0);
        auto [out, state] = block_forward(x, p.blocks[0], cfg, ones, nullptr, opts);
        std::vector<double> ref =
            reference_block(x.data(), p.blocks[0], cfg.token_count, cfg.embed_dim,
                            cfg.head_count);
        for (size_t i = 0; i < ref.size(); ++i)
            CHECK(std::abs(out.data()[i] - ref[i]) <= 1e-12);
    }
}

TEST_CASE("a masked single image token cannot reach the class token") {
    ModelConfig cfg;
    cfg.depth = 1;
    cfg.token_count = 2;
    cfg.embed_dim = 8;
    cfg.head_count = 2;
    cfg.patch_size = 4;
    cfg.image_size = 4;
    cfg.class_count = 2;
    BackboneParams p = BackboneParams::init(cfg, 9);
    Rng rng(10);
    std::vector<double> img_a(16), img_b(16);
    for (double& v : img_a) v = rng.uniform(0, 1);
    for (double& v : img_b) v = rng.uniform(0, 1);
    Tensor mask({2}, {1.0, 0.0});
    ForwardOptions opts;
    auto [out_a, sa] = block_forward(patch_embed(img_a, p), p.blocks[0], cfg, mask, nullptr, opts);
    auto [out_b, sb] = block_forward(patch_embed(img_b, p), p.blocks[0], cfg, mask, nullptr, opts);
    for (int j = 0; j < 8; ++j) CHECK(out_a.at(0, j) == doctest::Approx(out_b.at(0, j)));
}

TEST_CASE("class attention is a probability vector over unmasked positions") {
    Rng rng(31);
    ModelConfig cfg = tiny_config();
    for (int trial = 0; trial < 25; ++trial) {
        BackboneParams p = BackboneParams::init(cfg, rng.next_u64());
        std::vector<double> img = random_image(rng, cfg);
        std::vector<double> mv(static_cast<size_t>(cfg.token_count), 1.0);
        for (int t = 1; t < cfg.token_count; ++t) mv[t] = rng.uniform() < 0.3 ? 0.0 : 1.0;
        Tensor mask({cfg.token_count}, mv);
        AttentionState state;
        ForwardOptions opts;
        attention_sublayer(patch_embed(img, p), p.blocks[0], cfg, mask, &state, opts);
        double sum = 0.0;
        for (int j = 0; j < cfg.token_count; ++j) {
            sum += state.class_attention[j];
            if (mv[j] == 0.0 && j != 0) CHECK(state.class_attention[j] == 0.0);
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("zero-rate schedule equals the uncompressed forward") {
    Rng rng(57);
    ModelConfig cfg = tiny_config();
    BackboneParams p = BackboneParams::init(cfg, 2024);
    std::vector<double> img = random_image(rng, cfg);
    ForwardOptions opts;

    // uncompressed reference: apply with an all-kept schedule and no masks
    CompressionSchedule none = CompressionSchedule::none(cfg.token_count, cfg.depth);
    ApplyImageResult plain = forward_apply(p, img, none, opts);
    CHECK(plain.token_counts == std::vector<int>(cfg.depth, cfg.token_count));

    // search mode with all-keep rates (alpha = 0 boundary)
    std::vector<int> full(cfg.depth, cfg.token_count);
    SearchRates rates = forced_rates(cfg, full, full);
    auto blocks = build_block_rates(rates, cfg.token_count);
    SearchImageResult searched = forward_search(p, img, blocks, rates.option, opts);
    for (int j = 0; j < cfg.class_count; ++j)
        CHECK(std::abs(searched.logits.at(0, j) - plain.logits.at(0, j)) <= 1e-12);
}

TEST_CASE("published ViT-S schedule shape reaches 3 tokens at block 12") {
    ModelConfig cfg;
    cfg.depth = 12;
    cfg.token_count = 197;
    cfg.embed_dim = 16;
    cfg.head_count = 4;
    cfg.patch_size = 16;
    cfg.image_size = 224;
    cfg.class_count = 4;
    BackboneParams p = BackboneParams::init(cfg, 5);
    CompressionSchedule s;
    s.token_count = 197;
    s.prune_kept = {197, 196, 190, 168, 150, 139, 129, 117, 99, 78, 58, 3};
    s.merge_kept = {197, 194, 176, 156, 141, 133, 121, 107, 88, 64, 56, 3};
    Rng rng(6);
    std::vector<double> img(static_cast<size_t>(224 * 224), 0.5);
    for (double& v : img) v = rng.uniform(0, 1);
    ForwardOptions opts;
    ApplyImageResult res = forward_apply(p, img, s, opts);
    CHECK(res.token_counts.back() == 3);
    CHECK(res.token_counts == s.effective_kept());
    CHECK(res.macs == flops_exact(s, cfg.embed_dim));
}

TEST_CASE("search and apply agree for pruning-only schedules within 1e-10") {
    Rng rng(20240401);
    ModelConfig cfg = tiny_config();
    const int n = cfg.token_count;
    for (int trial = 0; trial < 20; ++trial) {
        BackboneParams p = BackboneParams::init(cfg, rng.next_u64());
        std::vector<double> img = random_image(rng, cfg);
        std::vector<int> kp(cfg.depth), full(cfg.depth, n);
        for (int l = 0; l < cfg.depth; ++l) kp[l] = static_cast<int>(rng.uniform_int(2, n));
        SearchRates rates = forced_rates(cfg, kp, full);
        auto blocks = build_block_rates(rates, n);
        ForwardOptions opts;
        SearchImageResult searched = forward_search(p, img, blocks, rates.option, opts);
        CompressionSchedule sched = schedule_from_masks(searched.block_masks, n);
        ApplyImageResult applied = forward_apply(p, img, sched, opts);
        for (int j = 0; j < cfg.class_count; ++j) {
            double a = searched.logits.at(0, j), b = applied.logits.at(0, j);
            CHECK(std::abs(a - b) / std::max(1e-12, std::abs(b)) <= 1e-10);
        }
        // class token survives every block in both modes
        for (const auto& m : searched.block_masks) CHECK(m.mask_tok.at(0) == 1.0);
    }
}

TEST_CASE("search and apply agree with merging enabled within 1e-8") {
    Rng rng(20240402);
    ModelConfig cfg = tiny_config();
    const int n = cfg.token_count;
    for (int trial = 0; trial < 20; ++trial) {
        BackboneParams p = BackboneParams::init(cfg, rng.next_u64());
        std::vector<double> img = random_image(rng, cfg);
        std::vector<int> kp(cfg.depth), km(cfg.depth);
        for (int l = 0; l < cfg.depth; ++l) {
            kp[l] = static_cast<int>(rng.uniform_int(3, n));
            km[l] = static_cast<int>(rng.uniform_int(2, kp[l]));
        }
        SearchRates rates = forced_rates(cfg, kp, km);
        auto blocks = build_block_rates(rates, n);
        ForwardOptions opts;
        SearchImageResult searched = forward_search(p, img, blocks, rates.option, opts);
        CompressionSchedule sched = schedule_from_masks(searched.block_masks, n);
        ApplyImageResult applied = forward_apply(p, img, sched, opts);
        for (int j = 0; j < cfg.class_count; ++j) {
            double a = searched.logits.at(0, j), b = applied.logits.at(0, j);
            CHECK(std::abs(a - b) / std::max(1e-12, std::abs(b)) <= 1e-8);
        }
    }
}

TEST_CASE("instrumented MACs equal the analytic count over a small grid") {
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.token_count = 5;
    cfg.embed_dim = 4;
    cfg.head_count = 2;
    cfg.patch_size = 4;
    cfg.image_size = 8;
    cfg.class_count = 2;
    BackboneParams p = BackboneParams::init(cfg, 77);
    Rng rng(78);
    std::vector<double> img = random_image(rng, cfg);
    ForwardOptions opts;
    for (int kp0 = 2; kp0 <= 5; ++kp0)
        for (int km0 = 2; km0 <= 5; ++km0)
            for (int kp1 = 2; kp1 <= 5; ++kp1)
                for (int km1 = 2; km1 <= 5; ++km1) {
                    CompressionSchedule s;
                    s.token_count = 5;
                    s.prune_kept = {kp0, kp1};
                    s.merge_kept = {km0, km1};
                    ApplyImageResult res = forward_apply(p, img, s, opts);
                    CHECK(res.macs == flops_exact(s, cfg.embed_dim));
                }
}

TEST_CASE("zero schedule MAC count matches the closed form") {
    ModelConfig cfg = tiny_config();
    BackboneParams p = BackboneParams::init(cfg, 11);
    Rng rng(12);
    std::vector<double> img = random_image(rng, cfg);
    ForwardOptions opts;
    ApplyImageResult res =
        forward_apply(p, img, CompressionSchedule::none(cfg.token_count, cfg.depth), opts);
    const uint64_t n = cfg.token_count, d = cfg.embed_dim, L = cfg.depth;
    CHECK(res.macs == L * (12 * n * d * d + 2 * n * n * d));
}

TEST_CASE("cross entropy") {
    SUBCASE("uniform logits over 10 classes") {
        Tensor logits({1, 10}, 0.0);
        CHECK(cross_entropy(logits, {3}).value() ==
              doctest::Approx(std::log(10.0)).epsilon(1e-12));
    }
    SUBCASE("frozen two-class value") {
        Tensor logits({1, 2}, {1.0, 2.0});
        CHECK(cross_entropy(logits, {1}).value() ==
              doctest::Approx(0.31326168751822286).epsilon(1e-12));
    }
    SUBCASE("loss vanishes as the margin grows") {
        double prev = 1e9;
        for (double margin : {2.0, 5.0, 10.0, 20.0}) {
            Tensor logits({1, 3}, {margin, 0.0, 0.0});
            double l = cross_entropy(logits, {0}).value();
            CHECK(l < prev);
            prev = l;
        }
        CHECK(prev <= 1e-8);
    }
    SUBCASE("batch mean and gradient") {
        Tensor logits({2, 3}, {0.5, -0.2, 0.1, 1.0, 0.0, -1.0}, true);
        Tensor loss = cross_entropy(logits, {2, 0});
        backward(loss);
        const double h = 1e-6;
        for (int i = 0; i < 6; ++i) {
            Tensor lp({2, 3}, logits.data());
            lp.data_mut()[i] += h;
            Tensor lm({2, 3}, logits.data());
            lm.data_mut()[i] -= h;
            double fd = (cross_entropy(lp, {2, 0}).value() -
                         cross_entropy(lm, {2, 0}).value()) /
                        (2 * h);
            CHECK(logits.grad()[i] == doctest::Approx(fd).epsilon(1e-5));
        }
    }
    SUBCASE("rejects out-of-range labels") {
        Tensor logits({1, 3}, 0.0);
        CHECK_THROWS(cross_entropy(logits, {3}));
        CHECK_THROWS(cross_entropy(logits, {-1}));
    }
}

TEST_CASE("checkpoint round-trip is bit exact") {
    ModelConfig cfg = tiny_config();
    BackboneParams p = BackboneParams::init(cfg, 404);
    std::map<std::string, Tensor> extras;
    extras.emplace("opt.step", Tensor::scalar(17.0));
    std::string path = "test_checkpoint_roundtrip.drck";
    save_checkpoint(path, p, extras);
    std::map<std::string, Tensor> extras2;
    BackboneParams q = load_checkpoint(path, &extras2);
    CHECK(q.config == cfg);
    CHECK(p.raw_bytes() == q.raw_bytes());
    REQUIRE(extras2.count("opt.step") == 1);
    CHECK(extras2.at("opt.step").value() == 17.0);
    // saving the reloaded params reproduces the file byte for byte
    std::string path2 = "test_checkpoint_roundtrip2.drck";
    save_checkpoint(path2, q, extras2);
    auto slurp = [](const std::string& f) {
        std::ifstream in(f, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
    };
    CHECK(slurp(path) == slurp(path2));
    std::remove(path.c_str());
    std::remove(path2.c_str());

    CHECK_THROWS_AS(load_checkpoint("does_not_exist.drck"), IoError);
}

TEST_CASE("model config validation") {
    ModelConfig bad = tiny_config();
    bad.token_count = 11;
    CHECK_THROWS(bad.validate());
    bad = tiny_config();
    bad.head_count = 3;
    CHECK_THROWS(bad.validate());
}
