// Block-wise FLOPs accounting (exact integer and differentiable forms),
// constraint losses, and the synthetic accelerator latency/power surrogate
// with its searchable hardware design space.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffrate/rng.hpp"
#include "diffrate/tensor.hpp"

namespace diffrate {

// Per-block kept-token counts for the pruning and merging stages, class token
// included. A block may state more tokens than arrive; the effective count is
// the running minimum.
struct CompressionSchedule {
    int token_count = 0;
    std::vector<int> prune_kept;
    std::vector<int> merge_kept;

    int depth() const { return static_cast<int>(prune_kept.size()); }
    static CompressionSchedule none(int token_count, int depth);
    void validate() const;
    std::vector<int> effective_kept() const;  // running min over both stages
    bool operator==(const CompressionSchedule&) const = default;
};

// Exact block-only multiply-accumulate count: attention 4NC^2 + 2N^2C at the
// block's incoming token count, MLP 8N'C^2 at the post-compression count.
uint64_t flops_exact(const CompressionSchedule& schedule, int embed_dim);
uint64_t flops_zero_schedule(int token_count, int depth, int embed_dim);
// Patch-embedding and classifier-head cost, excluded from the block count but
// available as an additive constant.
uint64_t flops_stem_head(int token_count, int patch_dim, int embed_dim, int class_count);

// max over the inputs; forward is the hard max, backward passes the upstream
// gradient to every input unchanged (straight-through)
Tensor max_ste(const std::vector<Tensor>& xs);

// Differentiable Alg.-2 style count over per-block expected rates. Running
// rate alpha^l = max(alpha^{l-1}, alpha_p^l, alpha_m^l) with STE through max.
Tensor flops_differentiable(const std::vector<Tensor>& alpha_p,
                            const std::vector<Tensor>& alpha_m, int token_count,
                            int embed_dim);
// The running per-block effective alphas (shared subexpression of the above).
std::vector<Tensor> effective_alphas(const std::vector<Tensor>& alpha_p,
                                     const std::vector<Tensor>& alpha_m);

Tensor flops_loss(const Tensor& flops, double target);  // (F - T)^2

// log(cosh(E - T)) computed overflow-safely as |x| + log((1 + e^{-2|x|}) / 2)
Tensor hw_loss(const Tensor& value, double target);

// ---- hardware surrogate ----------------------------------------------------

struct HwConfig {
    int tiles_row = 2, tiles_col = 2;
    int meshes_row = 16, meshes_col = 16;
    int buswidth = 128;
    int spad_banks = 4;
    double spad_mb = 1.0;
    int acc_kb = 256;

    int compute_units() const { return tiles_row * tiles_col * meshes_row * meshes_col; }
    bool operator==(const HwConfig&) const = default;
};

struct HwDomain {
    std::vector<int> tiles_row, tiles_col, meshes_row, meshes_col;
    std::vector<int> buswidth, spad_banks;
    std::vector<double> spad_mb;
    std::vector<int> acc_kb;

    static HwDomain full();  // the published accelerator search space
    size_t dimension_count() const { return 8; }
    std::vector<double> values_of(size_t dim) const;
    size_t size_of(size_t dim) const { return values_of(dim).size(); }
    HwConfig make(const std::vector<size_t>& choice) const;
    void validate(const HwConfig& hw) const;
    std::string dim_name(size_t dim) const;
};

struct CostCoefficients {
    // latency: a * sum_l mac_l (K_l/N0)^gamma / CU * (256/acc)^acc_exp
    //         + b * sum_l bytes_l / (bus/8) * spad_mb^-spad_exp * (4/banks)^bank_exp
    //         + c * L
    double lat_compute = 1.368989268590e-05;
    double lat_gamma = 0.228018715700;
    double lat_memory = 4.55e-07;
    double lat_fixed_per_layer = 0.05;
    double lat_acc_exp = 0.05;
    double lat_spad_exp = 0.15;
    double lat_bank_exp = 0.10;
    // power: static s0 + s_spad*MB + s_acc*(KB/1024) + s_banks*(banks/4)
    //        + s_cu*(CU/1024), dynamic d0 * sqrt(CU/1024) * (bus/128)^0.25
    //        scaled per layer by (mac(K)/mac(N0))^2
    double pw_s0 = 14.0;
    double pw_spad = 8.0;
    double pw_acc = 8.0;
    double pw_banks = 4.0;
    double pw_cu = 24.744517072735;
    double pw_dyn = 103.255482927265;
    double pw_cu_exp = 0.5;
    double pw_bus_exp = 0.25;

    std::string to_json(const HwDomain& domain) const;
    static CostCoefficients from_json(const std::string& text, HwDomain* domain_out);
};

enum class HwMetric { Latency, Power };

struct LatencyBreakdown {
    double compute_ms = 0, memory_ms = 0, fixed_ms = 0;
    double total() const { return compute_ms + memory_ms + fixed_ms; }
};

class CostModel {
public:
    CostModel() : domain_(HwDomain::full()) {}
    CostModel(CostCoefficients coef, HwDomain domain)
        : coef_(coef), domain_(std::move(domain)) {}

    const HwDomain& domain() const { return domain_; }
    const CostCoefficients& coefficients() const { return coef_; }

    // per-block cost at a uniform kept-token count (a lookup on integers)
    double layer_cost(HwMetric metric, int kept, int token_count, int embed_dim, int depth,
                      const HwConfig& hw) const;

    double latency_ms(const std::vector<int>& kept_profile, int token_count, int embed_dim,
                      const HwConfig& hw) const;
    double power_mw(const std::vector<int>& kept_profile, int token_count, int embed_dim,
                    const HwConfig& hw) const;
    LatencyBreakdown latency_breakdown(const std::vector<int>& kept_profile, int token_count,
                                       int embed_dim, const HwConfig& hw) const;

private:
    CostCoefficients coef_;
    HwDomain domain_;
};

// E = sum_l (alpha_l + SG(1 - alpha_l)) F'(alpha_l, hw): value equals the
// plain cost sum, gradient reaches each alpha_l scaled by its layer cost.
Tensor expected_hw_alpha(const std::vector<Tensor>& alphas_eff, const CostModel& cm,
                         HwMetric metric, int token_count, int embed_dim,
                         const HwConfig& hw);

struct HwSearchParam {
    std::vector<Tensor> logits;  // one leaf per design dimension
    double tau = 1.0;

    static HwSearchParam uniform(const HwDomain& domain, double tau = 1.0);
    std::vector<Tensor*> all_logits();
    HwConfig argmax_config(const HwDomain& domain) const;
};

// Gumbel-Softmax relaxed one-hot over one design dimension.
Tensor gumbel_softmax(const Tensor& logits, double tau, Rng& rng);

// E = sum_h sum_l (g_h + SG(1 - g_h)) F'(alpha*, beta_sampled), beta sampled
// per dimension with Gumbel-Softmax at temperature tau; value is H times the
// sampled config's cost sum, gradient reaches each dimension's logits.
struct HwBetaExpectation {
    Tensor value;
    HwConfig sampled;
};
HwBetaExpectation expected_hw_beta(const std::vector<int>& kept_profile,
                                   const HwSearchParam& hsp, const CostModel& cm,
                                   HwMetric metric, int token_count, int embed_dim,
                                   Rng& rng);

}  // namespace diffrate
