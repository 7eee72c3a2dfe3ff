#include "diffrate/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

namespace diffrate {

using detail::make_op;
using detail::require;
using json = nlohmann::json;

// ---- schedules --------------------------------------------------------------

CompressionSchedule CompressionSchedule::none(int token_count, int depth) {
    CompressionSchedule s;
    s.token_count = token_count;
    s.prune_kept.assign(static_cast<size_t>(depth), token_count);
    s.merge_kept.assign(static_cast<size_t>(depth), token_count);
    return s;
}

void CompressionSchedule::validate() const {
    require(token_count >= 2, "schedule: token count must be at least 2");
    require(!prune_kept.empty() && prune_kept.size() == merge_kept.size(),
            "schedule: prune/merge kept lists must be non-empty and equal length");
    for (size_t l = 0; l < prune_kept.size(); ++l) {
        require(prune_kept[l] >= 1 && prune_kept[l] <= token_count,
                "schedule: prune kept count out of range at block " + std::to_string(l));
        require(merge_kept[l] >= 1 && merge_kept[l] <= token_count,
                "schedule: merge kept count out of range at block " + std::to_string(l));
    }
}

std::vector<int> CompressionSchedule::effective_kept() const {
    std::vector<int> eff(prune_kept.size());
    int run = token_count;
    for (size_t l = 0; l < prune_kept.size(); ++l) {
        run = std::min({run, prune_kept[l], merge_kept[l]});
        eff[l] = run;
    }
    return eff;
}

// ---- exact FLOPs -------------------------------------------------------------

namespace {
uint64_t attn_macs(uint64_t n, uint64_t c) { return 4 * n * c * c + 2 * n * n * c; }
uint64_t mlp_macs(uint64_t n, uint64_t c) { return 8 * n * c * c; }
}  // namespace

uint64_t flops_exact(const CompressionSchedule& schedule, int embed_dim) {
    schedule.validate();
    require(embed_dim >= 1, "flops_exact: embed dim must be positive");
    const uint64_t c = static_cast<uint64_t>(embed_dim);
    uint64_t total = 0;
    uint64_t n = static_cast<uint64_t>(schedule.token_count);
    auto eff = schedule.effective_kept();
    for (size_t l = 0; l < eff.size(); ++l) {
        total += attn_macs(n, c);
        n = static_cast<uint64_t>(eff[l]);
        require(n >= 1, "flops_exact: kept count reached zero");
        total += mlp_macs(n, c);
    }
    return total;
}

uint64_t flops_zero_schedule(int token_count, int depth, int embed_dim) {
    return flops_exact(CompressionSchedule::none(token_count, depth), embed_dim);
}

uint64_t flops_stem_head(int token_count, int patch_dim, int embed_dim, int class_count) {
    uint64_t patches = static_cast<uint64_t>(token_count - 1);
    return patches * static_cast<uint64_t>(patch_dim) * static_cast<uint64_t>(embed_dim) +
           static_cast<uint64_t>(embed_dim) * static_cast<uint64_t>(class_count);
}

// ---- differentiable FLOPs ----------------------------------------------------

Tensor max_ste(const std::vector<Tensor>& xs) {
    require(!xs.empty(), "max_ste: no inputs");
    double mx = xs[0].value();
    Tensor soft = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) {
        mx = std::max(mx, xs[i].value());
        soft = add(soft, xs[i]);
    }
    return ste_passthrough(Tensor::scalar(mx), soft);
}

std::vector<Tensor> effective_alphas(const std::vector<Tensor>& alpha_p,
                                     const std::vector<Tensor>& alpha_m) {
    require(alpha_p.size() == alpha_m.size() && !alpha_p.empty(),
            "effective_alphas: rate lists must be non-empty and equal length");
    std::vector<Tensor> eff;
    eff.reserve(alpha_p.size());
    Tensor run = Tensor::scalar(0.0);
    for (size_t l = 0; l < alpha_p.size(); ++l) {
        run = max_ste({run, alpha_p[l], alpha_m[l]});
        eff.push_back(run);
    }
    return eff;
}

Tensor flops_differentiable(const std::vector<Tensor>& alpha_p,
                            const std::vector<Tensor>& alpha_m, int token_count,
                            int embed_dim) {
    const double n0 = static_cast<double>(token_count);
    const double c = static_cast<double>(embed_dim);
    auto eff = effective_alphas(alpha_p, alpha_m);
    Tensor total = Tensor::scalar(0.0);
    Tensor n_in = Tensor::scalar(n0);
    for (size_t l = 0; l < eff.size(); ++l) {
        // attention at the incoming count: 4NC^2 + 2N^2C
        total = add(total, add(scale(n_in, 4.0 * c * c), scale(square(n_in), 2.0 * c)));
        // N' = N0 (1 - alpha^l), MLP at the compressed count: 8N'C^2
        Tensor n_out = scale(add_scalar(scale(eff[l], -1.0), 1.0), n0);
        total = add(total, scale(n_out, 8.0 * c * c));
        n_in = n_out;
    }
    return total;
}

Tensor flops_loss(const Tensor& flops, double target) {
    require(target > 0.0, "flops_loss: target must be positive");
    return square(add_scalar(flops, -target));
}

Tensor hw_loss(const Tensor& value, double target) {
    require(value.size() == 1, "hw_loss: value must be scalar");
    require(std::isfinite(target), "hw_loss: target must be finite");
    detail::check_finite(value, "hw_loss");
    const double x = value.value() - target;
    const double ax = std::abs(x);
    const double y = ax + std::log1p(std::exp(-2.0 * ax)) - 0.6931471805599453094;
    return make_op({1}, {y}, {value}, [x](detail::OpCtx& ctx) {
        if (auto* g = ctx.input_grad(0)) (*g)[0] += ctx.out_grad[0] * std::tanh(x);
    });
}

// ---- hardware domain ---------------------------------------------------------

HwDomain HwDomain::full() {
    HwDomain d;
    d.tiles_row = {1, 2, 4, 8};
    d.tiles_col = {1, 2, 4, 8};
    d.meshes_row = {4, 8, 16, 32};
    d.meshes_col = {4, 8, 16, 32};
    d.buswidth = {64, 128, 256, 512};
    d.spad_banks = {1, 2, 4, 8, 16};
    d.spad_mb = {0.25, 0.5, 1.0, 2.0, 4.0};
    d.acc_kb = {64, 128, 256, 512, 1024};
    return d;
}

std::vector<double> HwDomain::values_of(size_t dim) const {
    auto widen = [](const std::vector<int>& v) {
        return std::vector<double>(v.begin(), v.end());
    };
    switch (dim) {
        case 0: return widen(tiles_row);
        case 1: return widen(tiles_col);
        case 2: return widen(meshes_row);
        case 3: return widen(meshes_col);
        case 4: return widen(buswidth);
        case 5: return widen(spad_banks);
        case 6: return spad_mb;
        case 7: return widen(acc_kb);
        default: detail::fail("HwDomain: bad dimension index");
    }
}

std::string HwDomain::dim_name(size_t dim) const {
    static const char* names[] = {"tiles_row",  "tiles_col", "meshes_row", "meshes_col",
                                  "buswidth",   "spad_banks", "spad_mb",   "acc_kb"};
    require(dim < 8, "HwDomain: bad dimension index");
    return names[dim];
}

HwConfig HwDomain::make(const std::vector<size_t>& choice) const {
    require(choice.size() == 8, "HwDomain::make: expected 8 choices");
    HwConfig hw;
    hw.tiles_row = tiles_row.at(choice[0]);
    hw.tiles_col = tiles_col.at(choice[1]);
    hw.meshes_row = meshes_row.at(choice[2]);
    hw.meshes_col = meshes_col.at(choice[3]);
    hw.buswidth = buswidth.at(choice[4]);
    hw.spad_banks = spad_banks.at(choice[5]);
    hw.spad_mb = spad_mb.at(choice[6]);
    hw.acc_kb = acc_kb.at(choice[7]);
    return hw;
}

void HwDomain::validate(const HwConfig& hw) const {
    auto in = [](auto v, const auto& dom) {
        return std::find(dom.begin(), dom.end(), v) != dom.end();
    };
    require(in(hw.tiles_row, tiles_row) && in(hw.tiles_col, tiles_col) &&
                in(hw.meshes_row, meshes_row) && in(hw.meshes_col, meshes_col) &&
                in(hw.buswidth, buswidth) && in(hw.spad_banks, spad_banks) &&
                in(hw.spad_mb, spad_mb) && in(hw.acc_kb, acc_kb),
            "HwConfig value outside the design space");
}

// ---- coefficients io ---------------------------------------------------------

std::string CostCoefficients::to_json(const HwDomain& domain) const {
    json j;
    j["latency"] = {{"compute", lat_compute},
                    {"gamma", lat_gamma},
                    {"memory", lat_memory},
                    {"fixed_per_layer", lat_fixed_per_layer},
                    {"acc_exp", lat_acc_exp},
                    {"spad_exp", lat_spad_exp},
                    {"bank_exp", lat_bank_exp}};
    j["power"] = {{"s0", pw_s0},        {"spad", pw_spad}, {"acc", pw_acc},
                  {"banks", pw_banks},  {"cu", pw_cu},     {"dyn", pw_dyn},
                  {"cu_exp", pw_cu_exp}, {"bus_exp", pw_bus_exp}};
    j["domain"] = {{"tiles_row", domain.tiles_row},   {"tiles_col", domain.tiles_col},
                   {"meshes_row", domain.meshes_row}, {"meshes_col", domain.meshes_col},
                   {"buswidth", domain.buswidth},     {"spad_banks", domain.spad_banks},
                   {"spad_mb", domain.spad_mb},       {"acc_kb", domain.acc_kb}};
    return j.dump(2);
}

CostCoefficients CostCoefficients::from_json(const std::string& text, HwDomain* domain_out) {
    json j = json::parse(text);
    CostCoefficients c;
    const auto& la = j.at("latency");
    c.lat_compute = la.at("compute");
    c.lat_gamma = la.at("gamma");
    c.lat_memory = la.at("memory");
    c.lat_fixed_per_layer = la.at("fixed_per_layer");
    c.lat_acc_exp = la.at("acc_exp");
    c.lat_spad_exp = la.at("spad_exp");
    c.lat_bank_exp = la.at("bank_exp");
    const auto& pw = j.at("power");
    c.pw_s0 = pw.at("s0");
    c.pw_spad = pw.at("spad");
    c.pw_acc = pw.at("acc");
    c.pw_banks = pw.at("banks");
    c.pw_cu = pw.at("cu");
    c.pw_dyn = pw.at("dyn");
    c.pw_cu_exp = pw.at("cu_exp");
    c.pw_bus_exp = pw.at("bus_exp");
    if (domain_out && j.contains("domain")) {
        const auto& d = j.at("domain");
        domain_out->tiles_row = d.at("tiles_row").get<std::vector<int>>();
        domain_out->tiles_col = d.at("tiles_col").get<std::vector<int>>();
        domain_out->meshes_row = d.at("meshes_row").get<std::vector<int>>();
        domain_out->meshes_col = d.at("meshes_col").get<std::vector<int>>();
        domain_out->buswidth = d.at("buswidth").get<std::vector<int>>();
        domain_out->spad_banks = d.at("spad_banks").get<std::vector<int>>();
        domain_out->spad_mb = d.at("spad_mb").get<std::vector<double>>();
        domain_out->acc_kb = d.at("acc_kb").get<std::vector<int>>();
    }
    return c;
}

// ---- surrogate ---------------------------------------------------------------

namespace {
double mac_blk(double k, double c) { return 12.0 * k * c * c + 2.0 * k * k * c; }
double bytes_blk(double k, double c) { return 8.0 * (12.0 * c * c + 9.0 * k * c + k * k); }
}  // namespace

double CostModel::layer_cost(HwMetric metric, int kept, int token_count, int embed_dim,
                             int depth, const HwConfig& hw) const {
    domain_.validate(hw);
    require(kept >= 1 && kept <= token_count, "layer_cost: kept count out of range");
    const double k = static_cast<double>(kept);
    const double n0 = static_cast<double>(token_count);
    const double c = static_cast<double>(embed_dim);
    const double cu = static_cast<double>(hw.compute_units());
    if (metric == HwMetric::Latency) {
        double compute = coef_.lat_compute * mac_blk(k, c) * std::pow(k / n0, coef_.lat_gamma) /
                         cu * std::pow(256.0 / hw.acc_kb, coef_.lat_acc_exp);
        double memory = coef_.lat_memory * bytes_blk(k, c) / (hw.buswidth / 8.0) *
                        std::pow(1.0 / hw.spad_mb, coef_.lat_spad_exp) *
                        std::pow(4.0 / hw.spad_banks, coef_.lat_bank_exp);
        return compute + memory + coef_.lat_fixed_per_layer;
    }
    const double L = static_cast<double>(depth);
    double s = coef_.pw_s0 + coef_.pw_spad * hw.spad_mb + coef_.pw_acc * (hw.acc_kb / 1024.0) +
               coef_.pw_banks * (hw.spad_banks / 4.0) + coef_.pw_cu * (cu / 1024.0);
    double d = coef_.pw_dyn * std::pow(cu / 1024.0, coef_.pw_cu_exp) *
               std::pow(hw.buswidth / 128.0, coef_.pw_bus_exp);
    double ratio = mac_blk(k, c) / mac_blk(n0, c);
    return s / L + d * ratio * ratio / L;
}

double CostModel::latency_ms(const std::vector<int>& kept_profile, int token_count,
                             int embed_dim, const HwConfig& hw) const {
    double total = 0.0;
    for (int k : kept_profile)
        total += layer_cost(HwMetric::Latency, k, token_count, embed_dim,
                            static_cast<int>(kept_profile.size()), hw);
    return total;
}

double CostModel::power_mw(const std::vector<int>& kept_profile, int token_count,
                           int embed_dim, const HwConfig& hw) const {
    double total = 0.0;
    for (int k : kept_profile)
        total += layer_cost(HwMetric::Power, k, token_count, embed_dim,
                            static_cast<int>(kept_profile.size()), hw);
    return total;
}

LatencyBreakdown CostModel::latency_breakdown(const std::vector<int>& kept_profile,
                                              int token_count, int embed_dim,
                                              const HwConfig& hw) const {
    domain_.validate(hw);
    LatencyBreakdown b;
    const double n0 = static_cast<double>(token_count);
    const double c = static_cast<double>(embed_dim);
    const double cu = static_cast<double>(hw.compute_units());
    for (int kept : kept_profile) {
        const double k = static_cast<double>(kept);
        b.compute_ms += coef_.lat_compute * mac_blk(k, c) *
                        std::pow(k / n0, coef_.lat_gamma) / cu *
                        std::pow(256.0 / hw.acc_kb, coef_.lat_acc_exp);
        b.memory_ms += coef_.lat_memory * bytes_blk(k, c) / (hw.buswidth / 8.0) *
                       std::pow(1.0 / hw.spad_mb, coef_.lat_spad_exp) *
                       std::pow(4.0 / hw.spad_banks, coef_.lat_bank_exp);
        b.fixed_ms += coef_.lat_fixed_per_layer;
    }
    return b;
}

// ---- expected costs over schedules and design parameters ----------------------

Tensor expected_hw_alpha(const std::vector<Tensor>& alphas_eff, const CostModel& cm,
                         HwMetric metric, int token_count, int embed_dim,
                         const HwConfig& hw) {
    require(!alphas_eff.empty(), "expected_hw_alpha: empty rate list");
    const int depth = static_cast<int>(alphas_eff.size());
    Tensor total = Tensor::scalar(0.0);
    for (const Tensor& a : alphas_eff) {
        double av = a.value();
        require(av >= 0.0 && av < 1.0, "expected_hw_alpha: alpha outside [0,1)");
        int kept = std::max(
            1, static_cast<int>(std::lround(static_cast<double>(token_count) * (1.0 - av))));
        double cost = cm.layer_cost(metric, kept, token_count, embed_dim, depth, hw);
        // (alpha + SG(1 - alpha)) * F': value F', gradient F' d alpha
        Tensor coeff = add(a, detach(add_scalar(scale(a, -1.0), 1.0)));
        total = add(total, scale(coeff, cost));
    }
    return total;
}

HwSearchParam HwSearchParam::uniform(const HwDomain& domain, double tau) {
    HwSearchParam p;
    p.tau = tau;
    for (size_t dim = 0; dim < domain.dimension_count(); ++dim) {
        p.logits.push_back(
            Tensor({static_cast<int64_t>(domain.size_of(dim))}, 0.0, true));
    }
    return p;
}

std::vector<Tensor*> HwSearchParam::all_logits() {
    std::vector<Tensor*> out;
    for (Tensor& t : logits) out.push_back(&t);
    return out;
}

HwConfig HwSearchParam::argmax_config(const HwDomain& domain) const {
    std::vector<size_t> choice;
    for (const Tensor& t : logits) {
        size_t best = 0;
        for (int64_t i = 1; i < t.size(); ++i)
            if (t.at(i) > t.at(static_cast<int64_t>(best))) best = static_cast<size_t>(i);
        choice.push_back(best);
    }
    return domain.make(choice);
}

Tensor gumbel_softmax(const Tensor& logits, double tau, Rng& rng) {
    require(tau > 0.0, "gumbel_softmax: temperature must be positive");
    std::vector<double> noise(static_cast<size_t>(logits.size()));
    for (double& g : noise) g = rng.gumbel();
    Tensor shifted = add(logits, Tensor(logits.shape(), std::move(noise)));
    return row_softmax(scale(shifted, 1.0 / tau));
}

HwBetaExpectation expected_hw_beta(const std::vector<int>& kept_profile,
                                   const HwSearchParam& hsp, const CostModel& cm,
                                   HwMetric metric, int token_count, int embed_dim,
                                   Rng& rng) {
    const HwDomain& domain = cm.domain();
    require(hsp.logits.size() == domain.dimension_count(),
            "expected_hw_beta: logits do not match the design space");
    std::vector<Tensor> relaxed;
    std::vector<size_t> choice;
    for (size_t dim = 0; dim < hsp.logits.size(); ++dim) {
        Tensor g = gumbel_softmax(hsp.logits[dim], hsp.tau, rng);
        size_t best = 0;
        for (int64_t i = 1; i < g.size(); ++i)
            if (g.at(i) > g.at(static_cast<int64_t>(best))) best = static_cast<size_t>(i);
        relaxed.push_back(g);
        choice.push_back(best);
    }
    HwConfig hw = domain.make(choice);
    double cost_sum = 0.0;
    for (int k : kept_profile)
        cost_sum += cm.layer_cost(metric, k, token_count, embed_dim,
                                  static_cast<int>(kept_profile.size()), hw);
    Tensor total = Tensor::scalar(0.0);
    for (size_t dim = 0; dim < relaxed.size(); ++dim) {
        Tensor picked = gather_rows(relaxed[dim], {static_cast<int64_t>(choice[dim])});
        Tensor coeff = add(picked, detach(add_scalar(scale(picked, -1.0), 1.0)));
        total = add(total, scale(coeff, cost_sum));
    }
    return {total, hw};
}

}  // namespace diffrate
