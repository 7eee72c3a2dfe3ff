#include "diffrate/search.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <thread>

#include "diffrate/rng.hpp"

namespace diffrate {

using detail::require;

namespace {

int prefix_count(const Tensor& mask) {
    int count = 0;
    while (count < mask.size() && mask.at(count) == 1.0) ++count;
    return count;
}

SearchRates clone_rates(const SearchRates& rates) {
    SearchRates copy;
    copy.option = rates.option;
    for (const RateParam& rp : rates.prune) {
        RateParam c = rp;
        c.logits = Tensor(rp.logits.shape(), rp.logits.data(), true);
        copy.prune.push_back(std::move(c));
    }
    for (const RateParam& rp : rates.merge) {
        RateParam c = rp;
        c.logits = Tensor(rp.logits.shape(), rp.logits.data(), true);
        copy.merge.push_back(std::move(c));
    }
    return copy;
}

}  // namespace

CompressionSchedule hard_schedule(const SearchRates& rates, int token_count) {
    auto blocks = build_block_rates(rates, token_count);
    CompressionSchedule s;
    s.token_count = token_count;
    int present = token_count;
    for (const BlockRates& br : blocks) {
        StageZones z = compute_stage_zones(rates.option, present, prefix_count(br.mask_p),
                                           prefix_count(br.mask_m));
        s.prune_kept.push_back(z.kept_prune);
        s.merge_kept.push_back(z.kept_merge);
        present = std::min(z.kept_prune, z.kept_merge);
    }
    s.validate();
    return s;
}

SearchResult search_rates(const BackboneParams& backbone, const ToyDataset& data,
                          const SearchConfig& cfg, SearchRates* rates_io,
                          const CostModel* cm, const HwConfig* hw) {
    require(data.size() > 0, "search: empty dataset");
    require(cfg.target_flops > 0, "search: FLOPs target must be positive");
    const ModelConfig& mc = backbone.config;
    const int n = mc.token_count;

    CompressionSchedule floor;
    floor.token_count = n;
    floor.prune_kept.assign(static_cast<size_t>(mc.depth), 1);
    floor.merge_kept.assign(static_cast<size_t>(mc.depth), 1);
    const uint64_t min_flops = flops_exact(floor, mc.embed_dim);
    if (cfg.target_flops < static_cast<double>(min_flops))
        throw InfeasibleTarget(
            "search: target " + std::to_string(cfg.target_flops) +
                " is below the minimum achievable FLOPs " + std::to_string(min_flops) +
                " (class-token-only schedule)",
            min_flops);

    const bool need_latency = cfg.target_latency >= 0;
    const bool need_power = cfg.target_power >= 0;
    require((!need_latency && !need_power) || (cm != nullptr && hw != nullptr),
            "search: hardware targets require a cost model and a fixed design");

    BackboneParams frozen = backbone.clone(false);
    SearchRates local_rates = SearchRates::uniform(mc, cfg.option);
    SearchRates& rates = rates_io ? *rates_io : local_rates;
    if (rates_io && rates_io->prune.empty() && rates_io->merge.empty())
        *rates_io = SearchRates::uniform(mc, cfg.option);

    std::vector<Tensor*> logits = rates.all_logits();
    Adam opt;
    opt.weight_decay = cfg.weight_decay;
    opt.init(logits);

    const int threads = resolve_threads(cfg.threads);
    const int steps_per_epoch =
        static_cast<int>((data.size() + cfg.batch_size - 1) / cfg.batch_size);
    const int total_steps = steps_per_epoch * cfg.epochs;
    const double unit = cfg.flops_unit > 0 ? cfg.flops_unit : cfg.target_flops;

    ForwardOptions fw;
    fw.option = cfg.option;
    fw.metric = cfg.metric;
    fw.sort_seed = cfg.seed;

    SearchResult result;
    bool have_feasible = false;
    CompressionSchedule feasible_schedule;
    uint64_t feasible_flops = 0;
    auto t0 = std::chrono::steady_clock::now();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lambda_f =
            (cfg.warmup_first_epoch && epoch == 0) ? 0.0 : cfg.lambda_flops;
        auto perm = epoch_permutation(data.size(), cfg.seed, epoch);
        for (int step = 0; step < steps_per_epoch; ++step) {
            const int global_step = epoch * steps_per_epoch + step;
            size_t lo = static_cast<size_t>(step) * cfg.batch_size;
            size_t hi = std::min(data.size(), lo + cfg.batch_size);
            const size_t batch = hi - lo;

            // the hard schedule this step's masks imply (data independent)
            CompressionSchedule step_schedule = hard_schedule(rates, n);
            uint64_t step_flops = flops_exact(step_schedule, mc.embed_dim);

            // classification path, sharded over the batch
            std::vector<std::vector<std::vector<double>>> worker_grads(
                static_cast<size_t>(threads));
            std::vector<double> worker_loss(static_cast<size_t>(threads), 0.0);
            if (cfg.lambda_cls != 0.0) {
                auto run_worker = [&](int w) {
                    size_t w_lo = lo + (batch * static_cast<size_t>(w)) / threads;
                    size_t w_hi = lo + (batch * static_cast<size_t>(w + 1)) / threads;
                    if (w_lo >= w_hi) return;
                    SearchRates wr = clone_rates(rates);
                    auto blocks = build_block_rates(wr, n);
                    std::vector<Tensor> logit_rows;
                    std::vector<int> labels;
                    for (size_t b = w_lo; b < w_hi; ++b) {
                        size_t i = perm[b];
                        std::vector<double> img = augment_image(
                            data.images[i], cfg.aug_noise,
                            mix_keys(cfg.seed, 0x736175ULL, static_cast<uint64_t>(epoch), i));
                        logit_rows.push_back(
                            forward_search(frozen, img, blocks, wr.option, fw).logits);
                        labels.push_back(data.labels[i]);
                    }
                    Tensor loss =
                        cross_entropy(concat_rows(logit_rows), labels, cfg.label_smoothing);
                    Tensor weighted =
                        scale(loss, cfg.lambda_cls * static_cast<double>(w_hi - w_lo) /
                                        static_cast<double>(batch));
                    backward(weighted);
                    worker_loss[static_cast<size_t>(w)] = weighted.value();
                    for (Tensor* t : wr.all_logits())
                        worker_grads[static_cast<size_t>(w)].push_back(
                            t->has_grad() ? t->grad()
                                          : std::vector<double>(t->data().size(), 0.0));
                };
                if (threads == 1) {
                    run_worker(0);
                } else {
                    std::vector<std::thread> pool;
                    for (int w = 0; w < threads; ++w) pool.emplace_back(run_worker, w);
                    for (auto& t : pool) t.join();
                }
            }

            // constraint path on the master logits
            auto blocks = build_block_rates(rates, n);
            std::vector<Tensor> alpha_p, alpha_m;
            for (const BlockRates& br : blocks) {
                alpha_p.push_back(br.alpha_p);
                alpha_m.push_back(br.alpha_m);
            }
            Tensor flops_cont = flops_differentiable(alpha_p, alpha_m, n, mc.embed_dim);
            double l_f_val = 0, l_la_val = 0, l_pw_val = 0;
            Tensor constraint;
            if (lambda_f > 0) {
                Tensor lf = scale(
                    flops_loss(scale(flops_cont, 1.0 / unit), cfg.target_flops / unit),
                    lambda_f);
                l_f_val = lf.value();
                constraint = lf;
            }
            if (need_latency || need_power) {
                auto eff = effective_alphas(alpha_p, alpha_m);
                if (need_latency) {
                    Tensor e = expected_hw_alpha(eff, *cm, HwMetric::Latency, n,
                                                 mc.embed_dim, *hw);
                    Tensor ll = scale(hw_loss(e, cfg.target_latency), cfg.lambda_latency);
                    l_la_val = ll.value();
                    constraint = constraint.defined() ? add(constraint, ll) : ll;
                }
                if (need_power) {
                    Tensor e = expected_hw_alpha(eff, *cm, HwMetric::Power, n,
                                                 mc.embed_dim, *hw);
                    Tensor lp = scale(hw_loss(e, cfg.target_power), cfg.lambda_power);
                    l_pw_val = lp.value();
                    constraint = constraint.defined() ? add(constraint, lp) : lp;
                }
            }
            if (constraint.defined() && constraint.needs_grad()) backward(constraint);

            // combine constraint and classification gradients
            for (size_t p = 0; p < logits.size(); ++p) {
                std::vector<double> g =
                    logits[p]->has_grad() ? logits[p]->grad()
                                          : std::vector<double>(logits[p]->data().size(), 0.0);
                for (int w = 0; w < threads; ++w) {
                    if (worker_grads[static_cast<size_t>(w)].empty()) continue;
                    const auto& wg = worker_grads[static_cast<size_t>(w)][p];
                    for (size_t j = 0; j < g.size(); ++j) g[j] += wg[j];
                }
                logits[p]->set_grad(std::move(g));
            }

            double lr = cosine_lr(global_step, total_steps, cfg.lr, cfg.min_lr, cfg.cosine);
            opt.step(logits, lr);

            SearchStep rec;
            rec.step = global_step;
            rec.l_cls = std::accumulate(worker_loss.begin(), worker_loss.end(), 0.0);
            rec.l_f = l_f_val;
            rec.l_la = l_la_val;
            rec.l_pw = l_pw_val;
            rec.flops_cont = flops_cont.value();
            rec.flops_hard = step_flops;
            rec.kept = step_schedule.effective_kept();
            result.trace.steps.push_back(std::move(rec));

            if (static_cast<double>(step_flops) <= cfg.target_flops) {
                have_feasible = true;
                feasible_schedule = step_schedule;
                feasible_flops = step_flops;
            }
        }
    }

    // the post-update state is the final candidate
    CompressionSchedule final_schedule = hard_schedule(rates, n);
    uint64_t final_flops = flops_exact(final_schedule, mc.embed_dim);
    if (static_cast<double>(final_flops) <= cfg.target_flops) {
        have_feasible = true;
        feasible_schedule = final_schedule;
        feasible_flops = final_flops;
    }
    result.feasible = have_feasible;
    result.schedule = have_feasible ? feasible_schedule : final_schedule;
    result.achieved_flops = have_feasible ? feasible_flops : final_flops;
    result.trace.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

CoSearchResult cosearch_hw(const BackboneParams& backbone, const ToyDataset& data,
                           const CoSearchConfig& cfg, const CostModel& cm) {
    const ModelConfig& mc = backbone.config;
    const bool need_latency = cfg.rates.target_latency >= 0;
    const bool need_power = cfg.rates.target_power >= 0;
    require(need_latency || need_power, "cosearch: no hardware target given");

    HwSearchParam hsp = HwSearchParam::uniform(cm.domain(), cfg.tau);
    Adam hw_opt;
    hw_opt.init(hsp.all_logits());

    SearchRates rates = SearchRates::uniform(mc, cfg.rates.option);
    CoSearchResult out;
    SearchResult last_search;

    const double hw_dims = static_cast<double>(cm.domain().dimension_count());
    for (int alt = 0; alt < cfg.alternations; ++alt) {
        HwConfig hw_star = hsp.argmax_config(cm.domain());
        SearchConfig sc = cfg.rates;
        sc.seed = mix_keys(cfg.rates.seed, 0xa17ULL, static_cast<uint64_t>(alt));
        last_search = search_rates(backbone, data, sc, &rates, &cm, &hw_star);
        for (const SearchStep& s : last_search.trace.steps)
            out.trace.steps.push_back(s);

        std::vector<int> profile = last_search.schedule.effective_kept();
        for (int step = 0; step < cfg.hw_steps; ++step) {
            Rng rng(mix_keys(cfg.rates.seed, 0xbe7aULL, static_cast<uint64_t>(alt),
                             static_cast<uint64_t>(step)));
            Tensor loss;
            if (need_latency) {
                auto e = expected_hw_beta(profile, hsp, cm, HwMetric::Latency, mc.token_count,
                                          mc.embed_dim, rng);
                Tensor term = scale(hw_loss(scale(e.value, 1.0 / hw_dims),
                                            cfg.rates.target_latency),
                                    cfg.rates.lambda_latency);
                loss = term;
            }
            if (need_power) {
                auto e = expected_hw_beta(profile, hsp, cm, HwMetric::Power, mc.token_count,
                                          mc.embed_dim, rng);
                Tensor term = scale(
                    hw_loss(scale(e.value, 1.0 / hw_dims), cfg.rates.target_power),
                    cfg.rates.lambda_power);
                loss = loss.defined() ? add(loss, term) : term;
            }
            backward(loss);
            hw_opt.step(hsp.all_logits(), cfg.hw_lr);
        }
    }

    out.schedule = last_search.schedule;
    out.achieved_flops = last_search.achieved_flops;
    out.hw = hsp.argmax_config(cm.domain());
    std::vector<int> profile = out.schedule.effective_kept();
    out.latency_ms = cm.latency_ms(profile, mc.token_count, mc.embed_dim, out.hw);
    out.power_mw = cm.power_mw(profile, mc.token_count, mc.embed_dim, out.hw);
    return out;
}

EnumerateResult enumerate_schedules(const BackboneParams& backbone,
                                    const ToyDataset& eval_data,
                                    const EnumerateConfig& cfg) {
    const ModelConfig& mc = backbone.config;
    const int n = mc.token_count;
    EnumerateResult result;

    std::vector<CompressionSchedule> candidates;
    if (!cfg.grid_kept.empty()) {
        // exhaustive prune-only product over the per-block candidate set
        for (int kept : cfg.grid_kept)
            require(kept >= 1 && kept <= n, "enumerate: grid kept count out of range");
        size_t combos = 1;
        for (int l = 0; l < mc.depth; ++l) combos *= cfg.grid_kept.size();
        for (size_t c = 0; c < combos; ++c) {
            CompressionSchedule s;
            s.token_count = n;
            size_t rem = c;
            for (int l = 0; l < mc.depth; ++l) {
                s.prune_kept.push_back(cfg.grid_kept[rem % cfg.grid_kept.size()]);
                s.merge_kept.push_back(n);
                rem /= cfg.grid_kept.size();
            }
            uint64_t f = flops_exact(s, mc.embed_dim);
            if (cfg.budget > 0 && static_cast<double>(f) > cfg.budget) continue;
            candidates.push_back(std::move(s));
        }
    } else {
        Rng rng(mix_keys(cfg.seed, 0xe1ULL));
        int64_t attempts_left =
            static_cast<int64_t>(cfg.max_attempts_factor) * cfg.samples;
        for (int i = 0; i < cfg.samples; ++i) {
            bool found = false;
            while (attempts_left-- > 0) {
                CompressionSchedule s;
                s.token_count = n;
                for (int l = 0; l < mc.depth; ++l) {
                    int kp = static_cast<int>(rng.uniform_int(1, n));
                    int km = static_cast<int>(rng.uniform_int(1, kp));
                    s.prune_kept.push_back(kp);
                    s.merge_kept.push_back(km);
                }
                uint64_t f = flops_exact(s, mc.embed_dim);
                if (cfg.budget > 0 && static_cast<double>(f) > cfg.budget) continue;
                candidates.push_back(std::move(s));
                found = true;
                break;
            }
            if (!found) {
                result.complete = false;
                break;
            }
        }
    }

    result.all.resize(candidates.size());
    BackboneParams frozen = backbone.clone(false);
    ForwardOptions fw;
    fw.option = cfg.option;
    fw.metric = cfg.metric;
    fw.sort_seed = cfg.seed;

    const int workers = resolve_threads(cfg.threads);
    auto run_worker = [&](int w) {
        for (size_t c = static_cast<size_t>(w); c < candidates.size();
             c += static_cast<size_t>(workers)) {
            EnumeratedSchedule& entry = result.all[c];
            entry.schedule = candidates[c];
            entry.flops = flops_exact(candidates[c], mc.embed_dim);
            int correct = 0;
            for (size_t i = 0; i < eval_data.size(); ++i) {
                Tensor logits =
                    forward_apply(frozen, eval_data.images[i], candidates[c], fw).logits;
                int best = 0;
                for (int64_t j = 1; j < logits.cols(); ++j)
                    if (logits.at(0, j) > logits.at(0, best)) best = static_cast<int>(j);
                if (best == eval_data.labels[i]) ++correct;
            }
            entry.accuracy = static_cast<double>(correct) /
                             static_cast<double>(eval_data.size());
        }
    };
    if (workers == 1 || candidates.size() <= 1) {
        run_worker(0);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(run_worker, w);
        for (auto& t : pool) t.join();
    }

    // Pareto front: ascending flops, strictly improving accuracy
    std::vector<size_t> by_flops(result.all.size());
    std::iota(by_flops.begin(), by_flops.end(), size_t{0});
    std::sort(by_flops.begin(), by_flops.end(), [&](size_t a, size_t b) {
        if (result.all[a].flops != result.all[b].flops)
            return result.all[a].flops < result.all[b].flops;
        return result.all[a].accuracy > result.all[b].accuracy;
    });
    double best_acc = -1.0;
    for (size_t idx : by_flops) {
        if (result.all[idx].accuracy > best_acc) {
            best_acc = result.all[idx].accuracy;
            result.pareto.push_back(idx);
        }
    }

    result.best_accuracy = -1.0;
    for (size_t i = 0; i < result.all.size(); ++i) {
        if (cfg.budget > 0 && static_cast<double>(result.all[i].flops) > cfg.budget) continue;
        if (result.all[i].accuracy > result.best_accuracy) {
            result.best_accuracy = result.all[i].accuracy;
            result.best_index = i;
        }
    }
    return result;
}

TrainResult finetune(BackboneParams& params, const CompressionSchedule& schedule,
                     const ToyDataset& train, const ToyDataset& val,
                     const FinetuneConfig& cfg) {
    schedule.validate();
    TrainConfig tc;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.lr = cfg.lr;
    tc.min_lr = cfg.min_lr;
    tc.cosine = true;
    tc.weight_decay = 0.0;
    tc.label_smoothing = cfg.label_smoothing;
    tc.aug_noise = cfg.aug_noise;
    tc.seed = cfg.seed;
    tc.threads = cfg.threads;
    ForwardOptions fw;
    return train_model(params, train, val, tc, &schedule, fw);
}

}  // namespace diffrate
