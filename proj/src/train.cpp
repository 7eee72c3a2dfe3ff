#include "diffrate/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include "diffrate/rng.hpp"

namespace diffrate {

using detail::require;

int resolve_threads(int requested) {
    if (requested > 0) return requested;
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(std::min(hc, 8u));
}

void Adam::init(const std::vector<Tensor*>& params) {
    m.clear();
    v.clear();
    for (Tensor* p : params) {
        m.emplace_back(p->data().size(), 0.0);
        v.emplace_back(p->data().size(), 0.0);
    }
    step_count = 0;
}

void Adam::step(const std::vector<Tensor*>& params, double lr) {
    require(m.size() == params.size(), "Adam: parameter list changed size");
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor* p = params[i];
        require(p->has_grad(), "Adam: parameter has no gradient");
        const auto& g = p->grad();
        auto& val = p->data_mut();
        for (size_t j = 0; j < val.size(); ++j) {
            m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g[j];
            v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g[j] * g[j];
            double mhat = m[i][j] / bc1;
            double vhat = v[i][j] / bc2;
            // decoupled weight decay
            val[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * val[j]);
        }
        p->zero_grad();
    }
}

std::map<std::string, Tensor> Adam::to_extras(const std::vector<std::string>& names) const {
    require(names.size() == m.size(), "Adam: name list does not match state");
    std::map<std::string, Tensor> out;
    for (size_t i = 0; i < names.size(); ++i) {
        out.emplace("adam.m." + names[i],
                    Tensor({static_cast<int64_t>(m[i].size())}, m[i]));
        out.emplace("adam.v." + names[i],
                    Tensor({static_cast<int64_t>(v[i].size())}, v[i]));
    }
    out.emplace("adam.step", Tensor::scalar(static_cast<double>(step_count)));
    return out;
}

void Adam::from_extras(const std::map<std::string, Tensor>& extras,
                       const std::vector<std::string>& names) {
    m.clear();
    v.clear();
    for (const std::string& name : names) {
        auto im = extras.find("adam.m." + name);
        auto iv = extras.find("adam.v." + name);
        require(im != extras.end() && iv != extras.end(),
                "Adam: checkpoint missing optimizer state for " + name);
        m.push_back(im->second.data());
        v.push_back(iv->second.data());
    }
    auto is = extras.find("adam.step");
    require(is != extras.end(), "Adam: checkpoint missing step counter");
    step_count = static_cast<int64_t>(is->second.value());
}

double cosine_lr(int step, int total_steps, double lr, double min_lr, bool cosine) {
    if (!cosine || total_steps <= 1) return lr;
    double t = static_cast<double>(step) / static_cast<double>(total_steps - 1);
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

std::vector<size_t> epoch_permutation(size_t n, uint64_t seed, int epoch) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng rng(mix_keys(seed, 0x73687566ULL, static_cast<uint64_t>(epoch)));
    for (size_t i = n; i > 1; --i) {
        size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

std::vector<double> augment_image(const std::vector<double>& image, double noise,
                                  uint64_t key) {
    if (noise <= 0.0) return image;
    Rng rng(key);
    std::vector<double> out = image;
    for (double& v : out) v = std::min(1.0, std::max(0.0, v + noise * rng.normal()));
    return out;
}

TrainResult train_model(BackboneParams& params, const ToyDataset& train,
                        const ToyDataset& val, const TrainConfig& cfg,
                        const CompressionSchedule* schedule, const ForwardOptions& fw,
                        Adam* optimizer, int start_epoch, int stop_epoch) {
    require(train.size() > 0, "train: empty dataset");
    require(cfg.batch_size >= 1, "train: batch size must be positive");
    params.set_requires_grad(true);
    std::vector<Tensor*> master = params.params();

    Adam local;
    Adam* opt = optimizer ? optimizer : &local;
    if (!opt->initialized()) {
        opt->weight_decay = cfg.weight_decay;
        opt->init(master);
    }

    const int threads = resolve_threads(cfg.threads);
    const int steps_per_epoch =
        static_cast<int>((train.size() + cfg.batch_size - 1) / cfg.batch_size);
    const int total_steps = steps_per_epoch * cfg.epochs;

    const int last_epoch = stop_epoch < 0 ? cfg.epochs : std::min(cfg.epochs, stop_epoch);
    TrainResult result;
    for (int epoch = start_epoch; epoch < last_epoch; ++epoch) {
        auto perm = epoch_permutation(train.size(), cfg.seed, epoch);
        double epoch_loss = 0.0;
        for (int step = 0; step < steps_per_epoch; ++step) {
            size_t lo = static_cast<size_t>(step) * cfg.batch_size;
            size_t hi = std::min(train.size(), lo + cfg.batch_size);
            const size_t batch = hi - lo;

            std::vector<std::vector<std::vector<double>>> worker_grads(
                static_cast<size_t>(threads));
            std::vector<double> worker_loss(static_cast<size_t>(threads), 0.0);
            auto run_worker = [&](int w) {
                size_t w_lo = lo + (batch * static_cast<size_t>(w)) / threads;
                size_t w_hi = lo + (batch * static_cast<size_t>(w + 1)) / threads;
                if (w_lo >= w_hi) return;
                BackboneParams local_params = params.clone(true);
                std::vector<Tensor> logit_rows;
                std::vector<int> labels;
                for (size_t b = w_lo; b < w_hi; ++b) {
                    size_t i = perm[b];
                    std::vector<double> img = augment_image(
                        train.images[i], cfg.aug_noise,
                        mix_keys(cfg.seed, 0x617567ULL, static_cast<uint64_t>(epoch), i));
                    Tensor logits =
                        schedule ? forward_apply(local_params, img, *schedule, fw).logits
                                 : forward_apply(local_params, img,
                                                 CompressionSchedule::none(
                                                     params.config.token_count,
                                                     params.config.depth),
                                                 fw)
                                       .logits;
                    logit_rows.push_back(logits);
                    labels.push_back(train.labels[i]);
                }
                Tensor loss = cross_entropy(concat_rows(logit_rows), labels,
                                            cfg.label_smoothing);
                // shard contributes its share of the batch mean
                Tensor weighted = scale(
                    loss, static_cast<double>(w_hi - w_lo) / static_cast<double>(batch));
                backward(weighted);
                worker_loss[static_cast<size_t>(w)] = weighted.value();
                auto locals = local_params.params();
                for (Tensor* t : locals)
                    worker_grads[static_cast<size_t>(w)].push_back(t->grad());
            };
            if (threads == 1) {
                run_worker(0);
            } else {
                std::vector<std::thread> pool;
                for (int w = 0; w < threads; ++w) pool.emplace_back(run_worker, w);
                for (auto& t : pool) t.join();
            }

            // reduce in worker order, then update
            std::vector<std::vector<double>> grad_sum;
            for (Tensor* t : master) grad_sum.emplace_back(t->data().size(), 0.0);
            for (int w = 0; w < threads; ++w) {
                if (worker_grads[static_cast<size_t>(w)].empty()) continue;
                for (size_t p = 0; p < master.size(); ++p) {
                    const auto& g = worker_grads[static_cast<size_t>(w)][p];
                    for (size_t j = 0; j < g.size(); ++j) grad_sum[p][j] += g[j];
                }
            }
            for (size_t p = 0; p < master.size(); ++p)
                master[p]->set_grad(std::move(grad_sum[p]));
            double loss_sum = 0.0;
            for (double l : worker_loss) loss_sum += l;
            epoch_loss += loss_sum;

            int global_step = epoch * steps_per_epoch + step;
            double lr = cosine_lr(global_step, total_steps, cfg.lr, cfg.min_lr, cfg.cosine);
            opt->step(master, lr);
        }
        EpochMetrics em;
        em.train_loss = epoch_loss / steps_per_epoch;
        em.val_accuracy =
            val.size() ? evaluate_accuracy(params, val, schedule, fw, threads) : 0.0;
        result.epochs.push_back(em);
    }
    return result;
}

double evaluate_accuracy(const BackboneParams& params, const ToyDataset& data,
                         const CompressionSchedule* schedule, const ForwardOptions& fw,
                         int threads) {
    require(data.size() > 0, "evaluate: empty dataset");
    BackboneParams frozen = params.clone(false);
    const int workers = resolve_threads(threads);
    std::vector<int> correct(static_cast<size_t>(workers), 0);
    auto run_worker = [&](int w) {
        size_t lo = (data.size() * static_cast<size_t>(w)) / workers;
        size_t hi = (data.size() * static_cast<size_t>(w + 1)) / workers;
        for (size_t i = lo; i < hi; ++i) {
            Tensor logits =
                schedule
                    ? forward_apply(frozen, data.images[i], *schedule, fw).logits
                    : forward_apply(frozen, data.images[i],
                                    CompressionSchedule::none(params.config.token_count,
                                                              params.config.depth),
                                    fw)
                          .logits;
            int best = 0;
            for (int64_t j = 1; j < logits.cols(); ++j)
                if (logits.at(0, j) > logits.at(0, best)) best = static_cast<int>(j);
            if (best == data.labels[i]) ++correct[static_cast<size_t>(w)];
        }
    };
    if (workers == 1) {
        run_worker(0);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(run_worker, w);
        for (auto& t : pool) t.join();
    }
    int total = 0;
    for (int c : correct) total += c;
    return static_cast<double>(total) / static_cast<double>(data.size());
}

}  // namespace diffrate
