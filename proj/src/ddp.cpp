#include "diffrate/ddp.hpp"

#include <cmath>

namespace diffrate {

using detail::make_op;
using detail::require;

RateParam RateParam::uniform(int n, Role role, int block) {
    require(n >= 2, "RateParam: candidate count must be at least 2");
    RateParam rp;
    rp.logits = Tensor({n}, 0.0, true);
    rp.n = n;
    rp.block = block;
    rp.role = role;
    return rp;
}

RateParam RateParam::one_hot(int n, int k, Role role, int block, double gap) {
    require(k >= 1 && k <= n, "RateParam::one_hot: candidate index out of range");
    RateParam rp = uniform(n, role, block);
    rp.logits.data_mut()[static_cast<size_t>(k - 1)] = gap;
    return rp;
}

Tensor rate_probs(const RateParam& rp) { return row_softmax(rp.logits); }

Tensor expected_rate(const Tensor& rho) {
    require(rho.shape().size() == 1, "expected_rate: rho must be rank-1");
    const int64_t n = rho.size();
    std::vector<double> rates(static_cast<size_t>(n));
    for (int64_t k = 0; k < n; ++k) rates[k] = static_cast<double>(k) / static_cast<double>(n);
    return sum_all(mul(rho, Tensor({n}, std::move(rates))));
}

Tensor token_probs(const Tensor& rho) {
    require(rho.shape().size() == 1, "token_probs: rho must be rank-1");
    detail::check_finite(rho, "token_probs");
    const int64_t n = rho.size();
    // pi[j] = sum_{i >= n-j} rho[i] (0-indexed), pi[0] = 0
    std::vector<double> pi(static_cast<size_t>(n), 0.0);
    double acc = 0.0;
    for (int64_t j = 1; j < n; ++j) {
        acc += rho.at(n - j);
        pi[j] = acc;
    }
    return make_op({n}, std::move(pi), {rho}, [n](detail::OpCtx& ctx) {
        auto* g = ctx.input_grad(0);
        if (!g) return;
        // d pi[j] / d rho[i] = 1 iff i >= n - j, so grad rho[i] sums g_pi[j]
        // over j >= n - i
        double acc = 0.0;
        for (int64_t i = n - 1; i >= 1; --i) {
            acc += ctx.out_grad[i];
            (*g)[n - i] += acc;
        }
    });
}

Tensor token_mask(const Tensor& pi, double alpha_value) {
    require(pi.shape().size() == 1, "token_mask: pi must be rank-1");
    require(alpha_value >= 0.0 && alpha_value < 1.0, "token_mask: alpha must be in [0,1)");
    const int64_t n = pi.size();
    std::vector<double> hard(static_cast<size_t>(n));
    for (int64_t k = 0; k < n; ++k) {
        hard[k] = (alpha_value == 0.0 || pi.at(k) < alpha_value) ? 1.0 : 0.0;
    }
    return ste_passthrough(Tensor({n}, std::move(hard)), pi);
}

Tensor combine_masks(const Tensor& m_prev, const Tensor& m_p, const Tensor& m_m) {
    require(m_prev.same_shape(m_p) && m_p.same_shape(m_m),
            "combine_masks: mask lengths differ");
    return mul(mul(m_prev, m_p), m_m);
}

Tensor attention_mask(const Tensor& m_tok) {
    require(m_tok.shape().size() == 1, "attention_mask: mask must be rank-1");
    detail::check_finite(m_tok, "attention_mask");
    const int64_t n = m_tok.size();
    std::vector<double> out(static_cast<size_t>(n * n));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) out[i * n + j] = (i == j) ? 1.0 : m_tok.at(j);
    return make_op({n, n}, std::move(out), {m_tok}, [n](detail::OpCtx& ctx) {
        auto* g = ctx.input_grad(0);
        if (!g) return;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j)
                if (i != j) (*g)[j] += ctx.out_grad[i * n + j];
    });
}

Tensor masked_softmax(const Tensor& scores, const Tensor& mask) {
    require(scores.shape().size() == 2 && scores.rows() == scores.cols(),
            "masked_softmax: scores must be square");
    require(mask.same_shape(scores), "masked_softmax: mask shape " +
                                         detail::shape_str(mask.shape()) + " vs scores " +
                                         detail::shape_str(scores.shape()));
    detail::check_finite(scores, "masked_softmax");
    detail::check_finite(mask, "masked_softmax");
    const int64_t n = scores.rows();
    std::vector<double> probs(static_cast<size_t>(n * n), 0.0);
    // ratio[i,j] = exp(S_ij - rowmax) / Z_i, kept for the mask gradient
    auto ratio = std::make_shared<std::vector<double>>(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        require(mask.at(i, i) > 0.0, "masked_softmax: mask diagonal must be positive");
        double mx = scores.at(i, i);  // diagonal always survives
        for (int64_t j = 0; j < n; ++j)
            if (mask.at(i, j) > 0.0) mx = std::max(mx, scores.at(i, j));
        double z = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            double e = std::exp(scores.at(i, j) - mx);
            (*ratio)[i * n + j] = e;
            z += e * mask.at(i, j);
        }
        for (int64_t j = 0; j < n; ++j) {
            (*ratio)[i * n + j] /= z;
            probs[i * n + j] = (*ratio)[i * n + j] * mask.at(i, j);
        }
    }
    return make_op(scores.shape(), std::move(probs), {scores, mask},
                   [n, ratio](detail::OpCtx& ctx) {
                       const auto& g = ctx.out_grad;
                       const auto& y = ctx.out_val;
                       auto* gs = ctx.input_grad(0);
                       auto* gm = ctx.input_grad(1);
                       for (int64_t i = 0; i < n; ++i) {
                           double dot = 0.0;
                           for (int64_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                           for (int64_t j = 0; j < n; ++j) {
                               double centered = g[i * n + j] - dot;
                               if (gs) (*gs)[i * n + j] += y[i * n + j] * centered;
                               if (gm) (*gm)[i * n + j] += (*ratio)[i * n + j] * centered;
                           }
                       }
                   });
}

int mask_prefix_count(const Tensor& mask) {
    int count = 0;
    for (int64_t k = 0; k < mask.size(); ++k) {
        if (mask.at(k) == 1.0) {
            require(count == static_cast<int>(k), "mask_prefix_count: mask is not a prefix");
            ++count;
        }
    }
    return count;
}

}  // namespace diffrate
