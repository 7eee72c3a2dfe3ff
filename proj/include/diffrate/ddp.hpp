// Differentiable discrete proxy for compression rates: learnable logits over
// the candidate rate set {(k-1)/N}, expected rate, per-rank compression
// probabilities, hard 0/1 masks with straight-through gradients, mask
// combination across blocks, and attention masking.
#pragma once

#include <cstdint>
#include <vector>

#include "diffrate/tensor.hpp"

namespace diffrate {

struct RateParam {
    enum class Role { Prune, Merge };

    Tensor logits;  // [n] leaf, one entry per candidate rate C_k = (k-1)/n
    int n = 0;
    int block = 0;
    Role role = Role::Prune;

    static RateParam uniform(int n, Role role, int block);
    // one-hot at candidate k (1-based) with the given logit gap
    static RateParam one_hot(int n, int k, Role role, int block, double gap = 800.0);
};

// softmax of the logits; a point on the simplex
Tensor rate_probs(const RateParam& rp);

// alpha = sum_k C_k rho_k, the expected compression rate
Tensor expected_rate(const Tensor& rho);

// pi_1 = 0, pi_k = rho_{N+2-k} + ... + rho_N: probability that the k-th most
// important token is compressed; non-decreasing in k
Tensor token_probs(const Tensor& rho);

// Hard rank mask: m_k = 1 iff pi_k < alpha, except alpha == 0 keeps every
// token. Backward treats dm/dpi as 1 (straight-through).
Tensor token_mask(const Tensor& pi, double alpha_value);

// Elementwise product of the previous block's mask (re-indexed into the
// current ranking) with the pruning and merging masks.
Tensor combine_masks(const Tensor& m_prev, const Tensor& m_p, const Tensor& m_m);

// M_ij = 1 if i = j else m_j; keeps every token attending to itself while
// hiding dropped tokens from everyone else
Tensor attention_mask(const Tensor& m_tok);

// S_ij -> exp(S_ij) M_ij / sum_k exp(S_ik) M_ik with row-max stabilisation
// over the surviving entries; differentiable in both S and M
Tensor masked_softmax(const Tensor& scores, const Tensor& mask);

// Number of leading ones in a 0/1 rank mask (validates the prefix property).
int mask_prefix_count(const Tensor& mask);

}  // namespace diffrate
