#pragma once

// Transformer building blocks over the autodiff kernel. All functions are
// stateless; weights are passed in as views onto a ParamStore.

#include <cstddef>
#include <string>
#include <vector>

#include "mrdetr/ops.hpp"
#include "mrdetr/param.hpp"

namespace mrdetr::nn {

using ad::Tensor;

struct Linear {
    Tensor w;  // [in × out]
    Tensor b;  // [out]
    Tensor operator()(const Tensor& x) const { return ad::matmul(x, w) + b; }
};

struct Norm {
    Tensor gamma, beta;
    double eps = 1e-10;
    Tensor operator()(const Tensor& x) const { return ad::layer_norm(x, -1, eps) * gamma + beta; }
};

struct AttentionWeights {
    Linear q, k, v, o;
};

// Attention sub-block: weights plus the post-norm applied after the residual.
struct AttentionBlock {
    AttentionWeights attn;
    Norm norm;
};

struct Ffn {
    Linear in, out;
    Tensor operator()(const Tensor& x) const { return out(ad::relu(in(x))); }
};

struct FfnBlock {
    Ffn ffn;
    Norm norm;
};

// Row-stochastic attention probabilities averaged over heads.
struct AttentionProbe {
    std::vector<double> mean_probs;
    std::size_t rows = 0, cols = 0;
};

// Standard multi-head attention: softmax(QKᵀ/√d_head)·V per head, then the
// output projection. query/key carry positional terms; value does not.
Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value,
                            const AttentionWeights& w, std::size_t heads, AttentionProbe* probe = nullptr);

// Post-norm self-attention over object queries: norm(q + SA(q + pos, q + pos, q)).
Tensor self_attention_block(const Tensor& q, const Tensor& q_pos, const AttentionBlock& blk, std::size_t heads,
                            AttentionProbe* probe = nullptr);

// Instruction tokens are prepended before the object queries, attention runs
// over the m+n sequence with the same weights, and the first m output rows are
// dropped before the residual add and norm. An undefined or empty `ins`
// reduces exactly to self_attention_block.
Tensor instructive_self_attention(const Tensor& q, const Tensor& q_pos, const Tensor& ins, const AttentionBlock& blk,
                                  std::size_t heads, AttentionProbe* probe = nullptr);

// Post-norm cross-attention: norm(q + CA(q + q_pos, mem + mem_pos, mem)).
Tensor cross_attention_block(const Tensor& q, const Tensor& q_pos, const Tensor& memory, const Tensor& memory_pos,
                             const AttentionBlock& blk, std::size_t heads);

struct MoeTrace {
    std::vector<std::size_t> expert_counts;  // tokens routed to each expert
    std::size_t tokens = 0;
    std::size_t k = 0;
};

struct MoeOutput {
    Tensor out;
    // Differentiable load-balancing term t·Σ f_e·P̄_e (only when requested).
    Tensor balance;
};

// Top-k gated mixture: c = softmax(gate(x)); each token sums c_i·e_i(x) over
// its k highest-scoring experts (ties to the lower index), c not renormalized.
MoeOutput moe_block(const Tensor& x, const Linear& gate, const std::vector<Ffn>& experts, std::size_t k,
                    MoeTrace* trace = nullptr, bool with_balance = false);

// Indices of the k largest entries, ties to the lower index, in rank order.
std::vector<std::size_t> top_k_indices(const double* scores, std::size_t n, std::size_t k);

// 2-D sine positional encoding of normalized (x, y) centers → [tokens × d].
Tensor sine_position_encoding(const std::vector<std::pair<double, double>>& centers, std::size_t d,
                              double temperature = 10000.0);

}  // namespace mrdetr::nn
