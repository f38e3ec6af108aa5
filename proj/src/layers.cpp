#include "mrdetr/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mrdetr::nn {

Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value, const AttentionWeights& w,
                            std::size_t heads, AttentionProbe* probe) {
    const std::size_t d = w.q.w.dim(1);
    if (heads == 0 || d % heads != 0)
        throw ad::ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                             " heads");
    if (key.dim(0) != value.dim(0)) throw ad::ShapeError("attention: key/value length mismatch");
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const Tensor q = w.q(query), k = w.k(key), v = w.v(value);
    if (probe) {
        probe->rows = query.dim(0);
        probe->cols = key.dim(0);
        probe->mean_probs.assign(probe->rows * probe->cols, 0.0);
    }
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = heads == 1 ? q : ad::slice(q, 1, h * dh, (h + 1) * dh);
        Tensor kh = heads == 1 ? k : ad::slice(k, 1, h * dh, (h + 1) * dh);
        Tensor vh = heads == 1 ? v : ad::slice(v, 1, h * dh, (h + 1) * dh);
        Tensor a = ad::softmax(ad::scale(ad::matmul(qh, kh, true), scale), -1);
        if (probe)
            for (std::size_t i = 0; i < a.size(); ++i) probe->mean_probs[i] += a.at(i) / static_cast<double>(heads);
        outs.push_back(ad::matmul(a, vh));
    }
    return w.o(heads == 1 ? outs[0] : ad::concat(outs, 1));
}

Tensor self_attention_block(const Tensor& q, const Tensor& q_pos, const AttentionBlock& blk, std::size_t heads,
                            AttentionProbe* probe) {
    const Tensor qk = q + q_pos;
    return blk.norm(q + multi_head_attention(qk, qk, q, blk.attn, heads, probe));
}

Tensor instructive_self_attention(const Tensor& q, const Tensor& q_pos, const Tensor& ins, const AttentionBlock& blk,
                                  std::size_t heads, AttentionProbe* probe) {
    if (!ins.defined()) return self_attention_block(q, q_pos, blk, heads, probe);
    const std::size_t m = ins.dim(0), n = q.dim(0);
    if (ins.dim(1) != q.dim(1)) throw ad::ShapeError("instructive_self_attention: token width mismatch");
    // Instruction tokens carry no positional term.
    const Tensor seq = ad::concat({ins, q}, 0);
    const Tensor seq_qk = ad::concat({ins, q + q_pos}, 0);
    const Tensor all = multi_head_attention(seq_qk, seq_qk, seq, blk.attn, heads, probe);
    const Tensor kept = ad::slice(all, 0, m, m + n);
    return blk.norm(q + kept);
}

Tensor cross_attention_block(const Tensor& q, const Tensor& q_pos, const Tensor& memory, const Tensor& memory_pos,
                             const AttentionBlock& blk, std::size_t heads) {
    return blk.norm(q + multi_head_attention(q + q_pos, memory + memory_pos, memory, blk.attn, heads));
}

std::vector<std::size_t> top_k_indices(const double* scores, std::size_t n, std::size_t k) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    idx.resize(std::min(k, n));
    return idx;
}

MoeOutput moe_block(const Tensor& x, const Linear& gate, const std::vector<Ffn>& experts, std::size_t k,
                    MoeTrace* trace, bool with_balance) {
    const std::size_t t = experts.size();
    if (k < 1 || k > t)
        throw std::invalid_argument("moe_block: k=" + std::to_string(k) + " outside [1," + std::to_string(t) + "]");
    const std::size_t n = x.dim(0), d = x.dim(1);
    const Tensor c = ad::softmax(gate(x), -1);  // [n × t]

    std::vector<std::vector<std::size_t>> routed(t);
    const auto cv = c.values();
    for (std::size_t i = 0; i < n; ++i)
        for (auto e : top_k_indices(cv.data() + i * t, t, k)) routed[e].push_back(i);

    if (trace) {
        trace->expert_counts.assign(t, 0);
        for (std::size_t e = 0; e < t; ++e) trace->expert_counts[e] = routed[e].size();
        trace->tokens = n;
        trace->k = k;
    }

    MoeOutput res;
    Tensor out;
    for (std::size_t e = 0; e < t; ++e) {
        const auto& rows = routed[e];
        if (rows.empty()) continue;
        std::vector<std::size_t> cidx(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) cidx[r] = rows[r] * t + e;
        const Tensor weight = ad::take(c, cidx, {rows.size(), 1});
        const Tensor y = experts[e](ad::index_select_rows(x, rows)) * weight;
        const Tensor scattered = ad::index_add_rows(n, rows, y);
        out = out.defined() ? out + scattered : scattered;
    }
    if (!out.defined()) out = Tensor::zeros({n, d});
    res.out = out;

    if (with_balance) {
        std::vector<double> frac(t);
        for (std::size_t e = 0; e < t; ++e)
            frac[e] = static_cast<double>(routed[e].size()) / static_cast<double>(n * k);
        const Tensor f = Tensor::leaf({t}, std::move(frac));
        res.balance = ad::scale(ad::sum(ad::mean(c, 0) * f), static_cast<double>(t));
    }
    return res;
}

Tensor sine_position_encoding(const std::vector<std::pair<double, double>>& centers, std::size_t d,
                              double temperature) {
    if (d % 4 != 0) throw ad::ShapeError("sine_position_encoding: width must be divisible by 4");
    const std::size_t half = d / 2;
    const double two_pi = 6.283185307179586;
    std::vector<double> v(centers.size() * d);
    for (std::size_t t = 0; t < centers.size(); ++t) {
        const double coords[2] = {centers[t].second * two_pi, centers[t].first * two_pi};  // y then x
        for (std::size_t axis = 0; axis < 2; ++axis)
            for (std::size_t i = 0; i < half; i += 2) {
                const double freq = std::pow(temperature, static_cast<double>(i) / static_cast<double>(half));
                v[t * d + axis * half + i] = std::sin(coords[axis] / freq);
                v[t * d + axis * half + i + 1] = std::cos(coords[axis] / freq);
            }
    }
    return Tensor::leaf({centers.size(), d}, std::move(v));
}

}  // namespace mrdetr::nn
