#include "mrdetr/param.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mrdetr::ad {

Tensor& ParamStore::add(const std::string& name, Shape shape, std::vector<double> values, bool trainable) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = params_.size();
    params_.push_back(Param{Tensor::leaf(std::move(shape), std::move(values), trainable), name, trainable});
    return params_.back().tensor;
}

Param& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
}

const Param& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (auto& p : params_) n += p.tensor.size();
    return n;
}

void ParamStore::set_trainable(const std::string& name, bool on) {
    auto& p = get(name);
    p.trainable = on;
    p.tensor.node()->requires_grad = on;
    if (!on) p.tensor.zero_grad();
}

void ParamStore::freeze_all() {
    for (auto& p : params_) set_trainable(p.name, false);
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

std::map<std::string, std::vector<double>> ParamStore::gradients() const {
    std::map<std::string, std::vector<double>> out;
    for (auto& p : params_) out[p.name] = p.tensor.grad();
    return out;
}

std::map<std::string, std::vector<double>> backward(const Tensor& loss, const ParamStore& store) {
    ad::backward(loss);
    return store.gradients();
}

GradCheckResult grad_check(const std::function<Tensor()>& f, ParamStore& params, const GradCheckOptions& opts) {
    if (!(opts.eps > 0)) throw std::invalid_argument("grad_check: eps must be positive");
    params.zero_grad();
    Tensor loss = f();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss at base point");
    backward(loss);

    GradCheckResult res;
    for (auto& p : params.params()) {
        if (!p.trainable) continue;
        const std::vector<double> analytic = p.tensor.grad();
        auto vals = p.tensor.mutable_values();
        const std::size_t n = vals.size();
        std::size_t stride = 1;
        if (opts.max_coords_per_param > 0 && n > opts.max_coords_per_param)
            stride = (n + opts.max_coords_per_param - 1) / opts.max_coords_per_param;
        for (std::size_t i = 0; i < n; i += stride) {
            const double orig = vals[i];
            double fp, fm;
            {
                NoGradGuard ng;
                vals[i] = orig + opts.eps;
                fp = f().item();
                vals[i] = orig - opts.eps;
                fm = f().item();
                vals[i] = orig;
            }
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("grad_check: non-finite loss probing " + p.name + "[" + std::to_string(i) + "]");
            const double numeric = (fp - fm) / (2.0 * opts.eps);
            const double a = analytic[i];
            const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
            const double rel = std::fabs(a - numeric) / denom;
            ++res.coords_checked;
            if (rel > res.max_rel_error || res.worst_param.empty()) {
                if (rel >= res.max_rel_error) {
                    res.max_rel_error = rel;
                    res.worst_param = p.name;
                    res.worst_index = i;
                    res.analytic = a;
                    res.numeric = numeric;
                }
            }
        }
    }
    params.zero_grad();
    return res;
}

}  // namespace mrdetr::ad
