#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mrdetr/tensor.hpp"

namespace mrdetr::ad {

struct Param {
    Tensor tensor;
    std::string name;
    bool trainable = true;
};

// Ordered, name-unique parameter registry. Insertion order is the canonical
// order for optimizers and checkpoints.
class ParamStore {
public:
    Tensor& add(const std::string& name, Shape shape, std::vector<double> values, bool trainable = true);

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Param& get(const std::string& name);
    const Param& get(const std::string& name) const;
    Tensor& tensor(const std::string& name) { return get(name).tensor; }
    const Tensor& tensor(const std::string& name) const { return get(name).tensor; }

    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;

    void set_trainable(const std::string& name, bool on);
    void freeze_all();
    void zero_grad();

    // Leaf gradients keyed by name; exact zeros for unreached leaves.
    std::map<std::string, std::vector<double>> gradients() const;

private:
    std::vector<Param> params_;
    std::map<std::string, std::size_t> index_;
};

// Runs backward and returns the gradient map over `store`.
std::map<std::string, std::vector<double>> backward(const Tensor& loss, const ParamStore& store);

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coords_checked = 0;
};

struct GradCheckOptions {
    double eps = 1e-5;
    // 0 → every coordinate; otherwise a deterministic stride subsample per param.
    std::size_t max_coords_per_param = 0;
};

// Max over checked coordinates of |analytic − numeric| / max(1, |analytic|, |numeric|)
// with central differences. `f` must rebuild its graph from the store's
// current values on every call.
GradCheckResult grad_check(const std::function<Tensor()>& f, ParamStore& params, const GradCheckOptions& opts = {});

}  // namespace mrdetr::ad
