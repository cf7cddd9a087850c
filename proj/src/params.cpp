#include "soap/params.hpp"

#include <cmath>
#include <stdexcept>

namespace soap {

void ParamRegistry::add(const std::string& name, Tensor& t) {
    if (index_.count(name)) {
        throw std::invalid_argument("ParamRegistry: duplicate parameter name " + name);
    }
    index_[name] = items_.size();
    items_.push_back(Item{name, &t});
}

std::size_t ParamRegistry::total_size() const {
    std::size_t n = 0;
    for (const Item& it : items_) n += it.tensor->size();
    return n;
}

Tensor* ParamRegistry::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].tensor;
}

const Tensor* ParamRegistry::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].tensor;
}

void ParamRegistry::watch_all(Tape& tape) {
    for (Item& it : items_) tape.watch(*it.tensor);
}

void init_uniform_fan_in(Tensor& w, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
}

void SgdOptimizer::step(ParamRegistry& params, const Tape& tape) {
    for (auto& item : params.items()) {
        Tensor grad = tape.grad_of(*item.tensor);
        double* p = item.tensor->data();
        const double* g = grad.data();
        const std::size_t n = item.tensor->size();
        if (momentum_ != 0.0) {
            auto& vel = velocity_[item.name];
            if (vel.size() != n) vel.assign(n, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                vel[i] = momentum_ * vel[i] + g[i];
                p[i] -= lr_ * vel[i];
            }
        } else {
            for (std::size_t i = 0; i < n; ++i) p[i] -= lr_ * g[i];
        }
    }
}

}  // namespace soap
