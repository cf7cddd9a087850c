#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "soap/rng.hpp"
#include "soap/tape.hpp"
#include "soap/tensor.hpp"

namespace soap {

// Named view over a model's learnable tensors. The registry does not own the
// tensors; it keeps stable pointers into the owning module structs, in
// registration order.
class ParamRegistry {
public:
    struct Item {
        std::string name;
        Tensor* tensor;
    };

    void add(const std::string& name, Tensor& t);
    const std::vector<Item>& items() const { return items_; }
    std::size_t count() const { return items_.size(); }
    std::size_t total_size() const;
    Tensor* find(const std::string& name);
    const Tensor* find(const std::string& name) const;

    void watch_all(Tape& tape);

private:
    std::vector<Item> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

// uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]
void init_uniform_fan_in(Tensor& w, std::size_t fan_in, Rng& rng);

class SgdOptimizer {
public:
    SgdOptimizer(double learning_rate, double momentum = 0.0)
        : lr_(learning_rate), momentum_(momentum) {}

    // applies one step using gradients recorded on the tape
    void step(ParamRegistry& params, const Tape& tape);

    double learning_rate() const { return lr_; }
    double momentum() const { return momentum_; }

private:
    double lr_;
    double momentum_;
    std::unordered_map<std::string, std::vector<double>> velocity_;
};

}  // namespace soap
