#pragma once

#include <functional>
#include <vector>

#include "soap/tensor.hpp"

namespace soap {

// Reverse-mode differentiation tape. One tape per training step, confined to
// a single thread; the constructor registers it as the thread's active tape.
// Operations in ops.cpp record themselves while a tape is active and any of
// their inputs is tracked. Closures must only use raw kernels, never public
// ops, so nothing records during backward().
class Tape {
public:
    // returns gradients aligned with the node's recorded inputs; an empty
    // tensor at position j means no gradient flows to input j
    using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() noexcept;

    // register a leaf (parameter). Assigns the tensor a node on this tape.
    void watch(Tensor& param);

    // record an op node; inputs are node ids on this tape
    GradHandle attach(std::vector<int> inputs, BackwardFn fn, const Shape& out_shape);

    // node id of t on this tape, -1 if untracked or from another tape
    int node_of(const Tensor& t) const noexcept;

    // reverse accumulation from a scalar loss
    void backward(const Tensor& loss);
    bool has_run_backward() const noexcept { return ran_; }

    // gradient for a tracked tensor; zeros if backward never reached it
    Tensor grad_of(const Tensor& t) const;

    std::size_t node_count() const noexcept { return nodes_.size(); }
    std::uint64_t generation() const noexcept { return gen_; }

private:
    struct Node {
        std::vector<int> inputs;
        BackwardFn backward;
        Shape shape;
    };

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    bool ran_ = false;
    bool in_backward_ = false;
    std::uint64_t gen_;
};

}  // namespace soap
