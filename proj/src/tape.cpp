#include "soap/tape.hpp"

#include <atomic>
#include <stdexcept>

namespace soap {

namespace {
thread_local Tape* g_active = nullptr;
std::atomic<std::uint64_t> g_generation{1};
}  // namespace

Tape::Tape() : gen_(g_generation.fetch_add(1)) {
    if (g_active != nullptr) {
        throw std::logic_error("Tape: another tape is already active on this thread");
    }
    g_active = this;
}

Tape::~Tape() {
    if (g_active == this) g_active = nullptr;
}

Tape* Tape::active() noexcept { return g_active; }

void Tape::watch(Tensor& param) {
    param.node_id = attach({}, nullptr, param.shape());
}

GradHandle Tape::attach(std::vector<int> inputs, BackwardFn fn, const Shape& out_shape) {
    if (in_backward_) {
        throw std::logic_error("Tape: attempted to record a node during backward");
    }
    for (int id : inputs) {
        if (id < 0 || id >= static_cast<int>(nodes_.size())) {
            throw std::logic_error("Tape: input node id out of range");
        }
    }
    nodes_.push_back(Node{std::move(inputs), std::move(fn), out_shape});
    return GradHandle{gen_, static_cast<int>(nodes_.size()) - 1};
}

int Tape::node_of(const Tensor& t) const noexcept {
    return t.node_id.gen == gen_ ? t.node_id.node : -1;
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    int root = node_of(loss);
    if (root < 0) {
        throw std::invalid_argument("backward: loss is not connected to the active tape");
    }
    grads_.assign(nodes_.size(), Tensor());
    grads_[root] = Tensor::ones(loss.shape());

    in_backward_ = true;
    for (int id = root; id >= 0; --id) {
        if (grads_[id].size() == 0) continue;
        const Node& node = nodes_[id];
        if (!node.backward) continue;
        std::vector<Tensor> input_grads = node.backward(grads_[id]);
        if (input_grads.size() != node.inputs.size()) {
            in_backward_ = false;
            throw std::logic_error("Tape: backward fn returned wrong number of gradients");
        }
        for (std::size_t j = 0; j < input_grads.size(); ++j) {
            Tensor& g = input_grads[j];
            if (g.size() == 0) continue;
            int target = node.inputs[j];
            if (g.shape() != nodes_[target].shape) {
                in_backward_ = false;
                throw std::logic_error("Tape: gradient shape " + shape_str(g.shape()) +
                                       " does not match node shape " + shape_str(nodes_[target].shape));
            }
            Tensor& acc = grads_[target];
            if (acc.size() == 0) {
                acc = std::move(g);
            } else {
                double* a = acc.data();
                const double* b = g.data();
                for (std::size_t i = 0; i < acc.size(); ++i) a[i] += b[i];
            }
        }
        // saved activations are no longer needed once the node has fired
        nodes_[id].backward = nullptr;
    }
    in_backward_ = false;
    ran_ = true;
}

Tensor Tape::grad_of(const Tensor& t) const {
    int id = node_of(t);
    if (id < 0) {
        throw std::invalid_argument("grad_of: tensor is not tracked on this tape");
    }
    if (!ran_) {
        throw std::logic_error("grad_of: backward has not run");
    }
    if (grads_[id].size() == 0) return Tensor::zeros(nodes_[id].shape);
    return grads_[id];
}

}  // namespace soap
