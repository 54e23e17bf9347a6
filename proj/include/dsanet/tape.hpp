#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "dsanet/tensor.hpp"

namespace dsanet {

// Reverse-mode tape. Every primitive that can propagate a gradient appends one
// node holding its output payload and a backward closure; backward() replays
// the closures in exact reverse execution order. A tape belongs to one logical
// thread. A non-recording tape turns the same op entry points into plain
// forward evaluation with nothing saved.
template <typename T>
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    void set_recording(bool b) { recording_ = b; }

    void record(std::shared_ptr<TensorData<T>> out, std::function<void()> back) {
        nodes_.push_back(Node{std::move(out), std::move(back)});
    }

    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }

    // Gradients of leaves (parameters, inputs) accumulate additively across
    // calls; intermediate grads are re-zeroed per call so replaying twice
    // yields exactly twice the leaf gradients.
    void backward(const Tensor<T>& loss) {
        DSANET_CHECK(loss.numel() == 1, UsageError, "backward expects a scalar loss, got shape ",
                     shape_str(loss.shape()));
        DSANET_CHECK(!nodes_.empty(), UsageError, "backward on an empty tape");
        for (auto& n : nodes_) {
            n.out->ensure_grad();
            n.out->zero_grad();
        }
        auto lp = loss.payload();
        lp->ensure_grad();
        lp->grad[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
    }

    void clear() { nodes_.clear(); }

private:
    struct Node {
        std::shared_ptr<TensorData<T>> out;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;
    bool recording_ = true;
};

}  // namespace dsanet
