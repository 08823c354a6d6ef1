#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "glyphdiffuse/tensor.hpp"

namespace gdf {

// Reverse-mode tape. Nodes are appended in execution order, so the list is
// already a topological order and backward is a single reverse sweep that
// touches each node once. A tape belongs to one logical training thread.
template <class S>
class TapeT {
  public:
    struct Node {
        std::vector<int> shape;
        std::vector<int> parents;
        const char* op;
        // Reads grad(self), accumulates into grad(parent). Empty for leaves.
        std::function<void(TapeT&, int)> backward;
    };

    bool recording = true;

    static TapeT inference() {
        TapeT t;
        t.recording = false;
        return t;
    }

    int size() const { return int(nodes_.size()); }
    const Node& node(int id) const { return nodes_[size_t(id)]; }

    // Registers a differentiation target (parameter or input). On an
    // inference tape this detaches instead, so stale node ids from an earlier
    // recording tape cannot leak into new graphs.
    int leaf(TensorT<S>& t) {
        if (!recording) {
            t.requires_grad = false;
            t.node = -1;
            return -1;
        }
        t.requires_grad = true;
        t.node = emit(t.shape, {}, "leaf", nullptr);
        return t.node;
    }

    int emit(std::vector<int> shape, std::vector<int> parents, const char* op,
             std::function<void(TapeT&, int)> backward) {
        nodes_.push_back(Node{std::move(shape), std::move(parents), op, std::move(backward)});
        return int(nodes_.size()) - 1;
    }

    // Gradient buffer for a node, allocated to zeros on first touch.
    std::vector<S>& grad(int id) {
        auto& g = grads_[size_t(id)];
        if (g.empty()) g.assign(size_t(numel_of(nodes_[size_t(id)].shape)), S(0));
        return g;
    }

    bool grad_touched(int id) const { return !grads_[size_t(id)].empty(); }

    // dLoss/d(everything reachable). Loss must be scalar; a constant loss
    // (no tape node) is legal and leaves every gradient at zero.
    void backward(const TensorT<S>& loss) {
        if (loss.numel() != 1)
            throw contract_error("backward target must be scalar, got shape " +
                                 shape_str(loss.shape));
        grads_.assign(nodes_.size(), {});
        if (loss.node < 0) return;
        grad(loss.node)[0] = S(1);
        for (int id = loss.node; id >= 0; --id) {
            if (!grad_touched(id)) continue;
            if (nodes_[size_t(id)].backward) nodes_[size_t(id)].backward(*this, id);
        }
    }

    // Gradient of the last backward() w.r.t. the given node; zero tensor for
    // nodes the loss never reached.
    TensorT<S> gradient(int id) {
        if (id < 0 || id >= size()) throw contract_error("gradient(): bad node id");
        return TensorT<S>(nodes_[size_t(id)].shape, grad(id));
    }

    std::map<int, TensorT<S>> gradients() {
        std::map<int, TensorT<S>> out;
        for (int id = 0; id < size(); ++id)
            if (grad_touched(id)) out.emplace(id, gradient(id));
        return out;
    }

    void reset() {
        nodes_.clear();
        grads_.clear();
    }

  private:
    std::vector<Node> nodes_;
    std::vector<std::vector<S>> grads_;
};

using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

}  // namespace gdf
