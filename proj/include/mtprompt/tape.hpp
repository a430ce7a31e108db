#pragma once

#include <functional>
#include <vector>

#include "mtprompt/tensor.hpp"

namespace mtp {

// Define-by-run gradient tape. Ops append one entry per executed node, so
// replaying the entries back to front visits the graph in exact reverse
// execution order; every input of an op was recorded (or is a leaf) before
// the op itself.
//
// backward() zeroes the grads of all tape-produced nodes, seeds the loss and
// replays. Leaf grads are left untouched, so gradients accumulate additively
// across backward calls until the caller zeroes them.
template <typename T>
class Tape {
public:
    void push(const Tensor<T>& out, std::function<void()> fn) {
        entries_.push_back(Entry{out, std::move(fn)});
    }

    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }

    size_t num_entries() const { return entries_.size(); }

    void backward(const Tensor<T>& loss, T seed = T(1)) {
        if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar");
        if (loss.producer_tape() != this)
            throw ContractError("backward: loss was not produced on this tape");
        for (auto& e : entries_) {
            if (e.out.grad_allocated()) e.out.zero_grad();
            else e.out.ensure_grad(); // allocation zero-fills
        }
        Tensor<T> l = loss;
        l.grad()[0] = seed;
        replay();
    }

    // Continuation backward for a tape whose outputs already received grads
    // from a downstream tape. No zeroing, no seeding.
    void replay() {
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
    }

    void clear() { entries_.clear(); }

private:
    struct Entry {
        Tensor<T> out;
        std::function<void()> fn;
    };
    std::vector<Entry> entries_;
    bool recording_ = true;
};

// Marks `out` as a differentiable product of `tape` and records its backward
// closure. Called by every op after computing the forward value.
template <typename T, typename Fn>
void record(Tape<T>& tape, Tensor<T>& out, Fn&& fn) {
    out.set_requires_grad(true);
    out.mark_on_tape(&tape);
    tape.push(out, std::forward<Fn>(fn));
}

template <typename T>
bool needs_tape(const Tape<T>& tape, const Tensor<T>& a) {
    return tape.recording() && a.requires_grad();
}

template <typename T>
bool needs_tape(const Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    return tape.recording() && (a.requires_grad() || b.requires_grad());
}

template <typename T>
bool needs_tape(const Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) {
    return tape.recording() && (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

} // namespace mtp
