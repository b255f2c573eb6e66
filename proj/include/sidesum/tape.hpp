#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sidesum/tensor.hpp"

namespace sidesum::nd {

// Handle into a Tape.
struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

struct LrnParams {
    double kappa = 2.0;
    double alpha = 1e-4;
    double beta = 0.75;
    int radius = 2;
};

// Append-only record of a computation. Ops push nodes in topological order;
// backward() runs one reverse sweep over the record, accumulating gradients
// in fixed order (deterministic for identical records).
//
// Every op checks its output for NaN/Inf and throws on non-finite values.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaf node (parameter or input constant).
    Var leaf(Tensor value);

    // Elementwise; binary ops require equal shapes.
    Var add(Var a, Var b);
    Var mul(Var a, Var b);
    Var sigmoid(Var a);
    Var tanh(Var a);
    Var softplus(Var a);

    // [m x k] * [k x n] -> [m x n]
    Var matmul(Var a, Var b);
    // [m x k] * [k] -> [m]
    Var matvec(Var m, Var v);
    // [k] . [k] -> scalar
    Var dot(Var a, Var b);

    // Concatenate scalars and/or 1-D tensors into one vector.
    Var concat(std::span<const Var> parts);
    // [len] slice of a 1-D tensor.
    Var slice(Var v, std::size_t start, std::size_t len);
    // Drop axis 0 at index i: [a x b x ...] -> [b x ...]; [n] -> scalar.
    Var index0(Var t, std::size_t i);
    // Gather rows of a matrix; backward scatter-adds (ids may repeat).
    Var rows(Var m, std::span<const std::int32_t> ids);
    // scalar * tensor
    Var scale(Var s, Var t);
    // Mean of scalars.
    Var average(std::span<const Var> scalars);

    // Vector [c] -> probability vector [c]; max-subtracted exp normalization.
    Var softmax(Var z);
    // -ln(p[label]), p clamped to >= 1e-12 before the log.
    Var cross_entropy(Var p, std::size_t label);

    // Narrow convolution with softplus activation:
    // f_i = softplus(sum(kernel (.) input[i:i+h-1]) + bias), i = 0..k-h.
    // input [k x d], kernel [h x d], bias scalar -> [k-h+1].
    Var temporal_conv(Var input, Var kernel, Var bias);
    // Max element of a non-empty vector; gradient to the first argmax.
    Var max_over_time(Var f);
    // v_i / (kappa + alpha * sum_{|j-i|<=radius} v_j^2)^beta over a vector.
    Var lrn(Var v, const LrnParams& p = {});

    const Tensor& value(Var v) const { return nodes_[check(v)].value; }
    const Tensor& grad(Var v) const;

    // Reverse sweep from a scalar loss. One pass per tape.
    void backward(Var loss);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        const char* op;
        std::vector<std::int32_t> inputs;
        Tensor value;
        Tensor grad;
        // Accumulates this node's grad into its inputs' grads.
        std::function<void(Tape&, const Node&)> backprop;
    };

    std::vector<Node> nodes_;
    bool swept_ = false;

    std::int32_t check(Var v) const;
    Var push(const char* op, std::vector<std::int32_t> inputs, Tensor value,
             std::function<void(Tape&, const Node&)> backprop);
    Tensor& grad_of(std::int32_t id) { return nodes_[id].grad; }
};

struct LstmWeights {
    Var w;  // [4h x (h + in)], gate rows packed (f, i, o, c~)
    Var b;  // [4h]
};

struct LstmState {
    Var h;
    Var c;
};

// One LSTM step, composed from tape primitives:
//   [f;i;o;c~] = [sigmoid;sigmoid;sigmoid;tanh](W [h_prev; x] + b)
//   c = f (.) c_prev + i (.) c~ ,  h = o (.) tanh(c)
LstmState lstm_cell(Tape& tape, Var x, LstmState prev, const LstmWeights& w);

// Zero-vector initial state of the given size.
LstmState lstm_zero_state(Tape& tape, std::size_t hidden);

}  // namespace sidesum::nd
