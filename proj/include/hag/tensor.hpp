#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "hag/random.hpp"

namespace hag {

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ValueError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class GradTape;

// Dense row-major tensor of 64-bit floats. Value semantics with a shared
// data buffer; ops never mutate their inputs. A tensor may carry a handle
// into the gradient tape that produced it (node >= 0).
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor scalar(double value);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    static Tensor vector(std::vector<double> data);
    // Uniform Glorot init over [-sqrt(6/(fan_in+fan_out)), +).
    static Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const { return shape_.size() >= 2 ? shape_[1] : 1; }
    bool is_matrix() const { return shape_.size() == 2; }
    std::string shape_str() const;

    double operator()(std::size_t i, std::size_t j) const { return (*data_)[i * cols() + j]; }
    double operator[](std::size_t i) const { return (*data_)[i]; }
    double item() const;

    const std::vector<double>& values() const { return *data_; }
    std::vector<double>& mutable_values() { return *data_; }
    const void* buffer_id() const { return data_.get(); }
    // Deep copy with a fresh buffer, detached from any tape.
    Tensor clone() const;

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool v) {
        requires_grad_ = v;
        return *this;
    }

    GradTape* tape() const { return tape_; }
    int node() const { return node_; }
    bool on_tape() const { return tape_ != nullptr; }
    // Same values, no tape participation.
    Tensor detached() const;

    bool defined() const { return static_cast<bool>(data_); }
    void ensure_finite(const char* op) const;

private:
    friend class GradTape;

    std::vector<std::size_t> shape_;
    std::shared_ptr<std::vector<double>> data_;
    GradTape* tape_ = nullptr;
    int node_ = -1;
    bool requires_grad_ = false;
};

// Reverse-mode tape. Nodes are appended in execution order, so reverse
// insertion order is a valid topological order for the backward sweep.
// A tape and its tensors are confined to one thread.
class GradTape {
public:
    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    // Registers a leaf (parameter) on the tape. Memoized by buffer identity:
    // watching the same storage twice yields the same node.
    Tensor watch(const Tensor& t);

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape once, accumulating
    // gradients for every reachable node.
    void backward(const Tensor& loss);

    bool has_grad(const Tensor& t) const;
    // Gradient of `loss` w.r.t. `t` (a watched leaf or any tensor on this
    // tape). Zero tensor if the node was never reached by the sweep.
    Tensor grad(const Tensor& t) const;

    std::size_t num_nodes() const { return nodes_.size(); }

    // --- op-implementation interface ---
    using BackwardFn = std::function<void(const std::vector<double>& out_grad, GradTape&)>;
    int add_node(std::size_t size, BackwardFn back);
    std::vector<double>& grad_buf(int node);
    void attach(Tensor& t, int node) {
        t.tape_ = this;
        t.node_ = node;
    }

private:
    int node_of(const Tensor& t) const;

    struct Node {
        std::size_t size;
        BackwardFn back;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    std::unordered_map<const void*, int> leaves_;
    bool swept_ = false;
};

// --- differentiable ops -------------------------------------------------
// Each op validates shapes and finiteness of its inputs, computes the value,
// and records a backward closure when an input sits on a tape.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// M[i][j] + v[j] for every row i.
Tensor add_row_vector(const Tensor& m, const Tensor& v);

Tensor gelu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor layer_norm(const Tensor& h, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Softmax over all elements (vectors and n-by-1 logits).
Tensor softmax(const Tensor& v);
// Softmax independently over each row of a matrix.
Tensor softmax_rows(const Tensor& m);

Tensor cross_entropy_smoothed(const Tensor& logits, std::size_t label, double epsilon);
Tensor smooth_top1_svm(const Tensor& logits, std::size_t label, double tau = 1.0, double alpha = 1.0);

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

Tensor gather_rows(const Tensor& m, const std::vector<std::size_t>& ids);
Tensor concat_rows(const std::vector<Tensor>& rows);
// Means over `segments` equal groups of rows; the last row is repeated to
// pad the row count to a multiple of `segments`.
Tensor segment_mean_rows(const Tensor& m, std::size_t segments);

Tensor sum_all(const Tensor& x);
// c*I - x for square x.
Tensor identity_minus(double c, const Tensor& x);
// Induced norms as differentiable scalars (max abs row/column sum).
Tensor norm_inf_scalar(const Tensor& a);
Tensor norm_one_scalar(const Tensor& a);
Tensor div_by_scalar(const Tensor& x, const Tensor& s);

// --- optimizer ----------------------------------------------------------

struct AdamState {
    std::size_t step_count = 0;
    std::vector<double> m;
    std::vector<double> v;
};

struct AdamConfig {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

// Bias-corrected Adam with decoupled weight decay, in place on `param`.
void adam_step(Tensor& param, const Tensor& grad, AdamState& state, const AdamConfig& cfg);

}  // namespace hag
