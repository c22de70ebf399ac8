#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace avm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

namespace detail {

// One value node of the computation graph. Leaves have no parents; op nodes
// additionally carry a backward function and their position on the tape.
struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // allocated only when tracked
    bool requires_grad = false;
    bool tracked = false;

    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";
    std::uint64_t tape_generation = 0;
    std::uint64_t visit_epoch = 0;

    bool is_leaf() const { return parents.empty(); }
    std::size_t numel() const { return values.size(); }
    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

}  // namespace detail

// Value-semantic handle to a node; copying a Tensor aliases its storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor leaf(Shape shape, bool requires_grad = false);
    static Tensor from_values(Shape shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->numel(); }
    std::size_t rank() const { return node_->shape.size(); }

    std::span<double> values() { return node_->values; }
    std::span<const double> values() const { return node_->values; }
    std::span<double> grad();
    std::span<const double> grad() const;

    bool requires_grad() const { return node_->requires_grad; }
    bool tracked() const { return node_->tracked; }
    // leaves only; toggled by freeze plans between passes
    void set_requires_grad(bool v);
    void zero_grad();

    // scalar access; throws unless numel() == 1
    double item() const;
    double at(std::size_t i) const { return node_->values[i]; }
    double at(std::size_t i, std::size_t j) const;

    std::shared_ptr<detail::Node> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// Ordered record of op nodes (a Wengert list); recording order is a
// topological order, so backward is a reverse sweep.
class Tape {
public:
    Tape();
    void record(const std::shared_ptr<detail::Node>& n);
    void reset();
    std::size_t node_count() const { return nodes_.size(); }
    std::uint64_t generation() const { return generation_; }

    void backward(const Tensor& root);

private:
    std::vector<std::shared_ptr<detail::Node>> nodes_;
    std::uint64_t generation_;
    std::uint64_t visit_counter_ = 0;
};

// Thread-local active tape. Ops record themselves only while a tape is
// active and some input is tracked; with no tape they are pure evaluation.
Tape* active_tape();
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

void backward(const Tensor& root);

enum class Activation { relu, elu };
enum class Reduce { sum, mean };

// element-wise, shapes must match
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

// m: [R x C], v: [C]; v added to every row
Tensor add_rowvec(const Tensor& m, const Tensor& v);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);

Tensor activation(const Tensor& x, Activation kind);
Tensor relu(const Tensor& x);
Tensor elu(const Tensor& x);
// ELU(x) + 1 computed as exp(x) on the negative side, floored at the smallest
// normal double: strictly positive for every finite input.
Tensor elu_plus_one(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor log(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);

Tensor reduce(const Tensor& x, Reduce kind, std::size_t axis);
Tensor sum_all(const Tensor& x);

// fmap: [H x W x D], pos: [2] (or [N x 2] for the batched form) in [-1,1]^2,
// align-corners bilinear interpolation, differentiable in both arguments.
Tensor bilinear_sample(const Tensor& fmap, const Tensor& pos);
Tensor bilinear_sample_rows(const Tensor& fmap, const Tensor& pos);

// per-row normalization over the last axis of [R x C]
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace avm
