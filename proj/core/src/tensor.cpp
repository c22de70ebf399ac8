#include "avm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace avm {

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

using detail::Node;

// ---------------------------------------------------------------- Tensor

Tensor Tensor::leaf(Shape shape, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values.assign(shape_numel(n->shape), 0.0);
    n->requires_grad = requires_grad;
    n->tracked = requires_grad;
    if (n->tracked) n->ensure_grad();
    return Tensor(std::move(n));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
    if (values.size() != shape_numel(shape))
        throw std::invalid_argument("from_values: " + std::to_string(values.size()) +
                                    " values for shape " + shape_str(shape));
    Tensor t = leaf(std::move(shape), requires_grad);
    std::copy(values.begin(), values.end(), t.node()->values.begin());
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return leaf(std::move(shape), requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = leaf(std::move(shape), requires_grad);
    std::fill(t.node()->values.begin(), t.node()->values.end(), value);
    return t;
}

Tensor Tensor::scalar(double value) { return full(Shape{}, value); }

std::span<double> Tensor::grad() {
    node_->ensure_grad();
    return node_->grad;
}

std::span<const double> Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::set_requires_grad(bool v) {
    if (!node_->is_leaf()) throw std::logic_error("set_requires_grad: not a leaf");
    node_->requires_grad = v;
    node_->tracked = v;
    if (v) node_->ensure_grad();
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1)
        throw std::logic_error("item(): tensor has " + std::to_string(numel()) + " elements");
    return node_->values[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
    return node_->values[i * node_->shape[1] + j];
}

// ------------------------------------------------------------------ Tape

namespace {
thread_local Tape* g_active_tape = nullptr;
std::uint64_t next_generation() {
    static thread_local std::uint64_t gen = 0;
    return ++gen;
}
}  // namespace

Tape::Tape() : generation_(next_generation()) {}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

void Tape::record(const std::shared_ptr<Node>& n) {
    n->tape_generation = generation_;
    nodes_.push_back(n);
}

void Tape::reset() {
    nodes_.clear();
    generation_ = next_generation();
}

void Tape::backward(const Tensor& root) {
    auto r = root.node();
    if (!r) throw std::logic_error("backward: undefined tensor");
    if (r->numel() != 1)
        throw std::logic_error("backward: root must be scalar, got shape " + shape_str(r->shape));
    if (r->tape_generation != generation_)
        throw std::logic_error("backward: root is not on the active tape");

    // mark the subgraph reachable from root
    const std::uint64_t epoch = ++visit_counter_;
    std::vector<Node*> stack{r.get()};
    r->visit_epoch = epoch;
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        for (auto& p : n->parents) {
            if (p->visit_epoch != epoch) {
                p->visit_epoch = epoch;
                stack.push_back(p.get());
            }
        }
    }

    // fresh adjoints for op nodes; leaf grads persist so calls accumulate
    for (auto& n : nodes_) {
        if (n->visit_epoch == epoch) {
            n->ensure_grad();
            std::fill(n->grad.begin(), n->grad.end(), 0.0);
        }
    }
    r->ensure_grad();
    r->grad[0] += 1.0;

    // reverse sweep in recording order; each node visited exactly once
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node* n = it->get();
        if (n->visit_epoch == epoch && n->backward_fn) n->backward_fn(*n);
    }
}

void backward(const Tensor& root) {
    Tape* t = active_tape();
    if (!t) throw std::logic_error("backward: no active tape");
    t->backward(root);
}

// ------------------------------------------------------------- op helpers

namespace {

std::shared_ptr<Node> make_op(const char* op, Shape shape,
                              std::vector<std::shared_ptr<Node>> parents) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->shape = std::move(shape);
    n->values.assign(shape_numel(n->shape), 0.0);

    Tape* tape = active_tape();
    bool track = false;
    if (tape) {
        for (auto& p : parents)
            if (p->tracked) { track = true; break; }
    }
    if (track) {
        n->tracked = true;
        n->parents = std::move(parents);
        // grad buffers are allocated lazily by backward for reachable nodes
        tape->record(n);
    }
    return n;
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// accumulate g into parent i if it participates in the graph
inline bool wants_grad(Node& self, std::size_t i) {
    return self.parents[i]->tracked;
}

inline std::vector<double>& pgrad(Node& self, std::size_t i) {
    self.parents[i]->ensure_grad();
    return self.parents[i]->grad;
}

inline const std::vector<double>& pval(Node& self, std::size_t i) {
    return self.parents[i]->values;
}

}  // namespace

// ------------------------------------------------------------ element-wise

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    auto n = make_op("add", a.shape(), {a.node(), b.node()});
    const auto& av = a.node()->values;
    const auto& bv = b.node()->values;
    for (std::size_t i = 0; i < n->values.size(); ++i) n->values[i] = av[i] + bv[i];
    if (n->tracked)
        n->backward_fn = [](Node& self) {
            for (std::size_t p = 0; p < 2; ++p) {
                if (!wants_grad(self, p)) continue;
                auto& g = pgrad(self, p);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
        };
    return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    auto n = make_op("sub", a.shape(), {a.node(), b.node()});
    const auto& av = a.node()->values;
    const auto& bv = b.node()->values;
    for (std::size_t i = 0; i < n->values.size(); ++i) n->values[i] = av[i] - bv[i];
    if (n->tracked)
        n->backward_fn = [](Node& self) {
            if (wants_grad(self, 0)) {
                auto& g = pgrad(self, 0);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (wants_grad(self, 1)) {
                auto& g = pgrad(self, 1);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
            }
        };
    return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    auto n = make_op("mul", a.shape(), {a.node(), b.node()});
    const auto& av = a.node()->values;
    const auto& bv = b.node()->values;
    for (std::size_t i = 0; i < n->values.size(); ++i) n->values[i] = av[i] * bv[i];
    if (n->tracked)
        n->backward_fn = [](Node& self) {
            if (wants_grad(self, 0)) {
                auto& g = pgrad(self, 0);
                const auto& other = pval(self, 1);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
            }
            if (wants_grad(self, 1)) {
                auto& g = pgrad(self, 1);
                const auto& other = pval(self, 0);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * other[i];
            }
        };
    return Tensor(n);
}

Tensor add_scalar(const Tensor& a, double s) {
    auto n = make_op("add_scalar", a.shape(), {a.node()});
    const auto& av = a.node()->values;
    for (std::size_t i = 0; i < n->values.size(); ++i) n->values[i] = av[i] + s;
    if (n->tracked)
        n->backward_fn = [](Node& self) {
            if (!wants_grad(self, 0)) return;
            auto& g = pgrad(self, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        };
    return Tensor(n);
}

Tensor mul_scalar(const Tensor& a, double s) {
    auto n = make_op("mul_scalar", a.shape(), {a.node()});
    const auto& av = a.node()->values;
    for (std::size_t i = 0; i < n->values.size(); ++i) n->values[i] = av[i] * s;
    if (n->tracked)
        n->backward_fn = [s](Node& self) {
            if (!wants_grad(self, 0)) return;
            auto& g = pgrad(self, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
        };
    return Tensor(n);
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    if (m.rank() != 2 || v.rank() != 1 || m.shape()[1] != v.shape()[0])
        throw std::invalid_argument("add_rowvec: need [RxC] + [C], got " +
                                    shape_str(m.shape()) + " + " + shape_str(v.shape()));
    const std::size_t rows = m.shape()[0], cols = m.shape()[1];
    auto n = make_op("add_rowvec", m.shape(), {m.node(), v.node()});
    const auto& mv = m.node()->values;
    const auto& vv = v.node()->values;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) n->values[r * cols + c] = mv[r * cols + c] + vv[c];
    if (n->tracked)
        n->backward_fn = [rows, cols](Node& self) {
            if (wants_grad(self, 0)) {
                auto& g = pgrad(self, 0);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (wants_grad(self, 1)) {
                auto& g = pgrad(self, 1);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
            }
        };
    return Tensor(n);
}

// ---------------------------------------------------------------- matmul

namespace {

// c[p x r] += or = a[p x q] * b[q x r]; ikj order keeps the inner loop contiguous
void mm_kernel(const double* a, const double* b, double* c, std::size_t p, std::size_t q,
               std::size_t r, bool accumulate) {
    if (!accumulate) std::fill(c, c + p * r, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        const double* arow = a + i * q;
        double* crow = c + i * r;
        for (std::size_t k = 0; k < q; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = b + k * r;
            for (std::size_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
        }
    }
}

// c[p x q] += a[p x r] * b^T where b is [q x r]
void mm_nt_kernel(const double* a, const double* b, double* c, std::size_t p, std::size_t r,
                  std::size_t q) {
    for (std::size_t i = 0; i < p; ++i) {
        const double* arow = a + i * r;
        double* crow = c + i * q;
        for (std::size_t j = 0; j < q; ++j) {
            const double* brow = b + j * r;
            double acc = 0.0;
            for (std::size_t k = 0; k < r; ++k) acc += arow[k] * brow[k];
            crow[j] += acc;
        }
    }
}

// c[q x r] += a^T * b where a is [p x q], b is [p x r]
void mm_tn_kernel(const double* a, const double* b, double* c, std::size_t p, std::size_t q,
                  std::size_t r) {
    for (std::size_t k = 0; k < p; ++k) {
        const double* arow = a + k * q;
        const double* brow = b + k * r;
        for (std::size_t i = 0; i < q; ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            double* crow = c + i * r;
            for (std::size_t j = 0; j < r; ++j) crow[j] += aki * brow[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    const std::size_t p = a.shape()[0], q = a.shape()[1], r = b.shape()[1];
    auto n = make_op("matmul", Shape{p, r}, {a.node(), b.node()});
    mm_kernel(a.node()->values.data(), b.node()->values.data(), n->values.data(), p, q, r, false);
    if (n->tracked)
        n->backward_fn = [p, q, r](Node& self) {
            if (wants_grad(self, 0))
                mm_nt_kernel(self.grad.data(), pval(self, 1).data(), pgrad(self, 0).data(), p, r, q);
            if (wants_grad(self, 1))
                mm_tn_kernel(pval(self, 0).data(), self.grad.data(), pgrad(self, 1).data(), p, q, r);
        };
    return Tensor(n);
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose: need rank 2, got " + shape_str(a.shape()));
    const std::size_t rows = a.shape()[0], cols = a.shape()[1];
    auto n = make_op("transpose", Shape{cols, rows}, {a.node()});
    const auto& av = a.node()->values;
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) n->values[j * rows + i] = av[i * cols + j];
    if (n->tracked)
        n->backward_fn = [rows, cols](Node& self) {
            if (!wants_grad(self, 0)) return;
            auto& g = pgrad(self, 0);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += self.grad[j * rows + i];
        };
    return Tensor(n);
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw std::invalid_argument("reshape: element count mismatch " + shape_str(a.shape()) +
                                    " -> " + shape_str(shape));
    auto n = make_op("reshape", std::move(shape), {a.node()});
    n->values = a.node()->values;
    if (n->tracked)
        n->backward_fn = [](Node& self) {
            if (!wants_grad(self, 0)) return;
            auto& g = pgrad(self, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        };
    return Tensor(n);
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
    if (a.rank() != 2 || begin + count > a.shape()[1])
        throw std::invalid_argument("slice_cols: [" + std::to_string(begin) + ", " +
                                    std::to_string(begin + count) + ") out of " +
                                    shape_str(a.shape()));
    const std::size_t rows = a.shape()[0], cols = a.shape()[1];
    auto n = make_op("slice_cols", Shape{rows, count}, {a.node()});
    const auto& av = a.node()->values;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < count; ++c) n->values[r * count + c] = av[r * cols + begin + c];
    if (n->tracked)
        n->backward_fn = [rows, cols, begin, count](Node& self) {
            if (!wants_grad(self, 0)) return;
            auto& g = pgrad(self, 0);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < count; ++c)
                    g[r * cols + begin + c] += self.grad[r * count + c];
        };
    return Tensor(n);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
    const std::size_t rows = parts[0].shape()[0];
    std::size_t cols = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.shape()[0] != rows)
            throw std::invalid_argument("concat_cols: row mismatch");
        widths.push_back(p.shape()[1]);
        cols += p.shape()[1];
        parents.push_back(p.node());
    }
    auto n = make_op("concat_cols", Shape{rows, cols}, std::move(parents));
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& pv = parts[k].node()->values;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < widths[k]; ++c)
                n->values[r * cols + off + c] = pv[r * widths[k] + c];
        off += widths[k];
    }
    if (n->tracked)
        n->backward_fn = [rows, cols, widths](Node& self) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < self.parents.size(); ++k) {
                if (wants_grad(self, k)) {
                    auto& g = pgrad(self, k);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < widths[k]; ++c)
                            g[r * widths[k] + c] += self.grad[r * cols + off + c];
                }
                off += widths[k];
            }
        };
    return Tensor(n);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    const std::size_t cols = parts[0].shape()[1];
    std::size_t rows = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::vector<std::size_t> heights;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.shape()[1] != cols)
            throw std::invalid_argument("concat_rows: column mismatch");
        heights.push_back(p.shape()[0]);
        rows += p.shape()[0];
        parents.push_back(p.node());
    }
    auto n = make_op("concat_rows", Shape{rows, cols}, std::move(parents));
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& pv = parts[k].node()->values;
        std::copy(pv.begin(), pv.end(), n->values.begin() + off);
        off += pv.size();
    }
    if (n->tracked)
        n->backward_fn = [heights, cols](Node& self) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < self.parents.size(); ++k) {
                const std::size_t sz = heights[k] * cols;
                if (wants_grad(self, k)) {
                    auto& g = pgrad(self, k);
                    for (std::size_t i = 0; i < sz; ++i) g[i] += self.grad[off + i];
                }
                off += sz;
            }
        };
    return Tensor(n);
}

// ------------------------------------------------------------ activations

Tensor activation(const Tensor& x, Activation kind) {
    return kind == Activation::relu ? relu(x) : elu(x);
}

Tensor relu(const Tensor& x) {
    auto n = make_op("relu", x.shape(), {x.node()});
    const auto& xv = x.node()->values;
    for (std::size_t i = 0; i < n->values.size(); ++i) n->values[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    if (n->tracked)
        n->backward_fn = [](Node& self) {
            if (!wants_grad(self, 0)) return;
            auto& g = pgrad(self, 0);
            const auto& xv = pval(self, 0);
            // subgradient at 0 is 0
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xv[i] > 0.0) g[i] += self.grad[i];
        };
    return Tensor(n);
}

Tensor elu(const Tensor& x) {
    auto n = make_op("elu", x.shape(), {x.node()});
    const auto& xv = x.node()->values;
    for (std::size_t i = 0; i < n->values.size(); ++i)
        n->values[i] = xv[i] >= 0.0 ? xv[i] : std::expm1(xv[i]);
    if (n->tracked)
        n->backward_fn = [](Node& self) {
            if (!wants_grad(self, 0)) return;
            auto& g = pgrad(self, 0);
            const auto& xv = pval(self, 0);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += self.grad[i] * (xv[i] >= 0.0 ? 1.0 : std::exp(xv[i]));
        };
    return Tensor(n);
}

Tensor elu_plus_one(const Tensor& x) {
    auto n = make_op("elu_plus_one", x.shape(), {x.node()});
    const auto& xv = x.node()->values;
    constexpr double floor = std::numeric_limits<double>::min();
    for (std::size_t i = 0; i < n->values.size(); ++i)
        n->values[i] = xv[i] >= 0.0 ? xv[i] + 1.0 : std::max(std::exp(xv[i]), floor);
    if (n->tracked)
        n->backward_fn = [](Node& self) {
            if (!wants_grad(self, 0)) return;
            auto& g = pgrad(self, 0);
            const auto& xv = pval(self, 0);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += self.grad[i] * (xv[i] >= 0.0 ? 1.0 : std::exp(xv[i]));
        };
    return Tensor(n);
}

Tensor softplus(const Tensor& x) {
    auto n = make_op("softplus", x.shape(), {x.node()});
    const auto& xv = x.node()->values;
    for (std::size_t i = 0; i < n->values.size(); ++i) {
        const double v = xv[i];
        n->values[i] = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
    }
    if (n->tracked)
        n->backward_fn = [](Node& self) {
            if (!wants_grad(self, 0)) return;
            auto& g = pgrad(self, 0);
            const auto& xv = pval(self, 0);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += self.grad[i] / (1.0 + std::exp(-xv[i]));
        };
    return Tensor(n);
}

Tensor log(const Tensor& x) {
    auto n = make_op("log", x.shape(), {x.node()});
    const auto& xv = x.node()->values;
    for (std::size_t i = 0; i < n->values.size(); ++i) n->values[i] = std::log(xv[i]);
    if (n->tracked)
        n->backward_fn = [](Node& self) {
            if (!wants_grad(self, 0)) return;
            auto& g = pgrad(self, 0);
            const auto& xv = pval(self, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / xv[i];
        };
    return Tensor(n);
}

Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() == 0 || x.shape().back() == 0)
        throw std::invalid_argument("softmax_lastdim: last extent must be >= 1");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.numel() / cols;
    auto n = make_op("softmax_lastdim", x.shape(), {x.node()});
    const auto& xv = x.node()->values;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * cols;
        double* out = n->values.data() + r * cols;
        double mx = in[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            out[c] = std::exp(in[c] - mx);
            sum += out[c];
        }
        for (std::size_t c = 0; c < cols; ++c) out[c] /= sum;
    }
    if (n->tracked)
        n->backward_fn = [rows, cols](Node& self) {
            if (!wants_grad(self, 0)) return;
            auto& g = pgrad(self, 0);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = self.values.data() + r * cols;
                const double* gy = self.grad.data() + r * cols;
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
                double* gx = g.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) gx[c] += y[c] * (gy[c] - dot);
            }
        };
    return Tensor(n);
}

// -------------------------------------------------------------- reductions

Tensor reduce(const Tensor& x, Reduce kind, std::size_t axis) {
    if (axis >= x.rank())
        throw std::out_of_range("reduce: axis " + std::to_string(axis) + " out of range for " +
                                shape_str(x.shape()));
    Shape out_shape;
    for (std::size_t i = 0; i < x.rank(); ++i)
        if (i != axis) out_shape.push_back(x.shape()[i]);
    const std::size_t extent = x.shape()[axis];
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
    std::size_t outer = x.numel() / (extent * inner);
    const double scale = kind == Reduce::mean ? 1.0 / static_cast<double>(extent) : 1.0;

    auto n = make_op(kind == Reduce::sum ? "reduce_sum" : "reduce_mean", std::move(out_shape),
                     {x.node()});
    const auto& xv = x.node()->values;
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            double acc = 0.0;
            for (std::size_t e = 0; e < extent; ++e) acc += xv[(o * extent + e) * inner + i];
            n->values[o * inner + i] = acc * scale;
        }
    if (n->tracked)
        n->backward_fn = [outer, extent, inner, scale](Node& self) {
            if (!wants_grad(self, 0)) return;
            auto& g = pgrad(self, 0);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) {
                    const double gv = self.grad[o * inner + i] * scale;
                    for (std::size_t e = 0; e < extent; ++e)
                        g[(o * extent + e) * inner + i] += gv;
                }
        };
    return Tensor(n);
}

Tensor sum_all(const Tensor& x) {
    auto n = make_op("sum_all", Shape{}, {x.node()});
    double acc = 0.0;
    for (double v : x.node()->values) acc += v;
    n->values[0] = acc;
    if (n->tracked)
        n->backward_fn = [](Node& self) {
            if (!wants_grad(self, 0)) return;
            auto& g = pgrad(self, 0);
            const double gv = self.grad[0];
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gv;
        };
    return Tensor(n);
}

// --------------------------------------------------------- bilinear sample

namespace {

struct BilinearCell {
    std::size_t x0, x1, y0, y1;
    double tx, ty;
    double dx_scale, dy_scale;  // d(grid coord)/d(normalized coord), 0 when clamped
};

BilinearCell locate(double px, double py, std::size_t h, std::size_t w) {
    BilinearCell c{};
    const double cx = std::clamp(px, -1.0, 1.0);
    const double cy = std::clamp(py, -1.0, 1.0);
    // align-corners mapping: -1 -> 0, +1 -> extent-1. Exact grid hits snap to
    // the cell corner (tx = 0) so corner lookups reproduce cell values exactly.
    const double gx = (cx + 1.0) * 0.5 * static_cast<double>(w - 1);
    const double gy = (cy + 1.0) * 0.5 * static_cast<double>(h - 1);
    c.x0 = std::min(static_cast<std::size_t>(gx), w - 1);
    c.tx = gx - static_cast<double>(c.x0);
    c.x1 = (c.tx == 0.0 || c.x0 + 1 >= w) ? c.x0 : c.x0 + 1;
    if (c.x1 == c.x0) c.tx = 0.0;
    c.y0 = std::min(static_cast<std::size_t>(gy), h - 1);
    c.ty = gy - static_cast<double>(c.y0);
    c.y1 = (c.ty == 0.0 || c.y0 + 1 >= h) ? c.y0 : c.y0 + 1;
    if (c.y1 == c.y0) c.ty = 0.0;
    c.dx_scale = (px < -1.0 || px > 1.0 || w == 1) ? 0.0 : 0.5 * static_cast<double>(w - 1);
    c.dy_scale = (py < -1.0 || py > 1.0 || h == 1) ? 0.0 : 0.5 * static_cast<double>(h - 1);
    return c;
}

void bilinear_forward_one(const double* fmap, std::size_t h, std::size_t w, std::size_t d,
                          double px, double py, double* out) {
    const BilinearCell c = locate(px, py, h, w);
    const double* f00 = fmap + (c.y0 * w + c.x0) * d;
    const double* f01 = fmap + (c.y0 * w + c.x1) * d;
    const double* f10 = fmap + (c.y1 * w + c.x0) * d;
    const double* f11 = fmap + (c.y1 * w + c.x1) * d;
    // incremental form: exact on constant maps and at snapped grid corners
    for (std::size_t k = 0; k < d; ++k) {
        const double top = f00[k] + c.tx * (f01[k] - f00[k]);
        const double bottom = f10[k] + c.tx * (f11[k] - f10[k]);
        out[k] = top + c.ty * (bottom - top);
    }
}

void bilinear_backward_one(Node& self, std::size_t row, const double* gout, std::size_t h,
                           std::size_t w, std::size_t d) {
    const auto& pos = pval(self, 1);
    const double px = pos[row * 2 + 0], py = pos[row * 2 + 1];
    const BilinearCell c = locate(px, py, h, w);
    const double w00 = (1.0 - c.ty) * (1.0 - c.tx), w01 = (1.0 - c.ty) * c.tx;
    const double w10 = c.ty * (1.0 - c.tx), w11 = c.ty * c.tx;
    const auto& fv = pval(self, 0);
    const double* f00 = fv.data() + (c.y0 * w + c.x0) * d;
    const double* f01 = fv.data() + (c.y0 * w + c.x1) * d;
    const double* f10 = fv.data() + (c.y1 * w + c.x0) * d;
    const double* f11 = fv.data() + (c.y1 * w + c.x1) * d;

    if (wants_grad(self, 0)) {
        auto& gf = pgrad(self, 0);
        double* g00 = gf.data() + (c.y0 * w + c.x0) * d;
        double* g01 = gf.data() + (c.y0 * w + c.x1) * d;
        double* g10 = gf.data() + (c.y1 * w + c.x0) * d;
        double* g11 = gf.data() + (c.y1 * w + c.x1) * d;
        for (std::size_t k = 0; k < d; ++k) {
            g00[k] += w00 * gout[k];
            g01[k] += w01 * gout[k];
            g10[k] += w10 * gout[k];
            g11[k] += w11 * gout[k];
        }
    }
    if (wants_grad(self, 1)) {
        auto& gp = pgrad(self, 1);
        double dgx = 0.0, dgy = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            dgx += gout[k] * ((1.0 - c.ty) * (f01[k] - f00[k]) + c.ty * (f11[k] - f10[k]));
            dgy += gout[k] * ((1.0 - c.tx) * (f10[k] - f00[k]) + c.tx * (f11[k] - f01[k]));
        }
        gp[row * 2 + 0] += dgx * c.dx_scale;
        gp[row * 2 + 1] += dgy * c.dy_scale;
    }
}

}  // namespace

Tensor bilinear_sample(const Tensor& fmap, const Tensor& pos) {
    if (fmap.rank() != 3)
        throw std::invalid_argument("bilinear_sample: fmap must be [HxWxD], got " +
                                    shape_str(fmap.shape()));
    if (pos.numel() != 2)
        throw std::invalid_argument("bilinear_sample: pos must have 2 elements");
    const std::size_t h = fmap.shape()[0], w = fmap.shape()[1], d = fmap.shape()[2];
    auto n = make_op("bilinear_sample", Shape{d}, {fmap.node(), pos.node()});
    bilinear_forward_one(fmap.node()->values.data(), h, w, d, pos.at(0), pos.at(1),
                         n->values.data());
    if (n->tracked)
        n->backward_fn = [h, w, d](Node& self) {
            bilinear_backward_one(self, 0, self.grad.data(), h, w, d);
        };
    return Tensor(n);
}

Tensor bilinear_sample_rows(const Tensor& fmap, const Tensor& pos) {
    if (fmap.rank() != 3)
        throw std::invalid_argument("bilinear_sample_rows: fmap must be [HxWxD]");
    if (pos.rank() != 2 || pos.shape()[1] != 2)
        throw std::invalid_argument("bilinear_sample_rows: pos must be [Nx2]");
    const std::size_t h = fmap.shape()[0], w = fmap.shape()[1], d = fmap.shape()[2];
    const std::size_t rows = pos.shape()[0];
    auto n = make_op("bilinear_sample_rows", Shape{rows, d}, {fmap.node(), pos.node()});
    for (std::size_t r = 0; r < rows; ++r)
        bilinear_forward_one(fmap.node()->values.data(), h, w, d, pos.at(r, 0), pos.at(r, 1),
                             n->values.data() + r * d);
    if (n->tracked)
        n->backward_fn = [h, w, d, rows](Node& self) {
            for (std::size_t r = 0; r < rows; ++r)
                bilinear_backward_one(self, r, self.grad.data() + r * d, h, w, d);
        };
    return Tensor(n);
}

// --------------------------------------------------------------- layernorm

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() != 2 || gamma.numel() != x.shape()[1] || beta.numel() != x.shape()[1])
        throw std::invalid_argument("layer_norm_rows: need [RxC] with [C] scales");
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    auto n = make_op("layer_norm_rows", x.shape(), {x.node(), gamma.node(), beta.node()});
    const auto& xv = x.node()->values;
    const auto& gv = gamma.node()->values;
    const auto& bv = beta.node()->values;
    std::vector<double> inv_std(rows), mean(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double m = 0.0;
        for (std::size_t c = 0; c < cols; ++c) m += xv[r * cols + c];
        m /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double dv = xv[r * cols + c] - m;
            var += dv * dv;
        }
        var /= static_cast<double>(cols);
        mean[r] = m;
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c)
            n->values[r * cols + c] = (xv[r * cols + c] - m) * inv_std[r] * gv[c] + bv[c];
    }
    if (n->tracked)
        n->backward_fn = [rows, cols, mean, inv_std](Node& self) {
            const auto& xv = pval(self, 0);
            const auto& gv = pval(self, 1);
            for (std::size_t r = 0; r < rows; ++r) {
                // dy = g*gamma; normalized y_hat recomputed from saved stats
                double mean_dy = 0.0, mean_dyy = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    const double yh = (xv[r * cols + c] - mean[r]) * inv_std[r];
                    const double dy = self.grad[r * cols + c] * gv[c];
                    mean_dy += dy;
                    mean_dyy += dy * yh;
                }
                mean_dy /= static_cast<double>(cols);
                mean_dyy /= static_cast<double>(cols);
                if (wants_grad(self, 0)) {
                    auto& gx = pgrad(self, 0);
                    for (std::size_t c = 0; c < cols; ++c) {
                        const double yh = (xv[r * cols + c] - mean[r]) * inv_std[r];
                        const double dy = self.grad[r * cols + c] * gv[c];
                        gx[r * cols + c] += inv_std[r] * (dy - mean_dy - yh * mean_dyy);
                    }
                }
                if (wants_grad(self, 1)) {
                    auto& gg = pgrad(self, 1);
                    for (std::size_t c = 0; c < cols; ++c) {
                        const double yh = (xv[r * cols + c] - mean[r]) * inv_std[r];
                        gg[c] += self.grad[r * cols + c] * yh;
                    }
                }
                if (wants_grad(self, 2)) {
                    auto& gb = pgrad(self, 2);
                    for (std::size_t c = 0; c < cols; ++c) gb[c] += self.grad[r * cols + c];
                }
            }
        };
    return Tensor(n);
}

}  // namespace avm
