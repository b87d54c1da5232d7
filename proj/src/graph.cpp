#include "gda/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace gda {

using EMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

namespace {

ECMap cmap(const Tensor& t, int r, int c) { return ECMap(t.data.data(), r, c); }
EMap mmap(Tensor& t, int r, int c) { return EMap(t.data.data(), r, c); }

Value make_node(Tensor val, std::vector<Value> parents) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    return n;
}

void ensure_grad(const Value& n) {
    if (n->grad.data.empty()) n->grad = Tensor::zeros(n->val.shape);
}

}  // namespace

Value constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    return n;
}

Value param(Tensor t) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->requires_grad = true;
    return n;
}

void backward(const Value& root) {
    GDA_CHECK(root->val.numel() == 1, "backward root must be scalar");
    // iterative DFS post-order
    std::vector<Node*> order;
    std::vector<std::pair<Node*, size_t>> stack;
    std::unordered_set<Node*> seen;
    if (root->requires_grad) stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, i] = stack.back();
        if (i < node->parents.size()) {
            Node* p = node->parents[i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    ensure_grad(root);
    root->grad.data[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn();
}

// ---- elementwise ----

Value add(const Value& a, const Value& b) {
    GDA_CHECK(a->val.same_shape(b->val), "add shape mismatch");
    Tensor out = a->val;
    for (long i = 0; i < out.numel(); ++i) out.data[i] += b->val.data[i];
    auto n = make_node(std::move(out), {a, b});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, b, np] {
            if (a->requires_grad) {
                ensure_grad(a);
                for (long i = 0; i < np->grad.numel(); ++i) a->grad.data[i] += np->grad.data[i];
            }
            if (b->requires_grad) {
                ensure_grad(b);
                for (long i = 0; i < np->grad.numel(); ++i) b->grad.data[i] += np->grad.data[i];
            }
        };
    }
    return n;
}

Value sub(const Value& a, const Value& b) {
    GDA_CHECK(a->val.same_shape(b->val), "sub shape mismatch");
    Tensor out = a->val;
    for (long i = 0; i < out.numel(); ++i) out.data[i] -= b->val.data[i];
    auto n = make_node(std::move(out), {a, b});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, b, np] {
            if (a->requires_grad) {
                ensure_grad(a);
                for (long i = 0; i < np->grad.numel(); ++i) a->grad.data[i] += np->grad.data[i];
            }
            if (b->requires_grad) {
                ensure_grad(b);
                for (long i = 0; i < np->grad.numel(); ++i) b->grad.data[i] -= np->grad.data[i];
            }
        };
    }
    return n;
}

Value mul(const Value& a, const Value& b) {
    GDA_CHECK(a->val.same_shape(b->val), "mul shape mismatch");
    Tensor out = a->val;
    for (long i = 0; i < out.numel(); ++i) out.data[i] *= b->val.data[i];
    auto n = make_node(std::move(out), {a, b});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, b, np] {
            if (a->requires_grad) {
                ensure_grad(a);
                for (long i = 0; i < np->grad.numel(); ++i)
                    a->grad.data[i] += np->grad.data[i] * b->val.data[i];
            }
            if (b->requires_grad) {
                ensure_grad(b);
                for (long i = 0; i < np->grad.numel(); ++i)
                    b->grad.data[i] += np->grad.data[i] * a->val.data[i];
            }
        };
    }
    return n;
}

Value scale(const Value& a, real s) {
    Tensor out = a->val;
    for (real& v : out.data) v *= s;
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, s, np] {
            ensure_grad(a);
            for (long i = 0; i < np->grad.numel(); ++i) a->grad.data[i] += s * np->grad.data[i];
        };
    }
    return n;
}

Value add_scalar(const Value& a, real s) {
    Tensor out = a->val;
    for (real& v : out.data) v += s;
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, np] {
            ensure_grad(a);
            for (long i = 0; i < np->grad.numel(); ++i) a->grad.data[i] += np->grad.data[i];
        };
    }
    return n;
}

Value relu(const Value& a) {
    Tensor out = a->val;
    for (real& v : out.data) v = v > 0 ? v : 0;
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, np] {
            ensure_grad(a);
            for (long i = 0; i < np->grad.numel(); ++i)
                if (a->val.data[i] > 0) a->grad.data[i] += np->grad.data[i];
        };
    }
    return n;
}

Value silu(const Value& a) {
    Tensor out = a->val;
    for (real& v : out.data) v = v / (1.0 + std::exp(-v));
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, np] {
            ensure_grad(a);
            for (long i = 0; i < np->grad.numel(); ++i) {
                real x = a->val.data[i];
                real sg = 1.0 / (1.0 + std::exp(-x));
                a->grad.data[i] += np->grad.data[i] * sg * (1.0 + x * (1.0 - sg));
            }
        };
    }
    return n;
}

Value exp_v(const Value& a) {
    Tensor out = a->val;
    for (real& v : out.data) v = std::exp(v);
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, np] {
            ensure_grad(a);
            for (long i = 0; i < np->grad.numel(); ++i)
                a->grad.data[i] += np->grad.data[i] * np->val.data[i];
        };
    }
    return n;
}

Value log_v(const Value& a) {
    Tensor out = a->val;
    for (real& v : out.data) v = std::log(v);
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, np] {
            ensure_grad(a);
            for (long i = 0; i < np->grad.numel(); ++i)
                a->grad.data[i] += np->grad.data[i] / a->val.data[i];
        };
    }
    return n;
}

Value sqrt_v(const Value& a) {
    Tensor out = a->val;
    for (real& v : out.data) v = std::sqrt(v);
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, np] {
            ensure_grad(a);
            for (long i = 0; i < np->grad.numel(); ++i)
                a->grad.data[i] += np->grad.data[i] * 0.5 / np->val.data[i];
        };
    }
    return n;
}

Value rsqrt_v(const Value& a) {
    Tensor out = a->val;
    for (real& v : out.data) v = 1.0 / std::sqrt(v);
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, np] {
            ensure_grad(a);
            for (long i = 0; i < np->grad.numel(); ++i) {
                real y = np->val.data[i];
                a->grad.data[i] += np->grad.data[i] * (-0.5) * y * y * y;
            }
        };
    }
    return n;
}

Value clamp_v(const Value& a, real lo, real hi) {
    Tensor out = a->val;
    for (real& v : out.data) v = std::min(hi, std::max(lo, v));
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, lo, hi, np] {
            ensure_grad(a);
            for (long i = 0; i < np->grad.numel(); ++i) {
                real x = a->val.data[i];
                if (x > lo && x < hi) a->grad.data[i] += np->grad.data[i];
            }
        };
    }
    return n;
}

// ---- matrix ----

Value matmul(const Value& a, const Value& b, bool ta, bool tb) {
    GDA_CHECK(a->val.rank() == 2 && b->val.rank() == 2, "matmul needs rank-2");
    int am = a->val.rows(), ak = a->val.cols();
    if (ta) std::swap(am, ak);
    int bk = b->val.rows(), bn = b->val.cols();
    if (tb) std::swap(bk, bn);
    GDA_CHECK(ak == bk, "matmul inner dim mismatch");
    Tensor out({am, bn});
    {
        auto A = cmap(a->val, a->val.rows(), a->val.cols());
        auto B = cmap(b->val, b->val.rows(), b->val.cols());
        auto C = mmap(out, am, bn);
        if (!ta && am == 1) {
            // Eigen routes a 1-row product through a different kernel than the
            // same row inside a taller gemm. Pad to two rows so each row's
            // result never depends on how many rows share the product.
            EMat A2(2, ak);
            A2.row(0) = A.row(0);
            A2.row(1) = A.row(0);
            EMat C2 = tb ? EMat(A2 * B.transpose()) : EMat(A2 * B);
            C = C2.row(0);
        } else if (!ta && !tb)
            C.noalias() = A * B;
        else if (!ta && tb)
            C.noalias() = A * B.transpose();
        else if (ta && !tb)
            C.noalias() = A.transpose() * B;
        else
            C.noalias() = A.transpose() * B.transpose();
    }
    auto n = make_node(std::move(out), {a, b});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, b, ta, tb, am, bn, np] {
            auto G = cmap(np->grad, am, bn);
            auto A = cmap(a->val, a->val.rows(), a->val.cols());
            auto B = cmap(b->val, b->val.rows(), b->val.cols());
            if (a->requires_grad) {
                ensure_grad(a);
                auto dA = mmap(a->grad, a->val.rows(), a->val.cols());
                if (!ta && !tb)
                    dA.noalias() += G * B.transpose();
                else if (!ta && tb)
                    dA.noalias() += G * B;
                else if (ta && !tb)
                    dA.noalias() += B * G.transpose();
                else
                    dA.noalias() += B.transpose() * G.transpose();
            }
            if (b->requires_grad) {
                ensure_grad(b);
                auto dB = mmap(b->grad, b->val.rows(), b->val.cols());
                if (!ta && !tb)
                    dB.noalias() += A.transpose() * G;
                else if (!ta && tb)
                    dB.noalias() += G.transpose() * A;
                else if (ta && !tb)
                    dB.noalias() += A * G;
                else
                    dB.noalias() += G.transpose() * A.transpose();
            }
        };
    }
    return n;
}

Value bmm(const Value& a, const Value& b, bool ta, bool tb) {
    GDA_CHECK(a->val.rank() == 3 && b->val.rank() == 3, "bmm needs rank-3");
    int B = a->val.dim(0);
    GDA_CHECK(b->val.dim(0) == B, "bmm batch mismatch");
    int am = a->val.dim(1), ak = a->val.dim(2);
    if (ta) std::swap(am, ak);
    int bk = b->val.dim(1), bn = b->val.dim(2);
    if (tb) std::swap(bk, bn);
    GDA_CHECK(ak == bk, "bmm inner dim mismatch");
    Tensor out({B, am, bn});
    long as = static_cast<long>(a->val.dim(1)) * a->val.dim(2);
    long bs = static_cast<long>(b->val.dim(1)) * b->val.dim(2);
    long os = static_cast<long>(am) * bn;
    for (int i = 0; i < B; ++i) {
        ECMap A(a->val.data.data() + i * as, a->val.dim(1), a->val.dim(2));
        ECMap Bm(b->val.data.data() + i * bs, b->val.dim(1), b->val.dim(2));
        EMap C(out.data.data() + i * os, am, bn);
        if (!ta && !tb)
            C.noalias() = A * Bm;
        else if (!ta && tb)
            C.noalias() = A * Bm.transpose();
        else if (ta && !tb)
            C.noalias() = A.transpose() * Bm;
        else
            C.noalias() = A.transpose() * Bm.transpose();
    }
    auto n = make_node(std::move(out), {a, b});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, b, ta, tb, B, am, bn, as, bs, os, np] {
            for (int i = 0; i < B; ++i) {
                ECMap G(np->grad.data.data() + i * os, am, bn);
                ECMap A(a->val.data.data() + i * as, a->val.dim(1), a->val.dim(2));
                ECMap Bm(b->val.data.data() + i * bs, b->val.dim(1), b->val.dim(2));
                if (a->requires_grad) {
                    ensure_grad(a);
                    EMap dA(a->grad.data.data() + i * as, a->val.dim(1), a->val.dim(2));
                    if (!ta && !tb)
                        dA.noalias() += G * Bm.transpose();
                    else if (!ta && tb)
                        dA.noalias() += G * Bm;
                    else if (ta && !tb)
                        dA.noalias() += Bm * G.transpose();
                    else
                        dA.noalias() += Bm.transpose() * G.transpose();
                }
                if (b->requires_grad) {
                    ensure_grad(b);
                    EMap dB(b->grad.data.data() + i * bs, b->val.dim(1), b->val.dim(2));
                    if (!ta && !tb)
                        dB.noalias() += A.transpose() * G;
                    else if (!ta && tb)
                        dB.noalias() += G.transpose() * A;
                    else if (ta && !tb)
                        dB.noalias() += A * G;
                    else
                        dB.noalias() += G.transpose() * A.transpose();
                }
            }
        };
    }
    return n;
}

Value transpose2d(const Value& a) {
    int r = a->val.rows(), c = a->val.cols();
    Tensor out({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(j, i) = a->val.at(i, j);
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, r, c, np] {
            ensure_grad(a);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) a->grad.at(i, j) += np->grad.at(j, i);
        };
    }
    return n;
}

Value reshape(const Value& a, std::vector<int> shape) {
    Tensor out = a->val.reshaped(std::move(shape));
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, np] {
            ensure_grad(a);
            for (long i = 0; i < np->grad.numel(); ++i) a->grad.data[i] += np->grad.data[i];
        };
    }
    return n;
}

// ---- reductions / broadcasts ----

Value sum_all(const Value& a) {
    real s = 0;
    for (real v : a->val.data) s += v;
    auto n = make_node(Tensor::scalar(s), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, np] {
            ensure_grad(a);
            real g = np->grad.data[0];
            for (long i = 0; i < a->val.numel(); ++i) a->grad.data[i] += g;
        };
    }
    return n;
}

Value mean_all(const Value& a) {
    GDA_CHECK(a->val.numel() > 0, "mean_all of empty tensor");
    return scale(sum_all(a), 1.0 / static_cast<real>(a->val.numel()));
}

Value sum_cols(const Value& a) {
    int r = a->val.rows(), c = a->val.cols();
    Tensor out({r, 1});
    for (int i = 0; i < r; ++i) {
        real s = 0;
        for (int j = 0; j < c; ++j) s += a->val.at(i, j);
        out.data[i] = s;
    }
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, r, c, np] {
            ensure_grad(a);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) a->grad.at(i, j) += np->grad.data[i];
        };
    }
    return n;
}

Value mean_cols(const Value& a) { return scale(sum_cols(a), 1.0 / a->val.cols()); }

namespace {

enum class ColOp { Add, Sub, Mul, Div };

Value colvec_op(const Value& a, const Value& v, ColOp op) {
    int r = a->val.rows(), c = a->val.cols();
    GDA_CHECK(v->val.rank() == 2 && v->val.rows() == r && v->val.cols() == 1,
              "colvec operand must be [rows,1]");
    Tensor out({r, c});
    for (int i = 0; i < r; ++i) {
        real w = v->val.data[i];
        for (int j = 0; j < c; ++j) {
            real x = a->val.at(i, j);
            switch (op) {
                case ColOp::Add: out.at(i, j) = x + w; break;
                case ColOp::Sub: out.at(i, j) = x - w; break;
                case ColOp::Mul: out.at(i, j) = x * w; break;
                case ColOp::Div: out.at(i, j) = x / w; break;
            }
        }
    }
    auto n = make_node(std::move(out), {a, v});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, v, r, c, op, np] {
            if (a->requires_grad) {
                ensure_grad(a);
                for (int i = 0; i < r; ++i) {
                    real w = v->val.data[i];
                    for (int j = 0; j < c; ++j) {
                        real g = np->grad.at(i, j);
                        switch (op) {
                            case ColOp::Add:
                            case ColOp::Sub: a->grad.at(i, j) += g; break;
                            case ColOp::Mul: a->grad.at(i, j) += g * w; break;
                            case ColOp::Div: a->grad.at(i, j) += g / w; break;
                        }
                    }
                }
            }
            if (v->requires_grad) {
                ensure_grad(v);
                for (int i = 0; i < r; ++i) {
                    real w = v->val.data[i];
                    real acc = 0;
                    for (int j = 0; j < c; ++j) {
                        real g = np->grad.at(i, j);
                        switch (op) {
                            case ColOp::Add: acc += g; break;
                            case ColOp::Sub: acc -= g; break;
                            case ColOp::Mul: acc += g * a->val.at(i, j); break;
                            case ColOp::Div: acc -= g * a->val.at(i, j) / (w * w); break;
                        }
                    }
                    v->grad.data[i] += acc;
                }
            }
        };
    }
    return n;
}

}  // namespace

Value add_colvec(const Value& a, const Value& v) { return colvec_op(a, v, ColOp::Add); }
Value sub_colvec(const Value& a, const Value& v) { return colvec_op(a, v, ColOp::Sub); }
Value mul_colvec(const Value& a, const Value& v) { return colvec_op(a, v, ColOp::Mul); }
Value div_colvec(const Value& a, const Value& v) { return colvec_op(a, v, ColOp::Div); }

Value add_rowvec(const Value& a, const Value& v) {
    int r = a->val.rows(), c = a->val.cols();
    GDA_CHECK(v->val.rank() == 2 && v->val.rows() == 1 && v->val.cols() == c,
              "rowvec operand must be [1,cols]");
    Tensor out({r, c});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(i, j) = a->val.at(i, j) + v->val.data[j];
    auto n = make_node(std::move(out), {a, v});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, v, r, c, np] {
            if (a->requires_grad) {
                ensure_grad(a);
                for (long i = 0; i < np->grad.numel(); ++i) a->grad.data[i] += np->grad.data[i];
            }
            if (v->requires_grad) {
                ensure_grad(v);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) v->grad.data[j] += np->grad.at(i, j);
            }
        };
    }
    return n;
}

Value mul_rowvec(const Value& a, const Value& v) {
    int r = a->val.rows(), c = a->val.cols();
    GDA_CHECK(v->val.rank() == 2 && v->val.rows() == 1 && v->val.cols() == c,
              "rowvec operand must be [1,cols]");
    Tensor out({r, c});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(i, j) = a->val.at(i, j) * v->val.data[j];
    auto n = make_node(std::move(out), {a, v});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, v, r, c, np] {
            if (a->requires_grad) {
                ensure_grad(a);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) a->grad.at(i, j) += np->grad.at(i, j) * v->val.data[j];
            }
            if (v->requires_grad) {
                ensure_grad(v);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) v->grad.data[j] += np->grad.at(i, j) * a->val.at(i, j);
            }
        };
    }
    return n;
}

Value softmax_rows(const Value& a) {
    int r = a->val.rows(), c = a->val.cols();
    Tensor out({r, c});
    for (int i = 0; i < r; ++i) {
        real m = a->val.at(i, 0);
        for (int j = 1; j < c; ++j) m = std::max(m, a->val.at(i, j));
        real z = 0;
        for (int j = 0; j < c; ++j) {
            real e = std::exp(a->val.at(i, j) - m);
            out.at(i, j) = e;
            z += e;
        }
        for (int j = 0; j < c; ++j) out.at(i, j) /= z;
    }
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, r, c, np] {
            ensure_grad(a);
            for (int i = 0; i < r; ++i) {
                real dot = 0;
                for (int j = 0; j < c; ++j) dot += np->grad.at(i, j) * np->val.at(i, j);
                for (int j = 0; j < c; ++j)
                    a->grad.at(i, j) += np->val.at(i, j) * (np->grad.at(i, j) - dot);
            }
        };
    }
    return n;
}

Value logsumexp_rows(const Value& a) {
    int r = a->val.rows(), c = a->val.cols();
    Tensor out({r, 1});
    for (int i = 0; i < r; ++i) {
        real m = a->val.at(i, 0);
        for (int j = 1; j < c; ++j) m = std::max(m, a->val.at(i, j));
        real z = 0;
        for (int j = 0; j < c; ++j) z += std::exp(a->val.at(i, j) - m);
        out.data[i] = m + std::log(z);
    }
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, r, c, np] {
            ensure_grad(a);
            for (int i = 0; i < r; ++i) {
                real lse = np->val.data[i];
                real g = np->grad.data[i];
                for (int j = 0; j < c; ++j)
                    a->grad.at(i, j) += g * std::exp(a->val.at(i, j) - lse);
            }
        };
    }
    return n;
}

Value gather_rows(const Value& a, std::vector<int> idx) {
    int c = a->val.cols();
    int m = static_cast<int>(idx.size());
    Tensor out({m, c});
    for (int i = 0; i < m; ++i) {
        GDA_CHECK(idx[i] >= 0 && idx[i] < a->val.rows(), "gather_rows index out of range");
        for (int j = 0; j < c; ++j) out.at(i, j) = a->val.at(idx[i], j);
    }
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        auto ix = std::make_shared<std::vector<int>>(std::move(idx));
        n->backward_fn = [a, c, m, ix, np] {
            ensure_grad(a);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c; ++j) a->grad.at((*ix)[i], j) += np->grad.at(i, j);
        };
    }
    return n;
}

Value gather_cols(const Value& a, std::vector<int> idx) {
    int r = a->val.rows();
    GDA_CHECK(static_cast<int>(idx.size()) == r, "gather_cols needs one index per row");
    Tensor out({r, 1});
    for (int i = 0; i < r; ++i) {
        GDA_CHECK(idx[i] >= 0 && idx[i] < a->val.cols(), "gather_cols index out of range");
        out.data[i] = a->val.at(i, idx[i]);
    }
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        auto ix = std::make_shared<std::vector<int>>(std::move(idx));
        n->backward_fn = [a, r, ix, np] {
            ensure_grad(a);
            for (int i = 0; i < r; ++i) a->grad.at(i, (*ix)[i]) += np->grad.data[i];
        };
    }
    return n;
}

Value concat_rows(const Value& a, const Value& b) {
    int c = a->val.cols();
    GDA_CHECK(b->val.cols() == c, "concat_rows col mismatch");
    int ra = a->val.rows(), rb = b->val.rows();
    Tensor out({ra + rb, c});
    std::copy(a->val.data.begin(), a->val.data.end(), out.data.begin());
    std::copy(b->val.data.begin(), b->val.data.end(), out.data.begin() + a->val.numel());
    auto n = make_node(std::move(out), {a, b});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, b, np] {
            long na = a->val.numel();
            if (a->requires_grad) {
                ensure_grad(a);
                for (long i = 0; i < na; ++i) a->grad.data[i] += np->grad.data[i];
            }
            if (b->requires_grad) {
                ensure_grad(b);
                for (long i = 0; i < b->val.numel(); ++i) b->grad.data[i] += np->grad.data[na + i];
            }
        };
    }
    return n;
}

// ---- image ops ----

namespace {

// 3x3 im2col, pad 1. col is [Ci*9, Ho*Wo].
void im2col3(const real* x, int C, int H, int W, int stride, real* col, int Ho, int Wo) {
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                real* dst = col + ((c * 3 + ky) * 3 + kx) * (Ho * Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride + ky - 1;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride + kx - 1;
                        real v = 0;
                        if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                            v = x[(c * H + iy) * W + ix];
                        dst[oy * Wo + ox] = v;
                    }
                }
            }
}

void col2im3(const real* col, int C, int H, int W, int stride, real* x, int Ho, int Wo) {
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const real* src = col + ((c * 3 + ky) * 3 + kx) * (Ho * Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride + kx - 1;
                        if (ix < 0 || ix >= W) continue;
                        x[(c * H + iy) * W + ix] += src[oy * Wo + ox];
                    }
                }
            }
}

}  // namespace

Value conv2d(const Value& x, const Value& w, const Value& b, int stride) {
    GDA_CHECK(x->val.rank() == 4, "conv2d input must be [N,C,H,W]");
    GDA_CHECK(w->val.rank() == 4 && w->val.dim(2) == 3 && w->val.dim(3) == 3, "conv2d kernel must be 3x3");
    GDA_CHECK(stride == 1 || stride == 2, "conv2d stride must be 1 or 2");
    int N = x->val.dim(0), Ci = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    int Co = w->val.dim(0);
    GDA_CHECK(w->val.dim(1) == Ci, "conv2d channel mismatch");
    GDA_CHECK(b->val.numel() == Co, "conv2d bias size mismatch");
    int Ho = (H + 2 - 3) / stride + 1;
    int Wo = (W + 2 - 3) / stride + 1;
    int K = Ci * 9, T = Ho * Wo;
    Tensor out({N, Co, Ho, Wo});
    std::vector<real> col(static_cast<size_t>(K) * T);
    for (int i = 0; i < N; ++i) {
        im2col3(x->val.data.data() + static_cast<long>(i) * Ci * H * W, Ci, H, W, stride, col.data(), Ho, Wo);
        ECMap Wm(w->val.data.data(), Co, K);
        ECMap Cm(col.data(), K, T);
        EMap Om(out.data.data() + static_cast<long>(i) * Co * T, Co, T);
        Om.noalias() = Wm * Cm;
        for (int co = 0; co < Co; ++co) Om.row(co).array() += b->val.data[co];
    }
    auto n = make_node(std::move(out), {x, w, b});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [x, w, b, stride, N, Ci, H, W, Co, Ho, Wo, K, T, np] {
            std::vector<real> col(static_cast<size_t>(K) * T);
            std::vector<real> dcol(static_cast<size_t>(K) * T);
            for (int i = 0; i < N; ++i) {
                ECMap G(np->grad.data.data() + static_cast<long>(i) * Co * T, Co, T);
                if (w->requires_grad || b->requires_grad) {
                    if (w->requires_grad) {
                        ensure_grad(w);
                        im2col3(x->val.data.data() + static_cast<long>(i) * Ci * H * W, Ci, H, W,
                                stride, col.data(), Ho, Wo);
                        EMap dW(w->grad.data.data(), Co, K);
                        ECMap Cm(col.data(), K, T);
                        dW.noalias() += G * Cm.transpose();
                    }
                    if (b->requires_grad) {
                        ensure_grad(b);
                        for (int co = 0; co < Co; ++co) b->grad.data[co] += G.row(co).sum();
                    }
                }
                if (x->requires_grad) {
                    ensure_grad(x);
                    ECMap Wm(w->val.data.data(), Co, K);
                    EMap dC(dcol.data(), K, T);
                    dC.noalias() = Wm.transpose() * G;
                    col2im3(dcol.data(), Ci, H, W, stride,
                            x->grad.data.data() + static_cast<long>(i) * Ci * H * W, Ho, Wo);
                }
            }
        };
    }
    return n;
}

Value nearest_up2(const Value& x) {
    GDA_CHECK(x->val.rank() == 4, "nearest_up2 input must be [N,C,H,W]");
    int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    Tensor out({N, C, 2 * H, 2 * W});
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < 2 * H; ++y)
                for (int xx = 0; xx < 2 * W; ++xx)
                    out.data[((static_cast<long>(i) * C + c) * 2 * H + y) * 2 * W + xx] =
                        x->val.data[((static_cast<long>(i) * C + c) * H + y / 2) * W + xx / 2];
    auto n = make_node(std::move(out), {x});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [x, N, C, H, W, np] {
            ensure_grad(x);
            for (int i = 0; i < N; ++i)
                for (int c = 0; c < C; ++c)
                    for (int y = 0; y < 2 * H; ++y)
                        for (int xx = 0; xx < 2 * W; ++xx)
                            x->grad.data[((static_cast<long>(i) * C + c) * H + y / 2) * W + xx / 2] +=
                                np->grad.data[((static_cast<long>(i) * C + c) * 2 * H + y) * 2 * W + xx];
        };
    }
    return n;
}

Value concat_channels(const Value& a, const Value& b) {
    GDA_CHECK(a->val.rank() == 4 && b->val.rank() == 4, "concat_channels needs [N,C,H,W]");
    int N = a->val.dim(0), Ca = a->val.dim(1), H = a->val.dim(2), W = a->val.dim(3);
    int Cb = b->val.dim(1);
    GDA_CHECK(b->val.dim(0) == N && b->val.dim(2) == H && b->val.dim(3) == W,
              "concat_channels spatial mismatch");
    Tensor out({N, Ca + Cb, H, W});
    long plane = static_cast<long>(H) * W;
    for (int i = 0; i < N; ++i) {
        std::copy(a->val.data.begin() + i * Ca * plane, a->val.data.begin() + (i + 1) * Ca * plane,
                  out.data.begin() + static_cast<long>(i) * (Ca + Cb) * plane);
        std::copy(b->val.data.begin() + i * Cb * plane, b->val.data.begin() + (i + 1) * Cb * plane,
                  out.data.begin() + (static_cast<long>(i) * (Ca + Cb) + Ca) * plane);
    }
    auto n = make_node(std::move(out), {a, b});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [a, b, N, Ca, Cb, plane, np] {
            for (int i = 0; i < N; ++i) {
                if (a->requires_grad) {
                    ensure_grad(a);
                    for (long k = 0; k < Ca * plane; ++k)
                        a->grad.data[i * Ca * plane + k] +=
                            np->grad.data[static_cast<long>(i) * (Ca + Cb) * plane + k];
                }
                if (b->requires_grad) {
                    ensure_grad(b);
                    for (long k = 0; k < Cb * plane; ++k)
                        b->grad.data[i * Cb * plane + k] +=
                            np->grad.data[(static_cast<long>(i) * (Ca + Cb) + Ca) * plane + k];
                }
            }
        };
    }
    return n;
}

Value avg_pool_all(const Value& x) {
    GDA_CHECK(x->val.rank() == 4, "avg_pool_all input must be [N,C,H,W]");
    int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    long plane = static_cast<long>(H) * W;
    Tensor out({N, C});
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) {
            real s = 0;
            const real* p = x->val.data.data() + (static_cast<long>(i) * C + c) * plane;
            for (long k = 0; k < plane; ++k) s += p[k];
            out.at(i, c) = s / static_cast<real>(plane);
        }
    auto n = make_node(std::move(out), {x});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [x, N, C, plane, np] {
            ensure_grad(x);
            for (int i = 0; i < N; ++i)
                for (int c = 0; c < C; ++c) {
                    real g = np->grad.at(i, c) / static_cast<real>(plane);
                    real* p = x->grad.data.data() + (static_cast<long>(i) * C + c) * plane;
                    for (long k = 0; k < plane; ++k) p[k] += g;
                }
        };
    }
    return n;
}

Value add_chan_bcast(const Value& x, const Value& v) {
    GDA_CHECK(x->val.rank() == 4, "add_chan_bcast input must be [N,C,H,W]");
    int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    GDA_CHECK(v->val.rank() == 2 && v->val.rows() == N && v->val.cols() == C,
              "add_chan_bcast operand must be [N,C]");
    long plane = static_cast<long>(H) * W;
    Tensor out = x->val;
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) {
            real w = v->val.at(i, c);
            real* p = out.data.data() + (static_cast<long>(i) * C + c) * plane;
            for (long k = 0; k < plane; ++k) p[k] += w;
        }
    auto n = make_node(std::move(out), {x, v});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [x, v, N, C, plane, np] {
            if (x->requires_grad) {
                ensure_grad(x);
                for (long i = 0; i < np->grad.numel(); ++i) x->grad.data[i] += np->grad.data[i];
            }
            if (v->requires_grad) {
                ensure_grad(v);
                for (int i = 0; i < N; ++i)
                    for (int c = 0; c < C; ++c) {
                        const real* p = np->grad.data.data() + (static_cast<long>(i) * C + c) * plane;
                        real s = 0;
                        for (long k = 0; k < plane; ++k) s += p[k];
                        v->grad.at(i, c) += s;
                    }
            }
        };
    }
    return n;
}

Value mul_chan(const Value& x, const Value& g) {
    GDA_CHECK(x->val.rank() == 4, "mul_chan input must be [N,C,H,W]");
    int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    GDA_CHECK(g->val.numel() == C, "mul_chan gamma size mismatch");
    long plane = static_cast<long>(H) * W;
    Tensor out = x->val;
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) {
            real w = g->val.data[c];
            real* p = out.data.data() + (static_cast<long>(i) * C + c) * plane;
            for (long k = 0; k < plane; ++k) p[k] *= w;
        }
    auto n = make_node(std::move(out), {x, g});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [x, g, N, C, plane, np] {
            for (int i = 0; i < N; ++i)
                for (int c = 0; c < C; ++c) {
                    long base = (static_cast<long>(i) * C + c) * plane;
                    if (x->requires_grad) {
                        ensure_grad(x);
                        real w = g->val.data[c];
                        for (long k = 0; k < plane; ++k)
                            x->grad.data[base + k] += np->grad.data[base + k] * w;
                    }
                    if (g->requires_grad) {
                        ensure_grad(g);
                        real s = 0;
                        for (long k = 0; k < plane; ++k)
                            s += np->grad.data[base + k] * x->val.data[base + k];
                        g->grad.data[c] += s;
                    }
                }
        };
    }
    return n;
}

Value add_chan(const Value& x, const Value& b) {
    GDA_CHECK(x->val.rank() == 4, "add_chan input must be [N,C,H,W]");
    int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    GDA_CHECK(b->val.numel() == C, "add_chan bias size mismatch");
    long plane = static_cast<long>(H) * W;
    Tensor out = x->val;
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) {
            real w = b->val.data[c];
            real* p = out.data.data() + (static_cast<long>(i) * C + c) * plane;
            for (long k = 0; k < plane; ++k) p[k] += w;
        }
    auto n = make_node(std::move(out), {x, b});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [x, b, N, C, plane, np] {
            if (x->requires_grad) {
                ensure_grad(x);
                for (long i = 0; i < np->grad.numel(); ++i) x->grad.data[i] += np->grad.data[i];
            }
            if (b->requires_grad) {
                ensure_grad(b);
                for (int i = 0; i < N; ++i)
                    for (int c = 0; c < C; ++c) {
                        const real* p = np->grad.data.data() + (static_cast<long>(i) * C + c) * plane;
                        real s = 0;
                        for (long k = 0; k < plane; ++k) s += p[k];
                        b->grad.data[c] += s;
                    }
            }
        };
    }
    return n;
}

Value nchw_to_ntc(const Value& x) {
    GDA_CHECK(x->val.rank() == 4, "nchw_to_ntc input must be [N,C,H,W]");
    int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    int T = H * W;
    Tensor out({N, T, C});
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c)
            for (int t = 0; t < T; ++t)
                out.data[(static_cast<long>(i) * T + t) * C + c] =
                    x->val.data[(static_cast<long>(i) * C + c) * T + t];
    auto n = make_node(std::move(out), {x});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [x, N, C, T, np] {
            ensure_grad(x);
            for (int i = 0; i < N; ++i)
                for (int c = 0; c < C; ++c)
                    for (int t = 0; t < T; ++t)
                        x->grad.data[(static_cast<long>(i) * C + c) * T + t] +=
                            np->grad.data[(static_cast<long>(i) * T + t) * C + c];
        };
    }
    return n;
}

Value ntc_to_nchw(const Value& x, int h, int w) {
    GDA_CHECK(x->val.rank() == 3, "ntc_to_nchw input must be [N,T,C]");
    int N = x->val.dim(0), T = x->val.dim(1), C = x->val.dim(2);
    GDA_CHECK(T == h * w, "ntc_to_nchw token count mismatch");
    Tensor out({N, C, h, w});
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c)
            for (int t = 0; t < T; ++t)
                out.data[(static_cast<long>(i) * C + c) * T + t] =
                    x->val.data[(static_cast<long>(i) * T + t) * C + c];
    auto n = make_node(std::move(out), {x});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backward_fn = [x, N, C, T, np] {
            ensure_grad(x);
            for (int i = 0; i < N; ++i)
                for (int c = 0; c < C; ++c)
                    for (int t = 0; t < T; ++t)
                        x->grad.data[(static_cast<long>(i) * T + t) * C + c] +=
                            np->grad.data[(static_cast<long>(i) * C + c) * T + t];
        };
    }
    return n;
}

// ---- composites ----

Value l2_normalize_rows(const Value& a, real eps) {
    Value n2 = sum_cols(mul(a, a));
    Value inv = rsqrt_v(add_scalar(n2, eps));
    return mul_colvec(a, inv);
}

Value layer_norm_rows(const Value& a, const Value& gamma, const Value& beta, real eps) {
    Value mu = mean_cols(a);
    Value centered = sub_colvec(a, mu);
    Value var = mean_cols(mul(centered, centered));
    Value inv = rsqrt_v(add_scalar(var, eps));
    Value normed = mul_colvec(centered, inv);
    return add_rowvec(mul_rowvec(normed, gamma), beta);
}

Value group_norm(const Value& x, int groups, const Value& gamma, const Value& beta, real eps) {
    int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    GDA_CHECK(C % groups == 0, "group_norm channel count not divisible by groups");
    Value flat = reshape(x, {N * groups, (C / groups) * H * W});
    Value mu = mean_cols(flat);
    Value centered = sub_colvec(flat, mu);
    Value var = mean_cols(mul(centered, centered));
    Value inv = rsqrt_v(add_scalar(var, eps));
    Value normed = reshape(mul_colvec(centered, inv), {N, C, H, W});
    return add_chan(mul_chan(normed, gamma), beta);
}

Value linear(const Value& x, const Value& w, const Value& b) {
    return add_rowvec(matmul(x, w, false, true), b);
}

}  // namespace gda
