#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "gda/tensor.hpp"

namespace gda {

// Reverse-mode tape over Tensor. Nodes are built eagerly by the op functions
// below; backward() walks the graph in reverse topological order. Training
// code holds parameters as long-lived Values and rebuilds the rest of the
// graph every step.
struct Node {
    Tensor val;
    Tensor grad;  // allocated lazily by backward()
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;
};

using Value = std::shared_ptr<Node>;

Value constant(Tensor t);
Value param(Tensor t);

// Accumulates into .grad of every reachable node with requires_grad.
// root must be scalar (numel 1). Parameter grads persist across calls until
// zeroed by the optimizer.
void backward(const Value& root);

// ---- elementwise ----
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value scale(const Value& a, real s);
Value add_scalar(const Value& a, real s);
Value relu(const Value& a);
Value silu(const Value& a);
Value exp_v(const Value& a);
Value log_v(const Value& a);
Value sqrt_v(const Value& a);
Value rsqrt_v(const Value& a);
Value clamp_v(const Value& a, real lo, real hi);

// ---- matrix ----
Value matmul(const Value& a, const Value& b, bool ta = false, bool tb = false);
Value bmm(const Value& a, const Value& b, bool ta = false, bool tb = false);
Value transpose2d(const Value& a);
Value reshape(const Value& a, std::vector<int> shape);

// ---- reductions and broadcasts, 2D [rows, cols] ----
Value sum_all(const Value& a);
Value mean_all(const Value& a);
Value sum_cols(const Value& a);   // [r,c] -> [r,1]
Value mean_cols(const Value& a);  // [r,c] -> [r,1]
Value add_colvec(const Value& a, const Value& v);
Value sub_colvec(const Value& a, const Value& v);
Value mul_colvec(const Value& a, const Value& v);
Value div_colvec(const Value& a, const Value& v);
Value add_rowvec(const Value& a, const Value& v);  // v: [1,c]
Value mul_rowvec(const Value& a, const Value& v);

Value softmax_rows(const Value& a);
Value logsumexp_rows(const Value& a);  // [r,c] -> [r,1]

Value gather_rows(const Value& a, std::vector<int> idx);  // [n,c] -> [|idx|,c]
Value gather_cols(const Value& a, std::vector<int> idx);  // [r,c] -> [r,1]

Value concat_rows(const Value& a, const Value& b);

// ---- image ops, rank 4 [N,C,H,W] ----
Value conv2d(const Value& x, const Value& w, const Value& b, int stride);  // 3x3, pad 1
Value nearest_up2(const Value& x);
Value concat_channels(const Value& a, const Value& b);
Value avg_pool_all(const Value& x);                    // -> [N,C]
Value add_chan_bcast(const Value& x, const Value& v);  // v: [N,C]
Value mul_chan(const Value& x, const Value& g);        // g: [C]
Value add_chan(const Value& x, const Value& b);        // b: [C]
Value nchw_to_ntc(const Value& x);                     // -> [N, H*W, C]
Value ntc_to_nchw(const Value& x, int h, int w);

// ---- composites ----
Value l2_normalize_rows(const Value& a, real eps = 0.0);
Value layer_norm_rows(const Value& a, const Value& gamma, const Value& beta, real eps = 1e-5);
Value group_norm(const Value& x, int groups, const Value& gamma, const Value& beta, real eps = 1e-5);
Value linear(const Value& x, const Value& w, const Value& b);  // x[r,in] w[out,in] b[1,out]

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }
inline Value operator*(const Value& a, const Value& b) { return mul(a, b); }

}  // namespace gda
