#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "gda/common.hpp"

namespace gda {

class Rng;

// Dense row-major tensor of doubles. Rank is the shape length; most ops in
// graph.hpp interpret rank 2 as [rows, cols] and rank 4 as [N, C, H, W].
struct Tensor {
    std::vector<int> shape;
    std::vector<real> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
    Tensor(std::vector<int> s, std::vector<real> d) : shape(std::move(s)), data(std::move(d)) {
        GDA_CHECK(data.size() == static_cast<size_t>(numel_of(shape)), "tensor data/shape mismatch");
    }

    static long numel_of(const std::vector<int>& s) {
        long n = 1;
        for (int d : s) {
            GDA_CHECK(d >= 0, "negative dimension");
            n *= d;
        }
        return n;
    }

    long numel() const { return static_cast<long>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    // [rows, cols] view of a rank-2 tensor.
    int rows() const {
        GDA_CHECK(rank() == 2, "rows() needs rank 2");
        return shape[0];
    }
    int cols() const {
        GDA_CHECK(rank() == 2, "cols() needs rank 2");
        return shape[1];
    }

    real& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    real at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, real v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(real v) { return Tensor({1}, {v}); }
    static Tensor randn(std::vector<int> s, Rng& rng, real stddev = 1.0);

    Tensor reshaped(std::vector<int> s) const {
        GDA_CHECK(numel_of(s) == numel(), "reshape numel mismatch");
        Tensor t = *this;
        t.shape = std::move(s);
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

}  // namespace gda
