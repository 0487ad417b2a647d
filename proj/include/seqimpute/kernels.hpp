#pragma once

#include <cstddef>

#include "seqimpute/tensor.hpp"

// Dense numeric kernels. The default namespace holds the OpenMP-parallel
// versions used by the autodiff tape; `kernels::reference` keeps plain serial
// loops with the same per-element summation order, used by the tests and the
// benchmark as a baseline.
namespace seqimpute::kernels {

enum class Trans { no, yes };

// c = op(a) * op(b) (+ c when accumulate is set).
// op(x) is x or its transpose. c must already have the result shape.
void gemm(const Tensor& a, Trans ta, const Tensor& b, Trans tb, Tensor& c, bool accumulate = false);

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

// Elementwise maps, parallel over elements for large tensors.
void sigmoid(const double* x, double* y, std::size_t n);
void tanh(const double* x, double* y, std::size_t n);

// Numerically stable scalar forms.
double sigmoid(double x);
double log_sigmoid(double x);
double softplus(double x);

// Number of OpenMP threads kernels will use (1 when built without OpenMP).
int max_threads();

namespace reference {

void gemm(const Tensor& a, Trans ta, const Tensor& b, Trans tb, Tensor& c, bool accumulate = false);
void sigmoid(const double* x, double* y, std::size_t n);
void tanh(const double* x, double* y, std::size_t n);

}  // namespace reference

}  // namespace seqimpute::kernels
