#pragma once

#include "smi/ad/tensor.hpp"

#include <cstddef>
#include <vector>

namespace smi::ad {

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);

// Reductions to a [1] tensor.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor log_mean_exp(const Tensor& x);
Tensor l1_distance(const Tensor& a, const Tensor& b);
// Mean over rows of KL(p_r || q_r) for [R x C] (or [C]) probability tables.
Tensor kl_div(const Tensor& p, const Tensor& q);

Tensor softmax_rows(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor matmul(const Tensor& a, const Tensor& b);
// x [B x I], w [I x O], b [O] -> [B x O]
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);
// x [B x Cin x L], kernel [Cout x Cin x K], bias [Cout]; stride 1, same padding.
Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias);
Tensor conv1d(const Tensor& x, const Tensor& kernel);
// [B x I], [B x J] -> [B x (I+J)]
Tensor concat_cols(const Tensor& a, const Tensor& b);
// Row permutation / selection along the leading dimension.
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows);
// x [B x C x L]; out[b,c,j] = x[b,c,src[b*L + j]]. Used for feature realignment.
Tensor gather_positions(const Tensor& x, const std::vector<std::size_t>& src);

// Selects (and may repeat) positions along the last axis: out[..., j] = x[..., cols[j]].
Tensor gather_columns(const Tensor& x, const std::vector<std::size_t>& cols);

}  // namespace smi::ad
