#pragma once

#include <cstddef>
#include <span>

#include "introspect/lm/autodiff.hpp"

// Differentiable ops over Graph nodes. Each op computes its value eagerly and
// registers a backward closure when the graph is recording.
namespace introspect::lm::ops {

/// x [N x K] times w^T, w [M x K] -> [N x M].
template <typename Real>
Var matmul_nt(Graph<Real>& g, Var x, Var w);

/// Adds a 1 x M row vector to every row of x [N x M].
template <typename Real>
Var add_bias(Graph<Real>& g, Var x, Var bias);

template <typename Real>
Var add(Graph<Real>& g, Var a, Var b);

template <typename Real>
Var scale(Graph<Real>& g, Var a, Real s);

/// out[i] = table[indices[i]].
template <typename Real>
Var gather_rows(Graph<Real>& g, Var table, std::span<const int> indices);

/// Copy of base with base[rows[j]] replaced by src[j]; rows must be distinct.
template <typename Real>
Var replace_rows(Graph<Real>& g, Var base, std::span<const std::size_t> rows, Var src);

template <typename Real>
Var layer_norm(Graph<Real>& g, Var x, Var gain, Var bias, Real eps = Real(1e-5));

/// tanh-approximated GELU.
template <typename Real>
Var gelu(Graph<Real>& g, Var x);

template <typename Real>
Var relu(Graph<Real>& g, Var x);

/// Causal multi-head attention on packed qkv [B*T x 3d] -> [B*T x d].
template <typename Real>
Var causal_attention(Graph<Real>& g, Var qkv, std::size_t batch, std::size_t seq_len, std::size_t heads);

/// Weighted mean token cross-entropy: sum_i w_i * CE(logits_i, target_i) / sum_i w_i.
/// Rows with zero weight are ignored (their targets may be anything). When all
/// weights are zero the loss is 0 with zero gradient.
template <typename Real>
Var cross_entropy(Graph<Real>& g, Var logits, std::span<const int> targets, std::span<const Real> weights);

/// Mean over all entries of (a - b)^2; b is treated as a constant.
template <typename Real>
Var mean_squared_error(Graph<Real>& g, Var a, Var b);

/// Sum of |x| over all entries divided by the number of rows.
template <typename Real>
Var l1_per_row(Graph<Real>& g, Var x);

}  // namespace introspect::lm::ops
