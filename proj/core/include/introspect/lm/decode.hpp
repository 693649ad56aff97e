#pragma once

#include <span>
#include <vector>

#include "introspect/lm/transformer.hpp"

namespace introspect::lm {

/// Index of the largest entry; ties go to the lowest index.
int argmax(std::span<const float> logits);

/// Highest-scoring id among `allowed`; ties go to the lowest id.
int argmax_among(std::span<const float> logits, std::span<const int> allowed);

/// Argmax of the next-token distribution after the whole of `seq`.
int next_token(const Model& model, const TokenSeq& seq);

/// Greedy continuation of `prompt`, without the prompt itself. Stops after
/// `stop` (included), after `max_new` tokens, or when the context is full.
std::vector<int> greedy_decode(const Model& model, const TokenSeq& prompt, int max_new, int stop);

/// Sum of log-probabilities of `continuation` following `prompt`.
double continuation_logprob(const Model& model, const TokenSeq& prompt, std::span<const int> continuation);

/// Natural-log softmax of one row of logits.
std::vector<double> log_softmax(std::span<const float> logits);

}  // namespace introspect::lm
