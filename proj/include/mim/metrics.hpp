#pragma once

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace mim {

// Probability that a random positive outranks a random negative; ties
// count 1/2. Rank-sum formulation, O(n log n).
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("auc: scores/labels length mismatch");
  std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (int l : labels) n_pos += (l > 0);
  std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("auc: needs at least one positive and one negative");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    double avg_rank = 0.5 * double(i + 1 + j);  // 1-based average rank of the tie group
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] > 0) rank_sum_pos += avg_rank;
    i = j;
  }
  return (rank_sum_pos - double(n_pos) * double(n_pos + 1) / 2.0) /
         (double(n_pos) * double(n_neg));
}

}  // namespace mim
