#include <algorithm>
#include <cmath>
#include <numeric>

#include "msif/evalbench.hpp"

namespace msif::evalbench {

namespace {
void require_paired(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ContractError(std::string(what) + ": ranked lists and truth sets differ in number");
  if (a == 0) throw ContractError(std::string(what) + ": no queries");
}
}  // namespace

int first_hit_rank(std::span<const int> ranked, const std::set<int>& truth) {
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (truth.count(ranked[i])) return static_cast<int>(i) + 1;
  }
  return 0;
}

double mrr(std::span<const std::vector<int>> ranked, std::span<const std::set<int>> truth) {
  require_paired(ranked.size(), truth.size(), "mrr");
  double s = 0;
  for (std::size_t q = 0; q < ranked.size(); ++q) {
    const int r = first_hit_rank(ranked[q], truth[q]);
    if (r > 0) s += 1.0 / r;
  }
  return s / static_cast<double>(ranked.size());
}

double recall_at_k(std::span<const std::vector<int>> ranked, std::span<const std::set<int>> truth, int k) {
  require_paired(ranked.size(), truth.size(), "recall_at_k");
  if (k < 1) throw ContractError("recall_at_k: k must be >= 1");
  double s = 0;
  for (std::size_t q = 0; q < ranked.size(); ++q) {
    if (truth[q].empty()) throw ContractError("recall_at_k: query without true sources");
    const auto top = std::min<std::size_t>(static_cast<std::size_t>(k), ranked[q].size());
    std::size_t hit = 0;
    for (std::size_t i = 0; i < top; ++i) hit += truth[q].count(ranked[q][i]);
    s += static_cast<double>(hit) / static_cast<double>(truth[q].size());
  }
  return s / static_cast<double>(ranked.size());
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("pearson: length mismatch");
  if (a.size() < 3) throw ContractError("pearson: need at least 3 pairs");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) throw NumericError("pearson: non-finite input");
  }
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0 || sbb == 0) throw NumericError("pearson: constant input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("spearman: length mismatch");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  return pearson(ra, rb);
}

}  // namespace msif::evalbench
