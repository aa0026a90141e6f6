#include "msif/influence.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <set>

#include "json.hpp"

namespace msif::influence {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::vector<std::string> RankedList::ids() const {
  std::vector<std::string> out;
  out.reserve(items.size());
  for (const auto& r : items) out.push_back(r.candidate_id);
  return out;
}

RankedList rank_candidates(std::vector<InfluenceResult> results) {
  for (const auto& r : results) {
    if (!std::isfinite(r.score)) throw NumericError("non-finite influence score for candidate " + r.candidate_id);
  }
  std::sort(results.begin(), results.end(), [](const InfluenceResult& a, const InfluenceResult& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.candidate_id < b.candidate_id;
  });
  return RankedList{std::move(results)};
}

void require_stage(const FactorSet& factors, Stage expected, const char* what) {
  if (factors.stage != expected) {
    throw ContractError(std::string(what) + ": expected '" + stage_name(expected) + "' factors, got '" +
                        stage_name(factors.stage) + "'");
  }
}

double single_stage_influence(const FactorSet& factors_ft, const BlockGradients& query_grad,
                              const BlockGradients& candidate_grad, std::optional<double> damping) {
  return nanolm::dot(query_grad, ekfac::ihvp(factors_ft, candidate_grad, damping));
}

double multi_stage_influence(const FactorSet& factors_pt, const FactorSet& factors_ft,
                             const BlockGradients& query_grad_ft, const BlockGradients& candidate_grad_pt,
                             std::optional<double> damping_pt, std::optional<double> damping_ft) {
  require_stage(factors_pt, Stage::pretrained, "multi_stage_influence");
  require_stage(factors_ft, Stage::finetuned, "multi_stage_influence");
  if (!query_grad_ft.same_keys(candidate_grad_pt)) {
    throw ContractError("multi_stage_influence: query and candidate gradients cover different blocks");
  }
  return nanolm::dot(ekfac::ihvp(factors_ft, query_grad_ft, damping_ft),
                     ekfac::ihvp(factors_pt, candidate_grad_pt, damping_pt));
}

BlockGradients multi_stage_query_vector(const FactorSet& factors_pt, const FactorSet& factors_ft,
                                        const BlockGradients& query_grad_ft, std::optional<double> damping_pt,
                                        std::optional<double> damping_ft) {
  require_stage(factors_pt, Stage::pretrained, "multi_stage_query_vector");
  require_stage(factors_ft, Stage::finetuned, "multi_stage_query_vector");
  auto x = ekfac::ihvp(factors_ft, query_grad_ft, damping_ft);
  x.source = factors_pt.fingerprint;  // now lives in the pre-trained parameter space
  return ekfac::ihvp(factors_pt, x, damping_pt);
}

double multi_stage_influence(const FactorSet& factors_pt, const FactorSet& factors_ft, const Query& query,
                             const Sequence& candidate, const Parameters& model_pt, const Parameters& model_ft,
                             BlockFilter filter) {
  if (!model_pt.config.same_backbone(model_ft.config)) {
    throw ContractError("multi_stage_influence: models do not share a backbone");
  }
  const auto q = nanolm::measurement(model_ft, query, filter);
  const auto c = nanolm::sequence_gradient(model_pt, candidate, filter);
  return multi_stage_influence(factors_pt, factors_ft, q.grad, c.grad);
}

double gdp(const BlockGradients& query_grad, const BlockGradients& candidate_grad) {
  return nanolm::dot(query_grad, candidate_grad);
}

double gdp_multistage(const BlockGradients& query_grad_ft, const BlockGradients& candidate_grad_pt) {
  return nanolm::dot(query_grad_ft, candidate_grad_pt);
}

CkaGram cka_gram(BlockGradients g) {
  CkaGram out;
  for (const auto& [id, m] : g.blocks) {
    // ‖XᵀX‖_F = ‖XXᵀ‖_F; take the smaller side.
    const double n = m.rows() <= m.cols() ? MatrixXd(m * m.transpose()).norm() : MatrixXd(m.transpose() * m).norm();
    out.norm.emplace(id, n);
  }
  out.grad = std::move(g);
  return out;
}

double cka(const CkaGram& x, const CkaGram& y) {
  if (!x.grad.same_keys(y.grad)) throw ContractError("cka: block sets differ");
  double sum = 0;
  int n = 0;
  bool x_nonzero = false, y_nonzero = false;
  for (auto xi = x.grad.blocks.begin(), yi = y.grad.blocks.begin(); xi != x.grad.blocks.end(); ++xi, ++yi) {
    if (xi->second.rows() != yi->second.rows() || xi->second.cols() != yi->second.cols()) {
      throw ContractError("cka: block shapes differ");
    }
    const double nx = x.norm.at(xi->first), ny = y.norm.at(yi->first);
    x_nonzero |= nx > 0;
    y_nonzero |= ny > 0;
    if (nx == 0 || ny == 0) continue;
    const MatrixXd& xm = xi->second;
    const MatrixXd& ym = yi->second;
    sum += MatrixXd(ym.transpose() * xm).squaredNorm() / (nx * ny);
    ++n;
  }
  if (!x_nonzero || !y_nonzero) throw NumericError("cka: undefined for a zero gradient");
  return n ? sum / n : 0.0;
}

double cka(const BlockGradients& x, const BlockGradients& y) { return cka(cka_gram(x), cka_gram(y)); }

Eigen::VectorXd embed(const Parameters& params, const Sequence& seq) {
  const auto tr = nanolm::forward(params, std::span(&seq, 1));
  VectorXd v = tr.residual.colwise().mean().transpose();
  const double n = v.norm();
  if (!(n > 0) || !std::isfinite(n)) throw NumericError("embed: degenerate representation");
  return v / n;
}

Eigen::MatrixXd embed_all(const Parameters& params, std::span<const Sequence> seqs) {
  MatrixXd out(static_cast<Eigen::Index>(seqs.size()), params.config.d_model);
  for (std::size_t i = 0; i < seqs.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = embed(params, seqs[i]).transpose();
  return out;
}

double repsim(const Parameters& params, const Sequence& a, const Sequence& b) {
  return embed(params, a).dot(embed(params, b));
}

Bm25::Bm25(std::span<const std::vector<int>> documents, double k1, double b) : k1_(k1), b_(b) {
  if (documents.empty()) throw InputError("bm25: empty corpus");
  if (!(k1 > 0)) throw ContractError("bm25: k1 must be > 0");
  if (!(b >= 0 && b <= 1)) throw ContractError("bm25: b must lie in [0, 1]");
  double total = 0;
  for (const auto& d : documents) {
    std::map<int, int> tf;
    for (int t : d) ++tf[t];
    for (const auto& [t, c] : tf) ++df_[t];
    doc_len_.push_back(static_cast<double>(d.size()));
    total += static_cast<double>(d.size());
    tf_.push_back(std::move(tf));
  }
  avg_len_ = total / static_cast<double>(documents.size());
}

std::vector<double> Bm25::scores(std::span<const int> query) const {
  if (query.empty()) throw InputError("bm25: empty query");
  const std::set<int> terms(query.begin(), query.end());
  const double n_docs = static_cast<double>(doc_len_.size());
  std::vector<double> out(doc_len_.size(), 0.0);
  for (int t : terms) {
    const auto df = df_.find(t);
    if (df == df_.end()) continue;
    const double idf = std::log((n_docs + 1.0) / df->second);
    for (std::size_t d = 0; d < out.size(); ++d) {
      const auto it = tf_[d].find(t);
      if (it == tf_[d].end()) continue;
      const double f = it->second;
      const double norm = avg_len_ > 0 ? doc_len_[d] / avg_len_ : 0.0;
      out[d] += idf * f * (k1_ + 1.0) / (f + k1_ * (1.0 - b_ + b_ * norm));
    }
  }
  return out;
}

std::vector<double> bm25_scores(std::span<const std::vector<int>> corpus, std::span<const int> query, double k1,
                                double b) {
  return Bm25(corpus, k1, b).scores(query);
}

std::vector<int> knn_candidates(const Eigen::MatrixXd& embeddings, const Eigen::VectorXd& query, int k) {
  if (embeddings.cols() != query.size()) throw ContractError("knn_candidates: dimension mismatch");
  const int n = static_cast<int>(embeddings.rows());
  if (k > n) {
    std::clog << "warning: knn k=" << k << " exceeds corpus size " << n << "; using " << n << "\n";
    k = n;
  }
  if (k < 0) throw InputError("knn_candidates: k must be >= 0");
  const VectorXd sim = embeddings * query;
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](int a, int b) {
    if (sim(a) != sim(b)) return sim(a) > sim(b);
    return a < b;
  });
  ids.resize(static_cast<std::size_t>(k));
  return ids;
}

// --- solvers ----------------------------------------------------------------

namespace {
void require_finite(const MatrixXd& m, const char* what, int iter) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite iterate at iteration " + std::to_string(iter));
}
}  // namespace

Eigen::MatrixXd cg_solve(const BlockOperator& g, double damping, const Eigen::MatrixXd& v, int max_iters, double tol,
                         SolveReport* report) {
  if (!(damping > 0)) throw ContractError("cg: damping must be > 0");
  if (max_iters < 0) throw ContractError("cg: max_iters must be >= 0");
  const Eigen::Index k = v.cols();
  MatrixXd x = MatrixXd::Zero(v.rows(), k);
  MatrixXd r = v;
  MatrixXd p = r;
  VectorXd rr = r.colwise().squaredNorm().transpose();
  const VectorXd vnorm = v.colwise().norm().transpose();
  std::vector<bool> active(static_cast<std::size_t>(k));
  for (Eigen::Index j = 0; j < k; ++j) active[j] = std::sqrt(rr(j)) > tol * vnorm(j) && vnorm(j) > 0;
  int it = 0;
  for (; it < max_iters; ++it) {
    std::vector<Eigen::Index> cols;
    for (Eigen::Index j = 0; j < k; ++j)
      if (active[j]) cols.push_back(j);
    if (cols.empty()) break;
    MatrixXd pa(v.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) pa.col(c) = p.col(cols[c]);
    const MatrixXd ap = g(pa) + damping * pa;
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const auto j = cols[c];
      const double pap = pa.col(c).dot(ap.col(c));
      if (!(pap > 0)) throw NumericError("cg: curvature along the search direction is not positive");
      const double alpha = rr(j) / pap;
      x.col(j) += alpha * pa.col(c);
      r.col(j) -= alpha * ap.col(c);
      const double rr_new = r.col(j).squaredNorm();
      p.col(j) = r.col(j) + (rr_new / rr(j)) * p.col(j);
      rr(j) = rr_new;
      if (std::sqrt(rr_new) <= tol * vnorm(j)) active[j] = false;
    }
    require_finite(x, "cg", it);
  }
  if (report) {
    report->iterations = it;
    report->relative_residual = 0;
    report->converged = true;
    for (Eigen::Index j = 0; j < k; ++j) {
      if (vnorm(j) > 0) report->relative_residual = std::max(report->relative_residual, std::sqrt(rr(j)) / vnorm(j));
      if (active[j]) report->converged = false;
    }
  }
  return x;
}

Eigen::MatrixXd lissa_solve(const BlockOperator& g, double damping, double alpha, const Eigen::MatrixXd& v,
                            int n_iters, SolveReport* report) {
  if (!(damping > 0)) throw ContractError("lissa: damping must be > 0");
  if (!(alpha > 0)) throw ContractError("lissa: alpha must be > 0");
  const VectorXd vnorm = v.colwise().norm().transpose();
  MatrixXd r = v;
  for (int t = 1; t <= n_iters; ++t) {
    r = v + r - alpha * (g(r) + damping * r);
    require_finite(r, "lissa", t);
    for (Eigen::Index j = 0; j < r.cols(); ++j) {
      if (r.col(j).norm() > 10.0 * (t + 1) * vnorm(j) && vnorm(j) > 0) {
        throw NumericError("lissa: diverged at iteration " + std::to_string(t) +
                           " (reduce alpha so that alpha·(G + λI) ⪯ I)");
      }
    }
  }
  if (report) {
    report->iterations = n_iters;
    report->converged = true;
    report->relative_residual = 0;
  }
  return alpha * r;
}

GgnOperator::GgnOperator(const Parameters& params, std::span<const Sequence> data, GgnOptions opt)
    : params_(params), data_(data), opt_(opt), rng_(derive_seed(opt.seed, 0x6767)) {
  if (data.empty()) throw InputError("GGN: empty data");
  if (opt.batch_size < 1) throw ContractError("GGN: batch_size must be >= 1");
}

std::span<const Sequence> GgnOperator::next_batch() {
  if (!opt_.resample && !batch_.empty()) return batch_;
  batch_.clear();
  std::uniform_int_distribution<std::size_t> pick(0, data_.size() - 1);
  for (int i = 0; i < opt_.batch_size; ++i) batch_.push_back(data_[pick(rng_)]);
  return batch_;
}

std::vector<BlockGradients> GgnOperator::apply(std::span<const BlockGradients> directions) {
  const auto batch = next_batch();
  const auto tr = nanolm::forward(params_, batch);
  const auto rows = nanolm::supervised_rows(tr, batch);
  const MatrixXd probs = nanolm::softmax_rows(tr.logits);
  const double scale = 1.0 / tr.n_rows();
  nanolm::BackwardOptions bo;
  bo.other_grads = false;
  std::vector<BlockGradients> out;
  out.reserve(directions.size());
  for (const auto& v : directions) {
    const MatrixXd zdot = nanolm::jvp_logits(params_, tr, v.blocks);
    MatrixXd h = MatrixXd::Zero(zdot.rows(), zdot.cols());
    for (int r : rows) {
      const double pz = probs.row(r).dot(zdot.row(r));
      h.row(r) = probs.row(r).cwiseProduct(zdot.row(r)) - pz * probs.row(r);
    }
    const auto grads = nanolm::backward(params_, tr, h, bo).grads;
    BlockGradients g;
    g.source = v.source;
    for (const auto& [id, m] : v.blocks) g.blocks.emplace(id, grads.block(id) * scale);
    out.push_back(std::move(g));
    ++products_;
  }
  return out;
}

BlockGradients GgnOperator::apply(const BlockGradients& direction) {
  return std::move(apply(std::span(&direction, 1)).front());
}

BlockOperator GgnOperator::as_block_operator(const BlockGradients& like) {
  return [this, like](const MatrixXd& x) {
    std::vector<BlockGradients> dirs;
    for (Eigen::Index j = 0; j < x.cols(); ++j) dirs.push_back(nanolm::unflatten(x.col(j), like));
    const auto res = apply(dirs);
    MatrixXd out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) out.col(j) = nanolm::flatten(res[j]);
    return out;
  };
}

namespace {
template <typename Solve>
std::vector<BlockGradients> solve_blocks(const Parameters& params, std::span<const Sequence> data,
                                         std::span<const BlockGradients> v, const GgnOptions& opt, Solve&& solve) {
  if (v.empty()) return {};
  const auto& like = v.front();
  MatrixXd rhs(like.size(), static_cast<Eigen::Index>(v.size()));
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (!v[j].same_keys(like)) throw ContractError("iterative ihvp: right-hand sides cover different blocks");
    if (v[j].source != 0 && v[j].source != params.fingerprint()) {
      throw ContractError("iterative ihvp: gradient was taken at a different model");
    }
    rhs.col(static_cast<Eigen::Index>(j)) = nanolm::flatten(v[j]);
  }
  GgnOperator ggn(params, data, opt);
  const MatrixXd x = solve(ggn.as_block_operator(like), rhs);
  std::vector<BlockGradients> out;
  for (std::size_t j = 0; j < v.size(); ++j) out.push_back(nanolm::unflatten(x.col(static_cast<Eigen::Index>(j)), v[j]));
  return out;
}
}  // namespace

std::vector<BlockGradients> cg_ihvp(const Parameters& params, std::span<const Sequence> data,
                                    std::span<const BlockGradients> v, double damping, int max_iters, double tol,
                                    const GgnOptions& opt, SolveReport* report) {
  return solve_blocks(params, data, v, opt, [&](const BlockOperator& g, const MatrixXd& rhs) {
    return cg_solve(g, damping, rhs, max_iters, tol, report);
  });
}

std::vector<BlockGradients> lissa_ihvp(const Parameters& params, std::span<const Sequence> data,
                                       std::span<const BlockGradients> v, double damping, double alpha,
                                       int n_iters, const GgnOptions& opt, SolveReport* report) {
  return solve_blocks(params, data, v, opt, [&](const BlockOperator& g, const MatrixXd& rhs) {
    return lissa_solve(g, damping, alpha, rhs, n_iters, report);
  });
}

void write_scores_csv(std::ostream& out, std::span<const ScoreRow> rows, std::uint64_t config_hash) {
  out << "# config_hash=" << hex64(config_hash) << "\n";
  out << "query_id,candidate_id,method,damping,score\n";
  char buf[64];
  for (const auto& r : rows) {
    out << r.query_id << ',' << r.result.candidate_id << ',' << r.result.method << ',';
    std::snprintf(buf, sizeof buf, "%.17g", r.result.damping);
    out << buf << ',';
    std::snprintf(buf, sizeof buf, "%.17g", r.result.score);
    out << buf << '\n';
  }
}

void write_scores_jsonl(std::ostream& out, std::span<const ScoreRow> rows, std::uint64_t config_hash) {
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["query_id"] = r.query_id;
    j["candidate_id"] = r.result.candidate_id;
    j["method"] = r.result.method;
    j["damping"] = r.result.damping;
    j["score"] = r.result.score;
    j["config_hash"] = hex64(config_hash);
    out << j.dump() << '\n';
  }
}

}  // namespace msif::influence
