#pragma once

// Influence estimators over structured block gradients: single- and
// multi-stage EK-FAC influence, iterative inverse-GGN solvers (CG, LiSSA),
// and the similarity baselines used for comparison.

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "msif/block_gradients.hpp"
#include "msif/ekfac.hpp"
#include "msif/nanolm.hpp"

namespace msif::influence {

using ekfac::FactorSet;
using nanolm::BlockFilter;
using nanolm::BlockGradients;
using nanolm::Parameters;
using nanolm::Query;
using nanolm::Sequence;

struct InfluenceResult {
  std::string candidate_id;
  double score = 0;
  std::string method;
  double damping = 0;
};

/// Descending by score, ties broken by candidate id ascending.
struct RankedList {
  std::vector<InfluenceResult> items;
  std::vector<std::string> ids() const;
};
RankedList rank_candidates(std::vector<InfluenceResult> results);

// --- EK-FAC influence -------------------------------------------------------

/// ⟨q, (G̃_ft + λI)⁻¹ c⟩ with fine-tuned factors.
double single_stage_influence(const FactorSet& factors_ft, const BlockGradients& query_grad,
                              const BlockGradients& candidate_grad, std::optional<double> damping = std::nullopt);

/// ⟨(G̃_ft + λ_ft I)⁻¹ ∇m(θ_ft), (G̃_pt + λ_pt I)⁻¹ ∇ℓ_pt(z; θ_pt)⟩ over the
/// blocks the two gradients share.
double multi_stage_influence(const FactorSet& factors_pt, const FactorSet& factors_ft,
                             const BlockGradients& query_grad_ft, const BlockGradients& candidate_grad_pt,
                             std::optional<double> damping_pt = std::nullopt,
                             std::optional<double> damping_ft = std::nullopt);

/// Same score, computed from the models.
double multi_stage_influence(const FactorSet& factors_pt, const FactorSet& factors_ft, const Query& query,
                             const Sequence& candidate, const Parameters& model_pt, const Parameters& model_ft,
                             BlockFilter filter = BlockFilter::all);

/// (G̃_pt + λ_pt I)⁻¹ (G̃_ft + λ_ft I)⁻¹ ∇m, tagged with the pre-trained model.
/// Both preconditioners are symmetric, so multi_stage_influence(q, c) equals
/// ⟨this, c⟩ for every candidate gradient c taken at θ_pt.
BlockGradients multi_stage_query_vector(const FactorSet& factors_pt, const FactorSet& factors_ft,
                                        const BlockGradients& query_grad_ft,
                                        std::optional<double> damping_pt = std::nullopt,
                                        std::optional<double> damping_ft = std::nullopt);

/// Checks that a factor set has the expected stage.
void require_stage(const FactorSet& factors, Stage expected, const char* what);

// --- baselines --------------------------------------------------------------

double gdp(const BlockGradients& query_grad, const BlockGradients& candidate_grad);
double gdp_multistage(const BlockGradients& query_grad_ft, const BlockGradients& candidate_grad_pt);

/// Linear CKA ‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F) per block, averaged over the
/// blocks where both gradients are non-zero.
double cka(const BlockGradients& x, const BlockGradients& y);

/// A gradient with its per-block ‖XᵀX‖_F, for repeated CKA evaluation.
struct CkaGram {
  BlockGradients grad;
  std::map<nanolm::BlockId, double> norm;
};
CkaGram cka_gram(BlockGradients g);
double cka(const CkaGram& x, const CkaGram& y);

/// Unit-normalized mean of the final residual stream.
Eigen::VectorXd embed(const Parameters& params, const Sequence& seq);
Eigen::MatrixXd embed_all(const Parameters& params, std::span<const Sequence> seqs);
double repsim(const Parameters& params, const Sequence& a, const Sequence& b);

class Bm25 {
 public:
  Bm25(std::span<const std::vector<int>> documents, double k1 = 1.5, double b = 0.75);
  /// One score per document; each distinct query term counts once.
  std::vector<double> scores(std::span<const int> query) const;
  std::size_t size() const { return doc_len_.size(); }

 private:
  double k1_, b_, avg_len_ = 0;
  std::vector<double> doc_len_;
  std::vector<std::map<int, int>> tf_;
  std::map<int, int> df_;
};

std::vector<double> bm25_scores(std::span<const std::vector<int>> corpus, std::span<const int> query,
                                double k1 = 1.5, double b = 0.75);

/// Top-k rows of `embeddings` by cosine with `query` (rows unit-norm),
/// exact search; k is clamped to the corpus size.
std::vector<int> knn_candidates(const Eigen::MatrixXd& embeddings, const Eigen::VectorXd& query, int k);

// --- iterative solvers ------------------------------------------------------

/// Maps an n×k block of directions to G times each column (without damping).
using BlockOperator = std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>;

struct SolveReport {
  int iterations = 0;
  double relative_residual = 0;  // max over columns, from the recursive residual
  bool converged = false;
};

/// Conjugate gradients on (G + λI) X = V, one independent recursion per column
/// sharing each operator call. The operator may resample between calls.
Eigen::MatrixXd cg_solve(const BlockOperator& g, double damping, const Eigen::MatrixXd& v, int max_iters,
                         double tol, SolveReport* report = nullptr);

/// LiSSA: r_t = v + (I − α(G + λI)) r_{t−1}, r_0 = v; returns α·r_T, the
/// estimate of (G + λI)⁻¹ v. Throws NumericError when ‖r_t‖ exceeds
/// 10·(t+1)·‖v‖, a bound the convergent regime never crosses.
Eigen::MatrixXd lissa_solve(const BlockOperator& g, double damping, double alpha, const Eigen::MatrixXd& v,
                            int n_iters, SolveReport* report = nullptr);

struct GgnOptions {
  int batch_size = 32;
  bool resample = true;  // fresh mini-batch per product; otherwise one fixed batch
  std::uint64_t seed = 0;
};

/// Exact Gauss-Newton products (1/N_rows)·Jᵀ H_out J v on mini-batches of the
/// data, restricted to the blocks present in the direction.
class GgnOperator {
 public:
  GgnOperator(const Parameters& params, std::span<const Sequence> data, GgnOptions opt);

  std::vector<BlockGradients> apply(std::span<const BlockGradients> directions);
  BlockGradients apply(const BlockGradients& direction);
  /// Adapter over flattened directions shaped like `like`.
  BlockOperator as_block_operator(const BlockGradients& like);

  int products() const { return products_; }

 private:
  std::span<const Sequence> next_batch();

  const Parameters& params_;
  std::span<const Sequence> data_;
  GgnOptions opt_;
  Rng rng_;
  std::vector<Sequence> batch_;
  int products_ = 0;
};

std::vector<BlockGradients> cg_ihvp(const Parameters& params, std::span<const Sequence> data,
                                    std::span<const BlockGradients> v, double damping, int max_iters, double tol,
                                    const GgnOptions& opt, SolveReport* report = nullptr);

std::vector<BlockGradients> lissa_ihvp(const Parameters& params, std::span<const Sequence> data,
                                       std::span<const BlockGradients> v, double damping, double alpha,
                                       int n_iters, const GgnOptions& opt, SolveReport* report = nullptr);

// --- score dumps ------------------------------------------------------------

struct ScoreRow {
  std::string query_id;
  InfluenceResult result;
};
void write_scores_csv(std::ostream& out, std::span<const ScoreRow> rows, std::uint64_t config_hash);
void write_scores_jsonl(std::ostream& out, std::span<const ScoreRow> rows, std::uint64_t config_hash);

}  // namespace msif::influence
