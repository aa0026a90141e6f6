#pragma once

// Per-block EK-FAC curvature: Kronecker eigenbases from activation and
// pseudo-gradient covariances, with the diagonal refitted in that basis.
// Every token position of every sequence counts as one sample.

#include <filesystem>
#include <map>
#include <optional>

#include "msif/block_gradients.hpp"
#include "msif/nanolm.hpp"

namespace msif::ekfac {

using nanolm::BlockGradients;
using nanolm::BlockId;
using nanolm::Mat;

inline constexpr double kDefaultDamping = 1e-4;

struct BlockFactors {
  BlockId id;
  Mat q_a;     // in × in
  Mat q_s;     // out × out
  Mat lambda;  // out × in, Λ entries in the (Q_A ⊗ Q_S) basis, >= 0
  std::int64_t n_cov_samples = 0;
  std::int64_t n_lambda_samples = 0;

  int in_dim() const { return static_cast<int>(q_a.rows()); }
  int out_dim() const { return static_cast<int>(q_s.rows()); }
};

struct FactorSet {
  Stage stage = Stage::pretrained;
  std::uint64_t fingerprint = 0;  // Parameters::fingerprint() of the fitted model
  std::uint64_t config_hash = 0;
  double damping = kDefaultDamping;
  std::map<BlockId, BlockFactors> blocks;
};

struct FitOptions {
  int n_batches = 8;
  int batch_size = 16;
  std::uint64_t seed = 0;
  double damping = kDefaultDamping;
};

struct Covariance {
  Mat a;  // E[a aᵀ]
  Mat s;  // E[Ds Dsᵀ]
  std::int64_t n_samples = 0;
};

/// Sampled-label pseudo-gradients for one batch: per block, the input
/// activations and the output gradients (rows = token positions).
struct BatchCapture {
  std::map<BlockId, Mat> inputs;
  std::map<BlockId, Mat> output_grads;
};
BatchCapture capture_batch(const nanolm::Parameters& params, std::span<const nanolm::Sequence> batch, Rng& rng);

std::map<BlockId, Covariance> fit_covariances(const nanolm::Parameters& params,
                                              std::span<const nanolm::Sequence> data, const FitOptions& opt);

/// Λ in the given eigenbases, from a fresh pass of sampled labels.
std::map<BlockId, Mat> fit_lambda(const nanolm::Parameters& params, std::span<const nanolm::Sequence> data,
                                  const std::map<BlockId, std::pair<Mat, Mat>>& bases, const FitOptions& opt,
                                  std::int64_t* n_samples = nullptr);

/// Mean over rows of (Ds Q_S)² ᵀ (a Q_A)²; the per-row building block of fit_lambda.
Mat projected_second_moment(const Mat& inputs, const Mat& output_grads, const Mat& q_a, const Mat& q_s);

/// Covariances, eigendecomposition (eigenvalues discarded), diagonal refit.
FactorSet fit(const nanolm::Parameters& params, std::span<const nanolm::Sequence> data, const FitOptions& opt);

/// (G̃ + λI)⁻¹ v, block by block. `v` may cover a subset of the fitted
/// blocks. A gradient tagged with a different model fingerprint is rejected.
BlockGradients ihvp(const FactorSet& factors, const BlockGradients& v, std::optional<double> damping = std::nullopt);

/// Dense (Q_A ⊗ Q_S) diag(vec Λ) (Q_A ⊗ Q_S)ᵀ in column-major vec order, for
/// blocks with at most 4096 entries. Scalar may be double or long double.
template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> assemble_dense_block(const FactorSet& factors,
                                                                           const BlockId& id);
extern template Eigen::MatrixXd assemble_dense_block<double>(const FactorSet&, const BlockId&);
extern template Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic> assemble_dense_block<long double>(
    const FactorSet&, const BlockId&);
inline constexpr Eigen::Index kMaxDenseBlockEntries = 4096;

/// Stored entries per block: in² + out² + in·out.
std::int64_t stored_entries(const FactorSet& factors);
/// Exact size in bytes of a factor file for `config`.
std::uint64_t factor_file_bytes(const nanolm::ModelConfig& config);

void save(const FactorSet& factors, const std::filesystem::path& path);
FactorSet load(const std::filesystem::path& path);

/// Throws ContractError unless `factors` were fitted on exactly `params`.
void require_matches(const FactorSet& factors, const nanolm::Parameters& params);

}  // namespace msif::ekfac
