#include "msif/ekfac.hpp"

#include <algorithm>
#include <numeric>

#include "io/binary.hpp"
#include "msif/linalg.hpp"

namespace msif::ekfac {

using nanolm::Parameters;
using nanolm::Sequence;

namespace {

constexpr std::string_view kMagic = "MSIFEKFC";
constexpr std::uint32_t kVersion = 1;
constexpr std::uint64_t kCovariancePass = 1;
constexpr std::uint64_t kLambdaPass = 2;

// Calls fn(batch, rng) for opt.n_batches batches drawn from a per-pass
// shuffle of the data (reshuffled whenever the data is exhausted).
template <typename Fn>
void for_each_batch(std::span<const Sequence> data, const FitOptions& opt, std::uint64_t pass, Fn&& fn) {
  if (opt.n_batches < 1) throw ContractError("EK-FAC fit: n_batches must be >= 1");
  if (opt.batch_size < 1) throw ContractError("EK-FAC fit: batch_size must be >= 1");
  if (data.empty()) throw InputError("EK-FAC fit: empty data");
  Rng rng(derive_seed(opt.seed, pass));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t next = 0;
  std::vector<Sequence> batch;
  for (int b = 0; b < opt.n_batches; ++b) {
    batch.clear();
    for (int i = 0; i < opt.batch_size; ++i) {
      if (next == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        next = 0;
      }
      batch.push_back(data[order[next++]]);
    }
    fn(std::span<const Sequence>(batch), rng);
  }
}

const BlockFactors& find_block(const FactorSet& f, const BlockId& id) {
  const auto it = f.blocks.find(id);
  if (it == f.blocks.end()) throw ContractError("no EK-FAC factors for block " + id.name());
  return it->second;
}

}  // namespace

BatchCapture capture_batch(const Parameters& params, std::span<const Sequence> batch, Rng& rng) {
  const auto tr = nanolm::forward(params, batch);
  const auto labels = nanolm::sample_labels(tr, batch, rng);
  const auto lg = nanolm::cross_entropy_with_labels(tr, batch, labels);
  nanolm::BackwardOptions bo;
  bo.weight_grads = false;
  bo.other_grads = false;
  bo.capture_output_grads = true;
  auto res = nanolm::backward(params, tr, lg.dlogits, bo);
  BatchCapture out;
  for (const auto& id : nanolm::analyzed_blocks(params.config)) out.inputs.emplace(id, tr.block_input(id));
  out.output_grads = std::move(res.output_grads);
  return out;
}

std::map<BlockId, Covariance> fit_covariances(const Parameters& params, std::span<const Sequence> data,
                                              const FitOptions& opt) {
  const auto blocks = nanolm::analyzed_blocks(params.config);
  std::map<BlockId, std::pair<linalg::CovAccumulator<double>, linalg::CovAccumulator<double>>> acc;
  for (const auto& id : blocks) {
    const auto [out, in] = nanolm::block_shape(params.config, id);
    acc.emplace(id, std::pair{linalg::CovAccumulator<double>(in), linalg::CovAccumulator<double>(out)});
  }
  for_each_batch(data, opt, kCovariancePass, [&](std::span<const Sequence> batch, Rng& rng) {
    const auto cap = capture_batch(params, batch, rng);
    for (const auto& id : blocks) {
      auto& [a, s] = acc.at(id);
      a.add_rows(cap.inputs.at(id));
      s.add_rows(cap.output_grads.at(id));
    }
  });
  std::map<BlockId, Covariance> out;
  for (auto& [id, pair] : acc) {
    out.emplace(id, Covariance{pair.first.finalize(), pair.second.finalize(), pair.first.count()});
  }
  return out;
}

Mat projected_second_moment(const Mat& inputs, const Mat& output_grads, const Mat& q_a, const Mat& q_s) {
  if (inputs.rows() != output_grads.rows() || inputs.cols() != q_a.rows() || output_grads.cols() != q_s.rows()) {
    throw ContractError("projected_second_moment: shape mismatch");
  }
  if (inputs.rows() == 0) throw ContractError("projected_second_moment: no samples");
  const Mat a2 = (inputs * q_a).array().square().matrix();
  const Mat s2 = (output_grads * q_s).array().square().matrix();
  return s2.transpose() * a2 / static_cast<double>(inputs.rows());
}

std::map<BlockId, Mat> fit_lambda(const Parameters& params, std::span<const Sequence> data,
                                  const std::map<BlockId, std::pair<Mat, Mat>>& bases, const FitOptions& opt,
                                  std::int64_t* n_samples) {
  std::map<BlockId, Mat> sums;
  for (const auto& id : nanolm::analyzed_blocks(params.config)) {
    const auto it = bases.find(id);
    if (it == bases.end()) throw ContractError("fit_lambda: missing eigenbasis for " + id.name());
    const auto [out, in] = nanolm::block_shape(params.config, id);
    if (it->second.first.rows() != in || it->second.first.cols() != in || it->second.second.rows() != out ||
        it->second.second.cols() != out) {
      throw ContractError("fit_lambda: eigenbasis shape mismatch for " + id.name());
    }
    sums.emplace(id, Mat::Zero(out, in));
  }
  std::int64_t rows = 0;
  for_each_batch(data, opt, kLambdaPass, [&](std::span<const Sequence> batch, Rng& rng) {
    const auto cap = capture_batch(params, batch, rng);
    for (auto& [id, sum] : sums) {
      const auto& [q_a, q_s] = bases.at(id);
      const Mat& a = cap.inputs.at(id);
      sum += projected_second_moment(a, cap.output_grads.at(id), q_a, q_s) * static_cast<double>(a.rows());
    }
    rows += cap.inputs.begin()->second.rows();
  });
  for (auto& [id, sum] : sums) sum /= static_cast<double>(rows);
  if (n_samples) *n_samples = rows;
  return sums;
}

FactorSet fit(const Parameters& params, std::span<const Sequence> data, const FitOptions& opt) {
  if (!(opt.damping > 0)) throw ContractError("EK-FAC fit: damping must be > 0");
  const auto cov = fit_covariances(params, data, opt);
  std::map<BlockId, std::pair<Mat, Mat>> bases;
  for (const auto& [id, c] : cov) {
    bases.emplace(id, std::pair{linalg::sym_eigendecompose(c.a).vectors, linalg::sym_eigendecompose(c.s).vectors});
  }
  std::int64_t n_lambda = 0;
  auto lambda = fit_lambda(params, data, bases, opt, &n_lambda);
  FactorSet f;
  f.stage = params.stage;
  f.fingerprint = params.fingerprint();
  f.config_hash = params.config.hash();
  f.damping = opt.damping;
  for (auto& [id, basis] : bases) {
    BlockFactors b;
    b.id = id;
    b.q_a = std::move(basis.first);
    b.q_s = std::move(basis.second);
    b.lambda = std::move(lambda.at(id));
    b.n_cov_samples = cov.at(id).n_samples;
    b.n_lambda_samples = n_lambda;
    f.blocks.emplace(id, std::move(b));
  }
  return f;
}

BlockGradients ihvp(const FactorSet& factors, const BlockGradients& v, std::optional<double> damping) {
  if (v.source != 0 && v.source != factors.fingerprint) {
    throw ContractError("ihvp: gradient was taken at model " + hex64(v.source) + " but factors were fitted on " +
                        hex64(factors.fingerprint));
  }
  const double lam = damping.value_or(factors.damping);
  BlockGradients out;
  out.source = v.source;
  for (const auto& [id, g] : v.blocks) {
    const auto& b = find_block(factors, id);
    out.blocks.emplace(id, linalg::kron_precondition(b.q_a, b.q_s, b.lambda, lam, g));
  }
  return out;
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> assemble_dense_block(const FactorSet& factors,
                                                                           const BlockId& id) {
  using M = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const auto& b = find_block(factors, id);
  const Eigen::Index in = b.in_dim(), out = b.out_dim(), n = in * out;
  if (n > kMaxDenseBlockEntries) throw ContractError("assemble_dense_block: block " + id.name() + " is too large");
  const M q_a = b.q_a.cast<Scalar>(), q_s = b.q_s.cast<Scalar>();
  // Column (j, i) of Q_A ⊗ Q_S is the eigenvector vec(q_s.col(i) q_a.col(j)ᵀ).
  M q(n, n);
  for (Eigen::Index j = 0; j < in; ++j) {
    for (Eigen::Index i = 0; i < out; ++i) q.col(j * out + i) = (q_s.col(i) * q_a.col(j).transpose()).reshaped();
  }
  const M g = q * b.lambda.cast<Scalar>().reshaped().asDiagonal() * q.transpose();
  return (g + g.transpose()) * Scalar(0.5);
}

template Eigen::MatrixXd assemble_dense_block<double>(const FactorSet&, const BlockId&);
template Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic> assemble_dense_block<long double>(
    const FactorSet&, const BlockId&);

std::int64_t stored_entries(const FactorSet& factors) {
  std::int64_t n = 0;
  for (const auto& [id, b] : factors.blocks) {
    const std::int64_t d = b.in_dim(), p = b.out_dim();
    n += d * d + p * p + d * p;
  }
  return n;
}

namespace {
constexpr std::uint64_t kHeaderBytes = 8 + 4 + 1 + 8 + 8 + 8 + 4;
constexpr std::uint64_t kBlockHeaderBytes = 4 + 1 + 4 + 4 + 4 + 8 + 8;
}  // namespace

std::uint64_t factor_file_bytes(const nanolm::ModelConfig& config) {
  std::uint64_t bytes = kHeaderBytes + 8;  // trailing checksum
  for (const auto& id : nanolm::analyzed_blocks(config)) {
    const auto [p, d] = nanolm::block_shape(config, id);
    bytes += kBlockHeaderBytes + 8ULL * (static_cast<std::uint64_t>(d) * d + static_cast<std::uint64_t>(p) * p +
                                         static_cast<std::uint64_t>(d) * p);
  }
  return bytes;
}

// Layout (little-endian): magic, u32 version, u8 stage, u64 fingerprint,
// u64 config hash, f64 damping, u32 block count; per block: i32 layer,
// u8 kind, i32 head, u32 in, u32 out, i64 n_cov, i64 n_lambda, then Q_A,
// Q_S, Λ (column-major doubles); u64 checksum.
void save(const FactorSet& factors, const std::filesystem::path& path) {
  if (factors.fingerprint == 0) throw ContractError("refusing to save factors without a model fingerprint");
  io::BinaryWriter w;
  w.put_bytes(kMagic);
  w.put(kVersion);
  w.put(static_cast<std::uint8_t>(factors.stage));
  w.put(factors.fingerprint);
  w.put(factors.config_hash);
  w.put(factors.damping);
  w.put(static_cast<std::uint32_t>(factors.blocks.size()));
  std::int64_t written = 0;
  for (const auto& [id, b] : factors.blocks) {
    w.put(static_cast<std::int32_t>(id.layer));
    w.put(static_cast<std::uint8_t>(id.kind));
    w.put(static_cast<std::int32_t>(id.head));
    w.put(static_cast<std::uint32_t>(b.in_dim()));
    w.put(static_cast<std::uint32_t>(b.out_dim()));
    w.put(b.n_cov_samples);
    w.put(b.n_lambda_samples);
    for (const Mat* m : {&b.q_a, &b.q_s, &b.lambda}) {
      w.put_doubles(std::span<const double>(m->data(), static_cast<std::size_t>(m->size())));
      written += m->size();
    }
  }
  if (written != stored_entries(factors)) throw ContractError("factor file size bookkeeping mismatch");
  w.write_file(path);
}

FactorSet load(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  if (r.get_bytes(kMagic.size()) != kMagic) throw InputError("not an EK-FAC factor file: " + path.string());
  if (const auto v = r.get<std::uint32_t>(); v != kVersion) {
    throw InputError("unsupported factor file version " + std::to_string(v) + " in " + path.string());
  }
  FactorSet f;
  const auto stage = r.get<std::uint8_t>();
  if (stage > 1) throw InputError("factor file has an invalid stage tag");
  f.stage = static_cast<Stage>(stage);
  f.fingerprint = r.get<std::uint64_t>();
  if (f.fingerprint == 0) throw InputError("factor file carries no model fingerprint: " + path.string());
  f.config_hash = r.get<std::uint64_t>();
  f.damping = r.get<double>();
  const auto n_blocks = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < n_blocks; ++k) {
    BlockFactors b;
    b.id.layer = r.get<std::int32_t>();
    const auto kind = r.get<std::uint8_t>();
    if (kind > static_cast<std::uint8_t>(nanolm::BlockKind::mlp_out)) throw InputError("factor file: bad block kind");
    b.id.kind = static_cast<nanolm::BlockKind>(kind);
    b.id.head = r.get<std::int32_t>();
    const auto in = r.get<std::uint32_t>(), out = r.get<std::uint32_t>();
    if (in == 0 || out == 0 || in > (1u << 16) || out > (1u << 16)) throw InputError("factor file: bad block shape");
    b.n_cov_samples = r.get<std::int64_t>();
    b.n_lambda_samples = r.get<std::int64_t>();
    b.q_a.resize(in, in);
    b.q_s.resize(out, out);
    b.lambda.resize(out, in);
    for (Mat* m : {&b.q_a, &b.q_s, &b.lambda}) r.get_doubles(std::span<double>(m->data(), static_cast<std::size_t>(m->size())));
    f.blocks.emplace(b.id, std::move(b));
  }
  if (!r.at_end()) throw InputError("trailing bytes in factor file " + path.string());
  return f;
}

void require_matches(const FactorSet& factors, const Parameters& params) {
  if (factors.stage != params.stage) {
    throw ContractError(std::string("factors are for stage '") + stage_name(factors.stage) + "' but the model is '" +
                        stage_name(params.stage) + "'");
  }
  if (factors.fingerprint != params.fingerprint()) {
    throw ContractError("factor fingerprint " + hex64(factors.fingerprint) + " does not match model " +
                        hex64(params.fingerprint()));
  }
}

}  // namespace msif::ekfac
