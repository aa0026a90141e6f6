#include "msif/block_gradients.hpp"

namespace msif::nanolm {

namespace {
void require_same_keys(const BlockGradients& a, const BlockGradients& b, const char* what) {
  if (!a.same_keys(b)) throw ContractError(std::string(what) + ": block sets differ");
}
}  // namespace

Eigen::Index BlockGradients::size() const {
  Eigen::Index n = 0;
  for (const auto& [id, m] : blocks) n += m.size();
  return n;
}

bool BlockGradients::same_keys(const BlockGradients& other) const {
  if (blocks.size() != other.blocks.size()) return false;
  for (auto a = blocks.begin(), b = other.blocks.begin(); a != blocks.end(); ++a, ++b) {
    if (a->first != b->first || a->second.rows() != b->second.rows() || a->second.cols() != b->second.cols()) {
      return false;
    }
  }
  return true;
}

BlockGradients BlockGradients::zeros(const ModelConfig& config, BlockFilter filter) {
  BlockGradients g;
  for (const auto& id : analyzed_blocks(config)) {
    if (!block_selected(id, filter)) continue;
    const auto [out, in] = block_shape(config, id);
    g.blocks.emplace(id, Mat::Zero(out, in));
  }
  return g;
}

BlockGradients BlockGradients::from_parameters(const Parameters& grads, BlockFilter filter) {
  BlockGradients g;
  for (const auto& id : analyzed_blocks(grads.config)) {
    if (block_selected(id, filter)) g.blocks.emplace(id, grads.block(id));
  }
  return g;
}

double dot(const BlockGradients& a, const BlockGradients& b) {
  require_same_keys(a, b, "dot");
  double s = 0;
  for (auto x = a.blocks.begin(), y = b.blocks.begin(); x != a.blocks.end(); ++x, ++y) {
    s += x->second.cwiseProduct(y->second).sum();
  }
  return s;
}

double squared_norm(const BlockGradients& a) {
  double s = 0;
  for (const auto& [id, m] : a.blocks) s += m.squaredNorm();
  return s;
}

void axpy(double alpha, const BlockGradients& x, BlockGradients& y) {
  require_same_keys(x, y, "axpy");
  auto yi = y.blocks.begin();
  for (auto xi = x.blocks.begin(); xi != x.blocks.end(); ++xi, ++yi) yi->second += alpha * xi->second;
}

BlockGradients scaled(const BlockGradients& a, double factor) {
  BlockGradients out = a;
  for (auto& [id, m] : out.blocks) m *= factor;
  return out;
}

BlockGradients linear_combination(double alpha, const BlockGradients& a, double beta, const BlockGradients& b) {
  BlockGradients out = scaled(a, alpha);
  axpy(beta, b, out);
  out.source = a.source == b.source ? a.source : 0;
  return out;
}

BlockGradients filtered(const BlockGradients& a, BlockFilter filter) {
  BlockGradients out;
  out.source = a.source;
  for (const auto& [id, m] : a.blocks) {
    if (block_selected(id, filter)) out.blocks.emplace(id, m);
  }
  return out;
}

Eigen::VectorXd flatten(const BlockGradients& a) {
  Eigen::VectorXd v(a.size());
  Eigen::Index o = 0;
  for (const auto& [id, m] : a.blocks) {
    v.segment(o, m.size()) = m.reshaped();
    o += m.size();
  }
  return v;
}

BlockGradients unflatten(const Eigen::VectorXd& v, const BlockGradients& like) {
  if (v.size() != like.size()) throw ContractError("unflatten: size mismatch");
  BlockGradients out;
  out.source = like.source;
  Eigen::Index o = 0;
  for (const auto& [id, m] : like.blocks) {
    out.blocks.emplace(id, v.segment(o, m.size()).reshaped(m.rows(), m.cols()));
    o += m.size();
  }
  return out;
}

std::map<BlockId, double> block_dots(const BlockGradients& a, const BlockGradients& b) {
  require_same_keys(a, b, "block_dots");
  std::map<BlockId, double> out;
  for (auto x = a.blocks.begin(), y = b.blocks.begin(); x != a.blocks.end(); ++x, ++y) {
    out.emplace(x->first, x->second.cwiseProduct(y->second).sum());
  }
  return out;
}

Sequence Query::as_sequence() const {
  if (target.empty()) throw InputError("query '" + id + "' has an empty target");
  Sequence s;
  s.tokens = prompt;
  s.tokens.insert(s.tokens.end(), target.begin(), target.end());
  s.target_begin = std::max<int>(1, static_cast<int>(prompt.size()));
  return s;
}

Measured sequence_gradient(const Parameters& params, const Sequence& seq, BlockFilter filter) {
  const std::span<const Sequence> batch(&seq, 1);
  const auto tr = forward(params, batch);
  const auto lg = cross_entropy(tr, batch);
  BackwardOptions opts;
  opts.other_grads = false;
  const auto res = backward(params, tr, lg.dlogits, opts);
  Measured m{lg.loss, BlockGradients::from_parameters(res.grads, filter)};
  m.grad.source = params.fingerprint();
  return m;
}

Measured measurement(const Parameters& params, const Query& query, BlockFilter filter) {
  if (params.config.head_mode != HeadMode::lm) throw ContractError("measurement: requires an lm head");
  return sequence_gradient(params, query.as_sequence(), filter);
}

}  // namespace msif::nanolm
