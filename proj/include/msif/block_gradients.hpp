#pragma once

#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "msif/nanolm.hpp"

namespace msif::nanolm {

/// One gradient matrix per analyzed block. `source` is the fingerprint of the
/// parameters the gradient was taken at (0 when not tied to a model).
struct BlockGradients {
  std::map<BlockId, Mat> blocks;
  std::uint64_t source = 0;

  bool empty() const { return blocks.empty(); }
  Eigen::Index size() const;  // total number of entries
  bool same_keys(const BlockGradients& other) const;

  static BlockGradients zeros(const ModelConfig& config, BlockFilter filter = BlockFilter::all);
  /// The analyzed blocks of a full parameter-shaped gradient.
  static BlockGradients from_parameters(const Parameters& grads, BlockFilter filter = BlockFilter::all);
};

double dot(const BlockGradients& a, const BlockGradients& b);
double squared_norm(const BlockGradients& a);
/// y += alpha * x
void axpy(double alpha, const BlockGradients& x, BlockGradients& y);
BlockGradients scaled(const BlockGradients& a, double factor);
BlockGradients linear_combination(double alpha, const BlockGradients& a, double beta, const BlockGradients& b);
BlockGradients filtered(const BlockGradients& a, BlockFilter filter);

/// Canonical flattening (block order, column-major within a block).
Eigen::VectorXd flatten(const BlockGradients& a);
BlockGradients unflatten(const Eigen::VectorXd& v, const BlockGradients& like);

/// Per-block contributions to the inner product <a, b>.
std::map<BlockId, double> block_dots(const BlockGradients& a, const BlockGradients& b);

/// A question/answer measurement: m = -log p(target | prompt), summed over
/// target tokens only.
struct Query {
  std::vector<int> prompt;
  std::vector<int> target;
  std::string id;

  Sequence as_sequence() const;
};

struct Measured {
  double value = 0;
  BlockGradients grad;
};

/// Loss on the supervised positions of `seq` and its analyzed-block gradient.
Measured sequence_gradient(const Parameters& params, const Sequence& seq,
                           BlockFilter filter = BlockFilter::all);

Measured measurement(const Parameters& params, const Query& query, BlockFilter filter = BlockFilter::all);

}  // namespace msif::nanolm
