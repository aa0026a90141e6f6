#pragma once

// A small pre-norm decoder-only transformer with hand-written reverse-mode and
// forward-mode derivatives. Every linear sub-network that influence analysis
// looks at (per-head Q/K/V, attention output, MLP in/out) is bias-free and
// exposes its input activations and output pre-activations in the trace.

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "msif/common.hpp"

namespace msif::nanolm {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

enum class HeadMode : std::uint8_t { lm = 0, classifier = 1 };

struct ModelConfig {
  int vocab_size = 512;
  int d_model = 256;
  int n_layers = 2;
  int n_heads = 2;
  int head_dim = 128;
  int d_ff = 1024;
  int max_seq_len = 32;
  HeadMode head_mode = HeadMode::lm;
  int n_classes = 0;  // classifier mode only

  void validate() const;
  int output_dim() const { return head_mode == HeadMode::lm ? vocab_size : n_classes; }
  std::uint64_t hash() const;
  bool same_backbone(const ModelConfig& other) const;
};

enum class BlockKind : std::uint8_t { query = 0, key, value, attn_out, mlp_in, mlp_out };

struct BlockId {
  int layer = 0;
  BlockKind kind = BlockKind::query;
  int head = 0;  // only meaningful for query/key/value

  auto operator<=>(const BlockId&) const = default;
  bool is_mlp() const { return kind == BlockKind::mlp_in || kind == BlockKind::mlp_out; }
  std::string name() const;
  static BlockId parse(const std::string& name);
};

enum class BlockFilter : std::uint8_t { all, mlp, mha };
bool block_selected(const BlockId& id, BlockFilter filter);
BlockFilter parse_block_filter(const std::string& s);

/// Analyzed blocks in canonical order (layer, kind, head).
std::vector<BlockId> analyzed_blocks(const ModelConfig& config);
/// (out_dim, in_dim) of an analyzed block's weight.
std::pair<int, int> block_shape(const ModelConfig& config, const BlockId& id);

struct LayerParams {
  Vec ln1_gain, ln1_bias;
  std::vector<Mat> w_q, w_k, w_v;  // per head, head_dim × d_model
  Mat w_o;                         // d_model × (n_heads·head_dim)
  Vec ln2_gain, ln2_bias;
  Mat w_in;   // d_ff × d_model
  Mat w_out;  // d_model × d_ff
};

struct Parameters {
  ModelConfig config;
  Stage stage = Stage::pretrained;
  std::uint64_t seed = 0;
  Mat embed;      // vocab × d_model
  Mat pos_embed;  // max_seq_len × d_model
  std::vector<LayerParams> layers;
  Vec lnf_gain, lnf_bias;
  Mat unembed;  // output_dim × d_model

  static Parameters zeros(const ModelConfig& config);
  static Parameters init(const ModelConfig& config, std::uint64_t seed);

  Mat& block(const BlockId& id);
  const Mat& block(const BlockId& id) const;

  /// Every tensor in a fixed order; the backing storage for optimizers,
  /// serialization and fingerprints.
  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;

  std::uint64_t fingerprint() const;
  bool all_finite() const;
};

/// A token sequence with its supervision. In LM mode row t of the logits
/// predicts tokens[t+1]; positions t+1 >= target_begin contribute to the loss.
/// In classifier mode `label` is the class of the whole sequence.
struct Sequence {
  std::vector<int> tokens;
  int target_begin = 1;
  int label = -1;
};

using Corpus = std::vector<Sequence>;

/// Cached forward state for a packed batch of sequences.
struct ForwardTrace {
  struct Layer {
    Mat x_in;
    Mat ln1_hat;
    Vec ln1_inv;
    Mat h;                  // LN1 output; input to Q/K/V
    std::vector<Mat> q, k, v;
    std::vector<std::vector<Mat>> probs;  // [head][segment] causal attention
    Mat r_cat;              // input to attn_out
    Mat attn;               // attn_out pre-activation
    Mat x_mid;
    Mat ln2_hat;
    Vec ln2_inv;
    Mat h2;                 // input to mlp_in
    Mat u;                  // mlp_in pre-activation
    Mat act;                // gelu(u); input to mlp_out
    Mat act_grad;           // gelu'(u)
    Mat mlp;                // mlp_out pre-activation
  };

  std::vector<int> offsets;  // segment starts, size = n_sequences + 1
  std::vector<int> tokens;
  std::vector<Layer> layers;
  Mat residual;              // final residual stream x_L
  Mat lnf_hat;
  Vec lnf_inv;
  Mat final_hidden;          // LN_f output
  Mat logits;                // rows × vocab (lm) or n_sequences × n_classes
  HeadMode head_mode = HeadMode::lm;

  int n_rows() const { return offsets.back(); }
  int n_sequences() const { return static_cast<int>(offsets.size()) - 1; }
  const Mat& block_input(const BlockId& id) const;
  const Mat& block_output(const BlockId& id) const;
};

ForwardTrace forward(const Parameters& params, std::span<const Sequence> batch);

/// Loss value and the gradient of the loss with respect to the logits.
struct LossGrad {
  double loss = 0;
  Mat dlogits;
  int n_targets = 0;
};

/// Summed next-token cross-entropy on the supervised positions of every
/// sequence (classifier mode: summed class cross-entropy).
LossGrad cross_entropy(const ForwardTrace& trace, std::span<const Sequence> batch);
/// Same loss, but with the supervised tokens replaced by `labels`
/// (one label per supervised position, in trace order).
LossGrad cross_entropy_with_labels(const ForwardTrace& trace, std::span<const Sequence> batch,
                                   std::span<const int> labels);

/// Plain LM loss on logits (rows × vocab) for a single token sequence.
double loss_lm(const Mat& logits, std::span<const int> tokens);

struct BackwardOptions {
  bool weight_grads = true;        // analyzed-block weight gradients
  bool other_grads = true;         // embeddings, layer norms, unembedding
  bool capture_output_grads = false;  // Ds for every analyzed block
};

struct BackwardResult {
  Parameters grads;
  std::map<BlockId, Mat> output_grads;
};

BackwardResult backward(const Parameters& params, const ForwardTrace& trace,
                        const Mat& dlogits, const BackwardOptions& opts = {});

/// Directional derivative of the logits for a perturbation of analyzed-block
/// weights only. Missing blocks are treated as zero.
Mat jvp_logits(const Parameters& params, const ForwardTrace& trace,
               const std::map<BlockId, Mat>& tangent);

/// Predictive distribution rows.
Mat softmax_rows(const Mat& logits);

/// Draws one label per supervised position from the model's predictive
/// distribution (or one class per sequence in classifier mode).
std::vector<int> sample_labels(const ForwardTrace& trace, std::span<const Sequence> batch, Rng& rng);
/// Per-row sampling from softmax(logits); the bare primitive.
std::vector<int> sample_rows(const Mat& logits, Rng& rng);

/// Rows of the trace that carry a supervised prediction, in trace order.
std::vector<int> supervised_rows(const ForwardTrace& trace, std::span<const Sequence> batch);

void validate_sequence(const ModelConfig& config, const Sequence& seq);

// --- training ---------------------------------------------------------------

struct OptimizerOpts {
  int steps = 200;
  int batch_size = 16;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double grad_clip = 1.0;
  int warmup = 20;
};

struct TrainReport {
  std::vector<double> step_loss;  // mean per-token loss of each step's batch
  double initial_mean_loss = 0;   // per-token, over the whole corpus
  double final_mean_loss = 0;
};

/// Per-token mean cross-entropy of a corpus.
double mean_token_loss(const Parameters& params, std::span<const Sequence> corpus);

Parameters train(const ModelConfig& config, std::span<const Sequence> corpus, const OptimizerOpts& opt,
                 std::uint64_t seed, TrainReport* report = nullptr);

Parameters finetune(const Parameters& pretrained, std::span<const Sequence> corpus,
                    const OptimizerOpts& opt, HeadMode head_mode, int n_classes, std::uint64_t seed,
                    TrainReport* report = nullptr);

/// Greedy continuation of `prompt` by `n_tokens` tokens.
std::vector<int> greedy_decode(const Parameters& params, std::vector<int> prompt, int n_tokens);

// --- checkpoints ------------------------------------------------------------

void save_checkpoint(const Parameters& params, const std::filesystem::path& path);
Parameters load_checkpoint(const std::filesystem::path& path);

}  // namespace msif::nanolm
