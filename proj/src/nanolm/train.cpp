#include <cmath>
#include <numbers>

#include "msif/nanolm.hpp"

namespace msif::nanolm {

namespace {

struct Adam {
  explicit Adam(const Parameters& like) : m(Parameters::zeros(like.config)), v(Parameters::zeros(like.config)) {}

  void step(Parameters& params, const Parameters& grad, const OptimizerOpts& opt, double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(opt.beta1, t);
    const double bc2 = 1.0 - std::pow(opt.beta2, t);
    auto ps = params.tensors();
    auto gs = grad.tensors();
    auto ms = m.tensors();
    auto vs = v.tensors();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      for (std::size_t j = 0; j < ps[i].size(); ++j) {
        const double g = gs[i][j];
        ms[i][j] = opt.beta1 * ms[i][j] + (1.0 - opt.beta1) * g;
        vs[i][j] = opt.beta2 * vs[i][j] + (1.0 - opt.beta2) * g * g;
        ps[i][j] -= lr * (ms[i][j] / bc1) / (std::sqrt(vs[i][j] / bc2) + opt.eps);
      }
    }
  }

  Parameters m, v;
  int t = 0;
};

double global_norm(const Parameters& g) {
  double s = 0;
  for (auto t : g.tensors())
    for (double x : t) s += x * x;
  return std::sqrt(s);
}

void scale_all(Parameters& g, double f) {
  for (auto t : g.tensors())
    for (double& x : t) x *= f;
}

double schedule(const OptimizerOpts& opt, int step) {
  const double warm = opt.warmup > 0 ? std::min(1.0, (step + 1.0) / opt.warmup) : 1.0;
  const double progress = opt.steps > 1 ? static_cast<double>(step) / (opt.steps - 1) : 0.0;
  return opt.lr * warm * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

void run_optimizer(Parameters& params, std::span<const Sequence> corpus, const OptimizerOpts& opt,
                   Rng& rng, TrainReport* report) {
  if (corpus.empty()) throw InputError("training corpus is empty");
  if (opt.batch_size < 1) throw InputError("batch_size must be >= 1");
  Adam adam(params);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  std::vector<Sequence> batch(static_cast<std::size_t>(opt.batch_size));
  for (int step = 0; step < opt.steps; ++step) {
    for (auto& s : batch) s = corpus[pick(rng)];
    const auto tr = forward(params, batch);
    const auto lg = cross_entropy(tr, batch);
    if (lg.n_targets == 0) continue;
    const double mean_loss = lg.loss / lg.n_targets;
    if (!std::isfinite(mean_loss)) {
      throw NumericError("training diverged: non-finite loss at step " + std::to_string(step));
    }
    auto grads = backward(params, tr, lg.dlogits / lg.n_targets).grads;
    const double norm = global_norm(grads);
    if (!std::isfinite(norm)) {
      throw NumericError("training diverged: non-finite gradient at step " + std::to_string(step));
    }
    if (opt.grad_clip > 0 && norm > opt.grad_clip) scale_all(grads, opt.grad_clip / norm);
    adam.step(params, grads, opt, schedule(opt, step));
    if (report) report->step_loss.push_back(mean_loss);
  }
  if (!params.all_finite()) throw NumericError("training produced non-finite parameters");
}

}  // namespace

double mean_token_loss(const Parameters& params, std::span<const Sequence> corpus) {
  double loss = 0;
  long n = 0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t i = 0; i < corpus.size(); i += kChunk) {
    const auto chunk = corpus.subspan(i, std::min(kChunk, corpus.size() - i));
    const auto tr = forward(params, chunk);
    const auto lg = cross_entropy(tr, chunk);
    loss += lg.loss;
    n += lg.n_targets;
  }
  return n ? loss / static_cast<double>(n) : 0.0;
}

Parameters train(const ModelConfig& config, std::span<const Sequence> corpus, const OptimizerOpts& opt,
                 std::uint64_t seed, TrainReport* report) {
  config.validate();
  if (config.head_mode != HeadMode::lm) throw ContractError("train: pre-training requires an lm head");
  if (corpus.empty()) throw InputError("training corpus is empty");
  for (const auto& s : corpus) validate_sequence(config, s);
  Parameters params = Parameters::init(config, seed);
  params.stage = Stage::pretrained;
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  if (report) report->initial_mean_loss = mean_token_loss(params, corpus);
  run_optimizer(params, corpus, opt, rng, report);
  if (report) report->final_mean_loss = mean_token_loss(params, corpus);
  return params;
}

Parameters finetune(const Parameters& pretrained, std::span<const Sequence> corpus, const OptimizerOpts& opt,
                    HeadMode head_mode, int n_classes, std::uint64_t seed, TrainReport* report) {
  if (pretrained.stage != Stage::pretrained) throw ContractError("finetune: expected pre-trained parameters");
  if (pretrained.config.head_mode != HeadMode::lm) throw ContractError("finetune: pre-trained model must have an lm head");
  Parameters params = pretrained;
  params.stage = Stage::finetuned;
  params.seed = seed;
  if (head_mode == HeadMode::classifier) {
    params.config.head_mode = HeadMode::classifier;
    params.config.n_classes = n_classes;
    params.config.validate();
    Rng init_rng(seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    params.unembed.resize(n_classes, params.config.d_model);
    for (Eigen::Index i = 0; i < params.unembed.size(); ++i) params.unembed.data()[i] = normal(init_rng);
  }
  for (const auto& s : corpus) validate_sequence(params.config, s);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  if (report && !corpus.empty()) report->initial_mean_loss = mean_token_loss(params, corpus);
  if (opt.steps > 0) run_optimizer(params, corpus, opt, rng, report);
  if (report && !corpus.empty()) report->final_mean_loss = mean_token_loss(params, corpus);
  return params;
}

}  // namespace msif::nanolm
