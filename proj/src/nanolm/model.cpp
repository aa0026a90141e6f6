#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "msif/nanolm.hpp"

namespace msif::nanolm {

namespace {

constexpr double kLnEps = 1e-5;

Mat layer_norm(const Mat& x, const Vec& gain, const Vec& bias, Mat& hat, Vec& inv) {
  const Vec mean = x.rowwise().mean();
  hat = x.colwise() - mean;
  inv = (hat.array().square().rowwise().mean() + kLnEps).rsqrt();
  hat.array().colwise() *= inv.array();
  Mat out = hat.array().rowwise() * gain.transpose().array();
  out.rowwise() += bias.transpose();
  return out;
}

// Jacobian of the normalization x -> x̂ applied to `dx` (it is symmetric, so
// the same routine serves both modes).
Mat ln_normalize_apply(const Mat& dx, const Mat& hat, const Vec& inv) {
  const Vec m1 = dx.rowwise().mean();
  const Vec m2 = (dx.array() * hat.array()).rowwise().mean();
  Mat out = dx.colwise() - m1;
  out -= (hat.array().colwise() * m2.array()).matrix();
  out.array().colwise() *= inv.array();
  return out;
}

Mat ln_backward(const Mat& dy, const Mat& hat, const Vec& inv, const Vec& gain, Vec* dgain,
                Vec* dbias) {
  if (dgain) *dgain += (dy.array() * hat.array()).colwise().sum().transpose().matrix();
  if (dbias) *dbias += dy.colwise().sum().transpose();
  const Mat dhat = dy.array().rowwise() * gain.transpose().array();
  return ln_normalize_apply(dhat, hat, inv);
}

Mat ln_jvp(const Mat& dx, const Mat& hat, const Vec& inv, const Vec& gain) {
  Mat out = ln_normalize_apply(dx, hat, inv);
  out.array().rowwise() *= gain.transpose().array();
  return out;
}

// Exact (erf) GELU and its derivative in one pass.
void gelu_with_grad(const Mat& u, Mat& act, Mat& grad) {
  act.resize(u.rows(), u.cols());
  grad.resize(u.rows(), u.cols());
  constexpr double kPdf = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    const double x = u.data()[i];
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 * 0.5));
    act.data()[i] = x * cdf;
    grad.data()[i] = cdf + x * std::exp(-0.5 * x * x) * kPdf;
  }
}

void check_finite(const Mat& m, const char* where, int layer) {
  if (!m.allFinite()) {
    std::ostringstream os;
    os << "non-finite value in layer " << layer << " at " << where;
    throw NumericError(os.str());
  }
}

const char* kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::query: return "q";
    case BlockKind::key: return "k";
    case BlockKind::value: return "v";
    case BlockKind::attn_out: return "attn_out";
    case BlockKind::mlp_in: return "mlp_in";
    case BlockKind::mlp_out: return "mlp_out";
  }
  return "?";
}

bool is_per_head(BlockKind k) {
  return k == BlockKind::query || k == BlockKind::key || k == BlockKind::value;
}

const Mat* find_tangent(const std::map<BlockId, Mat>& tangent, const BlockId& id) {
  auto it = tangent.find(id);
  return it == tangent.end() ? nullptr : &it->second;
}

}  // namespace

// --- config & block ids -------------------------------------------------------

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ContractError("ModelConfig: vocab_size must be >= 2");
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || head_dim < 1 || d_ff < 1 || max_seq_len < 1) {
    throw ContractError("ModelConfig: all dimensions must be >= 1");
  }
  if (d_model != n_heads * head_dim) {
    throw ContractError("ModelConfig: d_model must equal n_heads * head_dim");
  }
  if (head_mode == HeadMode::classifier && n_classes < 2) {
    throw ContractError("ModelConfig: classifier head needs n_classes >= 2");
  }
}

std::uint64_t ModelConfig::hash() const {
  Fnv1a h;
  for (int v : {vocab_size, d_model, n_layers, n_heads, head_dim, d_ff, max_seq_len,
                static_cast<int>(head_mode), n_classes}) {
    h.update_value(v);
  }
  return h.digest();
}

bool ModelConfig::same_backbone(const ModelConfig& o) const {
  return vocab_size == o.vocab_size && d_model == o.d_model && n_layers == o.n_layers &&
         n_heads == o.n_heads && head_dim == o.head_dim && d_ff == o.d_ff &&
         max_seq_len == o.max_seq_len;
}

std::string BlockId::name() const {
  std::ostringstream os;
  os << 'l' << layer << '.';
  if (is_per_head(kind)) os << 'h' << head << '.';
  os << kind_name(kind);
  return os.str();
}

BlockId BlockId::parse(const std::string& name) {
  BlockId id;
  std::istringstream is(name);
  char c = 0;
  if (!(is >> c) || c != 'l' || !(is >> id.layer) || !(is >> c) || c != '.') {
    throw InputError("bad block id: " + name);
  }
  std::string rest;
  std::getline(is, rest);
  if (!rest.empty() && rest[0] == 'h') {
    const auto dot = rest.find('.');
    if (dot == std::string::npos) throw InputError("bad block id: " + name);
    id.head = std::stoi(rest.substr(1, dot - 1));
    rest = rest.substr(dot + 1);
  }
  for (auto k : {BlockKind::query, BlockKind::key, BlockKind::value, BlockKind::attn_out,
                 BlockKind::mlp_in, BlockKind::mlp_out}) {
    if (rest == kind_name(k)) {
      id.kind = k;
      return id;
    }
  }
  throw InputError("bad block id: " + name);
}

bool block_selected(const BlockId& id, BlockFilter filter) {
  switch (filter) {
    case BlockFilter::all: return true;
    case BlockFilter::mlp: return id.is_mlp();
    case BlockFilter::mha: return !id.is_mlp();
  }
  return true;
}

BlockFilter parse_block_filter(const std::string& s) {
  if (s == "all") return BlockFilter::all;
  if (s == "mlp") return BlockFilter::mlp;
  if (s == "mha") return BlockFilter::mha;
  throw InputError("unknown block filter '" + s + "' (expected all|mlp|mha)");
}

std::vector<BlockId> analyzed_blocks(const ModelConfig& config) {
  std::vector<BlockId> ids;
  for (int l = 0; l < config.n_layers; ++l) {
    for (auto k : {BlockKind::query, BlockKind::key, BlockKind::value}) {
      for (int h = 0; h < config.n_heads; ++h) ids.push_back({l, k, h});
    }
    ids.push_back({l, BlockKind::attn_out, 0});
    ids.push_back({l, BlockKind::mlp_in, 0});
    ids.push_back({l, BlockKind::mlp_out, 0});
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::pair<int, int> block_shape(const ModelConfig& c, const BlockId& id) {
  switch (id.kind) {
    case BlockKind::query:
    case BlockKind::key:
    case BlockKind::value: return {c.head_dim, c.d_model};
    case BlockKind::attn_out: return {c.d_model, c.n_heads * c.head_dim};
    case BlockKind::mlp_in: return {c.d_ff, c.d_model};
    case BlockKind::mlp_out: return {c.d_model, c.d_ff};
  }
  throw ContractError("block_shape: unknown block");
}

// --- parameters ---------------------------------------------------------------

Parameters Parameters::zeros(const ModelConfig& c) {
  c.validate();
  Parameters p;
  p.config = c;
  p.embed = Mat::Zero(c.vocab_size, c.d_model);
  p.pos_embed = Mat::Zero(c.max_seq_len, c.d_model);
  p.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& l : p.layers) {
    l.ln1_gain = Vec::Zero(c.d_model);
    l.ln1_bias = Vec::Zero(c.d_model);
    l.w_q.assign(static_cast<std::size_t>(c.n_heads), Mat::Zero(c.head_dim, c.d_model));
    l.w_k = l.w_q;
    l.w_v = l.w_q;
    l.w_o = Mat::Zero(c.d_model, c.n_heads * c.head_dim);
    l.ln2_gain = Vec::Zero(c.d_model);
    l.ln2_bias = Vec::Zero(c.d_model);
    l.w_in = Mat::Zero(c.d_ff, c.d_model);
    l.w_out = Mat::Zero(c.d_model, c.d_ff);
  }
  p.lnf_gain = Vec::Zero(c.d_model);
  p.lnf_bias = Vec::Zero(c.d_model);
  p.unembed = Mat::Zero(c.output_dim(), c.d_model);
  return p;
}

Parameters Parameters::init(const ModelConfig& c, std::uint64_t seed) {
  Parameters p = zeros(c);
  p.seed = seed;
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto fill = [&](auto& m, double scale) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng) * scale;
  };
  const double resid_scale = 1.0 / std::sqrt(2.0 * c.n_layers);
  fill(p.embed, 1.0);
  fill(p.pos_embed, 1.0);
  for (auto& l : p.layers) {
    l.ln1_gain.setOnes();
    l.ln2_gain.setOnes();
    for (auto& w : l.w_q) fill(w, 1.0);
    for (auto& w : l.w_k) fill(w, 1.0);
    for (auto& w : l.w_v) fill(w, 1.0);
    fill(l.w_o, resid_scale);
    fill(l.w_in, 1.0);
    fill(l.w_out, resid_scale);
  }
  p.lnf_gain.setOnes();
  fill(p.unembed, 1.0);
  return p;
}

Mat& Parameters::block(const BlockId& id) {
  return const_cast<Mat&>(std::as_const(*this).block(id));
}

const Mat& Parameters::block(const BlockId& id) const {
  if (id.layer < 0 || id.layer >= static_cast<int>(layers.size())) {
    throw ContractError("Parameters::block: layer out of range in " + id.name());
  }
  const auto& l = layers[static_cast<std::size_t>(id.layer)];
  if (is_per_head(id.kind) && (id.head < 0 || id.head >= static_cast<int>(l.w_q.size()))) {
    throw ContractError("Parameters::block: head out of range in " + id.name());
  }
  const auto h = static_cast<std::size_t>(id.head);
  switch (id.kind) {
    case BlockKind::query: return l.w_q[h];
    case BlockKind::key: return l.w_k[h];
    case BlockKind::value: return l.w_v[h];
    case BlockKind::attn_out: return l.w_o;
    case BlockKind::mlp_in: return l.w_in;
    case BlockKind::mlp_out: return l.w_out;
  }
  throw ContractError("Parameters::block: unknown block");
}

namespace {
template <typename Self, typename Span>
std::vector<Span> collect_tensors(Self& p) {
  std::vector<Span> out;
  auto add = [&](auto& m) { out.emplace_back(m.data(), static_cast<std::size_t>(m.size())); };
  add(p.embed);
  add(p.pos_embed);
  for (auto& l : p.layers) {
    add(l.ln1_gain);
    add(l.ln1_bias);
    for (auto& w : l.w_q) add(w);
    for (auto& w : l.w_k) add(w);
    for (auto& w : l.w_v) add(w);
    add(l.w_o);
    add(l.ln2_gain);
    add(l.ln2_bias);
    add(l.w_in);
    add(l.w_out);
  }
  add(p.lnf_gain);
  add(p.lnf_bias);
  add(p.unembed);
  return out;
}
}  // namespace

std::vector<std::span<double>> Parameters::tensors() {
  return collect_tensors<Parameters, std::span<double>>(*this);
}

std::vector<std::span<const double>> Parameters::tensors() const {
  return collect_tensors<const Parameters, std::span<const double>>(*this);
}

std::uint64_t Parameters::fingerprint() const {
  Fnv1a h;
  h.update_value(config.hash());
  h.update_value(static_cast<std::uint8_t>(stage));
  for (auto t : tensors()) h.update(t);
  return h.digest();
}

bool Parameters::all_finite() const {
  for (auto t : tensors()) {
    for (double v : t) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

// --- trace --------------------------------------------------------------------

const Mat& ForwardTrace::block_input(const BlockId& id) const {
  const auto& l = layers.at(static_cast<std::size_t>(id.layer));
  switch (id.kind) {
    case BlockKind::query:
    case BlockKind::key:
    case BlockKind::value: return l.h;
    case BlockKind::attn_out: return l.r_cat;
    case BlockKind::mlp_in: return l.h2;
    case BlockKind::mlp_out: return l.act;
  }
  throw ContractError("block_input: unknown block");
}

const Mat& ForwardTrace::block_output(const BlockId& id) const {
  const auto& l = layers.at(static_cast<std::size_t>(id.layer));
  const auto h = static_cast<std::size_t>(id.head);
  switch (id.kind) {
    case BlockKind::query: return l.q.at(h);
    case BlockKind::key: return l.k.at(h);
    case BlockKind::value: return l.v.at(h);
    case BlockKind::attn_out: return l.attn;
    case BlockKind::mlp_in: return l.u;
    case BlockKind::mlp_out: return l.mlp;
  }
  throw ContractError("block_output: unknown block");
}

void validate_sequence(const ModelConfig& config, const Sequence& seq) {
  if (seq.tokens.empty()) throw InputError("empty token sequence");
  if (static_cast<int>(seq.tokens.size()) > config.max_seq_len) {
    throw InputError("sequence of length " + std::to_string(seq.tokens.size()) +
                     " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }
  for (int t : seq.tokens) {
    if (t < 0 || t >= config.vocab_size) {
      throw InputError("token id " + std::to_string(t) + " out of range [0, " +
                       std::to_string(config.vocab_size) + ")");
    }
  }
}

// --- forward ------------------------------------------------------------------

ForwardTrace forward(const Parameters& params, std::span<const Sequence> batch) {
  const ModelConfig& c = params.config;
  if (batch.empty()) throw InputError("forward: empty batch");
  ForwardTrace tr;
  tr.offsets.push_back(0);
  for (const auto& s : batch) {
    validate_sequence(c, s);
    tr.offsets.push_back(tr.offsets.back() + static_cast<int>(s.tokens.size()));
    tr.tokens.insert(tr.tokens.end(), s.tokens.begin(), s.tokens.end());
  }
  const int rows = tr.n_rows();
  const int n_seq = tr.n_sequences();
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.head_dim));

  Mat x(rows, c.d_model);
  for (int s = 0; s < n_seq; ++s) {
    for (int t = tr.offsets[s]; t < tr.offsets[s + 1]; ++t) {
      x.row(t) = params.embed.row(tr.tokens[static_cast<std::size_t>(t)]) +
                 params.pos_embed.row(t - tr.offsets[s]);
    }
  }

  tr.layers.resize(params.layers.size());
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    const auto& P = params.layers[li];
    auto& L = tr.layers[li];
    const int layer = static_cast<int>(li);
    L.x_in = x;
    L.h = layer_norm(x, P.ln1_gain, P.ln1_bias, L.ln1_hat, L.ln1_inv);
    L.r_cat.resize(rows, c.n_heads * c.head_dim);
    L.q.resize(static_cast<std::size_t>(c.n_heads));
    L.k.resize(static_cast<std::size_t>(c.n_heads));
    L.v.resize(static_cast<std::size_t>(c.n_heads));
    L.probs.assign(static_cast<std::size_t>(c.n_heads), std::vector<Mat>(static_cast<std::size_t>(n_seq)));
    for (int h = 0; h < c.n_heads; ++h) {
      const auto hs = static_cast<std::size_t>(h);
      L.q[hs].noalias() = L.h * P.w_q[hs].transpose();
      L.k[hs].noalias() = L.h * P.w_k[hs].transpose();
      L.v[hs].noalias() = L.h * P.w_v[hs].transpose();
      for (int s = 0; s < n_seq; ++s) {
        const int o = tr.offsets[s];
        const int T = tr.offsets[s + 1] - o;
        Mat scores = L.q[hs].middleRows(o, T) * L.k[hs].middleRows(o, T).transpose() * scale;
        Mat& prob = L.probs[hs][static_cast<std::size_t>(s)];
        prob = Mat::Zero(T, T);
        for (int i = 0; i < T; ++i) {
          const double mx = scores.row(i).head(i + 1).maxCoeff();
          double sum = 0;
          for (int j = 0; j <= i; ++j) {
            prob(i, j) = std::exp(scores(i, j) - mx);
            sum += prob(i, j);
          }
          prob.row(i).head(i + 1) /= sum;
        }
        L.r_cat.block(o, h * c.head_dim, T, c.head_dim).noalias() = prob * L.v[hs].middleRows(o, T);
      }
    }
    L.attn.noalias() = L.r_cat * P.w_o.transpose();
    check_finite(L.attn, "attention", layer);
    L.x_mid = x + L.attn;
    L.h2 = layer_norm(L.x_mid, P.ln2_gain, P.ln2_bias, L.ln2_hat, L.ln2_inv);
    L.u.noalias() = L.h2 * P.w_in.transpose();
    gelu_with_grad(L.u, L.act, L.act_grad);
    L.mlp.noalias() = L.act * P.w_out.transpose();
    check_finite(L.mlp, "mlp", layer);
    x = L.x_mid + L.mlp;
  }
  tr.residual = x;
  tr.head_mode = c.head_mode;
  tr.final_hidden = layer_norm(x, params.lnf_gain, params.lnf_bias, tr.lnf_hat, tr.lnf_inv);
  if (c.head_mode == HeadMode::lm) {
    tr.logits.noalias() = tr.final_hidden * params.unembed.transpose();
  } else {
    Mat pooled(n_seq, c.d_model);
    for (int s = 0; s < n_seq; ++s) pooled.row(s) = tr.final_hidden.row(tr.offsets[s + 1] - 1);
    tr.logits.noalias() = pooled * params.unembed.transpose();
  }
  check_finite(tr.logits, "logits", c.n_layers);
  return tr;
}

// --- losses -------------------------------------------------------------------

Mat softmax_rows(const Mat& logits) {
  Mat p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

std::vector<int> supervised_rows(const ForwardTrace& trace, std::span<const Sequence> batch) {
  std::vector<int> rows;
  if (static_cast<int>(batch.size()) != trace.n_sequences()) {
    throw ContractError("supervised_rows: batch does not match trace");
  }
  const bool classifier = trace.head_mode == HeadMode::classifier;
  for (int s = 0; s < trace.n_sequences(); ++s) {
    const auto& seq = batch[static_cast<std::size_t>(s)];
    if (classifier) {
      if (seq.label < 0) throw InputError("classifier batch: sequence without a label");
      rows.push_back(s);
      continue;
    }
    const int T = static_cast<int>(seq.tokens.size());
    for (int t = std::max(seq.target_begin, 1); t < T; ++t) rows.push_back(trace.offsets[s] + t - 1);
  }
  return rows;
}

namespace {

LossGrad ce_impl(const ForwardTrace& trace, const std::vector<int>& rows, const std::vector<int>& labels) {
  LossGrad out;
  out.dlogits = Mat::Zero(trace.logits.rows(), trace.logits.cols());
  out.n_targets = static_cast<int>(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto row = trace.logits.row(rows[i]);
    const double mx = row.maxCoeff();
    const Eigen::RowVectorXd e = (row.array() - mx).exp();
    const double z = e.sum();
    const int y = labels[i];
    if (y < 0 || y >= row.size()) throw InputError("cross_entropy: label out of range");
    out.loss += std::log(z) - (row(y) - mx);
    out.dlogits.row(rows[i]) = e / z;
    out.dlogits(rows[i], y) -= 1.0;
  }
  return out;
}

bool classifier_trace(const ForwardTrace& trace) { return trace.head_mode == HeadMode::classifier; }

}  // namespace

LossGrad cross_entropy(const ForwardTrace& trace, std::span<const Sequence> batch) {
  const auto rows = supervised_rows(trace, batch);
  std::vector<int> labels;
  labels.reserve(rows.size());
  if (classifier_trace(trace)) {
    for (int r : rows) labels.push_back(batch[static_cast<std::size_t>(r)].label);
  } else {
    for (int r : rows) labels.push_back(trace.tokens[static_cast<std::size_t>(r + 1)]);
  }
  return ce_impl(trace, rows, labels);
}

LossGrad cross_entropy_with_labels(const ForwardTrace& trace, std::span<const Sequence> batch,
                                   std::span<const int> labels) {
  const auto rows = supervised_rows(trace, batch);
  if (rows.size() != labels.size()) throw ContractError("cross_entropy_with_labels: label count mismatch");
  return ce_impl(trace, rows, std::vector<int>(labels.begin(), labels.end()));
}

double loss_lm(const Mat& logits, std::span<const int> tokens) {
  if (tokens.size() < 2) throw InputError("loss_lm: need at least two tokens");
  if (logits.rows() != static_cast<Eigen::Index>(tokens.size())) {
    throw ContractError("loss_lm: logits rows must match token count");
  }
  double loss = 0;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    const auto row = logits.row(static_cast<Eigen::Index>(t - 1));
    const double mx = row.maxCoeff();
    loss += std::log((row.array() - mx).exp().sum()) - (row(tokens[t]) - mx);
  }
  return loss;
}

// --- backward -----------------------------------------------------------------

BackwardResult backward(const Parameters& params, const ForwardTrace& tr, const Mat& dlogits,
                        const BackwardOptions& opts) {
  const ModelConfig& c = params.config;
  if (tr.layers.size() != params.layers.size() || dlogits.rows() != tr.logits.rows() ||
      dlogits.cols() != tr.logits.cols() || tr.residual.cols() != c.d_model) {
    throw ContractError("backward: trace does not match parameters");
  }
  const int rows = tr.n_rows();
  const int n_seq = tr.n_sequences();
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.head_dim));
  const bool want_other = opts.other_grads;

  BackwardResult res;
  res.grads = Parameters::zeros(c);
  res.grads.stage = params.stage;
  Parameters& g = res.grads;
  auto capture = [&](const BlockId& id, const Mat& ds) {
    if (opts.capture_output_grads) res.output_grads[id] = ds;
  };

  Mat dfinal;
  if (c.head_mode == HeadMode::lm) {
    dfinal.noalias() = dlogits * params.unembed;
    if (want_other) g.unembed.noalias() = dlogits.transpose() * tr.final_hidden;
  } else {
    dfinal = Mat::Zero(rows, c.d_model);
    Mat pooled(n_seq, c.d_model);
    for (int s = 0; s < n_seq; ++s) {
      const int r = tr.offsets[s + 1] - 1;
      dfinal.row(r) = dlogits.row(s) * params.unembed;
      pooled.row(s) = tr.final_hidden.row(r);
    }
    if (want_other) g.unembed.noalias() = dlogits.transpose() * pooled;
  }
  Mat dx = ln_backward(dfinal, tr.lnf_hat, tr.lnf_inv, params.lnf_gain,
                       want_other ? &g.lnf_gain : nullptr, want_other ? &g.lnf_bias : nullptr);

  for (int li = c.n_layers - 1; li >= 0; --li) {
    const auto ls = static_cast<std::size_t>(li);
    const auto& P = params.layers[ls];
    const auto& L = tr.layers[ls];
    auto& G = g.layers[ls];

    // MLP
    const Mat& dmlp = dx;
    capture({li, BlockKind::mlp_out, 0}, dmlp);
    if (opts.weight_grads) G.w_out.noalias() = dmlp.transpose() * L.act;
    Mat du = dmlp * P.w_out;
    du.array() *= L.act_grad.array();
    capture({li, BlockKind::mlp_in, 0}, du);
    if (opts.weight_grads) G.w_in.noalias() = du.transpose() * L.h2;
    const Mat dh2 = du * P.w_in;
    Mat dmid = dx + ln_backward(dh2, L.ln2_hat, L.ln2_inv, P.ln2_gain,
                                want_other ? &G.ln2_gain : nullptr, want_other ? &G.ln2_bias : nullptr);

    // attention
    capture({li, BlockKind::attn_out, 0}, dmid);
    if (opts.weight_grads) G.w_o.noalias() = dmid.transpose() * L.r_cat;
    const Mat dr_cat = dmid * P.w_o;
    Mat dh = Mat::Zero(rows, c.d_model);
    for (int h = 0; h < c.n_heads; ++h) {
      const auto hs = static_cast<std::size_t>(h);
      Mat dq(rows, c.head_dim), dk(rows, c.head_dim), dv(rows, c.head_dim);
      for (int s = 0; s < n_seq; ++s) {
        const int o = tr.offsets[s];
        const int T = tr.offsets[s + 1] - o;
        const Mat& prob = L.probs[hs][static_cast<std::size_t>(s)];
        const auto dr = dr_cat.block(o, h * c.head_dim, T, c.head_dim);
        Mat dprob = dr * L.v[hs].middleRows(o, T).transpose();
        dv.middleRows(o, T).noalias() = prob.transpose() * dr;
        const Vec rowdot = (dprob.array() * prob.array()).rowwise().sum();
        Mat dscores = prob.array() * (dprob.colwise() - rowdot).array();
        dscores *= scale;
        dq.middleRows(o, T).noalias() = dscores * L.k[hs].middleRows(o, T);
        dk.middleRows(o, T).noalias() = dscores.transpose() * L.q[hs].middleRows(o, T);
      }
      capture({li, BlockKind::query, h}, dq);
      capture({li, BlockKind::key, h}, dk);
      capture({li, BlockKind::value, h}, dv);
      if (opts.weight_grads) {
        G.w_q[hs].noalias() = dq.transpose() * L.h;
        G.w_k[hs].noalias() = dk.transpose() * L.h;
        G.w_v[hs].noalias() = dv.transpose() * L.h;
      }
      dh.noalias() += dq * P.w_q[hs];
      dh.noalias() += dk * P.w_k[hs];
      dh.noalias() += dv * P.w_v[hs];
    }
    // Below layer 0 only the embeddings remain.
    if (li > 0 || want_other) {
      dx = dmid + ln_backward(dh, L.ln1_hat, L.ln1_inv, P.ln1_gain,
                              want_other ? &G.ln1_gain : nullptr, want_other ? &G.ln1_bias : nullptr);
    }
  }

  if (want_other) {
    for (int s = 0; s < n_seq; ++s) {
      for (int t = tr.offsets[s]; t < tr.offsets[s + 1]; ++t) {
        g.embed.row(tr.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
        g.pos_embed.row(t - tr.offsets[s]) += dx.row(t);
      }
    }
  }
  return res;
}

// --- forward-mode ---------------------------------------------------------------

Mat jvp_logits(const Parameters& params, const ForwardTrace& tr, const std::map<BlockId, Mat>& tangent) {
  const ModelConfig& c = params.config;
  if (tr.layers.size() != params.layers.size()) throw ContractError("jvp_logits: trace mismatch");
  for (const auto& [id, m] : tangent) {
    const auto [out, in] = block_shape(c, id);
    if (m.rows() != out || m.cols() != in) throw ContractError("jvp_logits: tangent shape mismatch for " + id.name());
  }
  const int rows = tr.n_rows();
  const int n_seq = tr.n_sequences();
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.head_dim));

  Mat dx = Mat::Zero(rows, c.d_model);
  for (int li = 0; li < c.n_layers; ++li) {
    const auto ls = static_cast<std::size_t>(li);
    const auto& P = params.layers[ls];
    const auto& L = tr.layers[ls];

    const Mat dh = ln_jvp(dx, L.ln1_hat, L.ln1_inv, P.ln1_gain);
    Mat dr_cat(rows, c.n_heads * c.head_dim);
    for (int h = 0; h < c.n_heads; ++h) {
      const auto hs = static_cast<std::size_t>(h);
      Mat dq = dh * P.w_q[hs].transpose();
      Mat dk = dh * P.w_k[hs].transpose();
      Mat dv = dh * P.w_v[hs].transpose();
      if (const Mat* t = find_tangent(tangent, {li, BlockKind::query, h})) dq.noalias() += L.h * t->transpose();
      if (const Mat* t = find_tangent(tangent, {li, BlockKind::key, h})) dk.noalias() += L.h * t->transpose();
      if (const Mat* t = find_tangent(tangent, {li, BlockKind::value, h})) dv.noalias() += L.h * t->transpose();
      for (int s = 0; s < n_seq; ++s) {
        const int o = tr.offsets[s];
        const int T = tr.offsets[s + 1] - o;
        const Mat& prob = L.probs[hs][static_cast<std::size_t>(s)];
        Mat dscores = dq.middleRows(o, T) * L.k[hs].middleRows(o, T).transpose();
        dscores.noalias() += L.q[hs].middleRows(o, T) * dk.middleRows(o, T).transpose();
        dscores *= scale;
        const Vec rowdot = (dscores.array() * prob.array()).rowwise().sum();
        const Mat dprob = prob.array() * (dscores.colwise() - rowdot).array();
        auto out = dr_cat.block(o, h * c.head_dim, T, c.head_dim);
        out.noalias() = dprob * L.v[hs].middleRows(o, T);
        out.noalias() += prob * dv.middleRows(o, T);
      }
    }
    Mat dmid = dx;
    dmid.noalias() += dr_cat * P.w_o.transpose();
    if (const Mat* t = find_tangent(tangent, {li, BlockKind::attn_out, 0})) dmid.noalias() += L.r_cat * t->transpose();

    const Mat dh2 = ln_jvp(dmid, L.ln2_hat, L.ln2_inv, P.ln2_gain);
    Mat du = dh2 * P.w_in.transpose();
    if (const Mat* t = find_tangent(tangent, {li, BlockKind::mlp_in, 0})) du.noalias() += L.h2 * t->transpose();
    du.array() *= L.act_grad.array();
    dx = dmid;
    dx.noalias() += du * P.w_out.transpose();
    if (const Mat* t = find_tangent(tangent, {li, BlockKind::mlp_out, 0})) dx.noalias() += L.act * t->transpose();
  }
  const Mat dfinal = ln_jvp(dx, tr.lnf_hat, tr.lnf_inv, params.lnf_gain);
  if (c.head_mode == HeadMode::lm) return dfinal * params.unembed.transpose();
  Mat pooled(n_seq, c.d_model);
  for (int s = 0; s < n_seq; ++s) pooled.row(s) = dfinal.row(tr.offsets[s + 1] - 1);
  return pooled * params.unembed.transpose();
}

// --- sampling -----------------------------------------------------------------

std::vector<int> sample_rows(const Mat& logits, Rng& rng) {
  const Mat p = softmax_rows(logits);
  std::vector<int> out(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    double acc = 0;
    Eigen::Index pick = p.cols() - 1;
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      acc += p(r, j);
      if (u < acc) {
        pick = j;
        break;
      }
    }
    out[static_cast<std::size_t>(r)] = static_cast<int>(pick);
  }
  return out;
}

std::vector<int> sample_labels(const ForwardTrace& trace, std::span<const Sequence> batch, Rng& rng) {
  const auto rows = supervised_rows(trace, batch);
  Mat sub(static_cast<Eigen::Index>(rows.size()), trace.logits.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) sub.row(static_cast<Eigen::Index>(i)) = trace.logits.row(rows[i]);
  return sample_rows(sub, rng);
}

std::vector<int> greedy_decode(const Parameters& params, std::vector<int> prompt, int n_tokens) {
  if (params.config.head_mode != HeadMode::lm) throw ContractError("greedy_decode: lm head required");
  for (int i = 0; i < n_tokens; ++i) {
    if (static_cast<int>(prompt.size()) >= params.config.max_seq_len) break;
    Sequence s{prompt, 1, -1};
    const auto tr = forward(params, std::span<const Sequence>(&s, 1));
    Eigen::Index arg = 0;
    tr.logits.row(tr.logits.rows() - 1).maxCoeff(&arg);
    prompt.push_back(static_cast<int>(arg));
  }
  return prompt;
}

}  // namespace msif::nanolm
