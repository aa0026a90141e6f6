#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numeric>
#include <ostream>

#include "msif/evalbench.hpp"

namespace msif::evalbench {

using influence::BlockGradients;
using nanolm::BlockFilter;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(n, k));
  return idx;
}

double mean(std::span<const double> x) {
  return x.empty() ? 0.0 : std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double stddev(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean(x);
  double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(x.size() - 1));
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// --- correlation ------------------------------------------------------------

const MethodRow& CorrelationReport::row(const std::string& method) const {
  for (const auto& r : rows)
    if (r.method == method) return r;
  throw ContractError("correlation report has no method " + method);
}

CorrelationReport correlation_experiment(const Parameters& model, const ekfac::FactorSet& factors,
                                         double factor_fit_seconds, std::span<const Sequence> train,
                                         std::span<const Sequence> test, const CorrelationOptions& opt) {
  ekfac::require_matches(factors, model);
  if (opt.n_queries < 1 || opt.n_candidates < 3) throw InputError("correlation: need >= 1 query and >= 3 candidates");
  if (train.empty() || test.empty()) throw InputError("correlation: empty train or test split");
  Rng rng(derive_seed(opt.seed, 0xc0));
  const auto qi = sample_without_replacement(test.size(), static_cast<std::size_t>(opt.n_queries), rng);
  const auto ci = sample_without_replacement(train.size(), static_cast<std::size_t>(opt.n_candidates), rng);
  const std::size_t nq = qi.size(), nc = ci.size();

  CorrelationReport rep;
  for (auto i : qi) rep.query_ids.push_back("test-" + std::to_string(i));
  for (auto i : ci) rep.candidate_ids.push_back("train-" + std::to_string(i));

  std::vector<BlockGradients> q;
  for (auto i : qi) q.push_back(nanolm::sequence_gradient(model, test[i]).grad);

  // Query-side vectors: every method's score is ⟨vector, candidate gradient⟩.
  std::map<std::string, std::vector<BlockGradients>> vec;
  std::map<std::string, double> prep_s;

  auto t0 = Clock::now();
  influence::GgnOptions gopt;
  gopt.batch_size = opt.cg_batch;
  gopt.resample = opt.cg_resample;
  gopt.seed = derive_seed(opt.seed, 0xc1);
  std::clog << "correlation: CG ground truth, " << opt.cg_iters << " iterations x " << nq << " queries\n";
  vec["cg"] = influence::cg_ihvp(model, train, q, opt.damping, opt.cg_iters, opt.cg_tol, gopt, &rep.cg);
  prep_s["cg"] = seconds_since(t0) / static_cast<double>(nq);

  if (opt.lissa_iters > 0) {
    t0 = Clock::now();
    gopt.seed = derive_seed(opt.seed, 0xc2);
    vec["lissa"] = influence::lissa_ihvp(model, train, q, opt.damping, opt.lissa_scale, opt.lissa_iters, gopt);
    prep_s["lissa"] = seconds_since(t0) / static_cast<double>(nq);
  }

  t0 = Clock::now();
  for (const auto& g : q) vec["ekfac"].push_back(ekfac::ihvp(factors, g, opt.damping));
  prep_s["ekfac"] = seconds_since(t0) / static_cast<double>(nq);
  t0 = Clock::now();
  for (const auto& g : q) vec["ekfac_mlp"].push_back(ekfac::ihvp(factors, nanolm::filtered(g, BlockFilter::mlp), opt.damping));
  prep_s["ekfac_mlp"] = seconds_since(t0) / static_cast<double>(nq);
  vec["gdp"] = q;
  prep_s["gdp"] = 0;
  t0 = Clock::now();
  std::vector<influence::CkaGram> qgram;
  for (const auto& g : q) qgram.push_back(influence::cka_gram(g));
  prep_s["cka"] = seconds_since(t0) / static_cast<double>(nq);

  std::vector<std::string> methods{"cg"};
  if (opt.lissa_iters > 0) methods.push_back("lissa");
  for (const char* m : {"gdp", "cka", "ekfac", "ekfac_mlp"}) methods.emplace_back(m);
  std::map<std::string, std::vector<std::vector<double>>> scores;
  std::map<std::string, double> dot_s;
  for (const auto& m : methods) scores[m].assign(nq, std::vector<double>(nc));

  double grad_s = 0, mha_mass = 0, mlp_mass = 0;
  for (std::size_t c = 0; c < nc; ++c) {
    t0 = Clock::now();
    const auto g = nanolm::sequence_gradient(model, train[ci[c]]).grad;
    grad_s += seconds_since(t0);
    const auto g_mlp = nanolm::filtered(g, BlockFilter::mlp);
    for (const auto& m : methods) {
      t0 = Clock::now();
      if (m == "cka") {
        const auto cg = influence::cka_gram(g);
        for (std::size_t k = 0; k < nq; ++k) scores[m][k][c] = influence::cka(qgram[k], cg);
      } else {
        const auto& cand = m == "ekfac_mlp" ? g_mlp : g;
        for (std::size_t k = 0; k < nq; ++k) scores[m][k][c] = nanolm::dot(vec[m][k], cand);
      }
      dot_s[m] += seconds_since(t0);
    }
    for (std::size_t k = 0; k < nq; ++k) {
      double mha = 0, mlp = 0;
      for (const auto& [id, v] : nanolm::block_dots(vec["ekfac"][k], g)) (id.is_mlp() ? mlp : mha) += v;
      mha_mass += std::abs(mha);
      mlp_mass += std::abs(mlp);
    }
  }
  rep.mha_share = mha_mass + mlp_mass > 0 ? mha_mass / (mha_mass + mlp_mass) : 0.0;
  {
    const auto all = BlockGradients::zeros(model.config);
    const auto mha = BlockGradients::zeros(model.config, BlockFilter::mha);
    rep.mha_param_share = static_cast<double>(mha.size()) / static_cast<double>(all.size());
  }

  for (const auto& m : methods) {
    MethodRow row;
    row.method = m;
    if (m != "cg") {
      for (std::size_t k = 0; k < nq; ++k) row.per_query.push_back(spearman(scores[m][k], scores["cg"][k]));
      row.spearman = mean(row.per_query);
      row.spearman_std = stddev(row.per_query);
    } else {
      row.spearman = std::nan("");
      row.spearman_std = std::nan("");
    }
    row.overhead_s = (m == "ekfac" || m == "ekfac_mlp") ? factor_fit_seconds : 0.0;
    row.pairwise_s = grad_s + prep_s[m] + dot_s[m] / static_cast<double>(nq);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

void write_correlation_csv(std::ostream& out, const CorrelationReport& r, std::uint64_t config_hash) {
  out << "# config_hash=" << hex64(config_hash) << "\n";
  out << "# mha_influence_share=" << fmt(r.mha_share) << " mha_parameter_share=" << fmt(r.mha_param_share)
      << " cg_iterations=" << r.cg.iterations << " cg_relative_residual=" << fmt(r.cg.relative_residual) << "\n";
  out << "method,spearman,spearman_std,overhead_s,pairwise_s\n";
  for (const auto& row : r.rows) {
    out << row.method << ',' << (std::isnan(row.spearman) ? "" : fmt(row.spearman)) << ','
        << (std::isnan(row.spearman_std) ? "" : fmt(row.spearman_std)) << ',' << fmt(row.overhead_s) << ','
        << fmt(row.pairwise_s) << '\n';
  }
}

// --- fact tracing -----------------------------------------------------------

double MetricsEntry::mrr_mean() const { return mean(mrr); }
double MetricsEntry::mrr_std() const { return stddev(mrr); }
double MetricsEntry::recall_mean() const { return mean(recall10); }
double MetricsEntry::recall_std() const { return stddev(recall10); }

const MetricsEntry& MetricsReport::entry(const std::string& method, double damping) const {
  for (const auto& e : entries)
    if (e.method == method && e.damping == damping) return e;
  throw ContractError("metrics report has no entry " + method + " at damping " + fmt(damping));
}

MetricsReport fact_tracing_experiment(const Parameters& model_pt, const Parameters& model_ft,
                                      const ekfac::FactorSet& factors_pt, const ekfac::FactorSet& factors_ft,
                                      const Benchmark& bench, const FactTraceOptions& opt) {
  ekfac::require_matches(factors_pt, model_pt);
  ekfac::require_matches(factors_ft, model_ft);
  if (bench.test.empty() || bench.attribution.empty()) throw InputError("fact tracing: empty benchmark");
  if (opt.n_trials < 1 || opt.queries_per_trial < 1) throw InputError("fact tracing: need >= 1 trial and query");
  const auto sizes = opt.sizes.value_or(scaled_rerank_sizes(bench.attribution.size()));

  std::vector<std::vector<int>> docs;
  for (const auto& s : bench.attribution) docs.push_back(s.tokens);
  const influence::Bm25 bm25(docs);
  const int bos = bench.vocab.id(kBos);

  std::vector<Sequence> att_seq;
  for (const auto& s : bench.attribution) att_seq.push_back(Sequence{s.tokens, 1, -1});
  const Eigen::MatrixXd att_emb = influence::embed_all(model_pt, att_seq);

  Rng shared_rng(derive_seed(opt.seed, 0x5a));
  std::vector<int> shared_random;
  for (auto i : sample_without_replacement(bench.attribution.size(), static_cast<std::size_t>(sizes.random), shared_rng)) {
    shared_random.push_back(static_cast<int>(i));
  }

  // method key -> damping -> per-trial ranked lists
  struct Slot {
    std::string method;
    double damping;
  };
  std::vector<Slot> slots;
  for (const char* m : {"msif", "ssif"})
    for (double d : opt.dampings) slots.push_back({m, d});
  for (const char* m : {"gdp", "repsim", "bm25"}) slots.push_back({m, 0.0});

  MetricsReport report;
  for (const auto& s : slots) report.entries.push_back({s.method, s.damping, {}, {}});

  for (int t = 0; t < opt.n_trials; ++t) {
    Rng rng(derive_seed(opt.seed, 0x100 + static_cast<std::uint64_t>(t)));
    const auto picks = sample_without_replacement(bench.test.size(), static_cast<std::size_t>(opt.queries_per_trial), rng);
    std::vector<std::vector<std::vector<int>>> ranked(slots.size());
    std::vector<std::set<int>> truth;
    for (auto qi : picks) {
      const auto& tq = bench.test[qi];
      truth.emplace_back(tq.true_sources.begin(), tq.true_sources.end());
      std::vector<int> question;
      for (int tok : tq.query.prompt)
        if (tok != bos) question.push_back(tok);
      const auto bm = bm25.scores(question);
      const auto cands = build_rerank_candidates(bench, tq, bm, shared_random, sizes, rng);

      const auto qg = nanolm::measurement(model_ft, tq.query).grad;
      std::vector<BlockGradients> ms, ss;
      for (double d : opt.dampings) {
        ms.push_back(influence::multi_stage_query_vector(factors_pt, factors_ft, qg, d, d));
        ss.push_back(ekfac::ihvp(factors_ft, qg, d));
      }
      const Eigen::VectorXd q_emb = influence::embed(model_ft, tq.query.as_sequence());

      std::vector<std::vector<influence::InfluenceResult>> results(slots.size());
      for (int c : cands) {
        const auto& seq = att_seq[static_cast<std::size_t>(c)];
        const auto g_pt = nanolm::sequence_gradient(model_pt, seq).grad;
        const auto g_ft = nanolm::sequence_gradient(model_ft, seq).grad;
        const std::string& id = bench.attribution[static_cast<std::size_t>(c)].id;
        std::size_t k = 0;
        for (std::size_t d = 0; d < opt.dampings.size(); ++d, ++k)
          results[k].push_back({id, nanolm::dot(ms[d], g_pt), "msif", opt.dampings[d]});
        for (std::size_t d = 0; d < opt.dampings.size(); ++d, ++k)
          results[k].push_back({id, nanolm::dot(ss[d], g_ft), "ssif", opt.dampings[d]});
        results[k++].push_back({id, nanolm::dot(qg, g_pt), "gdp", 0.0});
        results[k++].push_back({id, att_emb.row(c).dot(q_emb), "repsim", 0.0});
        results[k++].push_back({id, bm[static_cast<std::size_t>(c)], "bm25", 0.0});
      }
      // Attribution ids are zero-padded, so id order is index order.
      std::map<std::string, int> index;
      for (int c : cands) index.emplace(bench.attribution[static_cast<std::size_t>(c)].id, c);
      for (std::size_t k = 0; k < slots.size(); ++k) {
        std::vector<int> order;
        for (const auto& r : influence::rank_candidates(std::move(results[k])).items) order.push_back(index.at(r.candidate_id));
        ranked[k].push_back(std::move(order));
      }
    }
    for (std::size_t k = 0; k < slots.size(); ++k) {
      report.entries[k].mrr.push_back(mrr(ranked[k], truth));
      report.entries[k].recall10.push_back(recall_at_k(ranked[k], truth, 10));
    }
    std::clog << "fact tracing: trial " << t + 1 << "/" << opt.n_trials << " done\n";
  }
  return report;
}

void write_metrics_csv(std::ostream& out, const MetricsReport& r, std::uint64_t config_hash) {
  out << "# config_hash=" << hex64(config_hash) << "\n";
  out << "method,damping,trial,mrr,recall_at_10\n";
  for (const auto& e : r.entries) {
    for (std::size_t t = 0; t < e.mrr.size(); ++t) {
      out << e.method << ',' << fmt(e.damping) << ',' << t << ',' << fmt(e.mrr[t]) << ',' << fmt(e.recall10[t]) << '\n';
    }
    out << e.method << ',' << fmt(e.damping) << ",mean," << fmt(e.mrr_mean()) << ',' << fmt(e.recall_mean()) << '\n';
    out << e.method << ',' << fmt(e.damping) << ",std," << fmt(e.mrr_std()) << ',' << fmt(e.recall_std()) << '\n';
  }
}

// --- proximity --------------------------------------------------------------

ProximityReport proximity_stats(const Parameters& pt, const Parameters& ft) {
  if (!pt.config.same_backbone(ft.config)) throw ContractError("proximity: models do not share a backbone");
  ProximityReport r;
  double pt_sq = 0, diff_sq = 0;
  for (const auto& id : nanolm::analyzed_blocks(pt.config)) {
    const auto& a = pt.block(id);
    const auto& b = ft.block(id);
    ProximityRow row;
    row.block = id.name();
    row.pt_norm = a.norm();
    row.diff_norm = (b - a).norm();
    row.ratio = row.pt_norm > 0 ? row.diff_norm / row.pt_norm : std::nan("");
    pt_sq += a.squaredNorm();
    diff_sq += (b - a).squaredNorm();
    r.blocks.push_back(row);
  }
  r.global.block = "global";
  r.global.pt_norm = std::sqrt(pt_sq);
  r.global.diff_norm = std::sqrt(diff_sq);
  r.global.ratio = pt_sq > 0 ? r.global.diff_norm / r.global.pt_norm : std::nan("");
  return r;
}

void write_proximity_csv(std::ostream& out, const ProximityReport& r, std::uint64_t config_hash) {
  out << "# config_hash=" << hex64(config_hash) << "\n";
  out << "block,pt_norm,diff_norm,ratio\n";
  for (const auto* row : {&r.global}) {
    out << row->block << ',' << fmt(row->pt_norm) << ',' << fmt(row->diff_norm) << ',' << fmt(row->ratio) << '\n';
  }
  for (const auto& row : r.blocks) {
    out << row.block << ',' << fmt(row.pt_norm) << ',' << fmt(row.diff_norm) << ',' << fmt(row.ratio) << '\n';
  }
}

}  // namespace msif::evalbench
