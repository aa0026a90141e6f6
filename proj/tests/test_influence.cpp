#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "msif/influence.hpp"
#include "msif/linalg.hpp"
#include "test_support.hpp"

using namespace msif;
using namespace msif::nanolm;
using namespace msif::influence;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd random_matrix(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

BlockGradients random_direction(const ModelConfig& c, std::uint64_t seed, BlockFilter filter = BlockFilter::all) {
  auto g = BlockGradients::zeros(c, filter);
  std::uint64_t s = seed;
  for (auto& [id, m] : g.blocks) m = random_matrix(static_cast<int>(m.rows()), static_cast<int>(m.cols()), ++s);
  return g;
}

/// Λ = 0 factors: ihvp is v / λ.
ekfac::FactorSet identity_factors(const ModelConfig& c, Stage stage, double damping = 1.0) {
  ekfac::FactorSet f;
  f.stage = stage;
  f.damping = damping;
  for (const auto& id : analyzed_blocks(c)) {
    const auto [out, in] = block_shape(c, id);
    ekfac::BlockFactors b;
    b.id = id;
    b.q_a = MatrixXd::Identity(in, in);
    b.q_s = MatrixXd::Identity(out, out);
    b.lambda = MatrixXd::Zero(out, in);
    f.blocks.emplace(id, b);
  }
  return f;
}

struct Fixture {
  ModelConfig config = testing::tiny_config(13);
  Parameters params = testing::random_params(config, 5);
  Corpus data = testing::random_corpus(config, 40, 6);
  ekfac::FactorSet factors;
  Fixture() {
    ekfac::FitOptions opt;
    opt.n_batches = 6;
    opt.batch_size = 8;
    opt.seed = 9;
    factors = ekfac::fit(params, data, opt);
  }
};

BlockOperator dense_operator(const MatrixXd& g) {
  return [g](const MatrixXd& x) { return MatrixXd(g * x); };
}

MatrixXd random_psd(int n, std::uint64_t seed, int rank) {
  const MatrixXd b = random_matrix(n, rank, seed);
  return b * b.transpose() / static_cast<double>(n);
}

}  // namespace

TEST_CASE("rank_candidates orders by score then id") {
  std::vector<InfluenceResult> r{{"b", 1.0, "m", 0}, {"a", 2.0, "m", 0}, {"c", 1.0, "m", 0}, {"d", -3.0, "m", 0}};
  const auto ranked = rank_candidates(r);
  CHECK(ranked.ids() == std::vector<std::string>{"a", "b", "c", "d"});
  std::reverse(r.begin(), r.end());
  CHECK(rank_candidates(r).ids() == ranked.ids());
  std::rotate(r.begin(), r.begin() + 1, r.end());
  CHECK(rank_candidates(r).ids() == ranked.ids());
  r.push_back({"e", std::nan(""), "m", 0});
  CHECK_THROWS_AS(rank_candidates(r), NumericError);
}

TEST_CASE("single-stage influence degeneracies") {
  Fixture fx;
  const auto q = random_direction(fx.config, 1), c = random_direction(fx.config, 2);
  CHECK(single_stage_influence(fx.factors, q, BlockGradients::zeros(fx.config)) == 0.0);
  const auto ident = identity_factors(fx.config, Stage::finetuned);
  CHECK(std::abs(single_stage_influence(ident, q, c) - gdp(q, c)) <= 1e-12 * std::abs(gdp(q, c)));
  const double qc = single_stage_influence(fx.factors, q, c), cq = single_stage_influence(fx.factors, c, q);
  CHECK(std::abs(qc - cq) <= 1e-12 * std::abs(qc));
}

TEST_CASE("multi-stage influence degeneracies") {
  Fixture fx;
  const auto q = random_direction(fx.config, 3), c = random_direction(fx.config, 4);
  const auto pt = identity_factors(fx.config, Stage::pretrained);
  const auto ft = identity_factors(fx.config, Stage::finetuned);
  CHECK(std::abs(multi_stage_influence(pt, ft, q, c) - gdp_multistage(q, c)) <= 1e-12 * std::abs(gdp_multistage(q, c)));
  CHECK(multi_stage_influence(pt, ft, q, BlockGradients::zeros(fx.config)) == 0.0);

  // With identical models and factors, MS-IF is the twice-preconditioned SS-IF.
  auto ft_same = fx.factors;
  ft_same.stage = Stage::finetuned;
  const double ms = multi_stage_influence(fx.factors, ft_same, q, c);
  const double twice = single_stage_influence(ft_same, q, ekfac::ihvp(fx.factors, c));
  CHECK(std::abs(ms - twice) <= 1e-12 * std::abs(twice));

  // Query-side preconditioning gives the same score.
  auto qt = q;
  qt.source = ft_same.fingerprint;
  auto ct = c;
  ct.source = fx.factors.fingerprint;
  const auto u = multi_stage_query_vector(fx.factors, ft_same, qt, 1e-3, 1e-2);
  CHECK(u.source == fx.factors.fingerprint);
  const double direct = multi_stage_influence(fx.factors, ft_same, q, c, 1e-3, 1e-2);
  CHECK(std::abs(dot(u, ct) - direct) <= 1e-10 * std::abs(direct));

  // Large damping: λ² · MS-IF approaches the multi-stage dot product.
  const double big = 1e6;
  const double limit = multi_stage_influence(fx.factors, ft_same, q, c, big, big) * big * big;
  CHECK(std::abs(limit - gdp_multistage(q, c)) <= 1e-4 * std::abs(gdp_multistage(q, c)));
}

TEST_CASE("multi-stage influence contract errors") {
  Fixture fx;
  const auto q = random_direction(fx.config, 5), c = random_direction(fx.config, 6);
  auto ft = fx.factors;
  ft.stage = Stage::finetuned;
  CHECK_THROWS_AS(multi_stage_influence(ft, ft, q, c), ContractError);
  CHECK_THROWS_AS(multi_stage_influence(fx.factors, fx.factors, q, c), ContractError);
  CHECK_THROWS_AS(multi_stage_influence(fx.factors, ft, q, filtered(c, BlockFilter::mlp)), ContractError);
}

TEST_CASE("multi-stage influence from models across a head replacement") {
  Fixture fx;
  OptimizerOpts opt;
  opt.steps = 3;
  opt.batch_size = 4;
  Corpus cls;
  for (std::size_t i = 0; i < 12; ++i) {
    Sequence s = fx.data[i];
    s.label = static_cast<int>(i % 3);
    cls.push_back(s);
  }
  const auto ft_model = finetune(fx.params, cls, opt, HeadMode::lm, 0, 3);
  ekfac::FitOptions fo;
  fo.n_batches = 2;
  fo.batch_size = 6;
  const auto ft_factors = ekfac::fit(ft_model, fx.data, fo);
  Query query{{1, 2, 3}, {4, 5}, "q0"};
  const double via_models = multi_stage_influence(fx.factors, ft_factors, query, fx.data[0], fx.params, ft_model);
  const auto qg = measurement(ft_model, query).grad;
  const auto cg = sequence_gradient(fx.params, fx.data[0]).grad;
  const double via_grads = multi_stage_influence(fx.factors, ft_factors, qg, cg);
  CHECK(via_models == via_grads);
  CHECK(std::isfinite(via_models));
  // The gradients are tagged with their own models; crossing them is rejected.
  CHECK_THROWS_AS(multi_stage_influence(fx.factors, ft_factors, cg, qg), ContractError);
}

TEST_CASE("gradient dot products are bilinear") {
  Fixture fx;
  const auto a = random_direction(fx.config, 7), b = random_direction(fx.config, 8), c = random_direction(fx.config, 9);
  const double lhs = gdp(linear_combination(2.0, a, 0.5, b), c);
  CHECK(lhs == doctest::Approx(2.0 * gdp(a, c) + 0.5 * gdp(b, c)).epsilon(1e-12));
  CHECK(gdp(a, BlockGradients::zeros(fx.config)) == 0.0);
  auto x = BlockGradients::zeros(fx.config), y = BlockGradients::zeros(fx.config);
  x.blocks.begin()->second(0, 0) = 1.0;
  y.blocks.begin()->second(0, 1) = 1.0;
  CHECK(gdp(x, y) == 0.0);
  CHECK_THROWS_AS(gdp(a, filtered(b, BlockFilter::mha)), ContractError);
}

TEST_CASE("cka properties and direct-formula oracle") {
  const ModelConfig c = testing::tiny_config(13);
  const auto x = random_direction(c, 10), y = random_direction(c, 11);
  CHECK(cka(x, x) == doctest::Approx(1.0).epsilon(1e-12));
  const double xy = cka(x, y);
  CHECK(xy >= 0);
  CHECK(xy <= 1);
  CHECK(cka(scaled(x, -3.5), y) == doctest::Approx(xy).epsilon(1e-12));
  CHECK(cka(x, scaled(y, 1e-3)) == doctest::Approx(xy).epsilon(1e-12));

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = random_direction(c, 100 + seed), b = random_direction(c, 200 + seed);
    double sum = 0;
    for (const auto& [id, xm] : a.blocks) {
      const MatrixXd& ym = b.blocks.at(id);
      sum += (ym.transpose() * xm).squaredNorm() / ((xm.transpose() * xm).norm() * (ym.transpose() * ym).norm());
    }
    const double want = sum / static_cast<double>(a.blocks.size());
    CHECK(std::abs(cka(a, b) - want) <= 1e-12);
  }

  // Disjoint row supports in every block: YᵀX = 0.
  auto p = BlockGradients::zeros(c), q = BlockGradients::zeros(c);
  for (auto& [id, m] : p.blocks) m.row(0).setOnes();
  for (auto& [id, m] : q.blocks) m.row(1).setOnes();
  CHECK(cka(p, q) == 0.0);
  CHECK_THROWS_AS(cka(BlockGradients::zeros(c), q), NumericError);
}

TEST_CASE("embeddings and representation similarity") {
  Fixture fx;
  const auto& s = fx.data[3];
  const VectorXd e = embed(fx.params, s);
  CHECK(e.norm() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(repsim(fx.params, s, s) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(embed(fx.params, s) == e);

  const auto tr = forward(fx.params, std::span(&fx.data[4], 1));
  VectorXd m = VectorXd::Zero(fx.config.d_model);
  for (Eigen::Index r = 0; r < tr.residual.rows(); ++r) m += tr.residual.row(r).transpose();
  m /= static_cast<double>(tr.residual.rows());
  const double cosine = m.dot(e) / m.norm();
  CHECK(repsim(fx.params, fx.data[4], s) == doctest::Approx(cosine).epsilon(1e-12));

  const MatrixXd all = embed_all(fx.params, std::span(fx.data).first(5));
  CHECK((all.row(3).transpose() - e).norm() == 0.0);
}

TEST_CASE("bm25 hand-evaluated example and properties") {
  const std::vector<std::vector<int>> one{{7}};
  const std::vector<int> q{7};
  CHECK(bm25_scores(one, q)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  const std::vector<std::vector<int>> docs{{1, 2, 3}, {4, 5}, {1, 9, 9, 9, 9, 9}, {2, 2}};
  const auto s = bm25_scores(docs, std::vector<int>{1});
  CHECK(s[1] == 0.0);
  CHECK(s[3] == 0.0);
  CHECK(s[0] > s[2]);  // same tf, longer document
  for (double x : bm25_scores(docs, std::vector<int>{1, 2, 5, 42})) CHECK(x >= 0);
  CHECK(bm25_scores(docs, std::vector<int>{1, 1}) == s);

  CHECK_THROWS_AS(bm25_scores(docs, std::vector<int>{}), InputError);
  CHECK_THROWS_AS(bm25_scores(std::vector<std::vector<int>>{}, q), InputError);
  CHECK_THROWS_AS(bm25_scores(docs, q, 0.0), ContractError);
  CHECK_THROWS_AS(bm25_scores(docs, q, 1.5, 1.5), ContractError);
}

TEST_CASE("bm25 matches a direct evaluation on random corpora") {
  Rng rng(77);
  std::uniform_int_distribution<int> tok(0, 15), len(1, 12);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<int>> docs(30);
    for (auto& d : docs) {
      d.resize(static_cast<std::size_t>(len(rng)));
      for (int& t : d) t = tok(rng);
    }
    std::vector<int> query(4);
    for (int& t : query) t = tok(rng);
    const double k1 = 1.2, b = 0.6;
    double avg = 0;
    for (const auto& d : docs) avg += static_cast<double>(d.size());
    avg /= static_cast<double>(docs.size());
    std::vector<int> terms = query;
    std::sort(terms.begin(), terms.end());
    terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
    const auto got = bm25_scores(docs, query, k1, b);
    for (std::size_t i = 0; i < docs.size(); ++i) {
      double want = 0;
      for (int t : terms) {
        const auto n_t = std::count_if(docs.begin(), docs.end(), [&](const auto& d) {
          return std::find(d.begin(), d.end(), t) != d.end();
        });
        const double f = static_cast<double>(std::count(docs[i].begin(), docs[i].end(), t));
        if (f == 0) continue;
        want += std::log((docs.size() + 1.0) / static_cast<double>(n_t)) * f * (k1 + 1) /
                (f + k1 * (1 - b + b * static_cast<double>(docs[i].size()) / avg));
      }
      CHECK(got[i] == doctest::Approx(want).epsilon(1e-13));
    }
  }
}

TEST_CASE("knn candidates") {
  MatrixXd e = random_matrix(50, 6, 3);
  e.rowwise().normalize();
  const auto self = knn_candidates(e, e.row(17).transpose(), 5);
  CHECK(self.front() == 17);
  CHECK(self.size() == 5);

  const VectorXd q = e.row(4).transpose();
  std::vector<int> order(50);
  std::iota(order.begin(), order.end(), 0);
  const VectorXd sim = e * q;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sim(a) > sim(b); });
  CHECK(knn_candidates(e, q, 50) == order);
  CHECK(knn_candidates(e, q, 12) == std::vector<int>(order.begin(), order.begin() + 12));
  CHECK(knn_candidates(e, q, 80).size() == 50);

  MatrixXd dup = MatrixXd::Ones(4, 2) / std::sqrt(2.0);
  CHECK(knn_candidates(dup, dup.row(0).transpose(), 4) == std::vector<int>{0, 1, 2, 3});
  CHECK_THROWS_AS(knn_candidates(e, VectorXd::Ones(3), 2), ContractError);
}

TEST_CASE("cg matches the dense damped solve") {
  for (int n : {10, 60, 100}) {
    const MatrixXd g = random_psd(n, static_cast<std::uint64_t>(n), n / 2);
    const MatrixXd v = random_matrix(n, 3, static_cast<std::uint64_t>(n + 1));
    for (double lambda : {1e-3, 1e-1}) {
      SolveReport rep;
      const MatrixXd x = cg_solve(dense_operator(g), lambda, v, 2000, 1e-13, &rep);
      CHECK(rep.converged);
      for (Eigen::Index j = 0; j < v.cols(); ++j) {
        const VectorXd want = linalg::dense_damped_solve(g, lambda, VectorXd(v.col(j)));
        CHECK((x.col(j) - want).norm() <= 1e-8 * want.norm());
      }
    }
  }
}

TEST_CASE("cg edge cases") {
  const MatrixXd g = random_psd(8, 1, 8);
  SolveReport rep;
  const MatrixXd x = cg_solve(dense_operator(g), 0.1, MatrixXd::Zero(8, 2), 100, 1e-10, &rep);
  CHECK(x.isZero(0));
  CHECK(rep.iterations == 0);
  CHECK(rep.converged);

  // Columns are independent recursions: solving together equals solving apart.
  const MatrixXd v = random_matrix(8, 2, 2);
  const MatrixXd both = cg_solve(dense_operator(g), 0.1, v, 5, 0.0);
  const MatrixXd first = cg_solve(dense_operator(g), 0.1, v.col(0), 5, 0.0);
  CHECK((both.col(0) - first).norm() <= 1e-14 * first.norm());

  CHECK_THROWS_AS(cg_solve(dense_operator(g), 0.0, v, 5, 0.0), ContractError);
  MatrixXd indefinite = -MatrixXd::Identity(8, 8);
  CHECK_THROWS_AS(cg_solve(dense_operator(indefinite), 0.1, v, 5, 0.0), NumericError);
  const BlockOperator nan_op = [](const MatrixXd& x) { return MatrixXd(x * std::nan("")); };
  CHECK_THROWS_AS(cg_solve(nan_op, 0.1, v, 5, 0.0), NumericError);
}

TEST_CASE("lissa matches the dense damped solve") {
  const int n = 40;
  const MatrixXd g = random_psd(n, 5, 20);
  const MatrixXd v = random_matrix(n, 2, 6);
  const double lambda = 0.05;
  const double top = linalg::sym_eigendecompose(g).values(0);
  const double alpha = 1.0 / (top + lambda);
  double prev = std::numeric_limits<double>::infinity();
  for (int iters : {100, 1000, 3000}) {
    const MatrixXd x = lissa_solve(dense_operator(g), lambda, alpha, v, iters);
    double err = 0;
    for (Eigen::Index j = 0; j < v.cols(); ++j) {
      const VectorXd want = linalg::dense_damped_solve(g, lambda, VectorXd(v.col(j)));
      err = std::max(err, (x.col(j) - want).norm() / want.norm());
    }
    CHECK(err < prev);
    prev = err;
  }
  CHECK(prev <= 1e-4);
}

TEST_CASE("lissa closed forms and divergence") {
  const MatrixXd v = random_matrix(5, 1, 9);
  const BlockOperator zero = [](const MatrixXd& x) { return MatrixXd(MatrixXd::Zero(x.rows(), x.cols())); };
  const double lambda = 0.5, alpha = 0.1;
  const MatrixXd x = lissa_solve(zero, lambda, alpha, v, 1000);
  CHECK((x - v / lambda).norm() <= 1e-12 * (v / lambda).norm());
  // One step from r_0 = v: r_1 = 2v − αλv.
  const MatrixXd one = lissa_solve(zero, lambda, alpha, v, 1);
  CHECK((one - alpha * (2.0 - alpha * lambda) * v).norm() <= 1e-15 * v.norm());

  const BlockOperator big = [](const MatrixXd& x) { return MatrixXd(100.0 * x); };
  CHECK_THROWS_AS(lissa_solve(big, lambda, alpha, v, 50), NumericError);
  CHECK_THROWS_AS(lissa_solve(zero, 0.0, alpha, v, 5), ContractError);
  CHECK_THROWS_AS(lissa_solve(zero, lambda, 0.0, v, 5), ContractError);
}

TEST_CASE("gauss-newton products are symmetric and positive") {
  Fixture fx;
  GgnOptions opt;
  opt.resample = false;
  opt.batch_size = 6;
  GgnOperator op(fx.params, fx.data, opt);
  const auto u = random_direction(fx.config, 31), v = random_direction(fx.config, 32);
  const auto gu = op.apply(u), gv = op.apply(v);
  CHECK(std::abs(dot(u, gv) - dot(v, gu)) <= 1e-11 * std::abs(dot(u, gv)));
  CHECK(dot(u, gu) > 0);
  CHECK(dot(v, gv) > 0);
  CHECK(op.products() == 2);
  const auto both = op.apply(std::vector<BlockGradients>{u, v});
  CHECK(dot(both[0], u) == dot(gu, u));

  const auto mlp = op.apply(filtered(u, BlockFilter::mlp));
  CHECK(mlp.blocks.size() == filtered(u, BlockFilter::mlp).blocks.size());
}

TEST_CASE("gauss-newton product matches a finite-difference Jacobian oracle") {
  Fixture fx;
  GgnOptions opt;
  opt.resample = false;
  opt.batch_size = 4;
  GgnOperator op(fx.params, fx.data, opt);
  // Reconstruct the batch the operator drew.
  Rng rng(derive_seed(opt.seed, 0x6767));
  std::uniform_int_distribution<std::size_t> pick(0, fx.data.size() - 1);
  Corpus batch;
  for (int i = 0; i < opt.batch_size; ++i) batch.push_back(fx.data[pick(rng)]);

  const BlockId id{1, BlockKind::mlp_out, 0};
  const auto tr = forward(fx.params, batch);
  const auto rows = supervised_rows(tr, batch);
  const MatrixXd probs = softmax_rows(tr.logits);
  const Eigen::Index n_param = fx.params.block(id).size();
  const Eigen::Index n_out = tr.logits.size();
  MatrixXd jac(n_out, n_param);
  const double eps = 1e-6;
  for (Eigen::Index k = 0; k < n_param; ++k) {
    auto plus = fx.params, minus = fx.params;
    plus.block(id).data()[k] += eps;
    minus.block(id).data()[k] -= eps;
    jac.col(k) = (forward(plus, batch).logits - forward(minus, batch).logits).reshaped() / (2 * eps);
  }
  // Output Hessian of the softmax cross-entropy on supervised rows.
  MatrixXd h = MatrixXd::Zero(n_out, n_out);
  const Eigen::Index n_rows = tr.logits.rows();
  for (int r : rows) {
    const VectorXd p = probs.row(r).transpose();
    const MatrixXd hr = MatrixXd(p.asDiagonal()) - p * p.transpose();
    for (Eigen::Index a = 0; a < p.size(); ++a)
      for (Eigen::Index b = 0; b < p.size(); ++b) h(a * n_rows + r, b * n_rows + r) = hr(a, b);
  }
  const MatrixXd dense = jac.transpose() * h * jac / static_cast<double>(tr.n_rows());

  BlockGradients v;
  v.blocks.emplace(id, random_matrix(static_cast<int>(fx.params.block(id).rows()),
                                     static_cast<int>(fx.params.block(id).cols()), 40));
  const auto gv = op.apply(v);
  const VectorXd want = dense * v.blocks.at(id).reshaped();
  CHECK((gv.blocks.at(id).reshaped() - want).norm() <= 1e-6 * want.norm());
}

TEST_CASE("iterative ihvps on the model match a dense solve of the fixed-batch GGN") {
  Fixture fx;
  GgnOptions opt;
  opt.resample = false;
  opt.batch_size = 8;
  const BlockId id{0, BlockKind::key, 1};
  BlockGradients like;
  like.blocks.emplace(id, MatrixXd::Zero(fx.config.head_dim, fx.config.d_model));
  GgnOperator op(fx.params, fx.data, opt);
  const auto as_op = op.as_block_operator(like);
  const Eigen::Index n = like.size();
  const MatrixXd dense = as_op(MatrixXd::Identity(n, n));
  const MatrixXd g = (dense + dense.transpose()) / 2;
  CHECK((dense - dense.transpose()).norm() <= 1e-10 * dense.norm());

  auto v = like;
  v.blocks.at(id) = random_matrix(fx.config.head_dim, fx.config.d_model, 41);
  v.source = fx.params.fingerprint();
  const double lambda = 1e-2;
  const VectorXd want = linalg::dense_damped_solve(g, lambda, flatten(v));

  SolveReport rep;
  const auto cg = cg_ihvp(fx.params, fx.data, std::vector{v}, lambda, 500, 1e-12, opt, &rep);
  CHECK(rep.converged);
  CHECK((flatten(cg[0]) - want).norm() <= 1e-8 * want.norm());
  CHECK(cg[0].source == v.source);

  // LiSSA contracts at rate 1 − λ/(top + λ); damping scaled to the spectrum.
  const double top = linalg::sym_eigendecompose(g).values(0);
  const double lambda_l = 1e-2 * top;
  const VectorXd want_l = linalg::dense_damped_solve(g, lambda_l, flatten(v));
  const auto li = lissa_ihvp(fx.params, fx.data, std::vector{v}, lambda_l, 1.0 / (top + lambda_l), 3000, opt);
  CHECK((flatten(li[0]) - want_l).norm() <= 1e-4 * want_l.norm());

  auto foreign = v;
  foreign.source ^= 1;
  CHECK_THROWS_AS(cg_ihvp(fx.params, fx.data, std::vector{foreign}, lambda, 5, 0.0, opt), ContractError);
}

TEST_CASE("resampled gauss-newton products draw fresh batches") {
  Fixture fx;
  GgnOptions opt;
  opt.batch_size = 2;
  opt.seed = 4;
  GgnOperator a(fx.params, fx.data, opt), b(fx.params, fx.data, opt);
  const auto u = random_direction(fx.config, 50);
  const auto a1 = a.apply(u), a2 = a.apply(u), b1 = b.apply(u);
  CHECK(dot(a1, u) == dot(b1, u));
  CHECK(dot(a1, u) != dot(a2, u));
  CHECK_THROWS_AS(GgnOperator(fx.params, Corpus{}, opt), InputError);
}

TEST_CASE("score dumps") {
  std::vector<ScoreRow> rows{{"q1", {"c7", 0.125, "ekfac", 1e-4}}, {"q1", {"c2", -3.0, "gdp", 0}}};
  std::ostringstream csv;
  write_scores_csv(csv, rows, 0xabcULL);
  CHECK(csv.str() ==
        "# config_hash=0000000000000abc\n"
        "query_id,candidate_id,method,damping,score\n"
        "q1,c7,ekfac,0.0001,0.125\n"
        "q1,c2,gdp,0,-3\n");
  std::ostringstream jl;
  write_scores_jsonl(jl, rows, 0xabcULL);
  std::istringstream in(jl.str());
  std::string line;
  std::getline(in, line);
  const auto j = nlohmann::json::parse(line);
  CHECK(j["query_id"] == "q1");
  CHECK(j["candidate_id"] == "c7");
  CHECK(j["method"] == "ekfac");
  CHECK(j["damping"].get<double>() == 1e-4);
  CHECK(j["score"].get<double>() == 0.125);
  CHECK(j["config_hash"] == "0000000000000abc");
}
