#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "msif/evalbench.hpp"
#include "test_support.hpp"

using namespace msif;
using namespace msif::evalbench;
using msif::testing::random_params;
using msif::testing::tiny_config;

namespace {

// O(n²) rank: 1 + #smaller + (#equal - 1)/2.
std::vector<double> naive_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, equal = 0;
    for (double y : x) {
      less += y < x[i];
      equal += y == x[i];
    }
    r[i] = 1 + less + (equal - 1) / 2;
  }
  return r;
}

double naive_pearson(const std::vector<double>& a, const std::vector<double>& b) {
  Eigen::Map<const Eigen::VectorXd> x(a.data(), static_cast<Eigen::Index>(a.size()));
  Eigen::Map<const Eigen::VectorXd> y(b.data(), static_cast<Eigen::Index>(b.size()));
  const Eigen::VectorXd xc = x.array() - x.mean(), yc = y.array() - y.mean();
  return xc.dot(yc) / (xc.norm() * yc.norm());
}

BenchmarkOptions small_benchmark_options(std::uint64_t seed = 5) {
  BenchmarkOptions o;
  o.n_entities = 20;
  o.n_distractor_entities = 5;
  o.n_relations = 4;
  o.seed = seed;
  return o;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("msif_evalbench_" + name);
}

}  // namespace

TEST_CASE("rank correlations match scipy on a tied example") {
  const std::vector<double> a{3, 1, 4, 1, 5, 9, 2, 6, 5, 3};
  const std::vector<double> b{2, 7, 1, 8, 2, 8, 1, 8, 2, 8};
  const std::vector<double> c{0.5, -1.25, 2.0, 3.5, -0.75, 1.0, 4.25, -2.0, 0.0, 1.5};
  CHECK(spearman(a, b) == doctest::Approx(0.13471506281091267).epsilon(1e-12));
  CHECK(spearman(a, c) == doctest::Approx(-0.39757024851785244).epsilon(1e-12));
  CHECK(pearson(a, c) == doctest::Approx(-0.36130371772515124).epsilon(1e-12));
  const std::vector<double> expect{4.5, 1.5, 6, 1.5, 7.5, 10, 3, 9, 7.5, 4.5};
  CHECK(average_ranks(a) == expect);
}

TEST_CASE("rank correlations agree with direct formulas on random inputs") {
  Rng rng(17);
  std::uniform_int_distribution<int> len(3, 40), small(0, 5);
  std::normal_distribution<double> n(0, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    const int m = len(rng);
    const bool ties = trial % 2 == 0;
    std::vector<double> a(m), b(m);
    for (int i = 0; i < m; ++i) {
      a[i] = ties ? small(rng) : n(rng);
      b[i] = ties ? small(rng) : n(rng);
    }
    const auto ra = naive_ranks(a), rb = naive_ranks(b);
    CHECK(average_ranks(a) == ra);
    const double sa = std::accumulate(ra.begin(), ra.end(), 0.0);
    if (std::all_of(ra.begin(), ra.end(), [&](double r) { return r == ra[0]; }) ||
        std::all_of(rb.begin(), rb.end(), [&](double r) { return r == rb[0]; })) {
      CHECK_THROWS_AS(spearman(a, b), NumericError);
      continue;
    }
    CHECK(sa == doctest::Approx(m * (m + 1) / 2.0));
    CHECK(std::abs(spearman(a, b) - naive_pearson(ra, rb)) < 1e-12);
    CHECK(std::abs(pearson(a, b) - naive_pearson(a, b)) < 1e-12);
    if (!ties) {
      // Without ties: 1 - 6 Σd² / (m(m²-1)).
      double d2 = 0;
      for (int i = 0; i < m; ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
      CHECK(std::abs(spearman(a, b) - (1 - 6 * d2 / (m * (static_cast<double>(m) * m - 1)))) < 1e-12);
    }
  }
}

TEST_CASE("rank correlation edge cases") {
  const std::vector<double> x{1, 2, 3, 4}, y{10, 20, 30, 40}, z{4, 3, 2, 1};
  CHECK(spearman(x, y) == 1.0);
  CHECK(spearman(x, z) == -1.0);
  std::vector<double> mono(x.size());
  std::transform(x.begin(), x.end(), mono.begin(), [](double v) { return std::exp(v); });
  CHECK(spearman(x, mono) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(spearman(x, std::vector<double>{1, 2, 3}), ContractError);
  CHECK_THROWS_AS(spearman(std::vector<double>{1, 2}, std::vector<double>{2, 1}), ContractError);
  CHECK_THROWS_AS(pearson(x, std::vector<double>{1, 1, 1, 1}), NumericError);
  CHECK_THROWS_AS(pearson(x, std::vector<double>{1, std::nan(""), 1, 2}), NumericError);
}

TEST_CASE("MRR and recall@k") {
  const std::vector<std::vector<int>> ranked{{5, 3, 1, 2}, {0, 1, 2, 3}, {9, 8, 7, 6}};
  const std::vector<std::set<int>> truth{{3, 2}, {0}, {1}};
  CHECK(first_hit_rank(ranked[0], truth[0]) == 2);
  CHECK(first_hit_rank(ranked[2], truth[2]) == 0);
  CHECK(mrr(ranked, truth) == doctest::Approx((0.5 + 1.0 + 0.0) / 3).epsilon(1e-15));
  CHECK(recall_at_k(ranked, truth, 2) == doctest::Approx((0.5 + 1.0 + 0.0) / 3).epsilon(1e-15));
  CHECK(recall_at_k(ranked, truth, 10) == doctest::Approx((1.0 + 1.0 + 0.0) / 3).epsilon(1e-15));
  CHECK_THROWS_AS(mrr(ranked, std::vector<std::set<int>>{{1}}), ContractError);
  CHECK_THROWS_AS(recall_at_k(ranked, truth, 0), ContractError);
  CHECK_THROWS_AS(recall_at_k(ranked, std::vector<std::set<int>>{{1}, {}, {2}}), ContractError);
}

TEST_CASE("MRR and recall@10 agree with brute force on random instances") {
  Rng rng(23);
  std::uniform_int_distribution<int> n_items(1, 40), n_queries(1, 8);
  for (int trial = 0; trial < 1000; ++trial) {
    const int m = n_items(rng), nq = n_queries(rng);
    std::vector<std::vector<int>> ranked;
    std::vector<std::set<int>> truth;
    double rr = 0, rec = 0;
    for (int q = 0; q < nq; ++q) {
      std::vector<int> order(static_cast<std::size_t>(m));
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      std::set<int> t;
      const int n_true = std::uniform_int_distribution<int>(1, 3)(rng);
      // Truth may include ids absent from the ranking.
      while (static_cast<int>(t.size()) < n_true) t.insert(std::uniform_int_distribution<int>(0, m + 2)(rng));
      int best = std::numeric_limits<int>::max();
      for (int id : t) {
        const auto it = std::find(order.begin(), order.end(), id);
        if (it != order.end()) best = std::min(best, static_cast<int>(it - order.begin()) + 1);
      }
      if (best != std::numeric_limits<int>::max()) rr += 1.0 / best;
      int hits = 0;
      for (int id : t) {
        const auto it = std::find(order.begin(), order.end(), id);
        hits += it != order.end() && it - order.begin() < 10;
      }
      rec += static_cast<double>(hits) / static_cast<double>(t.size());
      ranked.push_back(std::move(order));
      truth.push_back(std::move(t));
    }
    CHECK(std::abs(mrr(ranked, truth) - rr / nq) <= 1e-12);
    CHECK(std::abs(recall_at_k(ranked, truth) - rec / nq) <= 1e-12);
  }
}

TEST_CASE("metric trivial cases") {
  const std::vector<std::vector<int>> ranked{{4, 1, 2, 3}, {9, 0, 5, 6}};
  CHECK(mrr(ranked, std::vector<std::set<int>>{{1}, {0}}) == 0.5);
  CHECK(recall_at_k(ranked, std::vector<std::set<int>>{{1, 3}, {6}}) == 1.0);
  CHECK(recall_at_k(ranked, std::vector<std::set<int>>{{7}, {8}}) == 0.0);
  CHECK(recall_at_k(ranked, std::vector<std::set<int>>{{1, 8}, {0, 7}}) == 0.5);
}

TEST_CASE("a ranking with a true source first has MRR 1") {
  Rng rng(3);
  std::vector<std::vector<int>> ranked;
  std::vector<std::set<int>> truth;
  for (int q = 0; q < 50; ++q) {
    std::vector<int> order(30);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    truth.push_back({order[0], order[7]});
    ranked.push_back(order);
  }
  CHECK(mrr(ranked, truth) == 1.0);
}

TEST_CASE("synthetic benchmark structure") {
  const auto b = generate_synthetic_benchmark(small_benchmark_options());
  REQUIRE(!b.test.empty());
  REQUIRE(!b.finetune.empty());
  CHECK(object_coverage(b) == 1.0);
  CHECK(b.vocab.size() <= 512);

  std::set<FactTriple> test_facts;
  for (const auto& q : b.test) {
    test_facts.insert(q.fact);
    REQUIRE(q.true_sources.size() == 2);
    for (int s : q.true_sources) {
      const auto& sent = b.attribution[static_cast<std::size_t>(s)];
      CHECK(std::count(sent.facts.begin(), sent.facts.end(), q.fact) == 1);
      CHECK(std::count(sent.tokens.begin(), sent.tokens.end(), q.fact.object) == 1);
      CHECK(std::count(sent.tokens.begin(), sent.tokens.end(), q.fact.subject) == 1);
    }
    CHECK(q.query.prompt.front() == b.vocab.id(kBos));
    CHECK(q.query.target.front() == q.fact.object);
    CHECK(std::count(q.query.prompt.begin(), q.query.prompt.end(), q.fact.object) == 0);
  }
  // Test facts never leak into fine-tuning.
  for (const auto& f : b.finetune) {
    for (const auto& q : b.test) {
      const bool same_subject = std::count(f.prompt.begin(), f.prompt.end(), q.fact.subject) > 0;
      const bool same_relation_answer = f.target.front() == q.fact.object;
      CHECK_FALSE((same_subject && same_relation_answer && f.prompt == q.query.prompt));
    }
  }
  // Every true-source list is exactly the sentences carrying the fact.
  for (const auto& q : b.test) {
    std::vector<int> carriers;
    for (std::size_t i = 0; i < b.attribution.size(); ++i) {
      const auto& fs = b.attribution[i].facts;
      if (std::find(fs.begin(), fs.end(), q.fact) != fs.end()) carriers.push_back(static_cast<int>(i));
    }
    auto sources = q.true_sources;
    std::sort(sources.begin(), sources.end());
    CHECK(carriers == sources);
  }
}

TEST_CASE("benchmark is deterministic in its seed and round-trips through JSON") {
  const auto a = generate_synthetic_benchmark(small_benchmark_options(5));
  const auto a2 = generate_synthetic_benchmark(small_benchmark_options(5));
  const auto c = generate_synthetic_benchmark(small_benchmark_options(6));
  CHECK(pretrain_corpus(a).size() == pretrain_corpus(a2).size());
  for (std::size_t i = 0; i < a.attribution.size(); ++i) CHECK(a.attribution[i].tokens == a2.attribution[i].tokens);
  bool differs = a.attribution.size() != c.attribution.size();
  for (std::size_t i = 0; !differs && i < a.attribution.size(); ++i) differs = a.attribution[i].tokens != c.attribution[i].tokens;
  CHECK(differs);

  const auto path = temp_path("bench.json");
  save_benchmark(a, path, 0x1234);
  const auto back = load_benchmark(path);
  CHECK(back.seed == a.seed);
  CHECK(back.vocab.words() == a.vocab.words());
  REQUIRE(back.attribution.size() == a.attribution.size());
  for (std::size_t i = 0; i < a.attribution.size(); ++i) {
    CHECK(back.attribution[i].id == a.attribution[i].id);
    CHECK(back.attribution[i].tokens == a.attribution[i].tokens);
    CHECK(back.attribution[i].facts == a.attribution[i].facts);
  }
  REQUIRE(back.test.size() == a.test.size());
  for (std::size_t i = 0; i < a.test.size(); ++i) {
    CHECK(back.test[i].query.prompt == a.test[i].query.prompt);
    CHECK(back.test[i].query.target == a.test[i].query.target);
    CHECK(back.test[i].true_sources == a.test[i].true_sources);
  }
  REQUIRE(back.finetune.size() == a.finetune.size());
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_benchmark(temp_path("missing.json")), InputError);
}

TEST_CASE("benchmark refuses a vocabulary over the limit") {
  CHECK_THROWS_AS(generate_synthetic_benchmark(small_benchmark_options(), 50), InputError);
}

TEST_CASE("rerank candidate set") {
  const auto b = generate_synthetic_benchmark(small_benchmark_options());
  std::vector<std::vector<int>> docs;
  for (const auto& s : b.attribution) docs.push_back(s.tokens);
  const influence::Bm25 bm25(docs);
  const RerankSizes sizes{5, 4, 3};
  const std::vector<int> shared{0, 1, 2};
  Rng rng(1);
  for (const auto& q : b.test) {
    const auto scores = bm25.scores(q.query.prompt);
    const auto cands = build_rerank_candidates(b, q, scores, shared, sizes, rng);
    CHECK(std::is_sorted(cands.begin(), cands.end()));
    CHECK(std::adjacent_find(cands.begin(), cands.end()) == cands.end());
    for (int s : q.true_sources) CHECK(std::binary_search(cands.begin(), cands.end(), s));
    for (int s : shared) CHECK(std::binary_search(cands.begin(), cands.end(), s));
    const auto best = std::max_element(scores.begin(), scores.end()) - scores.begin();
    CHECK(std::binary_search(cands.begin(), cands.end(), static_cast<int>(best)));
    CHECK(cands.size() <= q.true_sources.size() + 5 + 4 + 3);
  }
  CHECK_THROWS_AS(build_rerank_candidates(b, b.test[0], std::vector<double>(3), shared, sizes, rng), ContractError);
  const auto s = scaled_rerank_sizes(250);
  CHECK(s.bm25 == 25);
  CHECK(s.random == 25);
  CHECK(scaled_rerank_sizes(5000).bm25 == 100);
  CHECK(scaled_rerank_sizes(1).same_target == 1);
}

TEST_CASE("grammar corpus") {
  GrammarOptions o;
  o.n_train = 300;
  o.n_test = 30;
  o.max_len = 12;
  o.seed = 9;
  const auto [train, test] = generate_grammar_corpus(o);
  const auto [train2, test2] = generate_grammar_corpus(o);
  CHECK(train.sequences.size() == 300);
  CHECK(test.sequences.size() == 30);
  CHECK(train.vocab.words() == test.vocab.words());
  const int bos = train.vocab.id(kBos), eos = train.vocab.id(kEos);
  std::set<std::vector<int>> distinct;
  for (std::size_t i = 0; i < train.sequences.size(); ++i) {
    const auto& t = train.sequences[i].tokens;
    CHECK(static_cast<int>(t.size()) <= o.max_len);
    CHECK(t.front() == bos);
    CHECK(t.back() == eos);
    CHECK(t == train2.sequences[i].tokens);
    distinct.insert(t);
  }
  CHECK(distinct.size() > 200);

  const auto path = temp_path("corpus.json");
  save_corpus(test, path, 7);
  const auto back = load_corpus(path);
  CHECK(back.ids == test.ids);
  for (std::size_t i = 0; i < test.sequences.size(); ++i) CHECK(back.sequences[i].tokens == test.sequences[i].tokens);
  std::filesystem::remove(path);
}

TEST_CASE("vocab encode and decode") {
  Vocab v({"<s>", "a", "b"});
  CHECK(v.add("a") == 1);
  CHECK(v.add("c") == 3);
  CHECK(v.encode("<s> a  c b") == std::vector<int>{0, 1, 3, 2});
  CHECK(v.decode(std::vector<int>{0, 1, 3}) == "<s> a c");
  CHECK_THROWS_AS(v.encode("a zz"), InputError);
}

TEST_CASE("proximity statistics") {
  const auto c = tiny_config();
  const auto pt = random_params(c, 1);
  auto ft = pt;
  ft.stage = Stage::finetuned;
  auto same = proximity_stats(pt, ft);
  CHECK(same.global.diff_norm == 0.0);
  CHECK(same.global.ratio == 0.0);
  CHECK(same.blocks.size() == nanolm::analyzed_blocks(c).size());

  // Scaling every analyzed block by 1.1 gives ratio 0.1 everywhere.
  for (const auto& id : nanolm::analyzed_blocks(c)) ft.block(id) *= 1.1;
  const auto r = proximity_stats(pt, ft);
  CHECK(r.global.ratio == doctest::Approx(0.1).epsilon(1e-12));
  for (const auto& row : r.blocks) CHECK(row.ratio == doctest::Approx(0.1).epsilon(1e-12));

  std::ostringstream out;
  write_proximity_csv(out, r, 0xabcdef);
  CHECK(out.str().rfind("# config_hash=0000000000abcdef\nblock,pt_norm,diff_norm,ratio\nglobal,", 0) == 0);
  CHECK_THROWS_AS(proximity_stats(pt, random_params(tiny_config(13), 1)), ContractError);
  auto doubled = pt;
  for (const auto& id : nanolm::analyzed_blocks(c)) doubled.block(id) *= 2.0;
  CHECK(proximity_stats(pt, doubled).global.ratio == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("multi-stage influence ranks like gradient dot products at very large damping") {
  const auto c = tiny_config();
  const auto pt = random_params(c, 2);
  auto ft = random_params(c, 3, 0.05);
  for (const auto& id : nanolm::analyzed_blocks(c)) ft.block(id) += pt.block(id);
  ft.stage = Stage::finetuned;
  const auto data = msif::testing::random_corpus(c, 40, 4);
  ekfac::FitOptions fo;
  fo.seed = 1;
  const auto f_pt = ekfac::fit(pt, data, fo);
  const auto f_ft = ekfac::fit(ft, data, fo);
  Rng rng(8);
  const auto q = nanolm::sequence_gradient(ft, msif::testing::random_sequence(c, 6, rng)).grad;
  const auto v = influence::multi_stage_query_vector(f_pt, f_ft, q, 1e6, 1e6);
  std::vector<double> ms, gd;
  for (const auto& s : msif::testing::random_corpus(c, 60, 9)) {
    const auto g = nanolm::sequence_gradient(pt, s).grad;
    ms.push_back(nanolm::dot(v, g));
    gd.push_back(nanolm::dot(q, g));
  }
  CHECK(spearman(ms, gd) >= 0.999);
}

TEST_CASE("fact tracing experiment on a tiny benchmark") {
  const auto b = generate_synthetic_benchmark(small_benchmark_options());
  auto c = tiny_config(b.vocab.size());
  c.max_seq_len = 16;
  nanolm::OptimizerOpts oo;
  oo.steps = 20;
  oo.batch_size = 8;
  const auto pt = nanolm::train(c, pretrain_corpus(b), oo, 1);
  const auto ft = nanolm::finetune(pt, finetune_corpus(b), oo, nanolm::HeadMode::lm, 0, 2);
  ekfac::FitOptions fo;
  fo.n_batches = 2;
  fo.seed = 3;
  const auto f_pt = ekfac::fit(pt, pretrain_corpus(b), fo);
  const auto f_ft = ekfac::fit(ft, finetune_corpus(b), fo);

  FactTraceOptions o;
  o.dampings = {1e-4, 1e-2};
  o.n_trials = 2;
  o.queries_per_trial = 5;
  o.sizes = RerankSizes{5, 5, 5};
  o.seed = 4;
  const auto r = fact_tracing_experiment(pt, ft, f_pt, f_ft, b, o);
  CHECK(r.entries.size() == 2 * 2 + 3);
  for (const auto& e : r.entries) {
    REQUIRE(e.mrr.size() == 2);
    for (int t = 0; t < 2; ++t) {
      CHECK(e.mrr[t] > 0.0);
      CHECK(e.mrr[t] <= 1.0);
      CHECK(e.recall10[t] >= 0.0);
      CHECK(e.recall10[t] <= 1.0);
    }
  }
  const auto r2 = fact_tracing_experiment(pt, ft, f_pt, f_ft, b, o);
  CHECK(r2.entry("msif", 1e-4).mrr == r.entry("msif", 1e-4).mrr);
  CHECK(r2.entry("bm25").recall10 == r.entry("bm25").recall10);
  CHECK_THROWS_AS(r.entry("msif", 1.0), ContractError);

  std::ostringstream out;
  write_metrics_csv(out, r, 1);
  CHECK(out.str().rfind("# config_hash=0000000000000001\nmethod,damping,trial,mrr,recall_at_10\n", 0) == 0);
  // Factors must belong to the models they are used with.
  CHECK_THROWS_AS(fact_tracing_experiment(pt, ft, f_ft, f_pt, b, o), ContractError);
}

TEST_CASE("correlation experiment on a tiny model") {
  const auto c = tiny_config();
  const auto model = random_params(c, 5, 0.3);
  const auto train = msif::testing::random_corpus(c, 60, 6);
  const auto test = msif::testing::random_corpus(c, 10, 7);
  ekfac::FitOptions fo;
  fo.seed = 2;
  const auto factors = ekfac::fit(model, train, fo);
  CorrelationOptions o;
  o.n_queries = 3;
  o.n_candidates = 25;
  o.damping = 1.0;
  o.cg_iters = 400;
  o.cg_batch = 60;
  o.lissa_iters = 100;
  o.lissa_scale = 1e-2;
  o.seed = 1;
  const auto r = correlation_experiment(model, factors, 0.5, train, test, o);
  REQUIRE(r.rows.size() == 6);
  CHECK(r.rows.front().method == "cg");
  CHECK(r.query_ids.size() == 3);
  CHECK(r.candidate_ids.size() == 25);
  for (const auto& row : r.rows) {
    if (row.method == "cg") continue;
    CHECK(row.per_query.size() == 3);
    CHECK(row.spearman >= -1.0);
    CHECK(row.spearman <= 1.0);
    CHECK(row.pairwise_s > 0.0);
  }
  CHECK(r.row("ekfac").overhead_s == 0.5);
  CHECK(r.row("gdp").overhead_s == 0.0);
  CHECK(r.cg.relative_residual < 1e-3);
  CHECK(r.row("ekfac").spearman > 0.8);
  CHECK(r.row("ekfac").spearman > r.row("gdp").spearman);
  CHECK(r.mha_share > 0.0);
  CHECK(r.mha_share < 1.0);
  CHECK(r.mha_param_share == doctest::Approx(256.0 / (256.0 + 192.0)));

  std::ostringstream out;
  write_correlation_csv(out, r, 2);
  CHECK(out.str().find("method,spearman,spearman_std,overhead_s,pairwise_s\ncg,,,") != std::string::npos);
  CorrelationOptions bad = o;
  bad.n_candidates = 2;
  CHECK_THROWS_AS(correlation_experiment(model, factors, 0, train, test, bad), InputError);
}
