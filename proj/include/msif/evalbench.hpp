#pragma once

// Benchmarks, retrieval metrics and the three experiment protocols: EK-FAC
// versus CG correlation, fact tracing with reranking, and parameter proximity.

#include <filesystem>
#include <iosfwd>
#include <set>
#include <string>
#include <vector>

#include "msif/ekfac.hpp"
#include "msif/influence.hpp"
#include "msif/nanolm.hpp"

namespace msif::evalbench {

using nanolm::Corpus;
using nanolm::Parameters;
using nanolm::Sequence;

// --- vocabulary and corpora -------------------------------------------------

class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> words);
  int add(const std::string& word);  // returns the existing id if present
  int id(const std::string& word) const;
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }
  std::vector<int> encode(const std::string& text) const;  // whitespace-separated
  std::string decode(std::span<const int> ids) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

inline constexpr const char* kBos = "<s>";
inline constexpr const char* kEos = "</s>";

/// Sequences with ids and the vocabulary they are written in.
struct TextCorpus {
  Vocab vocab;
  Corpus sequences;
  std::vector<std::string> ids;
};

void save_corpus(const TextCorpus& corpus, const std::filesystem::path& path, std::uint64_t config_hash = 0);
TextCorpus load_corpus(const std::filesystem::path& path);

struct GrammarOptions {
  int n_train = 4000;
  int n_test = 200;
  int max_len = 14;  // tokens including <s> and </s>
  std::uint64_t seed = 0;
};

/// Sentences from a small probabilistic grammar with Zipfian word choice:
/// determiners, adjectives, nouns, verbs, prepositional phrases and relative
/// clauses. Returns (train, test) over one vocabulary.
std::pair<TextCorpus, TextCorpus> generate_grammar_corpus(const GrammarOptions& opt);

// --- fact-tracing benchmark -------------------------------------------------

struct FactTriple {
  int subject = 0;   // token id
  int relation = 0;  // index into Benchmark::relations
  int object = 0;    // token id
  auto operator<=>(const FactTriple&) const = default;
};

struct Relation {
  std::string name;
  std::vector<std::string> sentence_templates;  // "[X]" and "[Y]" placeholders
  std::vector<std::string> qa_templates;        // question with "[X]"; the answer is Y
  std::vector<std::string> objects;
};

struct AttributionSentence {
  std::string id;
  std::vector<int> tokens;  // with <s> and </s>
  std::vector<FactTriple> facts;
};

struct TestQuery {
  std::string id;
  FactTriple fact;
  nanolm::Query query;            // prompt with <s>, target = object + </s>
  std::vector<int> true_sources;  // indices into attribution
};

struct Benchmark {
  std::uint64_t seed = 0;
  Vocab vocab;
  std::vector<Relation> relations;
  std::vector<AttributionSentence> attribution;
  std::vector<nanolm::Query> finetune;  // QA pairs over held-in facts
  std::vector<TestQuery> test;          // facts seen only in pre-training
};

struct BenchmarkOptions {
  int n_entities = 80;             // subjects with queryable facts
  int n_distractor_entities = 20;  // subjects whose facts are never queried
  int n_relations = 6;
  int sentences_per_fact = 2;      // distinct templates per fact
  double heldout_fraction = 0.4;   // share of entity facts used as test queries
  std::uint64_t seed = 0;
};

/// Throws InputError when the vocabulary would exceed `max_vocab`.
Benchmark generate_synthetic_benchmark(const BenchmarkOptions& opt, int max_vocab = 512);
Corpus pretrain_corpus(const Benchmark& b);
Corpus finetune_corpus(const Benchmark& b);
void save_benchmark(const Benchmark& b, const std::filesystem::path& path, std::uint64_t config_hash = 0);
Benchmark load_benchmark(const std::filesystem::path& path);

/// Share of test objects that occur in the pre-training corpus.
double object_coverage(const Benchmark& b);

struct RerankSizes {
  int bm25 = 100;
  int same_target = 100;
  int random = 100;
};
/// Default sizes scaled down in proportion when the corpus has fewer than
/// 1000 sentences.
RerankSizes scaled_rerank_sizes(std::size_t corpus_size);

/// True sources ∪ BM25 top-k ∪ random same-object sentences ∪ `shared_random`,
/// deduplicated and sorted.
std::vector<int> build_rerank_candidates(const Benchmark& b, const TestQuery& q, std::span<const double> bm25,
                                         std::span<const int> shared_random, const RerankSizes& sizes, Rng& rng);

// --- metrics ----------------------------------------------------------------

/// 1-based rank of the first ranked item found in `truth`; 0 when none is.
int first_hit_rank(std::span<const int> ranked, const std::set<int>& truth);
double mrr(std::span<const std::vector<int>> ranked, std::span<const std::set<int>> truth);
/// Mean over queries of |truth ∩ top-k| / |truth|.
double recall_at_k(std::span<const std::vector<int>> ranked, std::span<const std::set<int>> truth, int k = 10);
/// Ranks with ties sharing their average rank (1-based).
std::vector<double> average_ranks(std::span<const double> x);
double pearson(std::span<const double> a, std::span<const double> b);
double spearman(std::span<const double> a, std::span<const double> b);

// --- experiments ------------------------------------------------------------

struct CorrelationOptions {
  int n_queries = 10;
  int n_candidates = 500;
  double damping = 1e-4;
  int cg_iters = 2000;
  double cg_tol = 1e-12;
  int cg_batch = 32;
  bool cg_resample = false;  // true: fresh curvature batch every CG product
  int lissa_iters = 0;  // 0 disables LiSSA
  double lissa_scale = 1e-3;
  std::uint64_t seed = 0;
};

struct MethodRow {
  std::string method;
  double spearman = 0;  // mean over queries
  double spearman_std = 0;
  double overhead_s = 0;
  double pairwise_s = 0;  // per query, for the whole candidate set
  std::vector<double> per_query;
};

struct CorrelationReport {
  std::vector<MethodRow> rows;  // cg first, as reference
  double mha_share = 0;          // MHA part of the EK-FAC |influence| mass
  double mha_param_share = 0;
  influence::SolveReport cg;
  std::vector<std::string> query_ids, candidate_ids;
  const MethodRow& row(const std::string& method) const;
};

/// Single-stage language-modeling influence of `n_candidates` training
/// sequences on `n_queries` test sequences, each method compared against
/// mini-batch CG on the full GGN.
CorrelationReport correlation_experiment(const Parameters& model, const ekfac::FactorSet& factors,
                                         double factor_fit_seconds, std::span<const Sequence> train,
                                         std::span<const Sequence> test, const CorrelationOptions& opt);
void write_correlation_csv(std::ostream& out, const CorrelationReport& r, std::uint64_t config_hash);

struct FactTraceOptions {
  std::vector<double> dampings{1e-8, 1e-6, 1e-4};
  int n_trials = 3;
  int queries_per_trial = 50;
  std::optional<RerankSizes> sizes;  // default: scaled_rerank_sizes
  std::uint64_t seed = 0;
};

struct MetricsEntry {
  std::string method;
  double damping = 0;  // 0 for methods without curvature
  std::vector<double> mrr, recall10;  // per trial
  double mrr_mean() const;
  double mrr_std() const;
  double recall_mean() const;
  double recall_std() const;
};

struct MetricsReport {
  std::vector<MetricsEntry> entries;
  const MetricsEntry& entry(const std::string& method, double damping = 0) const;
};

/// Methods: msif, ssif, gdp (multi-stage), repsim, bm25.
MetricsReport fact_tracing_experiment(const Parameters& model_pt, const Parameters& model_ft,
                                      const ekfac::FactorSet& factors_pt, const ekfac::FactorSet& factors_ft,
                                      const Benchmark& bench, const FactTraceOptions& opt);
void write_metrics_csv(std::ostream& out, const MetricsReport& r, std::uint64_t config_hash);

struct ProximityRow {
  std::string block;
  double pt_norm = 0;
  double diff_norm = 0;
  double ratio = 0;  // diff_norm / pt_norm
};
struct ProximityReport {
  std::vector<ProximityRow> blocks;
  ProximityRow global;  // over all analyzed blocks
};
ProximityReport proximity_stats(const Parameters& pt, const Parameters& ft);
void write_proximity_csv(std::ostream& out, const ProximityReport& r, std::uint64_t config_hash);

}  // namespace msif::evalbench
