#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "msif/evalbench.hpp"

namespace msif::evalbench {

using nlohmann::ordered_json;

Vocab::Vocab(std::vector<std::string> words) {
  for (auto& w : words) add(w);
}

int Vocab::add(const std::string& word) {
  if (word.empty() || word.find_first_of(" \t\n") != std::string::npos) {
    throw InputError("vocab: invalid word '" + word + "'");
  }
  const auto [it, inserted] = index_.emplace(word, static_cast<int>(words_.size()));
  if (inserted) words_.push_back(word);
  return it->second;
}

int Vocab::id(const std::string& word) const {
  const auto it = index_.find(word);
  if (it == index_.end()) throw InputError("unknown word '" + word + "'");
  return it->second;
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::istringstream in(text);
  std::vector<int> out;
  for (std::string w; in >> w;) out.push_back(id(w));
  return out;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (int t : ids) {
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

void save_corpus(const TextCorpus& corpus, const std::filesystem::path& path, std::uint64_t config_hash) {
  ordered_json j;
  j["config_hash"] = hex64(config_hash);
  j["vocab"] = corpus.vocab.words();
  auto& seqs = j["sequences"] = ordered_json::array();
  for (std::size_t i = 0; i < corpus.sequences.size(); ++i) {
    const auto& s = corpus.sequences[i];
    seqs.push_back({{"id", corpus.ids.at(i)}, {"text", corpus.vocab.decode(s.tokens)}, {"target_begin", s.target_begin}});
  }
  std::ofstream out(path);
  if (!out) throw InputError("cannot write corpus " + path.string());
  out << j.dump(1) << '\n';
}

namespace {
ordered_json read_json(const std::filesystem::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw InputError(std::string("cannot open ") + what + ": " + path.string());
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed ") + what + " " + path.string() + ": " + e.what());
  }
}
}  // namespace

TextCorpus load_corpus(const std::filesystem::path& path) {
  const auto j = read_json(path, "corpus");
  try {
    TextCorpus c;
    c.vocab = Vocab(j.at("vocab").get<std::vector<std::string>>());
    for (const auto& s : j.at("sequences")) {
      Sequence seq;
      seq.tokens = c.vocab.encode(s.at("text").get<std::string>());
      seq.target_begin = s.value("target_begin", 1);
      c.sequences.push_back(std::move(seq));
      c.ids.push_back(s.at("id").get<std::string>());
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed corpus " + path.string() + ": " + e.what());
  }
}

// --- grammar corpus ---------------------------------------------------------

namespace {

// Pronounceable pseudo-words, unique per index.
std::string pseudo_word(int i) {
  static const char* onset[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                "s", "t", "v", "z", "br", "st", "tr", "pl", "gr", "sh"};
  static const char* vowel[] = {"a", "e", "i", "o", "u", "ai", "ou"};
  static const char* coda[] = {"", "n", "r", "l", "s", "m", "k", "t"};
  std::string w;
  int x = i;
  for (int syl = 0; syl < 2 || x > 0; ++syl) {
    w += onset[x % 20];
    x /= 20;
    w += vowel[x % 7];
    x /= 7;
    if (syl == 1) {
      w += coda[x % 8];
      x /= 8;
    }
  }
  return w;
}

/// Zipfian choice over `n` ranks.
class Zipf {
 public:
  explicit Zipf(int n, double s = 1.0) {
    std::vector<double> w(static_cast<std::size_t>(n));
    for (int r = 0; r < n; ++r) w[static_cast<std::size_t>(r)] = 1.0 / std::pow(r + 1.0, s);
    dist_ = std::discrete_distribution<int>(w.begin(), w.end());
  }
  int operator()(Rng& rng) { return dist_(rng); }

 private:
  std::discrete_distribution<int> dist_;
};

struct Grammar {
  Vocab vocab;
  std::vector<int> det, prep, pron, aux, conj, relpro, noun, vt, vi, adj, adv;
  int period = 0, bos = 0, eos = 0;
  int n_clusters = 10;

  Grammar() {
    bos = vocab.add(kBos);
    eos = vocab.add(kEos);
    period = vocab.add(".");
    auto words = [&](std::initializer_list<const char*> ws) {
      std::vector<int> out;
      for (const char* w : ws) out.push_back(vocab.add(w));
      return out;
    };
    det = words({"the", "a", "this", "that", "every", "some"});
    prep = words({"in", "on", "with", "from", "by", "for", "near", "under", "over", "into", "after", "before"});
    pron = words({"he", "she", "it", "they", "we"});
    aux = words({"will", "can", "did"});
    conj = words({"and", "but"});
    relpro = words({"that", "which"});
    int next = 0;
    auto pseudo = [&](int n) {
      std::vector<int> out;
      while (static_cast<int>(out.size()) < n) {
        const auto w = pseudo_word(next++);
        if (vocab.size() > 0 && std::find(vocab.words().begin(), vocab.words().end(), w) != vocab.words().end()) continue;
        out.push_back(vocab.add(w));
      }
      return out;
    };
    noun = pseudo(200);
    vt = pseudo(80);
    vi = pseudo(40);
    adj = pseudo(80);
    adv = pseudo(30);
  }

  // Selectional preference: verbs and adjectives favour one noun cluster.
  int noun_in_cluster(int cluster, Zipf& z, Rng& rng) const {
    const int per = static_cast<int>(noun.size()) / n_clusters;
    return noun[static_cast<std::size_t>(cluster * per + z(rng) % per)];
  }
};

class SentenceSampler {
 public:
  SentenceSampler(const Grammar& g, Rng& rng)
      : g_(g), rng_(rng), z_noun_(static_cast<int>(g.noun.size())), z_cluster_(20), z_vt_(static_cast<int>(g.vt.size())),
        z_vi_(static_cast<int>(g.vi.size())), z_adj_(static_cast<int>(g.adj.size())),
        z_adv_(static_cast<int>(g.adv.size())) {}

  std::vector<int> sentence() {
    out_.assign(1, g_.bos);
    clause();
    if (coin(0.15)) {
      push(pick(g_.conj));
      clause();
    }
    push(g_.period);
    push(g_.eos);
    return out_;
  }

 private:
  bool coin(double p) { return std::bernoulli_distribution(p)(rng_); }
  int pick(const std::vector<int>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng_)];
  }
  void push(int t) { out_.push_back(t); }

  void noun_phrase(int cluster, bool allow_pp) {
    const double u = std::uniform_real_distribution<double>(0, 1)(rng_);
    if (u < 0.12) {
      push(pick(g_.pron));
      return;
    }
    push(pick(g_.det));
    if (u < 0.4) {
      const int a = z_adj_(rng_);
      push(g_.adj[static_cast<std::size_t>(a)]);
      if (cluster < 0) cluster = a % g_.n_clusters;
    }
    push(cluster >= 0 && coin(0.7) ? g_.noun_in_cluster(cluster, z_cluster_, rng_)
                                   : g_.noun[static_cast<std::size_t>(z_noun_(rng_))]);
    if (allow_pp && coin(0.15)) {
      push(pick(g_.prep));
      push(pick(g_.det));
      push(g_.noun[static_cast<std::size_t>(z_noun_(rng_))]);
    } else if (allow_pp && coin(0.08)) {
      push(pick(g_.relpro));
      const int v = z_vt_(rng_);
      push(g_.vt[static_cast<std::size_t>(v)]);
      noun_phrase(v % g_.n_clusters, false);
    }
  }

  void clause() {
    noun_phrase(-1, true);
    const double u = std::uniform_real_distribution<double>(0, 1)(rng_);
    if (u < 0.25) {
      push(g_.vi[static_cast<std::size_t>(z_vi_(rng_))]);
      if (coin(0.3)) push(g_.adv[static_cast<std::size_t>(z_adv_(rng_))]);
      return;
    }
    if (u < 0.35) push(pick(g_.aux));
    const int v = z_vt_(rng_);
    push(g_.vt[static_cast<std::size_t>(v)]);
    noun_phrase(v % g_.n_clusters, false);
    if (coin(0.2)) {
      push(pick(g_.prep));
      noun_phrase(-1, false);
    }
  }

  const Grammar& g_;
  Rng& rng_;
  Zipf z_noun_, z_cluster_, z_vt_, z_vi_, z_adj_, z_adv_;
  std::vector<int> out_;
};

}  // namespace

std::pair<TextCorpus, TextCorpus> generate_grammar_corpus(const GrammarOptions& opt) {
  if (opt.n_train < 1 || opt.n_test < 0) throw InputError("grammar corpus: bad sizes");
  if (opt.max_len < 5) throw InputError("grammar corpus: max_len must be >= 5");
  const Grammar g;
  Rng rng(derive_seed(opt.seed, 0x9a));
  SentenceSampler sampler(g, rng);
  TextCorpus train, test;
  train.vocab = test.vocab = g.vocab;
  char id[32];
  for (int i = 0; i < opt.n_train + opt.n_test; ++i) {
    std::vector<int> s;
    do s = sampler.sentence();
    while (static_cast<int>(s.size()) > opt.max_len);
    auto& dst = i < opt.n_train ? train : test;
    std::snprintf(id, sizeof id, "%s-%05d", i < opt.n_train ? "train" : "test", i < opt.n_train ? i : i - opt.n_train);
    dst.sequences.push_back(Sequence{std::move(s), 1, -1});
    dst.ids.emplace_back(id);
  }
  return {std::move(train), std::move(test)};
}

// --- fact benchmark ---------------------------------------------------------

namespace {

std::vector<Relation> relation_catalog() {
  return {
      {"born_in",
       {"[X] was born in [Y] .", "the birthplace of [X] is [Y] .", "[X] grew up in [Y] ."},
       {"where was [X] born ?"},
       {"paris", "berlin", "tokyo", "cairo", "lima", "oslo", "rome", "madrid", "delhi", "seoul", "quito", "accra"}},
      {"works_for",
       {"[X] works for [Y] .", "[X] is employed by [Y] .", "the employer of [X] is [Y] ."},
       {"who employs [X] ?"},
       {"acme", "globex", "initech", "umbrella", "hooli", "vandelay", "soylent", "wonka", "cyberdyne", "tyrell"}},
      {"speaks",
       {"[X] speaks [Y] .", "the native language of [X] is [Y] ."},
       {"what language does [X] speak ?"},
       {"french", "german", "spanish", "hindi", "swahili", "korean", "arabic", "dutch"}},
      {"plays",
       {"[X] plays the [Y] .", "[X] is a talented [Y] player ."},
       {"which instrument does [X] play ?"},
       {"piano", "violin", "cello", "flute", "guitar", "drums", "harp", "trumpet"}},
      {"citizen_of",
       {"[X] is a citizen of [Y] .", "[X] holds a passport from [Y] ."},
       {"what country is [X] a citizen of ?"},
       {"france", "japan", "brazil", "kenya", "canada", "peru", "norway", "egypt", "india", "chile"}},
      {"studied",
       {"[X] studied [Y] at university .", "[X] holds a degree in [Y] ."},
       {"what did [X] study ?"},
       {"physics", "biology", "history", "law", "medicine", "music", "chemistry", "economics"}},
      {"writes",
       {"[X] writes [Y] novels .", "[X] is known for [Y] fiction ."},
       {"what genre does [X] write ?"},
       {"mystery", "horror", "romance", "fantasy", "poetry", "satire", "thriller", "western"}},
      {"member_of",
       {"[X] is a member of the [Y] .", "[X] joined the [Y] years ago ."},
       {"which club did [X] join ?"},
       {"eagles", "wolves", "tigers", "falcons", "sharks", "bears", "lions", "hawks"}},
  };
}

std::string fill_template(std::string t, const std::string& x, const std::string& y) {
  if (const auto p = t.find("[X]"); p != std::string::npos) t.replace(p, 3, x);
  if (const auto p = t.find("[Y]"); p != std::string::npos) t.replace(p, 3, y);
  return t;
}

nanolm::Query make_query(const Vocab& v, const std::string& question, const std::string& answer, std::string id) {
  nanolm::Query q;
  q.prompt = v.encode(std::string(kBos) + " " + question);
  q.target = {v.id(answer)};
  q.id = std::move(id);
  return q;
}

}  // namespace

Benchmark generate_synthetic_benchmark(const BenchmarkOptions& opt, int max_vocab) {
  auto catalog = relation_catalog();
  if (opt.n_relations < 1 || opt.n_relations > static_cast<int>(catalog.size())) {
    throw InputError("benchmark: n_relations must lie in [1, " + std::to_string(catalog.size()) + "]");
  }
  if (opt.n_entities < 1 || opt.n_distractor_entities < 0) throw InputError("benchmark: bad entity counts");
  if (!(opt.heldout_fraction > 0 && opt.heldout_fraction < 1)) throw InputError("benchmark: heldout_fraction in (0,1)");
  catalog.resize(static_cast<std::size_t>(opt.n_relations));
  for (const auto& r : catalog) {
    if (static_cast<int>(r.sentence_templates.size()) < std::max(2, opt.sentences_per_fact)) {
      throw InputError("benchmark: relation " + r.name + " has too few templates");
    }
  }

  Benchmark b;
  b.seed = opt.seed;
  b.relations = catalog;
  b.vocab.add(kBos);
  b.vocab.add(kEos);
  for (const auto& r : catalog) {
    for (const auto* list : {&r.sentence_templates, &r.qa_templates}) {
      for (const auto& t : *list) {
        std::istringstream in(fill_template(t, "", ""));
        for (std::string w; in >> w;) b.vocab.add(w);
      }
    }
    for (const auto& o : r.objects) b.vocab.add(o);
  }
  const int n_subjects = opt.n_entities + opt.n_distractor_entities;
  std::vector<std::string> subjects;
  for (int i = 0, k = 0; static_cast<int>(subjects.size()) < n_subjects; ++k) {
    const std::string w = "ent_" + pseudo_word(k + 1000);
    if (b.vocab.words().end() != std::find(b.vocab.words().begin(), b.vocab.words().end(), w)) continue;
    b.vocab.add(w);
    subjects.push_back(w);
    ++i;
  }
  if (b.vocab.size() > max_vocab) {
    throw InputError("benchmark vocabulary (" + std::to_string(b.vocab.size()) + ") exceeds the model vocabulary (" +
                     std::to_string(max_vocab) + ")");
  }

  Rng rng(derive_seed(opt.seed, 0xfac7));
  struct Fact {
    FactTriple triple;
    std::string subject, object;
    bool queryable;
  };
  std::vector<Fact> facts;
  for (int s = 0; s < n_subjects; ++s) {
    for (int r = 0; r < opt.n_relations; ++r) {
      const auto& objs = catalog[static_cast<std::size_t>(r)].objects;
      const auto& o = objs[std::uniform_int_distribution<std::size_t>(0, objs.size() - 1)(rng)];
      facts.push_back({{b.vocab.id(subjects[static_cast<std::size_t>(s)]), r, b.vocab.id(o)},
                       subjects[static_cast<std::size_t>(s)], o, s < opt.n_entities});
    }
  }

  // Attribution sentences: each fact in `sentences_per_fact` distinct templates.
  struct Draft {
    std::string text;
    std::size_t fact;
  };
  std::vector<Draft> drafts;
  for (std::size_t f = 0; f < facts.size(); ++f) {
    const auto& tmpl = catalog[static_cast<std::size_t>(facts[f].triple.relation)].sentence_templates;
    std::vector<std::size_t> order(tmpl.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (int k = 0; k < opt.sentences_per_fact; ++k) {
      drafts.push_back({std::string(kBos) + " " + fill_template(tmpl[order[static_cast<std::size_t>(k)]], facts[f].subject,
                                                       facts[f].object) + " " + kEos,
                        f});
    }
  }
  std::shuffle(drafts.begin(), drafts.end(), rng);
  std::vector<std::vector<int>> sources(facts.size());
  char id[32];
  for (std::size_t i = 0; i < drafts.size(); ++i) {
    std::snprintf(id, sizeof id, "s%05zu", i);
    b.attribution.push_back({id, b.vocab.encode(drafts[i].text), {facts[drafts[i].fact].triple}});
    sources[drafts[i].fact].push_back(static_cast<int>(i));
  }

  // Held-out facts become test queries; the rest are fine-tuning QA pairs.
  std::vector<std::size_t> entity_facts;
  for (std::size_t f = 0; f < facts.size(); ++f)
    if (facts[f].queryable) entity_facts.push_back(f);
  std::shuffle(entity_facts.begin(), entity_facts.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(opt.heldout_fraction * static_cast<double>(entity_facts.size())));
  std::vector<std::size_t> test_facts(entity_facts.begin(), entity_facts.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> tune_facts(entity_facts.begin() + static_cast<std::ptrdiff_t>(n_test), entity_facts.end());
  std::sort(test_facts.begin(), test_facts.end());
  std::sort(tune_facts.begin(), tune_facts.end());
  auto question = [&](const Fact& f) {
    const auto& qa = catalog[static_cast<std::size_t>(f.triple.relation)].qa_templates;
    return fill_template(qa[std::uniform_int_distribution<std::size_t>(0, qa.size() - 1)(rng)], f.subject, "");
  };
  for (std::size_t k = 0; k < tune_facts.size(); ++k) {
    const auto& f = facts[tune_facts[k]];
    std::snprintf(id, sizeof id, "ft%05zu", k);
    b.finetune.push_back(make_query(b.vocab, question(f), f.object, id));
  }
  for (std::size_t k = 0; k < test_facts.size(); ++k) {
    const auto& f = facts[test_facts[k]];
    std::snprintf(id, sizeof id, "q%05zu", k);
    b.test.push_back({id, f.triple, make_query(b.vocab, question(f), f.object, id), sources[test_facts[k]]});
  }
  return b;
}

Corpus pretrain_corpus(const Benchmark& b) {
  Corpus c;
  for (const auto& s : b.attribution) c.push_back(Sequence{s.tokens, 1, -1});
  return c;
}

Corpus finetune_corpus(const Benchmark& b) {
  Corpus c;
  for (const auto& q : b.finetune) c.push_back(q.as_sequence());
  return c;
}

double object_coverage(const Benchmark& b) {
  if (b.test.empty()) return 1.0;
  std::set<int> seen;
  for (const auto& s : b.attribution) seen.insert(s.tokens.begin(), s.tokens.end());
  std::size_t hit = 0;
  for (const auto& q : b.test) hit += seen.count(q.fact.object);
  return static_cast<double>(hit) / static_cast<double>(b.test.size());
}

namespace {
ordered_json triple_json(const FactTriple& t) { return ordered_json::array({t.subject, t.relation, t.object}); }
FactTriple triple_from(const ordered_json& j) { return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()}; }
}  // namespace

void save_benchmark(const Benchmark& b, const std::filesystem::path& path, std::uint64_t config_hash) {
  ordered_json j;
  j["config_hash"] = hex64(config_hash);
  j["seed"] = b.seed;
  j["vocab"] = b.vocab.words();
  auto& rel = j["relations"] = ordered_json::array();
  for (const auto& r : b.relations) {
    rel.push_back({{"name", r.name},
                   {"sentence_templates", r.sentence_templates},
                   {"qa_templates", r.qa_templates},
                   {"objects", r.objects}});
  }
  auto& att = j["attribution"] = ordered_json::array();
  for (const auto& s : b.attribution) {
    ordered_json facts = ordered_json::array();
    for (const auto& f : s.facts) facts.push_back(triple_json(f));
    att.push_back({{"id", s.id}, {"text", b.vocab.decode(s.tokens)}, {"facts", facts}});
  }
  auto& ft = j["finetune"] = ordered_json::array();
  for (const auto& q : b.finetune) {
    ft.push_back({{"id", q.id}, {"prompt", b.vocab.decode(q.prompt)}, {"target", b.vocab.decode(q.target)}});
  }
  auto& test = j["test"] = ordered_json::array();
  for (const auto& q : b.test) {
    test.push_back({{"id", q.id},
                    {"fact", triple_json(q.fact)},
                    {"prompt", b.vocab.decode(q.query.prompt)},
                    {"target", b.vocab.decode(q.query.target)},
                    {"true_sources", q.true_sources}});
  }
  std::ofstream out(path);
  if (!out) throw InputError("cannot write benchmark " + path.string());
  out << j.dump(1) << '\n';
}

Benchmark load_benchmark(const std::filesystem::path& path) {
  const auto j = read_json(path, "benchmark");
  try {
    Benchmark b;
    b.seed = j.at("seed").get<std::uint64_t>();
    b.vocab = Vocab(j.at("vocab").get<std::vector<std::string>>());
    for (const auto& r : j.at("relations")) {
      b.relations.push_back({r.at("name").get<std::string>(), r.at("sentence_templates").get<std::vector<std::string>>(),
                             r.at("qa_templates").get<std::vector<std::string>>(),
                             r.at("objects").get<std::vector<std::string>>()});
    }
    for (const auto& s : j.at("attribution")) {
      AttributionSentence a{s.at("id").get<std::string>(), b.vocab.encode(s.at("text").get<std::string>()), {}};
      for (const auto& f : s.at("facts")) a.facts.push_back(triple_from(f));
      b.attribution.push_back(std::move(a));
    }
    for (const auto& q : j.at("finetune")) {
      b.finetune.push_back({b.vocab.encode(q.at("prompt").get<std::string>()),
                            b.vocab.encode(q.at("target").get<std::string>()), q.at("id").get<std::string>()});
    }
    for (const auto& q : j.at("test")) {
      TestQuery t;
      t.id = q.at("id").get<std::string>();
      t.fact = triple_from(q.at("fact"));
      t.query = {b.vocab.encode(q.at("prompt").get<std::string>()), b.vocab.encode(q.at("target").get<std::string>()),
                 t.id};
      t.true_sources = q.at("true_sources").get<std::vector<int>>();
      for (int s : t.true_sources) {
        if (s < 0 || s >= static_cast<int>(b.attribution.size())) throw InputError("benchmark: bad source index");
      }
      b.test.push_back(std::move(t));
    }
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed benchmark " + path.string() + ": " + e.what());
  }
}

RerankSizes scaled_rerank_sizes(std::size_t corpus_size) {
  RerankSizes s;
  if (corpus_size >= 1000) return s;
  const auto scale = [&](int n) {
    return std::max(1, static_cast<int>(std::lround(n * static_cast<double>(corpus_size) / 1000.0)));
  };
  return {scale(s.bm25), scale(s.same_target), scale(s.random)};
}

std::vector<int> build_rerank_candidates(const Benchmark& b, const TestQuery& q, std::span<const double> bm25,
                                         std::span<const int> shared_random, const RerankSizes& sizes, Rng& rng) {
  if (bm25.size() != b.attribution.size()) throw ContractError("rerank: one BM25 score per attribution sentence");
  std::set<int> out(q.true_sources.begin(), q.true_sources.end());
  std::vector<int> order(b.attribution.size());
  std::iota(order.begin(), order.end(), 0);
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(std::max(sizes.bm25, 0)), order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), [&](int x, int y) {
    if (bm25[static_cast<std::size_t>(x)] != bm25[static_cast<std::size_t>(y)]) {
      return bm25[static_cast<std::size_t>(x)] > bm25[static_cast<std::size_t>(y)];
    }
    return x < y;
  });
  out.insert(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));

  std::vector<int> same;
  for (std::size_t i = 0; i < b.attribution.size(); ++i) {
    for (const auto& f : b.attribution[i].facts) {
      if (f.object == q.fact.object) {
        same.push_back(static_cast<int>(i));
        break;
      }
    }
  }
  std::shuffle(same.begin(), same.end(), rng);
  same.resize(std::min(same.size(), static_cast<std::size_t>(std::max(sizes.same_target, 0))));
  out.insert(same.begin(), same.end());
  for (int r : shared_random) {
    if (r < 0 || r >= static_cast<int>(b.attribution.size())) throw ContractError("rerank: bad shared random index");
    out.insert(r);
  }
  return {out.begin(), out.end()};
}

}  // namespace msif::evalbench
