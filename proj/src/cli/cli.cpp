#include "msif/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <mutex>
#include <thread>

namespace msif::cli {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

fs::path existing(const fs::path& base, const std::string& p, const char* what) {
  fs::path path(p);
  if (path.is_relative()) path = base / path;
  if (!fs::exists(path)) throw InputError(std::string(what) + " not found: " + path.string());
  return path;
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw InputError(std::string("config field ") + key + ": " + e.what());
    }
  }
}

nanolm::OptimizerOpts parse_optimizer(const json& j) {
  nanolm::OptimizerOpts o;
  read_field(j, "steps", o.steps);
  read_field(j, "batch_size", o.batch_size);
  read_field(j, "lr", o.lr);
  read_field(j, "beta1", o.beta1);
  read_field(j, "beta2", o.beta2);
  read_field(j, "eps", o.eps);
  read_field(j, "grad_clip", o.grad_clip);
  read_field(j, "warmup", o.warmup);
  return o;
}

std::uint64_t require_seed(const json& seeds, const char* name) {
  if (!seeds.contains(name)) throw InputError(std::string("config: seeds.") + name + " is required");
  try {
    return seeds.at(name).get<std::uint64_t>();
  } catch (const json::exception&) {
    throw InputError(std::string("config: seeds.") + name + " must be a non-negative integer");
  }
}

nanolm::Parameters load_model(const RunConfig& cfg, const fs::path& path, Stage stage) {
  if (!fs::exists(path)) throw InputError("checkpoint not found: " + path.string());
  auto p = nanolm::load_checkpoint(path);
  if (p.stage != stage) {
    throw ContractError(path.string() + " holds a " + stage_name(p.stage) + " model, expected " + stage_name(stage));
  }
  if (p.config.hash() != cfg.model.hash()) throw ContractError(path.string() + ": model config differs from the run config");
  return p;
}

fs::path ckpt_path(const RunConfig& cfg, Stage s) { return cfg.run_dir() / (std::string(stage_name(s)) + ".ckpt"); }
fs::path factors_path(const RunConfig& cfg, Stage s) {
  return cfg.run_dir() / ("factors_" + std::string(stage_name(s)) + ".bin");
}

ekfac::FactorSet load_factors(const RunConfig& cfg, Stage s, const nanolm::Parameters& model) {
  const auto path = factors_path(cfg, s);
  if (!fs::exists(path)) throw InputError("factor file not found: " + path.string() + " (run fit-factors first)");
  auto f = ekfac::load(path);
  ekfac::require_matches(f, model);
  return f;
}

std::ofstream open_output(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  return out;
}

void write_loss_csv(const fs::path& path, const nanolm::TrainReport& r, std::uint64_t hash) {
  auto out = open_output(path);
  char buf[64];
  out << "# config_hash=" << hex64(hash) << "\nstep,loss\n";
  for (std::size_t i = 0; i < r.step_loss.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i + 1, r.step_loss[i]);
    out << buf;
  }
}

void save_resolved_config(const RunConfig& cfg) {
  auto out = open_output(cfg.run_dir() / "config.json");
  json doc = cfg.raw;
  doc["config_hash"] = hex64(cfg.hash());
  out << doc.dump(2) << "\n";
}

template <typename F>
void parallel_for(std::size_t n, int threads, F&& body) {
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  const auto t = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  for (std::size_t w = 0; w < t; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += t) body(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::vector<std::size_t> select_candidates(const std::string& spec, const Dataset& pool, const Eigen::MatrixXd* emb,
                                           const Eigen::VectorXd* query_emb) {
  std::vector<std::size_t> out;
  if (spec == "all") {
    for (std::size_t i = 0; i < pool.ids.size(); ++i) out.push_back(i);
  } else if (spec.rfind("knn:", 0) == 0) {
    int k = 0;
    try {
      k = std::stoi(spec.substr(4));
    } catch (const std::exception&) {
      throw InputError("--candidates: bad k in " + spec);
    }
    if (k < 1) throw InputError("--candidates: k must be >= 1");
    for (int i : influence::knn_candidates(*emb, *query_emb, k)) out.push_back(static_cast<std::size_t>(i));
    std::sort(out.begin(), out.end());
  } else if (spec.rfind("file:", 0) == 0) {
    const fs::path path(spec.substr(5));
    std::ifstream in(path);
    if (!in) throw InputError("candidate file not found: " + path.string());
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < pool.ids.size(); ++i) index.emplace(pool.ids[i], i);
    std::set<std::size_t> chosen;
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      const auto it = index.find(line);
      if (it == index.end()) throw InputError("unknown candidate id " + line + " in " + path.string());
      chosen.insert(it->second);
    }
    out.assign(chosen.begin(), chosen.end());
  } else {
    throw InputError("--candidates must be all, knn:<k> or file:<path>");
  }
  if (out.empty()) throw InputError("no candidates selected");
  return out;
}

}  // namespace

fs::path default_out_dir() {
  const char* env = std::getenv("MSIF_OUT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::uint64_t RunConfig::hash() const {
  json doc = raw;
  doc.erase("out_dir");
  Fnv1a h;
  h.update(doc.dump());
  return h.digest();
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw InputError("override must look like key.path=value: " + assignment);
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw InputError("override has an empty key segment: " + assignment);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (!node->is_object() && !node->is_null()) throw InputError("override path crosses a non-object: " + key);
    start = dot + 1;
  }
}

RunConfig parse_config(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) throw InputError("config must be a JSON object");
  RunConfig c;
  c.raw = doc;
  read_field(doc, "run_id", c.run_id);
  if (c.run_id.empty() || c.run_id.find('/') != std::string::npos) throw InputError("config: bad run_id");
  if (doc.contains("out_dir")) {
    c.out_dir = doc.at("out_dir").get<std::string>();
    if (c.out_dir.is_relative()) c.out_dir = base_dir / c.out_dir;
  } else {
    c.out_dir = default_out_dir();
  }

  const json m = doc.value("model", json::object());
  read_field(m, "vocab_size", c.model.vocab_size);
  read_field(m, "d_model", c.model.d_model);
  read_field(m, "n_layers", c.model.n_layers);
  read_field(m, "n_heads", c.model.n_heads);
  read_field(m, "head_dim", c.model.head_dim);
  read_field(m, "d_ff", c.model.d_ff);
  read_field(m, "max_seq_len", c.model.max_seq_len);
  try {
    c.model.validate();
  } catch (const std::exception& e) {
    throw InputError(std::string("config model: ") + e.what());
  }

  const json d = doc.value("data", json::object());
  if (d.contains("benchmark")) c.data.benchmark = existing(base_dir, d.at("benchmark").get<std::string>(), "benchmark");
  if (d.contains("pretrain_corpus"))
    c.data.pretrain_corpus = existing(base_dir, d.at("pretrain_corpus").get<std::string>(), "pretrain corpus");
  if (d.contains("finetune_corpus"))
    c.data.finetune_corpus = existing(base_dir, d.at("finetune_corpus").get<std::string>(), "finetune corpus");
  if (d.contains("test_corpus")) c.data.test_corpus = existing(base_dir, d.at("test_corpus").get<std::string>(), "test corpus");
  if (!c.data.benchmark && !c.data.pretrain_corpus) throw InputError("config: data needs a benchmark or a pretrain_corpus");

  c.pretrain = parse_optimizer(doc.value("pretrain", json::object()));
  c.finetune = parse_optimizer(doc.value("finetune", json::object()));

  const json s = doc.value("seeds", json::object());
  c.seeds = {require_seed(s, "pretrain"), require_seed(s, "finetune"), require_seed(s, "factors"),
             require_seed(s, "experiment")};

  const json f = doc.value("ekfac", json::object());
  read_field(f, "n_batches", c.factors.n_batches);
  read_field(f, "batch_size", c.factors.batch_size);
  read_field(f, "damping", c.factors.damping);
  c.factors.seed = c.seeds.factors;

  const json ex = doc.value("experiments", json::object());
  const json co = ex.value("correlation", json::object());
  auto& cr = c.correlation;
  read_field(co, "n_queries", cr.n_queries);
  read_field(co, "n_candidates", cr.n_candidates);
  read_field(co, "damping", cr.damping);
  read_field(co, "cg_iters", cr.cg_iters);
  read_field(co, "cg_tol", cr.cg_tol);
  read_field(co, "cg_batch", cr.cg_batch);
  read_field(co, "cg_resample", cr.cg_resample);
  read_field(co, "lissa_iters", cr.lissa_iters);
  read_field(co, "lissa_scale", cr.lissa_scale);
  cr.seed = derive_seed(c.seeds.experiment, 1);
  const json ft = ex.value("facttrace", json::object());
  auto& fo = c.facttrace;
  read_field(ft, "dampings", fo.dampings);
  read_field(ft, "n_trials", fo.n_trials);
  read_field(ft, "queries_per_trial", fo.queries_per_trial);
  if (ft.contains("rerank_sizes")) {
    const auto& r = ft.at("rerank_sizes");
    evalbench::RerankSizes rs;
    read_field(r, "bm25", rs.bm25);
    read_field(r, "same_target", rs.same_target);
    read_field(r, "random", rs.random);
    fo.sizes = rs;
  }
  fo.seed = derive_seed(c.seeds.experiment, 2);
  return c;
}

RunConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  json doc = read_json(path);
  for (const auto& o : overrides) apply_override(doc, o);
  return parse_config(doc, fs::absolute(path).parent_path());
}

evalbench::Benchmark require_benchmark(const RunConfig& cfg) {
  if (!cfg.data.benchmark) throw InputError("this command needs data.benchmark in the config");
  return evalbench::load_benchmark(*cfg.data.benchmark);
}

Dataset stage_data(const RunConfig& cfg, Stage stage) {
  Dataset d;
  if (cfg.data.benchmark && !(stage == Stage::pretrained ? cfg.data.pretrain_corpus : cfg.data.finetune_corpus)) {
    const auto b = require_benchmark(cfg);
    if (stage == Stage::pretrained) {
      d.sequences = evalbench::pretrain_corpus(b);
      for (const auto& s : b.attribution) d.ids.push_back(s.id);
    } else {
      d.sequences = evalbench::finetune_corpus(b);
      for (const auto& q : b.finetune) d.ids.push_back(q.id);
    }
  } else {
    const auto& path = stage == Stage::pretrained ? cfg.data.pretrain_corpus : cfg.data.finetune_corpus;
    if (!path) throw InputError(std::string("config: no ") + stage_name(stage) + " corpus");
    auto tc = evalbench::load_corpus(*path);
    d.sequences = std::move(tc.sequences);
    d.ids = std::move(tc.ids);
  }
  for (const auto& s : d.sequences) nanolm::validate_sequence(cfg.model, s);
  return d;
}

void cmd_train(const RunConfig& cfg) {
  save_resolved_config(cfg);
  const auto pt_data = stage_data(cfg, Stage::pretrained);
  const auto ft_data = stage_data(cfg, Stage::finetuned);
  nanolm::TrainReport rep;
  std::clog << "pre-training on " << pt_data.sequences.size() << " sequences\n";
  const auto pt = nanolm::train(cfg.model, pt_data.sequences, cfg.pretrain, cfg.seeds.pretrain, &rep);
  std::clog << "pre-training loss " << rep.initial_mean_loss << " -> " << rep.final_mean_loss << "\n";
  nanolm::save_checkpoint(pt, ckpt_path(cfg, Stage::pretrained));
  write_loss_csv(cfg.run_dir() / "pretrain_loss.csv", rep, cfg.hash());

  std::clog << "fine-tuning on " << ft_data.sequences.size() << " sequences\n";
  const auto ft = nanolm::finetune(pt, ft_data.sequences, cfg.finetune, nanolm::HeadMode::lm, 0, cfg.seeds.finetune, &rep);
  std::clog << "fine-tuning loss " << rep.initial_mean_loss << " -> " << rep.final_mean_loss << "\n";
  nanolm::save_checkpoint(ft, ckpt_path(cfg, Stage::finetuned));
  write_loss_csv(cfg.run_dir() / "finetune_loss.csv", rep, cfg.hash());
}

void cmd_fit_factors(const RunConfig& cfg, Stage stage, const std::optional<fs::path>& checkpoint) {
  save_resolved_config(cfg);
  const auto model = load_model(cfg, checkpoint.value_or(ckpt_path(cfg, stage)), stage);
  const auto data = stage_data(cfg, stage);
  auto opt = cfg.factors;
  opt.seed = derive_seed(cfg.seeds.factors, static_cast<std::uint64_t>(stage));
  const auto t0 = Clock::now();
  const auto f = ekfac::fit(model, data.sequences, opt);
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  const auto path = factors_path(cfg, stage);
  ekfac::save(f, path);
  json side{{"config_hash", hex64(cfg.hash())},
            {"stage", stage_name(stage)},
            {"fingerprint", hex64(f.fingerprint)},
            {"fit_seconds", secs},
            {"bytes", ekfac::factor_file_bytes(model.config)}};
  open_output(path.string() + ".json") << side.dump(2) << "\n";
  std::clog << "factors (" << stage_name(stage) << ") fitted in " << secs << " s -> " << path.string() << "\n";
}

std::vector<influence::ScoreRow> score(const RunConfig& cfg, const ScoreArgs& args) {
  const auto& m = args.method;
  if (std::find(kScoreMethods.begin(), kScoreMethods.end(), m) == kScoreMethods.end()) {
    throw InputError("unknown method " + m);
  }
  const auto queries = evalbench::load_corpus(args.queries);
  if (queries.sequences.empty()) throw InputError("query file is empty");
  for (const auto& q : queries.sequences) nanolm::validate_sequence(cfg.model, q);
  const auto pool = stage_data(cfg, Stage::pretrained);
  const auto pt = load_model(cfg, ckpt_path(cfg, Stage::pretrained), Stage::pretrained);
  const auto ft = load_model(cfg, ckpt_path(cfg, Stage::finetuned), Stage::finetuned);

  std::optional<ekfac::FactorSet> f_pt, f_ft;
  if (m == "msif") f_pt = load_factors(cfg, Stage::pretrained, pt);
  if (m == "msif" || m == "ssif") f_ft = load_factors(cfg, Stage::finetuned, ft);
  const double damping = args.damping.value_or(cfg.factors.damping);
  if (!(damping > 0)) throw InputError("damping must be positive");

  const bool knn = args.candidates.rfind("knn:", 0) == 0;
  Eigen::MatrixXd emb;
  if (knn || m == "repsim") emb = influence::embed_all(pt, pool.sequences);
  std::optional<influence::Bm25> bm25;
  if (m == "bm25") {
    std::vector<std::vector<int>> docs;
    for (const auto& s : pool.sequences) docs.push_back(s.tokens);
    bm25.emplace(docs);
  }

  std::vector<influence::ScoreRow> rows;
  for (std::size_t qi = 0; qi < queries.sequences.size(); ++qi) {
    const auto& q = queries.sequences[qi];
    const auto& qid = queries.ids[qi];
    Eigen::VectorXd q_emb;
    if (knn || m == "repsim") q_emb = influence::embed(ft, q);
    const auto cands = select_candidates(args.candidates, pool, &emb, &q_emb);

    std::vector<double> s(cands.size());
    if (m == "repsim") {
      for (std::size_t i = 0; i < cands.size(); ++i) s[i] = emb.row(static_cast<Eigen::Index>(cands[i])).dot(q_emb);
    } else if (m == "bm25") {
      const std::vector<int> prompt(q.tokens.begin() + 1, q.tokens.begin() + q.target_begin);
      const auto all = bm25->scores(prompt);
      for (std::size_t i = 0; i < cands.size(); ++i) s[i] = all[cands[i]];
    } else {
      const auto qg = nanolm::sequence_gradient(ft, q, args.blocks).grad;
      influence::BlockGradients v;
      if (m == "msif") {
        v = influence::multi_stage_query_vector(*f_pt, *f_ft, qg, damping, damping);
      } else if (m == "ssif") {
        v = ekfac::ihvp(*f_ft, qg, damping);
      } else {
        v = qg;
      }
      const auto& cand_model = m == "ssif" ? ft : pt;
      parallel_for(cands.size(), args.threads, [&](std::size_t i) {
        s[i] = nanolm::dot(v, nanolm::sequence_gradient(cand_model, pool.sequences[cands[i]], args.blocks).grad);
      });
    }
    std::vector<influence::InfluenceResult> results;
    const double d = (m == "msif" || m == "ssif") ? damping : 0.0;
    for (std::size_t i = 0; i < cands.size(); ++i) results.push_back({pool.ids[cands[i]], s[i], m, d});
    for (auto& r : influence::rank_candidates(std::move(results)).items) rows.push_back({qid, std::move(r)});
    std::clog << "scored query " << qid << " against " << cands.size() << " candidates\n";
  }
  return rows;
}

void cmd_score(const RunConfig& cfg, const ScoreArgs& args) {
  save_resolved_config(cfg);
  const auto rows = score(cfg, args);
  auto out = open_output(args.output.value_or(cfg.run_dir() / ("scores_" + args.method + ".csv")));
  influence::write_scores_csv(out, rows, cfg.hash());
}

void cmd_evaluate(const RunConfig& cfg, const std::string& which) {
  save_resolved_config(cfg);
  const auto pt = load_model(cfg, ckpt_path(cfg, Stage::pretrained), Stage::pretrained);
  if (which == "proximity") {
    const auto ft = load_model(cfg, ckpt_path(cfg, Stage::finetuned), Stage::finetuned);
    const auto r = evalbench::proximity_stats(pt, ft);
    auto out = open_output(cfg.run_dir() / "proximity.csv");
    evalbench::write_proximity_csv(out, r, cfg.hash());
    std::clog << "global ||ft - pt|| / ||pt|| = " << r.global.ratio << "\n";
  } else if (which == "correlation") {
    if (!cfg.data.test_corpus) throw InputError("correlation needs data.test_corpus");
    const auto f = load_factors(cfg, Stage::pretrained, pt);
    double fit_s = 0;
    if (const auto side = factors_path(cfg, Stage::pretrained).string() + ".json"; fs::exists(side)) {
      fit_s = read_json(side).value("fit_seconds", 0.0);
    }
    const auto train = stage_data(cfg, Stage::pretrained);
    auto test = evalbench::load_corpus(*cfg.data.test_corpus);
    for (const auto& s : test.sequences) nanolm::validate_sequence(cfg.model, s);
    const auto r = evalbench::correlation_experiment(pt, f, fit_s, train.sequences, test.sequences, cfg.correlation);
    auto out = open_output(cfg.run_dir() / "correlation.csv");
    evalbench::write_correlation_csv(out, r, cfg.hash());
  } else if (which == "facttrace") {
    const auto ft = load_model(cfg, ckpt_path(cfg, Stage::finetuned), Stage::finetuned);
    const auto b = require_benchmark(cfg);
    const auto r = evalbench::fact_tracing_experiment(pt, ft, load_factors(cfg, Stage::pretrained, pt),
                                                      load_factors(cfg, Stage::finetuned, ft), b, cfg.facttrace);
    auto out = open_output(cfg.run_dir() / "facttrace.csv");
    evalbench::write_metrics_csv(out, r, cfg.hash());
  } else {
    throw InputError("evaluate: expected correlation, facttrace or proximity, got " + which);
  }
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  return 2;
}

}  // namespace msif::cli
