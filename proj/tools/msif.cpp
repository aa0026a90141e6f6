// msif: train, fit factors, score and evaluate from one run config.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "msif/cli.hpp"

using namespace msif;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out_dir, run_id;
  int threads = 1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "override a config field: key.path=value");
  cmd->add_option("--out", c.out_dir, "output root (default $MSIF_OUT or ./runs)");
  cmd->add_option("--run-id", c.run_id, "run id under the output root");
  cmd->add_option("--threads", c.threads, "worker threads; 1 gives the deterministic timing mode")
      ->check(CLI::PositiveNumber);
}

cli::RunConfig resolve(const Common& c) {
  auto overrides = c.overrides;
  if (!c.out_dir.empty()) overrides.push_back("out_dir=" + nlohmann::json(fs::absolute(c.out_dir).string()).dump());
  if (!c.run_id.empty()) overrides.push_back("run_id=" + nlohmann::json(c.run_id).dump());
  return cli::load_config(c.config, overrides);
}

Stage parse_stage(const std::string& s) { return s == "pt" ? Stage::pretrained : Stage::finetuned; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-stage influence functions with EK-FAC curvature"};
  app.require_subcommand(1);
  Common common;

  auto* train = app.add_subcommand("train", "pre-train then fine-tune; writes pt.ckpt and ft.ckpt");
  add_common(train, common);

  auto* fit = app.add_subcommand("fit-factors", "fit EK-FAC factors for one stage");
  add_common(fit, common);
  std::string stage = "pt", checkpoint;
  fit->add_option("--stage", stage, "pt or ft")->check(CLI::IsMember({"pt", "ft"}));
  fit->add_option("--checkpoint", checkpoint, "checkpoint to fit (default: the run's own)");

  auto* score = app.add_subcommand("score", "rank pre-training sequences for each query");
  add_common(score, common);
  cli::ScoreArgs sargs;
  std::string queries, blocks = "all", output;
  double damping = 0;
  score->add_option("--queries", queries, "query corpus JSON")->required()->check(CLI::ExistingFile);
  score->add_option("--method", sargs.method, "msif, ssif, gdp, repsim or bm25")->check(CLI::IsMember(cli::kScoreMethods));
  score->add_option("--damping", damping, "damping λ (default: ekfac.damping)")->check(CLI::PositiveNumber);
  score->add_option("--blocks", blocks, "all, mlp or mha")->check(CLI::IsMember({"all", "mlp", "mha"}));
  score->add_option("--candidates", sargs.candidates, "all, knn:<k> or file:<path>");
  score->add_option("-o,--output", output, "output CSV (default: <run>/scores_<method>.csv)");

  auto* evaluate = app.add_subcommand("evaluate", "run one experiment");
  add_common(evaluate, common);
  std::string which;
  evaluate->add_option("which", which, "correlation, facttrace or proximity")
      ->required()
      ->check(CLI::IsMember({"correlation", "facttrace", "proximity"}));

  auto* gen_bench = app.add_subcommand("generate-benchmark", "write a synthetic fact-tracing benchmark");
  evalbench::BenchmarkOptions bopt;
  std::string bench_out;
  int max_vocab = 512;
  gen_bench->add_option("--seed", bopt.seed)->required();
  gen_bench->add_option("-o,--output", bench_out)->required();
  gen_bench->add_option("--entities", bopt.n_entities);
  gen_bench->add_option("--distractors", bopt.n_distractor_entities);
  gen_bench->add_option("--relations", bopt.n_relations);
  gen_bench->add_option("--sentences-per-fact", bopt.sentences_per_fact);
  gen_bench->add_option("--heldout-fraction", bopt.heldout_fraction);
  gen_bench->add_option("--max-vocab", max_vocab);

  auto* gen_corpus = app.add_subcommand("generate-corpus", "write a synthetic grammar corpus (train and test)");
  evalbench::GrammarOptions gopt;
  std::string train_out, test_out;
  gen_corpus->add_option("--seed", gopt.seed)->required();
  gen_corpus->add_option("--train-out", train_out)->required();
  gen_corpus->add_option("--test-out", test_out)->required();
  gen_corpus->add_option("--train-size", gopt.n_train);
  gen_corpus->add_option("--test-size", gopt.n_test);
  gen_corpus->add_option("--max-len", gopt.max_len);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      cli::cmd_train(resolve(common));
    } else if (*fit) {
      cli::cmd_fit_factors(resolve(common), parse_stage(stage), checkpoint.empty() ? std::nullopt
                                                                                    : std::optional<fs::path>(checkpoint));
    } else if (*score) {
      sargs.queries = queries;
      sargs.blocks = nanolm::parse_block_filter(blocks);
      if (damping > 0) sargs.damping = damping;
      if (!output.empty()) sargs.output = output;
      sargs.threads = common.threads;
      cli::cmd_score(resolve(common), sargs);
    } else if (*evaluate) {
      cli::cmd_evaluate(resolve(common), which);
    } else if (*gen_bench) {
      const auto b = evalbench::generate_synthetic_benchmark(bopt, max_vocab);
      evalbench::save_benchmark(b, bench_out, bopt.seed);
      std::clog << b.attribution.size() << " attribution sentences, " << b.test.size() << " test queries, vocab "
                << b.vocab.size() << "\n";
    } else if (*gen_corpus) {
      const auto [tr, te] = evalbench::generate_grammar_corpus(gopt);
      evalbench::save_corpus(tr, train_out, gopt.seed);
      evalbench::save_corpus(te, test_out, gopt.seed);
      std::clog << tr.sequences.size() << " train and " << te.sequences.size() << " test sentences, vocab "
                << tr.vocab.size() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "msif: " << e.what() << "\n";
    return cli::exit_code(e);
  }
  return 0;
}
