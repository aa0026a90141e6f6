#pragma once

// Config-driven runs: training, factor fitting, scoring and evaluation. All
// artifacts of a run go to <out>/<run-id>/ and carry the config hash.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "msif/ekfac.hpp"
#include "msif/evalbench.hpp"
#include "msif/nanolm.hpp"

namespace msif::cli {

namespace fs = std::filesystem;

struct Seeds {
  std::uint64_t pretrain = 0;
  std::uint64_t finetune = 0;
  std::uint64_t factors = 0;
  std::uint64_t experiment = 0;
};

/// Either a benchmark file or plain corpus files. Paths are resolved against
/// the config file's directory.
struct DataConfig {
  std::optional<fs::path> benchmark;
  std::optional<fs::path> pretrain_corpus, finetune_corpus, test_corpus;
};

struct RunConfig {
  std::string run_id = "run";
  fs::path out_dir;
  nanolm::ModelConfig model;
  DataConfig data;
  nanolm::OptimizerOpts pretrain, finetune;
  ekfac::FitOptions factors;
  evalbench::CorrelationOptions correlation;
  evalbench::FactTraceOptions facttrace;
  Seeds seeds;
  nlohmann::json raw;  // the document after overrides

  std::uint64_t hash() const;
  fs::path run_dir() const { return out_dir / run_id; }
};

/// Default output root: $MSIF_OUT, else ./runs.
fs::path default_out_dir();

/// `assignment` is "dotted.key=value"; value is parsed as JSON when it can be.
void apply_override(nlohmann::json& doc, const std::string& assignment);

RunConfig parse_config(const nlohmann::json& doc, const fs::path& base_dir);
/// Reads, applies overrides, validates. Missing files and seeds are InputErrors.
RunConfig load_config(const fs::path& path, const std::vector<std::string>& overrides = {});

/// Training data for one stage, with candidate ids.
struct Dataset {
  nanolm::Corpus sequences;
  std::vector<std::string> ids;
};
Dataset stage_data(const RunConfig& cfg, Stage stage);
evalbench::Benchmark require_benchmark(const RunConfig& cfg);

/// Both stages; writes pt.ckpt, ft.ckpt and per-step loss CSVs.
void cmd_train(const RunConfig& cfg);

/// Fits factors on the stage's checkpoint (default: the run's own) and
/// writes factors_<stage>.bin plus a JSON sidecar with the fit time.
void cmd_fit_factors(const RunConfig& cfg, Stage stage, const std::optional<fs::path>& checkpoint = std::nullopt);

struct ScoreArgs {
  fs::path queries;  // corpus JSON; target_begin splits prompt from target
  std::string method = "msif";  // msif | ssif | gdp | repsim | bm25
  std::optional<double> damping;
  nanolm::BlockFilter blocks = nanolm::BlockFilter::all;
  std::string candidates = "all";  // all | knn:<k> | file:<path>
  std::optional<fs::path> output;
  int threads = 1;
};
inline const std::vector<std::string> kScoreMethods{"msif", "ssif", "gdp", "repsim", "bm25"};

/// Ranked scores of the pre-training corpus for every query.
std::vector<influence::ScoreRow> score(const RunConfig& cfg, const ScoreArgs& args);
void cmd_score(const RunConfig& cfg, const ScoreArgs& args);

void cmd_evaluate(const RunConfig& cfg, const std::string& which);

/// Exit code for an exception escaping a command: 2 input/contract, 3 numeric.
int exit_code(const std::exception& e);

}  // namespace msif::cli
