#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "gradex/affinity.hpp"
#include "gradex/envs.hpp"
#include "gradex/surrogate.hpp"
#include "gradex/trainer.hpp"

namespace gradex::pipeline {

struct TaylorConfig {
  std::vector<double> distances = {0.001, 0.005, 0.01};
  int seeds = 5;
  int eval_steps_per_task = 256;
  std::string direction = "finetune";  // or "isotropic"
  int finetune_iterations = 2;
  int finetune_steps_per_task = 512;
};

struct HessianConfig {
  int steps_per_task = 256;
  int adapt_steps = 50;
  double adapt_lr = 3e-3;
  int probes = 64;
  double loss_bound_c = 5.0;
  double epsilon = 0.1;
};

struct SurrogateStageConfig {
  int d = 400;
  int m = 10;
  int alpha = 0;  // 0 -> max(2, n/2)
  int steps_per_task = 2048;
  double weight_clip = 0.0;
  surrogate::SurrogateConfig solver;
};

struct AffinityStageConfig {
  std::string mode = "fixed_k";  // or "auto"
  int k = 0;                     // 0 -> select by density sweep
  double lambda = 0.5;
  affinity::RelaxationConfig relax;
};

struct OracleConfig {
  train::TrainBudget budget;  // defaults overridden in RunConfig ctor
  int eval_episodes = 20;
};

// Full pipeline configuration with defaulting; round-trips through JSON
// bit-identically. Stage seeds are all derived from the single master seed
// and echoed into resolved-config.json.
struct RunConfig {
  std::uint64_t seed = 12345;
  int jobs = 1;
  envs::SuiteConfig suite;
  std::vector<int> hidden = {64, 64, 64, 64};
  train::TrainBudget train_budget;
  train::PpoConfig ppo;
  SurrogateStageConfig surrogate;
  AffinityStageConfig affinity;
  OracleConfig oracle;
  TaylorConfig taylor;
  HessianConfig hessian;

  RunConfig();

  int resolved_alpha() const;
  std::uint64_t stage_seed(const char* stage) const;

  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  nlohmann::json resolved_json() const;  // with derived seeds

  static RunConfig load(const std::string& path);
  void validate() const;
};

// Artifact file names inside the output directory.
struct Artifacts {
  static constexpr const char* kResolvedConfig = "resolved-config.json";
  static constexpr const char* kPolicyCheckpoint = "theta_star.gxp";
  static constexpr const char* kValueCheckpoint = "value_star.gxp";
  static constexpr const char* kTrainMetrics = "train_metrics.jsonl";
  static constexpr const char* kStore = "store.gxs";
  static constexpr const char* kSubsets = "subsets.json";
  static constexpr const char* kScores = "scores.json";
  static constexpr const char* kAffinityCsv = "U.csv";
  static constexpr const char* kAffinityMeta = "affinity_meta.json";
  static constexpr const char* kRelaxationCsv = "X.csv";
  static constexpr const char* kPartition = "partition.json";
  static constexpr const char* kFlops = "flops.json";
  static constexpr const char* kOracleScores = "oracle_scores.json";
  static constexpr const char* kOracleAffinityCsv = "U_oracle.csv";
  static constexpr const char* kOraclePartition = "partition_oracle.json";
  static constexpr const char* kOracleFlops = "oracle_flops.json";
  static constexpr const char* kNmiReport = "nmi.json";
  static constexpr const char* kTaylorCsv = "taylor.csv";
  static constexpr const char* kTaylorJson = "taylor.json";
  static constexpr const char* kHessianJson = "hessian.json";
};

struct StageError : std::runtime_error {
  StageError(const std::string& stage, const std::string& cause)
      : std::runtime_error("stage " + stage + ": " + cause), stage(stage) {}
  std::string stage;
};

// Individual stages; each consumes/produces the files above so they compose
// into run_pipeline. All verify the theta* checksum chain before reusing
// artifacts and throw StaleArtifactError on mismatch.
void stage_train(const RunConfig& config, const std::string& out_dir);
void stage_extract(const RunConfig& config, const std::string& out_dir);
void stage_estimate(const RunConfig& config, const std::string& out_dir);
void stage_affinity(const RunConfig& config, const std::string& out_dir);
void stage_cluster(const RunConfig& config, const std::string& out_dir);

struct PipelineSummary {
  affinity::Partition partition;
  std::uint64_t flops_total = 0;
  std::uint64_t flops_post_train = 0;
};

// train -> extract -> sample subsets -> estimate -> affinity -> relaxation
// -> rounding, writing every artifact; rerunning with the same config
// overwrites the artifacts byte-identically.
PipelineSummary run_pipeline(const RunConfig& config,
                             const std::string& out_dir, bool dry_run = false);

struct OracleSummary {
  affinity::Partition partition;
  double nmi_vs_pipeline = -1.0;  // -1 when no pipeline partition present
  double nmi_vs_planted = -1.0;
  double affinity_error_raw = -1.0;
  double affinity_error_normalized = -1.0;
  std::uint64_t flops = 0;
};

// Fine-tunes every subset in the subsets file from theta*, builds the oracle
// affinity from adapted rewards, clusters it, and reports NMI/error versus
// the pipeline artifacts found in out_dir.
OracleSummary run_oracle(const RunConfig& config, const std::string& out_dir,
                         const std::string& subsets_path);

void run_taylor(const RunConfig& config, const std::string& out_dir,
                const std::vector<double>& distances);
void run_hessian(const RunConfig& config, const std::string& out_dir);

// Helpers shared with tests.
std::string format_double(double v);  // %.17g
void write_json(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json(const std::string& path);
std::string checksum_hex(std::uint64_t checksum);

}  // namespace gradex::pipeline
