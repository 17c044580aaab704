#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "gradex/envs.hpp"
#include "gradex/net.hpp"
#include "gradex/trainer.hpp"

namespace gradex::surrogate {

// Dense Gaussian sketch P in R^{p x d}, entries i.i.d. N(0, 1/d), generated
// column-major from a seeded stream so (seed, p, d) regenerates the matrix
// bit-identically.
class ProjectionMatrix {
 public:
  static ProjectionMatrix make(int p, int d, std::uint64_t seed);

  int p() const { return p_; }
  int d() const { return d_; }
  std::uint64_t seed() const { return seed_; }
  const Eigen::MatrixXd& matrix() const { return entries_; }

  // P^T g
  Eigen::VectorXd project(const Eigen::VectorXd& g) const;

 private:
  int p_ = 0, d_ = 0;
  std::uint64_t seed_ = 0;
  Eigen::MatrixXd entries_;
};

// One projected transition feature: task id, sketched score gradient,
// advantage sign label and advantage magnitude weight. Stored in f32 exactly
// as persisted, so in-memory and reloaded stores solve identically.
struct FeatureRecord {
  std::uint32_t task_id = 0;
  std::int8_t label = 1;   // sign of the advantage
  float weight = 0.0f;     // |advantage|
  Eigen::VectorXf features;
};

struct GradientStore {
  std::uint32_t p = 0;
  std::uint32_t d = 0;
  std::uint32_t n_tasks = 0;
  std::uint64_t projection_seed = 0;
  std::uint64_t theta_checksum = 0;
  std::vector<FeatureRecord> records;  // grouped by task, task order
  std::vector<int> dropped_per_task;   // zero-advantage records dropped

  // Debug retention for distortion measurements: full-precision gradients
  // and projections, one row per kept record. Never persisted.
  Eigen::MatrixXd debug_full_gradients;
  Eigen::MatrixXd debug_projected;

  void validate() const;
  std::vector<std::size_t> task_record_indices(int task_id) const;

  // Binary format "GXS1": header u32 p, u32 d, u32 n_tasks, u64 projection
  // seed, u64 theta checksum; then per record u32 task_id, i8 y, f32 w,
  // f32[d] features. Little-endian.
  void save(const std::string& path) const;
  static GradientStore load(const std::string& path);
};

struct ExtractOptions {
  int steps_per_task = 2048;
  double gae_lambda = 0.95;
  double weight_clip = 0.0;     // 0 disables clipping of |advantage|
  bool debug_keep_full = false;
};

// Rolls out every task at theta_star (so the behavior policy is theta_star
// and all probability ratios start at exactly 1), projects each score
// gradient and stores (sign, magnitude) of the GAE advantage. Records with
// exactly zero advantage are dropped and counted.
GradientStore extract_features(const net::Mlp& policy_net,
                               const Eigen::VectorXd& theta_star,
                               const net::Mlp& value_net,
                               const Eigen::VectorXd& value_params,
                               const envs::TaskSuite& suite,
                               const ProjectionMatrix& projection,
                               const ExtractOptions& options,
                               std::uint64_t seed,
                               train::FlopCounter* flops = nullptr);

struct SurrogateConfig {
  double ridge = 1e-3;   // mu
  double tol = 1e-9;     // inf-norm gradient target
  int max_iter = 100;
};

struct SubsetScore {
  std::vector<int> subset;        // sorted, duplicate-free
  Eigen::VectorXd delta_theta_d;  // minimizer in the sketched space
  double loss = 0.0;              // minimized regularized subset loss
  double score = 0.0;             // -loss
  bool converged = false;
  int newton_iters = 0;
  std::uint64_t flops = 0;
};

// Weighted logistic subset loss
//   (1/|D_S|) sum w log(1 + exp(-y x^T delta)) + mu ||delta||^2
// evaluated at an arbitrary point; shared by the solver and its tests.
double subset_loss(const GradientStore& store, const std::vector<int>& subset,
                   const Eigen::VectorXd& delta, double ridge);
Eigen::VectorXd subset_loss_gradient(const GradientStore& store,
                                     const std::vector<int>& subset,
                                     const Eigen::VectorXd& delta,
                                     double ridge);

// Damped Newton minimization of the subset loss. Falls back to gradient
// steps when the Newton system is singular; a run that exhausts max_iter
// returns the best iterate flagged non-converged.
SubsetScore fit_surrogate(const GradientStore& store,
                          const std::vector<int>& subset,
                          const SurrogateConfig& config);

struct EstimateResult {
  std::vector<SubsetScore> scores;  // order-preserving w.r.t. input subsets
  std::vector<std::string> errors;  // per-subset failures, non-aborting
  std::uint64_t flops = 0;
};

EstimateResult estimate_subsets(const GradientStore& store,
                                const std::vector<std::vector<int>>& subsets,
                                const SurrogateConfig& config);

nlohmann::json scores_to_json(const std::vector<SubsetScore>& scores,
                              std::uint64_t theta_checksum);
std::pair<std::vector<SubsetScore>, std::uint64_t> scores_from_json(
    const nlohmann::json& j);

}  // namespace gradex::surrogate
