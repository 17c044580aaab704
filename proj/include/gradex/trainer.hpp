#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <utility>
#include <vector>

#include "gradex/envs.hpp"
#include "gradex/net.hpp"
#include "gradex/random.hpp"

namespace gradex::train {

struct TransitionRecord {
  int task_id = 0;
  Eigen::VectorXd state;
  int action = 0;
  double reward = 0.0;
  double log_prob_behavior = 0.0;
  double advantage = 0.0;
  double return_to_go = 0.0;
};

struct TrainBudget {
  int iterations = 100;
  int steps_per_task = 2048;
  int minibatch_size = 64;
  int epochs = 4;
  double learning_rate = 3e-4;
};

struct PpoConfig {
  double clip_eps = 0.2;
  double value_coef = 0.5;    // c1
  double entropy_coef = 0.01; // c2
  double gae_lambda = 0.95;
  bool normalize_advantages = true;
};

struct FlopCounter {
  std::uint64_t total = 0;
  void add(std::uint64_t n) { total += n; }
};

// GAE(gamma, lambda) over one contiguous stream of steps. dones[t] marks a
// terminal transition (the next value is 0 and the advantage chain resets);
// bootstrap_value is V(s_{T}) for a stream cut mid-episode by the budget.
// Returns (advantages, returns-to-go).
std::pair<std::vector<double>, std::vector<double>> compute_gae(
    const std::vector<double>& rewards, const std::vector<double>& values,
    const std::vector<std::uint8_t>& dones, double bootstrap_value,
    double gamma, double lambda);

struct RolloutBatch {
  std::vector<TransitionRecord> records;
  int completed_episodes = 0;
  double completed_return_sum = 0.0;  // undiscounted
  int successes = 0;
  double total_reward = 0.0;

  double mean_episode_return() const {
    return completed_episodes > 0 ? completed_return_sum / completed_episodes
                                  : total_reward;
  }
  double success_rate() const {
    return completed_episodes > 0
               ? static_cast<double>(successes) / completed_episodes
               : 0.0;
  }
};

// Collects exactly n_steps transitions for one task, resetting episodes as
// needed. Behavior log-probs and values are taken at the passed parameters;
// advantages come from compute_gae.
RolloutBatch collect_rollouts(const net::Mlp& policy_net,
                              const Eigen::VectorXd& policy,
                              const net::Mlp& value_net,
                              const Eigen::VectorXd& value,
                              const envs::TaskSuite& suite, int task_id,
                              int n_steps, double gamma, double gae_lambda,
                              rng::Stream& rng, FlopCounter* flops = nullptr);

// First term of the clipped surrogate: mean_i min(r_i A_i, clip(r_i) A_i).
double clipped_objective(const Eigen::ArrayXd& ratios,
                         const Eigen::ArrayXd& advantages, double clip_eps);

struct AdamState {
  Eigen::VectorXd m, v;
  long t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void init(Eigen::Index n) {
    m = Eigen::VectorXd::Zero(n);
    v = Eigen::VectorXd::Zero(n);
    t = 0;
  }
  // One ascent step along gradient g.
  void ascend(Eigen::VectorXd& params, const Eigen::VectorXd& g, double lr);
};

struct PpoMetrics {
  std::vector<double> epoch_objectives;
  int ratio_clamps = 0;
};

struct PpoUpdateResult {
  Eigen::VectorXd policy;
  Eigen::VectorXd value;
  PpoMetrics metrics;
};

// Minibatch objective/gradients for one PPO step; exposed for direct testing
// against finite differences. Gradients are in ascent direction.
struct PpoEval {
  double objective = 0.0;
  double surrogate = 0.0;
  double value_mse = 0.0;
  double entropy = 0.0;
  int ratio_clamps = 0;
  Eigen::VectorXd policy_grad;
  Eigen::VectorXd value_grad;
};
PpoEval ppo_minibatch_eval(const net::Mlp& policy_net,
                           const Eigen::VectorXd& policy,
                           const net::Mlp& value_net,
                           const Eigen::VectorXd& value,
                           const Eigen::MatrixXd& states,
                           const std::vector<int>& actions,
                           const Eigen::ArrayXd& advantages,
                           const Eigen::ArrayXd& behavior_log_probs,
                           const Eigen::ArrayXd& returns, const PpoConfig& cfg,
                           bool want_grads);

// Runs budget.epochs of minibatch Adam ascent on the clipped objective over
// the given batch. Ratios are recomputed each minibatch against the stored
// behavior log-probs; |log ratio| > 20 is clamped and counted.
PpoUpdateResult ppo_update(const net::Mlp& policy_net, Eigen::VectorXd policy,
                           const net::Mlp& value_net, Eigen::VectorXd value,
                           const std::vector<TransitionRecord>& batch,
                           const PpoConfig& cfg, const TrainBudget& budget,
                           AdamState* policy_opt, AdamState* value_opt,
                           rng::Stream& rng, FlopCounter* flops = nullptr);

struct IterationMetrics {
  int iter = 0;
  std::vector<double> mean_reward_per_task;
  std::vector<double> success_rate_per_task;
  double objective = 0.0;
  std::uint64_t flops_cum = 0;
};

struct MetaTrainResult {
  Eigen::VectorXd policy;
  Eigen::VectorXd value;
  std::vector<IterationMetrics> curve;
  std::uint64_t flops = 0;
};

net::Mlp make_policy_net(const envs::TaskSuite& suite,
                         const std::vector<int>& hidden);
net::Mlp make_value_net(const envs::TaskSuite& suite,
                        const std::vector<int>& hidden);

// Multitask meta-training: every iteration pools steps_per_task transitions
// from each task (equal weighting) and applies one ppo_update.
MetaTrainResult train_meta(const envs::TaskSuite& suite,
                           const std::vector<int>& hidden,
                           const TrainBudget& budget, const PpoConfig& cfg,
                           std::uint64_t seed, int jobs = 1);

struct EvalResult {
  double mean_return = 0.0;
  double success_rate = 0.0;
  double mean_length = 0.0;
};
EvalResult evaluate_policy(const net::Mlp& policy_net,
                           const Eigen::VectorXd& policy,
                           const envs::TaskSuite& suite, int task_id,
                           int episodes, rng::Stream& rng,
                           FlopCounter* flops = nullptr);

struct OracleResult {
  Eigen::VectorXd policy;
  Eigen::VectorXd value;
  double mean_reward = 0.0;   // post-adaptation, averaged over the subset
  double mean_success = 0.0;
  std::uint64_t flops = 0;
};

// Ground-truth subset evaluation: full PPO fine-tuning from theta_star on
// only the subset's tasks, then stochastic-policy evaluation per task.
OracleResult finetune_oracle(const envs::TaskSuite& suite,
                             const net::Mlp& policy_net,
                             const net::Mlp& value_net,
                             const Eigen::VectorXd& policy0,
                             const Eigen::VectorXd& value0,
                             const std::vector<int>& subset,
                             const TrainBudget& budget, const PpoConfig& cfg,
                             int eval_episodes, std::uint64_t seed,
                             int jobs = 1);

// Smooth policy-gradient loss over a fixed batch,
//   L(theta) = -(1/N) sum_i A_i * exp(log pi_theta(a_i|s_i) - behavior_i),
// with exact gradient; the differentiable context for Hessian probes.
net::BatchLoss make_pg_loss(const net::Mlp& policy_net,
                            const std::vector<TransitionRecord>& records);

// Same loss with each per-sample term clipped into [0, C] (bounded-loss
// form used for train/test gap reports).
double clipped_pg_loss(const net::Mlp& policy_net,
                       const Eigen::VectorXd& policy,
                       const std::vector<TransitionRecord>& records, double C);

}  // namespace gradex::train
