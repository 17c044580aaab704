#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "gradex/envs.hpp"
#include "gradex/net.hpp"
#include "gradex/trainer.hpp"

namespace gradex::analysis {

struct TaylorReport {
  double rel_distance = 0.0;  // ||theta - theta*||_F / ||theta*||_F
  double mean_rss = 0.0;      // per-sample relative residual sum of squares
  double std_rss = 0.0;
  int sample_count = 0;
  int excluded = 0;  // |log pi_theta| below the division guard
};

// Per-sample relative RSS of the first-order expansion of log pi around
// theta*:  (logpi(theta) - logpi(theta*) - g^T dtheta)^2 / logpi(theta)^2
// with g evaluated at theta*. Generic over the log-prob model so synthetic
// oracles with closed-form remainders can drive it.
struct LogProbModel {
  // log p(sample) at theta
  std::function<double(const Eigen::VectorXd&, int)> log_prob;
  // d log p(sample) / d theta
  std::function<Eigen::VectorXd(const Eigen::VectorXd&, int)> grad_log_prob;
  int sample_count = 0;
};

TaylorReport taylor_rss(const LogProbModel& model,
                        const Eigen::VectorXd& theta_star,
                        const Eigen::VectorXd& theta);

// State/action evaluation batch drawn from rollouts at theta*.
using EvalBatch = std::vector<std::pair<Eigen::VectorXd, int>>;

LogProbModel policy_log_prob_model(const net::Mlp& policy_net,
                                   const EvalBatch& batch);

TaylorReport taylor_rss(const net::Mlp& policy_net,
                        const Eigen::VectorXd& theta_star,
                        const Eigen::VectorXd& theta, const EvalBatch& batch);

EvalBatch collect_eval_batch(const net::Mlp& policy_net,
                             const Eigen::VectorXd& theta_star,
                             const net::Mlp& value_net,
                             const Eigen::VectorXd& value_params,
                             const envs::TaskSuite& suite, int steps_per_task,
                             std::uint64_t seed);

// Brief fine-tuning per subset, reporting the relative parameter distance
// reached from theta*.
std::vector<std::pair<std::vector<int>, double>> adapted_distance_scan(
    const envs::TaskSuite& suite, const net::Mlp& policy_net,
    const net::Mlp& value_net, const Eigen::VectorXd& theta_star,
    const Eigen::VectorXd& value_params,
    const std::vector<std::vector<int>>& subsets,
    const train::TrainBudget& budget, const train::PpoConfig& cfg,
    std::uint64_t seed);

struct TraceEstimate {
  double trace = 0.0;
  int probes = 0;
  double std_error = 0.0;
  std::uint64_t flops = 0;
};

// Plain Hutchinson: mean of v^T H v over Rademacher probes.
TraceEstimate hutchinson_trace(const net::BatchLoss& ctx,
                               const Eigen::VectorXd& theta, int probes,
                               std::uint64_t seed);

// Hutch++: deflate with a sketched range basis, probe the remainder.
TraceEstimate hutchpp_trace(const net::BatchLoss& ctx,
                            const Eigen::VectorXd& theta, int probes,
                            std::uint64_t seed);

// Largest Hessian eigenvalue by power iteration on hvp.
double top_eigenvalue(const net::BatchLoss& ctx, const Eigen::VectorXd& theta,
                      int iters, std::uint64_t seed);

// Gap bound eps*L_train + (1+eps)*sqrt(C*H/n) + eps; pure in its inputs.
double generalization_gap_bound(double train_loss, double loss_bound_c,
                                double hessian_quadratic, int sample_count,
                                double epsilon);

struct HessianReport {
  double trace_estimate = 0.0;
  int probes = 0;
  double probe_std_error = 0.0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double generalization_gap = 0.0;  // test - train
  double hessian_quadratic = 0.0;   // max(0, theta^T H theta), plug-in
  double bound_value = 0.0;         // generalization_gap_bound(...)
  double epsilon = 0.0;
  double loss_bound_c = 0.0;
  int sample_count = 0;
};

// Train/held-out policy-gradient loss gap at theta, with the Hessian trace
// and the plug-in quadratic form measured at theta on the training batch.
// Per-sample losses are clipped into [0, C] for the gap; Hessian probes use
// the smooth unclipped loss.
HessianReport generalization_report(
    const net::Mlp& policy_net, const Eigen::VectorXd& theta,
    const std::vector<train::TransitionRecord>& train_records,
    const std::vector<train::TransitionRecord>& heldout_records,
    double loss_bound_c, double epsilon, int probes, std::uint64_t seed);

}  // namespace gradex::analysis
