#include "gradex/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/QR>

#include "gradex/errors.hpp"
#include "gradex/random.hpp"

namespace gradex::analysis {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr double kLogProbGuard = 1e-12;

VectorXd rademacher_vector(Eigen::Index n, rng::Stream& rng) {
  VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.rademacher();
  return v;
}

}  // namespace

TaylorReport taylor_rss(const LogProbModel& model, const VectorXd& theta_star,
                        const VectorXd& theta) {
  if (theta.size() != theta_star.size())
    throw ShapeError("taylor_rss: parameter dimensions differ");
  if (model.sample_count < 1)
    throw ConfigError("taylor_rss: empty evaluation batch");

  const VectorXd dtheta = theta - theta_star;
  TaylorReport report;
  report.rel_distance =
      theta_star.norm() > 0.0 ? dtheta.norm() / theta_star.norm() : 0.0;

  std::vector<double> rss;
  rss.reserve(model.sample_count);
  for (int i = 0; i < model.sample_count; ++i) {
    const double lp_new = model.log_prob(theta, i);
    if (std::abs(lp_new) < kLogProbGuard) {
      report.excluded += 1;
      continue;
    }
    const double lp_old = model.log_prob(theta_star, i);
    const double linear = model.grad_log_prob(theta_star, i).dot(dtheta);
    const double resid = lp_new - lp_old - linear;
    rss.push_back(resid * resid / (lp_new * lp_new));
  }
  report.sample_count = static_cast<int>(rss.size());
  if (!rss.empty()) {
    report.mean_rss =
        std::accumulate(rss.begin(), rss.end(), 0.0) / rss.size();
    double var = 0.0;
    for (double r : rss) var += (r - report.mean_rss) * (r - report.mean_rss);
    report.std_rss = std::sqrt(var / rss.size());
  }
  return report;
}

LogProbModel policy_log_prob_model(const net::Mlp& policy_net,
                                   const EvalBatch& batch) {
  LogProbModel model;
  model.sample_count = static_cast<int>(batch.size());
  const net::Mlp net_copy = policy_net;
  auto samples = std::make_shared<EvalBatch>(batch);
  model.log_prob = [=](const VectorXd& theta, int i) {
    return net_copy.log_prob(theta, (*samples)[i].first, (*samples)[i].second);
  };
  model.grad_log_prob = [=](const VectorXd& theta, int i) {
    return net_copy.grad_log_prob(theta, (*samples)[i].first,
                                  (*samples)[i].second);
  };
  return model;
}

TaylorReport taylor_rss(const net::Mlp& policy_net, const VectorXd& theta_star,
                        const VectorXd& theta, const EvalBatch& batch) {
  return taylor_rss(policy_log_prob_model(policy_net, batch), theta_star,
                    theta);
}

EvalBatch collect_eval_batch(const net::Mlp& policy_net,
                             const VectorXd& theta_star,
                             const net::Mlp& value_net,
                             const VectorXd& value_params,
                             const envs::TaskSuite& suite, int steps_per_task,
                             std::uint64_t seed) {
  EvalBatch batch;
  batch.reserve(static_cast<std::size_t>(steps_per_task) * suite.n_tasks());
  for (int task = 0; task < suite.n_tasks(); ++task) {
    rng::Stream task_rng(rng::derive_seed(
        seed, {rng::tag("evalbatch"), static_cast<std::uint64_t>(task)}));
    const train::RolloutBatch rollout = train::collect_rollouts(
        policy_net, theta_star, value_net, value_params, suite, task,
        steps_per_task, suite.gamma(), 0.95, task_rng);
    for (const auto& rec : rollout.records)
      batch.emplace_back(rec.state, rec.action);
  }
  return batch;
}

std::vector<std::pair<std::vector<int>, double>> adapted_distance_scan(
    const envs::TaskSuite& suite, const net::Mlp& policy_net,
    const net::Mlp& value_net, const VectorXd& theta_star,
    const VectorXd& value_params, const std::vector<std::vector<int>>& subsets,
    const train::TrainBudget& budget, const train::PpoConfig& cfg,
    std::uint64_t seed) {
  std::vector<std::pair<std::vector<int>, double>> out;
  out.reserve(subsets.size());
  const double base_norm = std::max(theta_star.norm(), 1e-300);
  for (std::size_t i = 0; i < subsets.size(); ++i) {
    std::vector<int> subset = subsets[i];
    std::sort(subset.begin(), subset.end());
    const train::OracleResult r = train::finetune_oracle(
        suite, policy_net, value_net, theta_star, value_params, subset, budget,
        cfg, 1,
        rng::derive_seed(seed,
                         {rng::tag("scan"), static_cast<std::uint64_t>(i)}));
    out.emplace_back(subsets[i], (r.policy - theta_star).norm() / base_norm);
  }
  return out;
}

TraceEstimate hutchinson_trace(const net::BatchLoss& ctx,
                               const VectorXd& theta, int probes,
                               std::uint64_t seed) {
  if (probes < 1) throw ConfigError("hutchinson_trace: probes must be >= 1");
  rng::Stream rng(seed);
  TraceEstimate est;
  est.probes = probes;
  std::vector<double> samples;
  samples.reserve(probes);
  for (int i = 0; i < probes; ++i) {
    const VectorXd v = rademacher_vector(theta.size(), rng);
    samples.push_back(v.dot(net::hvp(ctx, theta, v)));
    est.flops += 2 * ctx.grad_flops;
  }
  est.trace = std::accumulate(samples.begin(), samples.end(), 0.0) / probes;
  double var = 0.0;
  for (double s : samples) var += (s - est.trace) * (s - est.trace);
  est.std_error =
      probes > 1 ? std::sqrt(var / (probes - 1.0) / probes) : 0.0;
  return est;
}

TraceEstimate hutchpp_trace(const net::BatchLoss& ctx, const VectorXd& theta,
                            int probes, std::uint64_t seed) {
  if (probes < 3) throw ConfigError("hutchpp_trace: needs >= 3 probes");
  rng::Stream rng(seed);
  const Eigen::Index p = theta.size();
  const int sketch = std::min<int>(std::max(1, probes / 3),
                                   static_cast<int>(p));
  const int residual_probes = probes - 2 * sketch;

  TraceEstimate est;
  est.probes = probes;

  MatrixXd s(p, sketch);
  for (int j = 0; j < sketch; ++j) s.col(j) = rademacher_vector(p, rng);
  MatrixXd y(p, sketch);
  for (int j = 0; j < sketch; ++j) {
    y.col(j) = net::hvp(ctx, theta, s.col(j));
    est.flops += 2 * ctx.grad_flops;
  }
  Eigen::HouseholderQR<MatrixXd> qr(y);
  const MatrixXd q = qr.householderQ() * MatrixXd::Identity(p, sketch);

  double deflated = 0.0;
  for (int j = 0; j < sketch; ++j) {
    deflated += q.col(j).dot(net::hvp(ctx, theta, q.col(j)));
    est.flops += 2 * ctx.grad_flops;
  }

  std::vector<double> samples;
  samples.reserve(std::max(residual_probes, 0));
  for (int i = 0; i < residual_probes; ++i) {
    VectorXd g = rademacher_vector(p, rng);
    g -= q * (q.transpose() * g);
    VectorXd hg = net::hvp(ctx, theta, g);
    hg -= q * (q.transpose() * hg);
    samples.push_back(g.dot(hg));
    est.flops += 2 * ctx.grad_flops;
  }
  double residual_mean = 0.0;
  if (!samples.empty()) {
    residual_mean =
        std::accumulate(samples.begin(), samples.end(), 0.0) / samples.size();
    double var = 0.0;
    for (double v : samples)
      var += (v - residual_mean) * (v - residual_mean);
    est.std_error = samples.size() > 1
                        ? std::sqrt(var / (samples.size() - 1.0) /
                                    samples.size())
                        : 0.0;
  }
  est.trace = deflated + residual_mean;
  return est;
}

double top_eigenvalue(const net::BatchLoss& ctx, const VectorXd& theta,
                      int iters, std::uint64_t seed) {
  rng::Stream rng(seed);
  VectorXd v = rademacher_vector(theta.size(), rng);
  v.normalize();
  double eig = 0.0;
  for (int i = 0; i < iters; ++i) {
    VectorXd hv = net::hvp(ctx, theta, v);
    eig = v.dot(hv);
    const double norm = hv.norm();
    if (norm < 1e-300) return 0.0;
    v = hv / norm;
  }
  return eig;
}

double generalization_gap_bound(double train_loss, double loss_bound_c,
                                double hessian_quadratic, int sample_count,
                                double epsilon) {
  if (loss_bound_c <= 0.0)
    throw ConfigError("generalization bound: C must be positive");
  if (sample_count < 1)
    throw ConfigError("generalization bound: sample count must be >= 1");
  return epsilon * train_loss +
         (1.0 + epsilon) *
             std::sqrt(loss_bound_c * std::max(0.0, hessian_quadratic) /
                       static_cast<double>(sample_count)) +
         epsilon;
}

HessianReport generalization_report(
    const net::Mlp& policy_net, const VectorXd& theta,
    const std::vector<train::TransitionRecord>& train_records,
    const std::vector<train::TransitionRecord>& heldout_records,
    double loss_bound_c, double epsilon, int probes, std::uint64_t seed) {
  if (train_records.empty() || heldout_records.empty())
    throw ConfigError("generalization_report: both record sets must be non-empty");
  if (loss_bound_c <= 0.0)
    throw ConfigError("generalization_report: C must be positive");

  HessianReport report;
  report.loss_bound_c = loss_bound_c;
  report.epsilon = epsilon;
  report.sample_count = static_cast<int>(train_records.size());

  report.train_loss =
      train::clipped_pg_loss(policy_net, theta, train_records, loss_bound_c);
  report.test_loss =
      train::clipped_pg_loss(policy_net, theta, heldout_records, loss_bound_c);
  report.generalization_gap = report.test_loss - report.train_loss;

  const net::BatchLoss ctx = train::make_pg_loss(policy_net, train_records);
  const TraceEstimate trace = hutchinson_trace(ctx, theta, probes, seed);
  report.trace_estimate = trace.trace;
  report.probes = trace.probes;
  report.probe_std_error = trace.std_error;

  report.hessian_quadratic =
      std::max(0.0, theta.dot(net::hvp(ctx, theta, theta)));
  report.bound_value = generalization_gap_bound(
      report.train_loss, loss_bound_c, report.hessian_quadratic,
      report.sample_count, epsilon);
  return report;
}

}  // namespace gradex::analysis
