#include "gradex/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>

#include "gradex/errors.hpp"

namespace gradex::train {

namespace {

using Eigen::ArrayXd;
using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr double kLogRatioLimit = 20.0;
constexpr std::uint64_t kAdamFlopsPerParam = 10;

// Row-wise log-softmax of a logits matrix.
MatrixXd log_softmax_rows(const MatrixXd& logits) {
  const VectorXd row_max = logits.rowwise().maxCoeff();
  MatrixXd shifted = logits.colwise() - row_max;
  const VectorXd lse = shifted.array().exp().rowwise().sum().log();
  return shifted.colwise() - lse;
}

}  // namespace

std::pair<std::vector<double>, std::vector<double>> compute_gae(
    const std::vector<double>& rewards, const std::vector<double>& values,
    const std::vector<std::uint8_t>& dones, double bootstrap_value,
    double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n)
    throw ShapeError("compute_gae: input lengths differ");
  std::vector<double> advantages(n), returns(n);
  double tail = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double next_value =
        dones[i] ? 0.0 : (i + 1 < n ? values[i + 1] : bootstrap_value);
    const double nonterminal = dones[i] ? 0.0 : 1.0;
    const double delta = rewards[i] + gamma * next_value - values[i];
    tail = delta + gamma * lambda * nonterminal * tail;
    advantages[i] = tail;
    returns[i] = tail + values[i];
  }
  return {advantages, returns};
}

RolloutBatch collect_rollouts(const net::Mlp& policy_net,
                              const VectorXd& policy,
                              const net::Mlp& value_net, const VectorXd& value,
                              const envs::TaskSuite& suite, int task_id,
                              int n_steps, double gamma, double gae_lambda,
                              rng::Stream& rng, FlopCounter* flops) {
  if (n_steps < 1) throw ConfigError("collect_rollouts: n_steps must be >= 1");

  RolloutBatch out;
  out.records.reserve(n_steps);
  std::vector<double> rewards, values;
  std::vector<std::uint8_t> dones;
  rewards.reserve(n_steps);
  values.reserve(n_steps);
  dones.reserve(n_steps);

  envs::EnvState state = suite.reset(task_id, rng);
  double episode_return = 0.0;
  for (int step = 0; step < n_steps; ++step) {
    const auto [action, log_prob] =
        policy_net.sample_action(policy, state.observation, rng);
    const double v = value_net.value(value, state.observation);
    if (!std::isfinite(v))
      throw NumericError("collect_rollouts: non-finite value prediction");
    auto [next, reward] = suite.step(task_id, state, action);

    TransitionRecord rec;
    rec.task_id = task_id;
    rec.state = state.observation;
    rec.action = action;
    rec.reward = reward;
    rec.log_prob_behavior = log_prob;
    out.records.push_back(std::move(rec));
    rewards.push_back(reward);
    values.push_back(v);
    dones.push_back(next.done ? 1 : 0);
    out.total_reward += reward;
    episode_return += reward;

    if (next.done) {
      out.completed_episodes += 1;
      out.completed_return_sum += episode_return;
      if (suite.episode_success(task_id, next, reward)) out.successes += 1;
      episode_return = 0.0;
      state = suite.reset(task_id, rng);
    } else {
      state = next;
    }
  }

  const double bootstrap =
      dones.back() ? 0.0 : value_net.value(value, state.observation);
  const auto [advantages, returns] =
      compute_gae(rewards, values, dones, bootstrap, gamma, gae_lambda);
  for (int i = 0; i < n_steps; ++i) {
    out.records[i].advantage = advantages[i];
    out.records[i].return_to_go = returns[i];
  }

  if (flops)
    flops->add(static_cast<std::uint64_t>(n_steps + 1) *
               (policy_net.forward_flops() + value_net.forward_flops()));
  return out;
}

double clipped_objective(const ArrayXd& ratios, const ArrayXd& advantages,
                         double clip_eps) {
  const ArrayXd clipped =
      ratios.min(1.0 + clip_eps).max(1.0 - clip_eps);
  return (ratios * advantages).min(clipped * advantages).mean();
}

void AdamState::ascend(VectorXd& params, const VectorXd& g, double lr) {
  if (m.size() != params.size()) init(params.size());
  t += 1;
  m = beta1 * m + (1.0 - beta1) * g;
  v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  params.array() += lr * (m.array() / bc1) /
                    ((v.array() / bc2).sqrt() + eps);
}

PpoEval ppo_minibatch_eval(const net::Mlp& policy_net, const VectorXd& policy,
                           const net::Mlp& value_net, const VectorXd& value,
                           const MatrixXd& states,
                           const std::vector<int>& actions,
                           const ArrayXd& advantages,
                           const ArrayXd& behavior_log_probs,
                           const ArrayXd& returns, const PpoConfig& cfg,
                           bool want_grads) {
  const Eigen::Index B = states.rows();
  const int n_actions = policy_net.output_dim();
  PpoEval ev;

  net::Mlp::Cache pcache;
  const MatrixXd logits = policy_net.forward(policy, states, &pcache);
  const MatrixXd logp = log_softmax_rows(logits);
  const MatrixXd probs = logp.array().exp();

  ArrayXd logp_taken(B), entropy(B);
  for (Eigen::Index i = 0; i < B; ++i) {
    logp_taken[i] = logp(i, actions[i]);
    entropy[i] = -(probs.row(i).array() * logp.row(i).array()).sum();
  }

  ArrayXd log_ratio = logp_taken - behavior_log_probs;
  for (Eigen::Index i = 0; i < B; ++i) {
    if (std::abs(log_ratio[i]) > kLogRatioLimit) {
      log_ratio[i] = std::clamp(log_ratio[i], -kLogRatioLimit, kLogRatioLimit);
      ev.ratio_clamps += 1;
    }
  }
  const ArrayXd ratio = log_ratio.exp();
  const ArrayXd term1 = ratio * advantages;
  const ArrayXd clipped = ratio.min(1.0 + cfg.clip_eps).max(1.0 - cfg.clip_eps);
  const ArrayXd term2 = clipped * advantages;

  net::Mlp::Cache vcache;
  const VectorXd values =
      value_net.forward(value, states, want_grads ? &vcache : nullptr).col(0);
  const ArrayXd v_err = values.array() - returns;

  ev.surrogate = term1.min(term2).mean();
  ev.value_mse = v_err.square().mean();
  ev.entropy = entropy.mean();
  ev.objective = ev.surrogate - cfg.value_coef * ev.value_mse +
                 cfg.entropy_coef * ev.entropy;

  if (want_grads) {
    MatrixXd d_logits = MatrixXd::Zero(B, n_actions);
    const double inv_b = 1.0 / static_cast<double>(B);
    for (Eigen::Index i = 0; i < B; ++i) {
      // min(r A, clip(r) A): nonzero gradient only through the unclipped
      // branch when it attains the min.
      double coef = term1[i] <= term2[i] ? ratio[i] * advantages[i] : 0.0;
      coef *= inv_b;
      d_logits.row(i) = -coef * probs.row(i);
      d_logits(i, actions[i]) += coef;
      if (cfg.entropy_coef != 0.0) {
        // dH/dz_k = -p_k (log p_k + H)
        d_logits.row(i) -=
            cfg.entropy_coef * inv_b *
            (probs.row(i).array() * (logp.row(i).array() + entropy[i]))
                .matrix();
      }
    }
    ev.policy_grad = policy_net.backward(policy, pcache, d_logits);
    const MatrixXd d_value =
        (-cfg.value_coef * 2.0 * inv_b * v_err).matrix();
    ev.value_grad = value_net.backward(value, vcache, d_value);
  }
  return ev;
}

PpoUpdateResult ppo_update(const net::Mlp& policy_net, VectorXd policy,
                           const net::Mlp& value_net, VectorXd value,
                           const std::vector<TransitionRecord>& batch,
                           const PpoConfig& cfg, const TrainBudget& budget,
                           AdamState* policy_opt, AdamState* value_opt,
                           rng::Stream& rng, FlopCounter* flops) {
  if (batch.empty()) throw ConfigError("ppo_update: empty batch");
  if (!(cfg.clip_eps > 0.0 && cfg.clip_eps < 1.0))
    throw ConfigError("ppo_update: clip_eps must lie in (0,1)");

  const Eigen::Index N = static_cast<Eigen::Index>(batch.size());
  const int dim = policy_net.input_dim();
  MatrixXd states(N, dim);
  std::vector<int> actions(N);
  ArrayXd advantages(N), behavior(N), returns(N);
  for (Eigen::Index i = 0; i < N; ++i) {
    states.row(i) = batch[i].state.transpose();
    actions[i] = batch[i].action;
    advantages[i] = batch[i].advantage;
    behavior[i] = batch[i].log_prob_behavior;
    returns[i] = batch[i].return_to_go;
  }

  std::vector<Eigen::Index> order(N);
  std::iota(order.begin(), order.end(), 0);

  PpoUpdateResult out;
  out.policy = std::move(policy);
  out.value = std::move(value);

  const Eigen::Index mb = std::max(1, budget.minibatch_size);
  for (int epoch = 0; epoch < budget.epochs; ++epoch) {
    // Fisher-Yates with the caller's stream keeps runs reproducible.
    for (Eigen::Index i = N - 1; i > 0; --i)
      std::swap(order[i], order[rng.uniform_int(static_cast<int>(i) + 1)]);

    double objective_acc = 0.0;
    for (Eigen::Index start = 0; start < N; start += mb) {
      const Eigen::Index b = std::min(mb, N - start);
      MatrixXd sb(b, dim);
      std::vector<int> ab(b);
      ArrayXd advb(b), behb(b), retb(b);
      for (Eigen::Index i = 0; i < b; ++i) {
        const Eigen::Index j = order[start + i];
        sb.row(i) = states.row(j);
        ab[i] = actions[j];
        advb[i] = advantages[j];
        behb[i] = behavior[j];
        retb[i] = returns[j];
      }
      if (cfg.normalize_advantages) {
        const double mean = advb.mean();
        const double sd = std::sqrt((advb - mean).square().mean());
        advb = (advb - mean) / (sd + 1e-8);
      }
      PpoEval ev =
          ppo_minibatch_eval(policy_net, out.policy, value_net, out.value, sb,
                             ab, advb, behb, retb, cfg, true);
      out.metrics.ratio_clamps += ev.ratio_clamps;
      objective_acc += ev.objective * static_cast<double>(b);

      policy_opt->ascend(out.policy, ev.policy_grad, budget.learning_rate);
      value_opt->ascend(out.value, ev.value_grad, budget.learning_rate);
      if (flops)
        flops->add(static_cast<std::uint64_t>(b) *
                       (policy_net.grad_flops() + value_net.grad_flops()) +
                   kAdamFlopsPerParam * (policy_net.param_count() +
                                         value_net.param_count()));
    }
    out.metrics.epoch_objectives.push_back(objective_acc /
                                           static_cast<double>(N));
  }
  return out;
}

net::Mlp make_policy_net(const envs::TaskSuite& suite,
                         const std::vector<int>& hidden) {
  std::vector<int> widths;
  widths.push_back(suite.state_dim());
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(suite.action_count());
  return net::Mlp(widths, net::Mlp::Head::kCategorical);
}

net::Mlp make_value_net(const envs::TaskSuite& suite,
                        const std::vector<int>& hidden) {
  std::vector<int> widths;
  widths.push_back(suite.state_dim());
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(1);
  return net::Mlp(widths, net::Mlp::Head::kLinear);
}

namespace {

// Shared by train_meta and finetune_oracle: PPO over a fixed task list.
MetaTrainResult run_ppo_training(const envs::TaskSuite& suite,
                                 const net::Mlp& policy_net,
                                 const net::Mlp& value_net, VectorXd policy,
                                 VectorXd value,
                                 const std::vector<int>& task_ids,
                                 const TrainBudget& budget,
                                 const PpoConfig& cfg, std::uint64_t seed,
                                 int jobs) {
  MetaTrainResult out;
  AdamState policy_opt, value_opt;
  FlopCounter flops;

  for (int iter = 0; iter < budget.iterations; ++iter) {
    std::vector<RolloutBatch> batches(task_ids.size());
    auto collect_one = [&](std::size_t idx) {
      const int task = task_ids[idx];
      rng::Stream task_rng(rng::derive_seed(
          seed, {rng::tag("rollout"), static_cast<std::uint64_t>(iter),
                 static_cast<std::uint64_t>(task)}));
      FlopCounter local;
      RolloutBatch b = collect_rollouts(policy_net, policy, value_net, value,
                                        suite, task, budget.steps_per_task,
                                        suite.gamma(), cfg.gae_lambda,
                                        task_rng, &local);
      return std::make_pair(std::move(b), local.total);
    };
    if (jobs > 1 && task_ids.size() > 1) {
      std::vector<std::future<std::pair<RolloutBatch, std::uint64_t>>> futs;
      futs.reserve(task_ids.size());
      for (std::size_t i = 0; i < task_ids.size(); ++i)
        futs.push_back(std::async(std::launch::async, collect_one, i));
      for (std::size_t i = 0; i < task_ids.size(); ++i) {
        auto [b, f] = futs[i].get();
        batches[i] = std::move(b);
        flops.add(f);
      }
    } else {
      for (std::size_t i = 0; i < task_ids.size(); ++i) {
        auto [b, f] = collect_one(i);
        batches[i] = std::move(b);
        flops.add(f);
      }
    }

    std::vector<TransitionRecord> pooled;
    pooled.reserve(task_ids.size() * budget.steps_per_task);
    IterationMetrics im;
    im.iter = iter;
    for (auto& b : batches) {
      im.mean_reward_per_task.push_back(b.mean_episode_return());
      im.success_rate_per_task.push_back(b.success_rate());
      std::move(b.records.begin(), b.records.end(),
                std::back_inserter(pooled));
    }

    rng::Stream update_rng(rng::derive_seed(
        seed, {rng::tag("ppo"), static_cast<std::uint64_t>(iter)}));
    PpoUpdateResult upd =
        ppo_update(policy_net, std::move(policy), value_net, std::move(value),
                   pooled, cfg, budget, &policy_opt, &value_opt, update_rng,
                   &flops);
    policy = std::move(upd.policy);
    value = std::move(upd.value);
    im.objective = upd.metrics.epoch_objectives.empty()
                       ? 0.0
                       : upd.metrics.epoch_objectives.back();
    im.flops_cum = flops.total;
    out.curve.push_back(std::move(im));
  }

  out.policy = std::move(policy);
  out.value = std::move(value);
  out.flops = flops.total;
  return out;
}

}  // namespace

MetaTrainResult train_meta(const envs::TaskSuite& suite,
                           const std::vector<int>& hidden,
                           const TrainBudget& budget, const PpoConfig& cfg,
                           std::uint64_t seed, int jobs) {
  const net::Mlp policy_net = make_policy_net(suite, hidden);
  const net::Mlp value_net = make_value_net(suite, hidden);
  VectorXd policy =
      policy_net.init_params(rng::derive_seed(seed, {rng::tag("policy0")}));
  VectorXd value =
      value_net.init_params(rng::derive_seed(seed, {rng::tag("value0")}));
  std::vector<int> all_tasks(suite.n_tasks());
  std::iota(all_tasks.begin(), all_tasks.end(), 0);
  return run_ppo_training(suite, policy_net, value_net, std::move(policy),
                          std::move(value), all_tasks, budget, cfg, seed,
                          jobs);
}

EvalResult evaluate_policy(const net::Mlp& policy_net, const VectorXd& policy,
                           const envs::TaskSuite& suite, int task_id,
                           int episodes, rng::Stream& rng,
                           FlopCounter* flops) {
  if (episodes < 1) throw ConfigError("evaluate_policy: episodes must be >= 1");
  EvalResult out;
  std::uint64_t steps = 0;
  for (int e = 0; e < episodes; ++e) {
    envs::EnvState state = suite.reset(task_id, rng);
    double ep_return = 0.0;
    double last_reward = 0.0;
    while (!state.done) {
      const auto [action, lp] =
          policy_net.sample_action(policy, state.observation, rng);
      auto [next, reward] = suite.step(task_id, state, action);
      ep_return += reward;
      last_reward = reward;
      state = std::move(next);
      ++steps;
    }
    out.mean_return += ep_return;
    out.mean_length += state.step_index;
    if (suite.episode_success(task_id, state, last_reward))
      out.success_rate += 1.0;
  }
  out.mean_return /= episodes;
  out.mean_length /= episodes;
  out.success_rate /= episodes;
  if (flops) flops->add(steps * policy_net.forward_flops());
  return out;
}

OracleResult finetune_oracle(const envs::TaskSuite& suite,
                             const net::Mlp& policy_net,
                             const net::Mlp& value_net, const VectorXd& policy0,
                             const VectorXd& value0,
                             const std::vector<int>& subset,
                             const TrainBudget& budget, const PpoConfig& cfg,
                             int eval_episodes, std::uint64_t seed, int jobs) {
  if (subset.empty()) throw ConfigError("finetune_oracle: empty subset");
  for (int t : subset)
    if (t < 0 || t >= suite.n_tasks())
      throw ConfigError("finetune_oracle: task " + std::to_string(t) +
                        " outside the suite");

  MetaTrainResult trained =
      run_ppo_training(suite, policy_net, value_net, policy0, value0, subset,
                       budget, cfg, seed, jobs);

  OracleResult out;
  out.policy = std::move(trained.policy);
  out.value = std::move(trained.value);
  FlopCounter flops;
  flops.add(trained.flops);
  for (int task : subset) {
    rng::Stream eval_rng(rng::derive_seed(
        seed, {rng::tag("eval"), static_cast<std::uint64_t>(task)}));
    const EvalResult ev = evaluate_policy(policy_net, out.policy, suite, task,
                                          eval_episodes, eval_rng, &flops);
    out.mean_reward += ev.mean_return;
    out.mean_success += ev.success_rate;
  }
  out.mean_reward /= static_cast<double>(subset.size());
  out.mean_success /= static_cast<double>(subset.size());
  out.flops = flops.total;
  return out;
}

net::BatchLoss make_pg_loss(const net::Mlp& policy_net,
                            const std::vector<TransitionRecord>& records) {
  if (records.empty()) throw ConfigError("make_pg_loss: empty record set");
  const Eigen::Index N = static_cast<Eigen::Index>(records.size());
  auto states = std::make_shared<MatrixXd>(N, policy_net.input_dim());
  auto actions = std::make_shared<std::vector<int>>(N);
  auto weights = std::make_shared<ArrayXd>(N);   // A_i
  auto behavior = std::make_shared<ArrayXd>(N);
  for (Eigen::Index i = 0; i < N; ++i) {
    states->row(i) = records[i].state.transpose();
    (*actions)[i] = records[i].action;
    (*weights)[i] = records[i].advantage;
    (*behavior)[i] = records[i].log_prob_behavior;
  }
  const net::Mlp net_copy = policy_net;
  const double inv_n = 1.0 / static_cast<double>(N);

  net::BatchLoss ctx;
  ctx.dim = policy_net.param_count();
  ctx.grad_flops = static_cast<std::uint64_t>(N) * policy_net.grad_flops();
  ctx.loss = [=](const VectorXd& theta) {
    const MatrixXd logp =
        log_softmax_rows(net_copy.forward(theta, *states, nullptr));
    double acc = 0.0;
    for (Eigen::Index i = 0; i < N; ++i)
      acc += (*weights)[i] * std::exp(logp(i, (*actions)[i]) - (*behavior)[i]);
    return -acc * inv_n;
  };
  ctx.grad = [=](const VectorXd& theta) {
    net::Mlp::Cache cache;
    const MatrixXd logits = net_copy.forward(theta, *states, &cache);
    const MatrixXd logp = log_softmax_rows(logits);
    const MatrixXd probs = logp.array().exp();
    MatrixXd d_logits(N, net_copy.output_dim());
    for (Eigen::Index i = 0; i < N; ++i) {
      const double ratio =
          std::exp(logp(i, (*actions)[i]) - (*behavior)[i]);
      const double coef = -(*weights)[i] * ratio * inv_n;
      d_logits.row(i) = -coef * probs.row(i);
      d_logits(i, (*actions)[i]) += coef;
    }
    return net_copy.backward(theta, cache, d_logits);
  };
  return ctx;
}

double clipped_pg_loss(const net::Mlp& policy_net, const VectorXd& policy,
                       const std::vector<TransitionRecord>& records,
                       double C) {
  if (C <= 0.0) throw ConfigError("clipped_pg_loss: C must be positive");
  if (records.empty()) throw ConfigError("clipped_pg_loss: empty record set");
  double acc = 0.0;
  for (const auto& r : records) {
    const double logp = policy_net.log_prob(policy, r.state, r.action);
    const double term =
        -r.advantage * std::exp(logp - r.log_prob_behavior);
    acc += std::clamp(term, 0.0, C);
  }
  return acc / static_cast<double>(records.size());
}

}  // namespace gradex::train
