#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "gradex/random.hpp"

namespace gradex::envs {

enum class SuiteKind { kMultigoalGrid, kParamCartpole };

std::string to_string(SuiteKind kind);
SuiteKind suite_kind_from_string(const std::string& s);

// JSON shape: {"kind", "n_tasks", "grid_size"|"lengths", "horizon",
// "gamma", "seed"}.
struct SuiteConfig {
  SuiteKind kind = SuiteKind::kMultigoalGrid;
  int n_tasks = 8;
  int grid_size = 5;                   // multigoal_grid
  std::vector<double> lengths;         // param_cartpole, one per task
  int horizon = 0;                     // 0 -> kind default (100 grid, 200 cartpole)
  double gamma = 0.99;
  std::uint64_t seed = 0;

  static SuiteConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct EnvState {
  Eigen::VectorXd observation;
  int step_index = 0;
  bool done = false;
};

// A family of tasks sharing state/action spaces; grid tasks also share the
// transition function exactly and differ only in the rewarded goal cell.
class TaskSuite {
 public:
  static TaskSuite make(const SuiteConfig& config);

  SuiteKind kind() const { return config_.kind; }
  int n_tasks() const { return config_.n_tasks; }
  int state_dim() const;
  int action_count() const;
  int horizon() const { return config_.horizon; }
  double gamma() const { return config_.gamma; }
  const SuiteConfig& config() const { return config_; }

  EnvState reset(int task_id, rng::Stream& rng) const;
  std::pair<EnvState, double> step(int task_id, const EnvState& state,
                                   int action) const;

  // Grid goals, exposed for tests and for the planted ground truth.
  std::pair<int, int> goal_cell(int task_id) const;

  // Planted two-group structure of the default grid suite (tasks whose goals
  // sit near opposite corners); empty when the suite has no planted truth.
  std::optional<std::vector<std::vector<int>>> planted_partition() const;

  // True when the episode ending at `state` with final reward `last_reward`
  // solved the task (grid: goal reached; cartpole: survived the horizon).
  bool episode_success(int task_id, const EnvState& state,
                       double last_reward) const;

 private:
  explicit TaskSuite(SuiteConfig config);
  void check_task(int task_id) const;

  std::pair<EnvState, double> step_grid(int task_id, const EnvState& state,
                                        int action) const;
  std::pair<EnvState, double> step_cartpole(int task_id, const EnvState& state,
                                            int action) const;

  SuiteConfig config_;
  std::vector<std::pair<int, int>> goals_;  // grid goal cells per task
};

}  // namespace gradex::envs
