#include "gradex/envs.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "gradex/errors.hpp"

namespace gradex::envs {

namespace {

constexpr double kStepPenalty = -0.01;
constexpr double kGoalReward = 1.0;

// Classic cart-pole constants; only the pole length varies per task.
constexpr double kGravity = 9.8;
constexpr double kMassCart = 1.0;
constexpr double kMassPole = 0.1;
constexpr double kForceMag = 10.0;
constexpr double kDt = 0.02;
constexpr double kAngleLimit = 12.0 * M_PI / 180.0;
constexpr double kPositionLimit = 2.4;

}  // namespace

std::string to_string(SuiteKind kind) {
  return kind == SuiteKind::kMultigoalGrid ? "multigoal_grid"
                                           : "param_cartpole";
}

SuiteKind suite_kind_from_string(const std::string& s) {
  if (s == "multigoal_grid") return SuiteKind::kMultigoalGrid;
  if (s == "param_cartpole") return SuiteKind::kParamCartpole;
  throw ConfigError("unknown suite kind: \"" + s + "\"");
}

SuiteConfig SuiteConfig::from_json(const nlohmann::json& j) {
  SuiteConfig c;
  if (j.contains("kind")) c.kind = suite_kind_from_string(j.at("kind"));
  if (j.contains("n_tasks")) c.n_tasks = j.at("n_tasks").get<int>();
  if (j.contains("grid_size")) c.grid_size = j.at("grid_size").get<int>();
  if (j.contains("lengths"))
    c.lengths = j.at("lengths").get<std::vector<double>>();
  if (j.contains("horizon")) c.horizon = j.at("horizon").get<int>();
  if (j.contains("gamma")) c.gamma = j.at("gamma").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

nlohmann::json SuiteConfig::to_json() const {
  nlohmann::json j;
  j["kind"] = to_string(kind);
  j["n_tasks"] = n_tasks;
  if (kind == SuiteKind::kMultigoalGrid) j["grid_size"] = grid_size;
  if (kind == SuiteKind::kParamCartpole) j["lengths"] = lengths;
  j["horizon"] = horizon;
  j["gamma"] = gamma;
  j["seed"] = seed;
  return j;
}

TaskSuite::TaskSuite(SuiteConfig config) : config_(std::move(config)) {}

TaskSuite TaskSuite::make(const SuiteConfig& config) {
  SuiteConfig c = config;
  if (c.horizon == 0)
    c.horizon = c.kind == SuiteKind::kMultigoalGrid ? 100 : 200;
  if (c.n_tasks < 2) throw ConfigError("n_tasks: need at least 2 tasks");
  if (c.horizon < 1) throw ConfigError("horizon: must be >= 1");
  if (!(c.gamma > 0.0 && c.gamma < 1.0))
    throw ConfigError("gamma: must lie in (0,1)");

  TaskSuite suite(c);
  if (c.kind == SuiteKind::kMultigoalGrid) {
    if (c.grid_size < 3) throw ConfigError("grid_size: must be >= 3");
    const int boundary = 4 * (c.grid_size - 1);
    if (c.n_tasks > boundary)
      throw ConfigError("n_tasks: at most " + std::to_string(boundary) +
                        " boundary cells on a " + std::to_string(c.grid_size) +
                        "x" + std::to_string(c.grid_size) + " grid");

    // Plant goals in two groups hugging opposite corners: boundary cells
    // sorted by distance to (0,0) for the first half, to (G-1,G-1) for the
    // second. This fixes a known ground-truth partition.
    const int g = c.grid_size;
    std::vector<std::pair<int, int>> cells;
    for (int x = 0; x < g; ++x)
      for (int y = 0; y < g; ++y)
        if (x == 0 || y == 0 || x == g - 1 || y == g - 1)
          cells.emplace_back(x, y);
    auto by_distance_to = [&](int cx, int cy) {
      return [cx, cy](const std::pair<int, int>& a,
                      const std::pair<int, int>& b) {
        const int da = std::abs(a.first - cx) + std::abs(a.second - cy);
        const int db = std::abs(b.first - cx) + std::abs(b.second - cy);
        return da != db ? da < db : a < b;
      };
    };
    std::vector<std::pair<int, int>> near_lo = cells;
    std::sort(near_lo.begin(), near_lo.end(), by_distance_to(0, 0));
    std::vector<std::pair<int, int>> near_hi = cells;
    std::sort(near_hi.begin(), near_hi.end(), by_distance_to(g - 1, g - 1));

    const int n_lo = (c.n_tasks + 1) / 2;
    suite.goals_.assign(near_lo.begin(), near_lo.begin() + n_lo);
    for (const auto& cell : near_hi) {
      if (static_cast<int>(suite.goals_.size()) == c.n_tasks) break;
      if (std::find(suite.goals_.begin(), suite.goals_.end(), cell) ==
          suite.goals_.end())
        suite.goals_.push_back(cell);
    }
    if (static_cast<int>(suite.goals_.size()) != c.n_tasks)
      throw ConfigError("n_tasks: cannot plant this many distinct goals");
  } else {
    if (static_cast<int>(c.lengths.size()) != c.n_tasks)
      throw ConfigError("lengths: need exactly one pole length per task");
    for (double l : c.lengths)
      if (!(l >= 0.25 && l <= 1.0))
        throw ConfigError("lengths: pole lengths must lie in [0.25, 1.0]");
  }
  return suite;
}

int TaskSuite::state_dim() const {
  return config_.kind == SuiteKind::kMultigoalGrid ? 2 : 4;
}

int TaskSuite::action_count() const {
  return config_.kind == SuiteKind::kMultigoalGrid ? 4 : 2;
}

void TaskSuite::check_task(int task_id) const {
  if (task_id < 0 || task_id >= config_.n_tasks)
    throw ShapeError("task_id " + std::to_string(task_id) +
                     " out of range [0," + std::to_string(config_.n_tasks) +
                     ")");
}

EnvState TaskSuite::reset(int task_id, rng::Stream& rng) const {
  check_task(task_id);
  EnvState s;
  s.step_index = 0;
  s.done = false;
  if (config_.kind == SuiteKind::kMultigoalGrid) {
    // Shared deterministic start at the interior center cell.
    const int c = (config_.grid_size - 1) / 2;
    s.observation = Eigen::Vector2d(
        static_cast<double>(c) / (config_.grid_size - 1),
        static_cast<double>(c) / (config_.grid_size - 1));
  } else {
    s.observation = Eigen::Vector4d(rng.uniform(-0.05, 0.05),
                                    rng.uniform(-0.05, 0.05),
                                    rng.uniform(-0.05, 0.05),
                                    rng.uniform(-0.05, 0.05));
  }
  return s;
}

std::pair<EnvState, double> TaskSuite::step(int task_id, const EnvState& state,
                                            int action) const {
  check_task(task_id);
  if (state.done) throw ProtocolError("step() called on a finished episode");
  if (action < 0 || action >= action_count())
    throw ShapeError("action " + std::to_string(action) + " out of range [0," +
                     std::to_string(action_count()) + ")");
  return config_.kind == SuiteKind::kMultigoalGrid
             ? step_grid(task_id, state, action)
             : step_cartpole(task_id, state, action);
}

std::pair<EnvState, double> TaskSuite::step_grid(int task_id,
                                                 const EnvState& state,
                                                 int action) const {
  const int g = config_.grid_size;
  int x = static_cast<int>(std::lround(state.observation[0] * (g - 1)));
  int y = static_cast<int>(std::lround(state.observation[1] * (g - 1)));
  static constexpr int kDx[4] = {1, -1, 0, 0};
  static constexpr int kDy[4] = {0, 0, 1, -1};
  x = std::clamp(x + kDx[action], 0, g - 1);
  y = std::clamp(y + kDy[action], 0, g - 1);

  EnvState next;
  next.observation = Eigen::Vector2d(static_cast<double>(x) / (g - 1),
                                     static_cast<double>(y) / (g - 1));
  next.step_index = state.step_index + 1;

  const auto goal = goals_[task_id];
  double reward = kStepPenalty;
  if (x == goal.first && y == goal.second) {
    reward = kGoalReward;
    next.done = true;
  } else {
    next.done = next.step_index >= config_.horizon;
  }
  return {next, reward};
}

std::pair<EnvState, double> TaskSuite::step_cartpole(int task_id,
                                                     const EnvState& state,
                                                     int action) const {
  const double length = config_.lengths[task_id];
  const double total_mass = kMassCart + kMassPole;
  const double polemass_length = kMassPole * length;

  double x = state.observation[0];
  double x_dot = state.observation[1];
  double phi = state.observation[2];
  double phi_dot = state.observation[3];

  const double force = action == 1 ? kForceMag : -kForceMag;
  const double cos_phi = std::cos(phi);
  const double sin_phi = std::sin(phi);
  const double temp =
      (force + polemass_length * phi_dot * phi_dot * sin_phi) / total_mass;
  const double phi_acc =
      (kGravity * sin_phi - cos_phi * temp) /
      (length * (4.0 / 3.0 - kMassPole * cos_phi * cos_phi / total_mass));
  const double x_acc = temp - polemass_length * phi_acc * cos_phi / total_mass;

  x += kDt * x_dot;
  x_dot += kDt * x_acc;
  phi += kDt * phi_dot;
  phi_dot += kDt * phi_acc;

  EnvState next;
  next.observation = Eigen::Vector4d(x, x_dot, phi, phi_dot);
  next.step_index = state.step_index + 1;

  const bool failed =
      std::abs(phi) > kAngleLimit || std::abs(x) > kPositionLimit;
  next.done = failed || next.step_index >= config_.horizon;
  const double reward = failed ? 0.0 : 1.0;
  return {next, reward};
}

std::pair<int, int> TaskSuite::goal_cell(int task_id) const {
  check_task(task_id);
  if (config_.kind != SuiteKind::kMultigoalGrid)
    throw ProtocolError("goal_cell() only defined for grid suites");
  return goals_[task_id];
}

std::optional<std::vector<std::vector<int>>> TaskSuite::planted_partition()
    const {
  if (config_.kind != SuiteKind::kMultigoalGrid) return std::nullopt;
  const int n_lo = (config_.n_tasks + 1) / 2;
  std::vector<std::vector<int>> groups(2);
  for (int t = 0; t < config_.n_tasks; ++t)
    groups[t < n_lo ? 0 : 1].push_back(t);
  if (groups[1].empty()) return std::nullopt;
  return groups;
}

bool TaskSuite::episode_success(int task_id, const EnvState& state,
                                double last_reward) const {
  check_task(task_id);
  if (config_.kind == SuiteKind::kMultigoalGrid)
    return last_reward > 0.5;
  return state.step_index >= config_.horizon && last_reward > 0.5;
}

}  // namespace gradex::envs
