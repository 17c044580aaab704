#include "gradex/affinity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gradex/errors.hpp"
#include "gradex/random.hpp"

namespace gradex::affinity {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd symmetrized(const MatrixXd& m) {
  return 0.5 * (m + m.transpose());
}

MatrixXd project_nonneg(const MatrixXd& y) {
  return y.cwiseMax(0.0);
}

// Dykstra's alternating projections onto
//   {Xe = e [, tr X = k]}  ∩  PSD  ∩  {X >= 0},
// with correction increments per set. The nonnegativity projection runs
// last so returned iterates have exact nonnegative entries.
MatrixXd dykstra_intersection(MatrixXd x, std::optional<double> trace_target,
                              int sweeps, std::uint64_t* flops) {
  const Eigen::Index n = x.rows();
  MatrixXd inc_affine = MatrixXd::Zero(n, n);
  MatrixXd inc_psd = MatrixXd::Zero(n, n);
  MatrixXd inc_nonneg = MatrixXd::Zero(n, n);
  for (int it = 0; it < sweeps; ++it) {
    MatrixXd z = x + inc_affine;
    MatrixXd proj = project_affine(z, trace_target);
    inc_affine = z - proj;
    x = std::move(proj);

    z = x + inc_psd;
    proj = project_psd(z);
    inc_psd = z - proj;
    x = std::move(proj);

    z = x + inc_nonneg;
    proj = project_nonneg(z);
    inc_nonneg = z - proj;
    x = std::move(proj);
  }
  if (flops)
    *flops += static_cast<std::uint64_t>(sweeps) * 14ull * n * n * n;
  return x;
}

struct Residuals {
  double row_sum;
  double min_eig;
  double min_entry;
  double trace_error;
};

Residuals residuals_of(const MatrixXd& x, std::optional<double> trace_target) {
  Residuals r;
  const Eigen::Index n = x.rows();
  r.row_sum = (x * VectorXd::Ones(n) - VectorXd::Ones(n))
                  .lpNorm<Eigen::Infinity>();
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(symmetrized(x),
                                              Eigen::EigenvaluesOnly);
  r.min_eig = eig.eigenvalues().minCoeff();
  r.min_entry = x.minCoeff();
  r.trace_error = trace_target ? std::abs(x.trace() - *trace_target) : 0.0;
  return r;
}

std::vector<int> labels_of(const Partition& p, int n) {
  std::vector<int> labels(n, -1);
  for (std::size_t g = 0; g < p.groups.size(); ++g)
    for (int t : p.groups[g]) {
      if (t < 0 || t >= n || labels[t] != -1)
        throw ConfigError("partition is not a disjoint cover of the ground set");
      labels[t] = static_cast<int>(g);
    }
  for (int t = 0; t < n; ++t)
    if (labels[t] == -1)
      throw ConfigError("partition does not cover task " + std::to_string(t));
  return labels;
}

Partition partition_from_labels(const std::vector<int>& labels, int k) {
  Partition p;
  p.groups.assign(k, {});
  for (std::size_t i = 0; i < labels.size(); ++i)
    p.groups[labels[i]].push_back(static_cast<int>(i));
  p.groups.erase(std::remove_if(p.groups.begin(), p.groups.end(),
                                [](const auto& g) { return g.empty(); }),
                 p.groups.end());
  std::sort(p.groups.begin(), p.groups.end());
  return p;
}

}  // namespace

std::vector<std::vector<int>> sample_subsets(int n, int m, int alpha,
                                             std::uint64_t seed) {
  if (alpha > n)
    throw ConfigError("subset size alpha=" + std::to_string(alpha) +
                      " exceeds n=" + std::to_string(n));
  if (alpha < 2) throw ConfigError("subset size alpha must be >= 2");
  if (m < 1) throw ConfigError("need m >= 1 subsets");

  rng::Stream rng(seed);
  std::vector<std::vector<int>> subsets;
  subsets.reserve(m);
  std::vector<int> pool(n);
  for (int j = 0; j < m; ++j) {
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < alpha; ++i)
      std::swap(pool[i], pool[i + rng.uniform_int(n - i)]);
    std::vector<int> subset(pool.begin(), pool.begin() + alpha);
    std::sort(subset.begin(), subset.end());
    subsets.push_back(std::move(subset));
  }
  return subsets;
}

bool AffinityMatrix::any_missing() const {
  for (const auto& row : missing)
    for (auto flag : row)
      if (flag) return true;
  return false;
}

AffinityMatrix build_affinity(
    const std::vector<std::pair<std::vector<int>, double>>& scored_subsets,
    int n) {
  if (scored_subsets.empty())
    throw ConfigError("build_affinity: no subset scores");
  AffinityMatrix out;
  out.n = n;
  out.values = MatrixXd::Zero(n, n);
  out.counts = Eigen::MatrixXi::Zero(n, n);
  out.missing.assign(n, std::vector<std::uint8_t>(n, 0));

  double global_sum = 0.0;
  for (const auto& [subset, score] : scored_subsets) {
    global_sum += score;
    for (int a : subset) {
      if (a < 0 || a >= n)
        throw ConfigError("build_affinity: subset task out of range");
      for (int b : subset) {
        out.values(a, b) += score;
        out.counts(a, b) += 1;
      }
    }
  }
  const double global_mean =
      global_sum / static_cast<double>(scored_subsets.size());

  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (out.counts(i, j) > 0) {
        out.values(i, j) /= out.counts(i, j);
      } else {
        out.values(i, j) = global_mean;
        out.missing[i][j] = 1;
      }
    }
  }
  return out;
}

Eigen::MatrixXd project_affine(const Eigen::MatrixXd& y,
                               std::optional<double> trace_target) {
  const Eigen::Index n = y.rows();
  if (y.cols() != n) throw ShapeError("project_affine: matrix must be square");
  const MatrixXd ys = symmetrized(y);
  const VectorXd e = VectorXd::Ones(n);
  const VectorXd r = ys * e;
  const double row_total = r.sum();
  double nu = 0.0;
  double s;
  if (trace_target) {
    if (n == 1) {
      MatrixXd x(1, 1);
      x(0, 0) = *trace_target;
      return x;
    }
    nu = (*trace_target - ys.trace() - 1.0 + row_total / n) / (n - 1.0);
    s = 1.0 - row_total / n - nu;
  } else {
    s = 1.0 - row_total / n;
  }
  const VectorXd lambda =
      (2.0 / n) * (e - r) - ((s + 2.0 * nu) / n) * e;
  MatrixXd x = ys + 0.5 * (lambda * e.transpose() + e * lambda.transpose());
  x.diagonal().array() += nu;
  return x;
}

Eigen::MatrixXd project_psd(const Eigen::MatrixXd& y) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(symmetrized(y));
  const VectorXd clamped = eig.eigenvalues().cwiseMax(0.0);
  return eig.eigenvectors() * clamped.asDiagonal() *
         eig.eigenvectors().transpose();
}

RelaxationSolution solve_relaxation(const Eigen::MatrixXd& u, RelaxMode mode,
                                    double k_or_lambda,
                                    const RelaxationConfig& config) {
  const Eigen::Index n = u.rows();
  if (u.cols() != n)
    throw ConfigError("solve_relaxation: affinity matrix must be square");
  if ((u - u.transpose()).lpNorm<Eigen::Infinity>() >
      1e-9 * (1.0 + u.lpNorm<Eigen::Infinity>()))
    throw ConfigError("solve_relaxation: affinity matrix must be symmetric");

  std::optional<double> trace_target;
  MatrixXd g = symmetrized(u);
  double lambda = 0.0;
  if (mode == RelaxMode::kFixedK) {
    const double k = k_or_lambda;
    if (!(k >= 1.0 && k <= static_cast<double>(n)))
      throw ConfigError("solve_relaxation: k must lie in [1, n]");
    trace_target = k;
  } else {
    lambda = k_or_lambda;
    g.diagonal().array() -= lambda;
  }

  // Feasible start: aI + bJ with row sums 1 (and trace k in fixed mode).
  MatrixXd x;
  if (trace_target) {
    const double k = *trace_target;
    const double b = n > 1 ? (n - k) / (static_cast<double>(n) * (n - 1)) : 0.0;
    const double a = k / n - b;
    x = a * MatrixXd::Identity(n, n) + b * MatrixXd::Ones(n, n);
  } else {
    x = MatrixXd::Ones(n, n) / static_cast<double>(n);
  }

  RelaxationSolution sol;
  const double step =
      config.step_scale / std::max(g.norm(), 1e-12);

  MatrixXd x_check = x;
  int iter = 0;
  bool stalled = false;
  for (; iter < config.max_outer; ++iter) {
    x = dykstra_intersection(x + step * g, trace_target, config.dykstra_iters,
                             &sol.flops);
    if ((iter + 1) % 16 == 0) {
      const double moved = (x - x_check).lpNorm<Eigen::Infinity>();
      x_check = x;
      if (moved <= config.stall_tol) {
        stalled = true;
        ++iter;
        break;
      }
    }
  }

  // Pure feasibility polish: Dykstra converges to the projection of the
  // current iterate onto the constraint intersection.
  x = dykstra_intersection(x, trace_target, config.polish_iters, &sol.flops);

  const Residuals res = residuals_of(x, trace_target);
  sol.x = std::move(x);
  sol.row_sum_residual = res.row_sum;
  sol.min_eigenvalue = res.min_eig;
  sol.min_entry = res.min_entry;
  sol.trace_error = res.trace_error;
  sol.iterations = iter;
  const double feas =
      std::max({res.row_sum, std::max(0.0, -res.min_eig),
                std::max(0.0, -res.min_entry), res.trace_error});
  sol.converged = stalled && feas <= config.feas_tol;
  sol.objective = (symmetrized(u).array() * sol.x.array()).sum() -
                  lambda * sol.x.trace();
  return sol;
}

int Partition::ground_set_size() const {
  int n = 0;
  for (const auto& g : groups) n += static_cast<int>(g.size());
  return n;
}

std::vector<int> Partition::labels() const {
  return labels_of(*this, ground_set_size());
}

void Partition::validate() const {
  if (groups.empty()) throw ConfigError("partition has no groups");
  for (const auto& g : groups)
    if (g.empty()) throw ConfigError("partition contains an empty group");
  labels_of(*this, ground_set_size());
}

nlohmann::json Partition::to_json() const {
  nlohmann::json j;
  j["groups"] = groups;
  return j;
}

Partition Partition::from_json(const nlohmann::json& j) {
  Partition p;
  p.groups = j.at("groups").get<std::vector<std::vector<int>>>();
  p.validate();
  return p;
}

double partition_density(const Eigen::MatrixXd& u, const Partition& p) {
  double density = 0.0;
  for (const auto& g : p.groups) {
    double block = 0.0;
    for (int a : g)
      for (int b : g) block += u(a, b);
    density += block / static_cast<double>(g.size());
  }
  return density;
}

Partition round_partition(const Eigen::MatrixXd& x, int k,
                          const Eigen::MatrixXd& u, std::uint64_t seed) {
  const int n = static_cast<int>(x.rows());
  if (k < 1 || k > n)
    throw ConfigError("round_partition: k must lie in [1, n]");

  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(symmetrized(x));
  const MatrixXd embedding = eig.eigenvectors().rightCols(k);  // n x k

  rng::Stream rng(seed);
  constexpr int kRestarts = 20;
  Partition best;
  double best_density = -std::numeric_limits<double>::infinity();

  std::vector<int> labels(n), order(n);
  for (int restart = 0; restart < kRestarts; ++restart) {
    // k distinct random rows as initial centroids.
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i < k; ++i)
      std::swap(order[i], order[i + rng.uniform_int(n - i)]);
    MatrixXd centroids(k, k);
    for (int c = 0; c < k; ++c) centroids.row(c) = embedding.row(order[c]);

    std::fill(labels.begin(), labels.end(), -1);
    for (int lloyd = 0; lloyd < 100; ++lloyd) {
      bool changed = false;
      for (int i = 0; i < n; ++i) {
        int arg = 0;
        double dist = (embedding.row(i) - centroids.row(0)).squaredNorm();
        for (int c = 1; c < k; ++c) {
          const double d2 = (embedding.row(i) - centroids.row(c)).squaredNorm();
          if (d2 < dist) {
            dist = d2;
            arg = c;
          }
        }
        if (labels[i] != arg) {
          labels[i] = arg;
          changed = true;
        }
      }
      // Repopulate empty clusters with the point farthest from its centroid.
      std::vector<int> sizes(k, 0);
      for (int i = 0; i < n; ++i) sizes[labels[i]] += 1;
      for (int c = 0; c < k; ++c) {
        if (sizes[c] > 0) continue;
        int worst = -1;
        double worst_dist = -1.0;
        for (int i = 0; i < n; ++i) {
          if (sizes[labels[i]] <= 1) continue;
          const double d2 =
              (embedding.row(i) - centroids.row(labels[i])).squaredNorm();
          if (d2 > worst_dist) {
            worst_dist = d2;
            worst = i;
          }
        }
        if (worst >= 0) {
          sizes[labels[worst]] -= 1;
          labels[worst] = c;
          sizes[c] = 1;
          changed = true;
        }
      }
      centroids.setZero();
      for (int i = 0; i < n; ++i) centroids.row(labels[i]) += embedding.row(i);
      for (int c = 0; c < k; ++c)
        if (sizes[c] > 0) centroids.row(c) /= static_cast<double>(sizes[c]);
      if (!changed) break;
    }

    Partition p = partition_from_labels(labels, k);
    const double density = partition_density(u, p);
    if (density > best_density) {
      best_density = density;
      best = std::move(p);
    }
  }

  // Split the largest group at its weakest member until k groups exist.
  while (best.k() < k) {
    std::size_t largest = 0;
    for (std::size_t g = 1; g < best.groups.size(); ++g)
      if (best.groups[g].size() > best.groups[largest].size()) largest = g;
    auto& group = best.groups[largest];
    if (group.size() < 2) break;
    int weakest = 0;
    double weakest_avg = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < group.size(); ++i) {
      double avg = 0.0;
      for (std::size_t j = 0; j < group.size(); ++j)
        if (i != j) avg += u(group[i], group[j]);
      avg /= static_cast<double>(group.size() - 1);
      if (avg < weakest_avg) {
        weakest_avg = avg;
        weakest = static_cast<int>(i);
      }
    }
    const int task = group[weakest];
    group.erase(group.begin() + weakest);
    best.groups.push_back({task});
    std::sort(best.groups.begin(), best.groups.end());
  }

  best.validate();
  return best;
}

int effective_rank(const Eigen::MatrixXd& x) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(symmetrized(x),
                                              Eigen::EigenvaluesOnly);
  return static_cast<int>((eig.eigenvalues().array() > 0.5).count());
}

double nmi(const Partition& a, const Partition& b) {
  a.validate();
  b.validate();
  const int n = a.ground_set_size();
  if (b.ground_set_size() != n)
    throw ConfigError("nmi: partitions cover different ground sets");
  const std::vector<int> la = labels_of(a, n);
  const std::vector<int> lb = labels_of(b, n);

  MatrixXd joint = MatrixXd::Zero(a.k(), b.k());
  for (int i = 0; i < n; ++i) joint(la[i], lb[i]) += 1.0;
  joint /= static_cast<double>(n);

  const VectorXd pa = joint.rowwise().sum();
  const VectorXd pb = joint.colwise().sum();
  auto entropy = [](const VectorXd& p) {
    double h = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i)
      if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
    return h;
  };
  const double ha = entropy(pa);
  const double hb = entropy(pb);
  if (ha == 0.0 && hb == 0.0) return 1.0;
  if (ha == 0.0 || hb == 0.0) return 0.0;

  double info = 0.0;
  for (Eigen::Index i = 0; i < joint.rows(); ++i)
    for (Eigen::Index j = 0; j < joint.cols(); ++j)
      if (joint(i, j) > 0.0)
        info += joint(i, j) * std::log(joint(i, j) / (pa[i] * pb[j]));
  return std::clamp(info / std::sqrt(ha * hb), 0.0, 1.0);
}

std::vector<int> representatives(const Partition& p, std::uint64_t seed) {
  p.validate();
  rng::Stream rng(seed);
  std::vector<int> out;
  out.reserve(p.groups.size());
  for (const auto& g : p.groups)
    out.push_back(g[rng.uniform_int(static_cast<int>(g.size()))]);
  return out;
}

int select_k(const Eigen::MatrixXd& u, int k_min, int k_max,
             const RelaxationConfig& config, std::uint64_t seed) {
  const int n = static_cast<int>(u.rows());
  k_max = std::min(k_max, n);
  if (k_min < 1 || k_min > k_max)
    throw ConfigError("select_k: invalid sweep range");

  std::vector<double> densities;
  for (int k = k_min; k <= k_max; ++k) {
    const RelaxationSolution sol =
        solve_relaxation(u, RelaxMode::kFixedK, k, config);
    const Partition p = round_partition(
        sol.x, k, u, rng::derive_seed(seed, {rng::tag("round"), (std::uint64_t)k}));
    densities.push_back(partition_density(u, p));
  }
  const double best = *std::max_element(densities.begin(), densities.end());
  const double threshold = best - 0.02 * std::abs(best);
  for (std::size_t i = 0; i < densities.size(); ++i)
    if (densities[i] >= threshold) return k_min + static_cast<int>(i);
  return k_max;
}

double relative_frobenius_error(const Eigen::MatrixXd& a,
                                const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("relative_frobenius_error: dimension mismatch");
  return (a - b).norm() / std::max(b.norm(), 1e-300);
}

double normalized_affinity_error(const Eigen::MatrixXd& a,
                                 const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("normalized_affinity_error: dimension mismatch");
  auto standardize = [](const MatrixXd& m) {
    MatrixXd c = m.array() - m.mean();
    const double norm = c.norm();
    if (norm > 1e-300) c /= norm;
    return c;
  };
  return (standardize(a) - standardize(b)).norm();
}

void write_matrix_csv(const std::string& path, const Eigen::MatrixXd& m) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open CSV for writing: " + path);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    if (j) out << ',';
    out << j;
  }
  out << '\n';
  char buf[64];
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m(i, j));
      if (j) out << ',';
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw ConfigError("failed writing CSV: " + path);
}

Eigen::MatrixXd read_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open CSV: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("empty CSV: " + path);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ConfigError("CSV has no data rows: " + path);
  MatrixXd m(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size())
      throw ConfigError("ragged CSV: " + path);
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          rows[i][j];
  }
  return m;
}

}  // namespace gradex::affinity
