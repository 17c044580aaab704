#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace gradex::affinity {

// m uniform size-alpha subsets of {0..n-1}, without replacement inside each
// subset (returned sorted), duplicates across the list allowed.
std::vector<std::vector<int>> sample_subsets(int n, int m, int alpha,
                                             std::uint64_t seed);

struct AffinityMatrix {
  Eigen::MatrixXd values;                        // U, symmetric
  Eigen::MatrixXi counts;                        // n_ij co-occurrence
  std::vector<std::vector<std::uint8_t>> missing;  // n_ij == 0, imputed
  int n = 0;

  bool any_missing() const;
};

// U_ij = mean score over subsets containing both i and j (diagonal: subsets
// containing i). Pairs never sampled together are imputed with the global
// mean score and flagged missing.
AffinityMatrix build_affinity(
    const std::vector<std::pair<std::vector<int>, double>>& scored_subsets,
    int n);

enum class RelaxMode { kFixedK, kAutoLambda };

struct RelaxationConfig {
  int max_outer = 4000;
  int dykstra_iters = 60;       // projection sweeps per ascent step
  int polish_iters = 4000;      // final feasibility polish sweeps
  double feas_tol = 1e-6;
  double step_scale = 1.0;      // ascent step = step_scale / ||G||_F
  double stall_tol = 1e-9;      // stop when iterates stop moving
};

struct RelaxationSolution {
  Eigen::MatrixXd x;
  double objective = 0.0;
  double row_sum_residual = 0.0;  // ||Xe - e||_inf
  double min_eigenvalue = 0.0;
  double min_entry = 0.0;
  double trace_error = 0.0;       // |tr X - k| (fixed-k mode only)
  bool converged = false;
  int iterations = 0;
  std::uint64_t flops = 0;
};

// Maximizes <U, X> - lambda tr X over {Xe = e, X psd, X >= 0}, with tr X = k
// added in fixed-k mode (where the trace penalty is constant and lambda is
// ignored). Projected ascent with Dykstra projections onto the constraint
// intersection.
RelaxationSolution solve_relaxation(const Eigen::MatrixXd& u, RelaxMode mode,
                                    double k_or_lambda,
                                    const RelaxationConfig& config = {});

// Exposed for unit tests: exact projections used by the splitting solver.
Eigen::MatrixXd project_affine(const Eigen::MatrixXd& y,
                               std::optional<double> trace_target);
Eigen::MatrixXd project_psd(const Eigen::MatrixXd& y);

struct Partition {
  std::vector<std::vector<int>> groups;  // disjoint, covering, none empty

  int k() const { return static_cast<int>(groups.size()); }
  int ground_set_size() const;
  std::vector<int> labels() const;  // task id -> group index
  void validate() const;

  nlohmann::json to_json() const;  // {"groups": [[...], ...]}
  static Partition from_json(const nlohmann::json& j);
};

// Intra-cluster affinity density sum_g (1_g^T U 1_g) / |g|.
double partition_density(const Eigen::MatrixXd& u, const Partition& p);

// Spectral rounding: top-k eigenvectors of sym(X), seeded k-means over the
// rows (20 restarts), best restart by partition_density; empty groups are
// repaired by splitting the largest group at its weakest member.
Partition round_partition(const Eigen::MatrixXd& x, int k,
                          const Eigen::MatrixXd& u, std::uint64_t seed);

// Effective cluster count of a relaxation solution: eigenvalues > 1/2.
int effective_rank(const Eigen::MatrixXd& x);

// NMI with natural logs, I(a;b)/sqrt(H(a) H(b)); 1 when both partitions are
// trivial, 0 when exactly one side has zero entropy.
double nmi(const Partition& a, const Partition& b);

// One uniformly chosen representative per group.
std::vector<int> representatives(const Partition& p, std::uint64_t seed);

// Smallest k in [k_min, k_max] whose rounded-partition density comes within
// 2% of the best over the sweep.
int select_k(const Eigen::MatrixXd& u, int k_min, int k_max,
             const RelaxationConfig& config, std::uint64_t seed);

// Plain relative Frobenius error ||a - b||_F / ||b||_F.
double relative_frobenius_error(const Eigen::MatrixXd& a,
                                const Eigen::MatrixXd& b);

// Scale-free pattern error: both matrices are standardized (entry mean
// removed, Frobenius norm 1) before the relative error is computed, so
// affinities measured in different units (surrogate scores vs rewards)
// compare by structure.
double normalized_affinity_error(const Eigen::MatrixXd& a,
                                 const Eigen::MatrixXd& b);

// CSV: header row of task ids, then n rows of n comma-separated reals
// printed with 17 significant digits.
void write_matrix_csv(const std::string& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix_csv(const std::string& path);

}  // namespace gradex::affinity
