#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gradex/random.hpp"

namespace gradex::net {

// Feed-forward network over a flat parameter vector. Hidden layers use tanh;
// the head is either raw linear outputs (value net) or logits feeding a
// log-softmax categorical distribution (policy net).
//
// Flat layout, per layer l with widths (w_l, w_{l+1}):
//   [ weight matrix W_l, column-major, w_l x w_{l+1} ][ bias b_l, w_{l+1} ]
// so the parameter count is sum over layers of (fan_in + 1) * fan_out.
class Mlp {
 public:
  enum class Head { kCategorical, kLinear };

  Mlp(std::vector<int> widths, Head head);

  int param_count() const { return param_count_; }
  int input_dim() const { return widths_.front(); }
  int output_dim() const { return widths_.back(); }
  const std::vector<int>& widths() const { return widths_; }
  Head head() const { return head_; }

  // Seeded uniform init in [-a, a], a = sqrt(6 / (fan_in + fan_out)) per
  // layer; biases start at zero.
  Eigen::VectorXd init_params(std::uint64_t seed) const;

  // Batched forward. X has one sample per row. Returns raw outputs
  // (logits or values) and fills `cache` for a later backward pass.
  struct Cache {
    std::vector<Eigen::MatrixXd> activations;  // input + post-tanh per layer
  };
  Eigen::MatrixXd forward(const Eigen::VectorXd& theta,
                          const Eigen::MatrixXd& X, Cache* cache) const;

  // Gradient of sum_i <d_out_i, raw_output_i> w.r.t. theta (summed over the
  // batch). `d_out` has one row per sample.
  Eigen::VectorXd backward(const Eigen::VectorXd& theta, const Cache& cache,
                           const Eigen::MatrixXd& d_out) const;

  // Single-sample conveniences.
  Eigen::VectorXd logits(const Eigen::VectorXd& theta,
                         const Eigen::VectorXd& x) const;
  double value(const Eigen::VectorXd& theta, const Eigen::VectorXd& x) const;
  Eigen::VectorXd value_batch(const Eigen::VectorXd& theta,
                              const Eigen::MatrixXd& X) const;

  // log pi(a|x) for the categorical head.
  double log_prob(const Eigen::VectorXd& theta, const Eigen::VectorXd& x,
                  int action) const;
  Eigen::VectorXd log_prob_all(const Eigen::VectorXd& theta,
                               const Eigen::VectorXd& x) const;

  // Draws action ~ softmax(logits) and returns (action, log pi(action|x)).
  std::pair<int, double> sample_action(const Eigen::VectorXd& theta,
                                       const Eigen::VectorXd& x,
                                       rng::Stream& rng) const;

  // d log pi(a|x) / d theta, exact reverse-mode.
  Eigen::VectorXd grad_log_prob(const Eigen::VectorXd& theta,
                                const Eigen::VectorXd& x, int action) const;

  // Multiply-add count of one forward pass per sample; the flop convention
  // used throughout is flops(forward) = 2 * mults, flops(backward) =
  // 2 * flops(forward).
  std::uint64_t forward_mults() const { return forward_mults_; }
  std::uint64_t forward_flops() const { return 2 * forward_mults_; }
  std::uint64_t backward_flops() const { return 4 * forward_mults_; }
  std::uint64_t grad_flops() const { return 6 * forward_mults_; }

 private:
  void check_input(const Eigen::MatrixXd& X) const;

  std::vector<int> widths_;
  Head head_;
  int param_count_ = 0;
  std::uint64_t forward_mults_ = 0;
};

Eigen::VectorXd log_softmax(const Eigen::VectorXd& z);
Eigen::VectorXd softmax(const Eigen::VectorXd& z);

// Differentiable batch loss: value and exact gradient at arbitrary theta.
// grad_flops is the flop cost of one grad() call, used by trace estimators.
struct BatchLoss {
  std::function<double(const Eigen::VectorXd&)> loss;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> grad;
  int dim = 0;
  std::uint64_t grad_flops = 0;
};

// Symmetric-difference Hessian-vector product
//   (grad L(theta + s v) - grad L(theta - s v)) / (2 s).
// When step <= 0 the scale-invariant default
//   s = 1e-3 * (1 + ||theta||_inf) / max(||v||_2, 1e-12)
// is used. Throws NumericError naming the first non-finite coordinate.
Eigen::VectorXd hvp(const BatchLoss& ctx, const Eigen::VectorXd& theta,
                    const Eigen::VectorXd& v, double step = 0.0);

// Parameter checkpoint: magic "GXP1", u32 layer count, u32 widths, f64
// entries in layer order, little-endian.
void save_checkpoint(const std::string& path, const std::vector<int>& widths,
                     const Eigen::VectorXd& theta);
std::pair<std::vector<int>, Eigen::VectorXd> load_checkpoint(
    const std::string& path);

// FNV-1a over the little-endian bytes of theta; identifies the meta-policy
// every downstream artifact was derived from.
std::uint64_t param_checksum(const Eigen::VectorXd& theta);

}  // namespace gradex::net
