#include "gradex/net.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "gradex/errors.hpp"

namespace gradex::net {

namespace {

using Eigen::Map;
using Eigen::MatrixXd;
using Eigen::VectorXd;

bool is_little_endian() {
  const std::uint16_t probe = 1;
  std::uint8_t byte;
  std::memcpy(&byte, &probe, 1);
  return byte == 1;
}

}  // namespace

Mlp::Mlp(std::vector<int> widths, Head head)
    : widths_(std::move(widths)), head_(head) {
  if (widths_.size() < 2) throw ShapeError("Mlp needs at least two layers");
  for (int w : widths_)
    if (w < 1) throw ShapeError("Mlp layer widths must be positive");
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    param_count_ += (widths_[l] + 1) * widths_[l + 1];
    forward_mults_ += static_cast<std::uint64_t>(widths_[l]) * widths_[l + 1];
  }
}

VectorXd Mlp::init_params(std::uint64_t seed) const {
  rng::Stream stream(seed);
  VectorXd theta(param_count_);
  int off = 0;
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    const int fan_in = widths_[l];
    const int fan_out = widths_[l + 1];
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (int i = 0; i < fan_in * fan_out; ++i)
      theta[off + i] = stream.uniform(-a, a);
    off += fan_in * fan_out;
    theta.segment(off, fan_out).setZero();
    off += fan_out;
  }
  return theta;
}

void Mlp::check_input(const MatrixXd& X) const {
  if (X.cols() != input_dim())
    throw ShapeError("input has " + std::to_string(X.cols()) +
                     " features, network expects " +
                     std::to_string(input_dim()));
}

MatrixXd Mlp::forward(const VectorXd& theta, const MatrixXd& X,
                      Cache* cache) const {
  if (theta.size() != param_count_)
    throw ShapeError("theta size mismatch: " + std::to_string(theta.size()) +
                     " vs " + std::to_string(param_count_));
  check_input(X);
  const std::size_t n_layers = widths_.size() - 1;
  if (cache) {
    cache->activations.clear();
    cache->activations.reserve(n_layers + 1);
    cache->activations.push_back(X);
  }
  MatrixXd a = X;
  int off = 0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const int fan_in = widths_[l];
    const int fan_out = widths_[l + 1];
    Map<const MatrixXd> W(theta.data() + off, fan_in, fan_out);
    off += fan_in * fan_out;
    Map<const VectorXd> b(theta.data() + off, fan_out);
    off += fan_out;
    MatrixXd z = (a * W).rowwise() + b.transpose();
    if (l + 1 < n_layers) z = z.array().tanh();
    a = std::move(z);
    if (cache) cache->activations.push_back(a);
  }
  return a;
}

VectorXd Mlp::backward(const VectorXd& theta, const Cache& cache,
                       const MatrixXd& d_out) const {
  const std::size_t n_layers = widths_.size() - 1;
  if (cache.activations.size() != n_layers + 1)
    throw ShapeError("backward: cache does not match network depth");
  VectorXd grad = VectorXd::Zero(param_count_);

  // Parameter offsets of each layer.
  std::vector<int> offsets(n_layers);
  int off = 0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    offsets[l] = off;
    off += (widths_[l] + 1) * widths_[l + 1];
  }

  MatrixXd dz = d_out;
  for (std::size_t li = n_layers; li-- > 0;) {
    const int fan_in = widths_[li];
    const int fan_out = widths_[li + 1];
    const MatrixXd& a_prev = cache.activations[li];
    Map<MatrixXd> dW(grad.data() + offsets[li], fan_in, fan_out);
    Map<VectorXd> db(grad.data() + offsets[li] + fan_in * fan_out, fan_out);
    dW = a_prev.transpose() * dz;
    db = dz.colwise().sum();
    if (li > 0) {
      Map<const MatrixXd> W(theta.data() + offsets[li], fan_in, fan_out);
      MatrixXd da = dz * W.transpose();
      // a_prev is post-tanh, so tanh' = 1 - a^2.
      dz = da.array() * (1.0 - a_prev.array().square());
    }
  }
  return grad;
}

VectorXd Mlp::logits(const VectorXd& theta, const VectorXd& x) const {
  return forward(theta, x.transpose(), nullptr).row(0);
}

double Mlp::value(const VectorXd& theta, const VectorXd& x) const {
  if (head_ != Head::kLinear || output_dim() != 1)
    throw ShapeError("value() requires a scalar linear head");
  return forward(theta, x.transpose(), nullptr)(0, 0);
}

VectorXd Mlp::value_batch(const VectorXd& theta, const MatrixXd& X) const {
  if (head_ != Head::kLinear || output_dim() != 1)
    throw ShapeError("value_batch() requires a scalar linear head");
  return forward(theta, X, nullptr).col(0);
}

VectorXd log_softmax(const VectorXd& z) {
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  return z.array() - lse;
}

VectorXd softmax(const VectorXd& z) {
  return log_softmax(z).array().exp();
}

VectorXd Mlp::log_prob_all(const VectorXd& theta, const VectorXd& x) const {
  if (head_ != Head::kCategorical)
    throw ShapeError("log_prob_all() requires a categorical head");
  return log_softmax(logits(theta, x));
}

double Mlp::log_prob(const VectorXd& theta, const VectorXd& x,
                     int action) const {
  if (action < 0 || action >= output_dim())
    throw ShapeError("action " + std::to_string(action) + " out of range [0," +
                     std::to_string(output_dim()) + ")");
  return log_prob_all(theta, x)[action];
}

std::pair<int, double> Mlp::sample_action(const VectorXd& theta,
                                          const VectorXd& x,
                                          rng::Stream& rng) const {
  const VectorXd logp = log_prob_all(theta, x);
  const VectorXd p = logp.array().exp();
  const double u = rng.uniform();
  double acc = 0.0;
  int action = output_dim() - 1;
  for (int a = 0; a < output_dim(); ++a) {
    acc += p[a];
    if (u < acc) {
      action = a;
      break;
    }
  }
  return {action, logp[action]};
}

VectorXd Mlp::grad_log_prob(const VectorXd& theta, const VectorXd& x,
                            int action) const {
  if (action < 0 || action >= output_dim())
    throw ShapeError("action " + std::to_string(action) + " out of range [0," +
                     std::to_string(output_dim()) + ")");
  Cache cache;
  const MatrixXd out = forward(theta, x.transpose(), &cache);
  const VectorXd p = softmax(out.row(0));
  Eigen::RowVectorXd d_logits = -p.transpose();
  d_logits[action] += 1.0;
  return backward(theta, cache, d_logits);
}

VectorXd hvp(const BatchLoss& ctx, const VectorXd& theta, const VectorXd& v,
             double step) {
  if (v.size() != theta.size())
    throw ShapeError("hvp: v and theta dimensions differ");
  if (v.lpNorm<Eigen::Infinity>() == 0.0) return VectorXd::Zero(theta.size());
  double s = step;
  if (s <= 0.0) {
    const double vnorm = std::max(v.norm(), 1e-12);
    s = 1e-3 * (1.0 + theta.lpNorm<Eigen::Infinity>()) / vnorm;
  }
  const VectorXd gp = ctx.grad(theta + s * v);
  const VectorXd gm = ctx.grad(theta - s * v);
  VectorXd h = (gp - gm) / (2.0 * s);
  for (Eigen::Index i = 0; i < h.size(); ++i)
    if (!std::isfinite(h[i]))
      throw NumericError("hvp: non-finite result at coordinate " +
                         std::to_string(i));
  return h;
}

void save_checkpoint(const std::string& path, const std::vector<int>& widths,
                     const VectorXd& theta) {
  if (!is_little_endian())
    throw NumericError("checkpoint format requires a little-endian host");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open checkpoint for writing: " + path);
  out.write("GXP1", 4);
  const std::uint32_t count = static_cast<std::uint32_t>(widths.size());
  out.write(reinterpret_cast<const char*>(&count), 4);
  for (int w : widths) {
    const std::uint32_t w32 = static_cast<std::uint32_t>(w);
    out.write(reinterpret_cast<const char*>(&w32), 4);
  }
  out.write(reinterpret_cast<const char*>(theta.data()),
            static_cast<std::streamsize>(theta.size() * sizeof(double)));
  if (!out) throw ConfigError("failed writing checkpoint: " + path);
}

std::pair<std::vector<int>, VectorXd> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "GXP1", 4) != 0)
    throw ConfigError("not a parameter checkpoint: " + path);
  std::uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 4);
  if (!in || count < 2 || count > 1024)
    throw ConfigError("corrupt checkpoint header: " + path);
  std::vector<int> widths(count);
  std::uint64_t p = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t w = 0;
    in.read(reinterpret_cast<char*>(&w), 4);
    widths[i] = static_cast<int>(w);
  }
  for (std::uint32_t i = 0; i + 1 < count; ++i)
    p += static_cast<std::uint64_t>(widths[i] + 1) * widths[i + 1];
  VectorXd theta(static_cast<Eigen::Index>(p));
  in.read(reinterpret_cast<char*>(theta.data()),
          static_cast<std::streamsize>(p * sizeof(double)));
  if (!in) throw ConfigError("truncated checkpoint: " + path);
  return {widths, theta};
}

std::uint64_t param_checksum(const VectorXd& theta) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(theta.data());
  const std::size_t n = theta.size() * sizeof(double);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace gradex::net
