#include "gradex/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "gradex/errors.hpp"

namespace gradex::surrogate {

namespace {

using Eigen::ArrayXd;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXf;

// log(1 + exp(-z)) without overflow.
double softplus_neg(double z) {
  return z > 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

void check_subset(const GradientStore& store, const std::vector<int>& subset) {
  if (subset.empty()) throw ConfigError("subset must be non-empty");
  std::set<int> seen;
  for (int t : subset) {
    if (t < 0 || t >= static_cast<int>(store.n_tasks))
      throw ConfigError("subset task " + std::to_string(t) +
                        " outside store range [0," +
                        std::to_string(store.n_tasks) + ")");
    if (!seen.insert(t).second)
      throw ConfigError("subset contains duplicate task " + std::to_string(t));
  }
}

struct SubsetData {
  MatrixXd x;   // |D| x d
  ArrayXd y;    // +-1
  ArrayXd w;    // >= 0
};

SubsetData gather(const GradientStore& store, const std::vector<int>& subset) {
  check_subset(store, subset);
  std::vector<std::size_t> rows;
  const std::set<int> wanted(subset.begin(), subset.end());
  for (std::size_t i = 0; i < store.records.size(); ++i)
    if (wanted.count(static_cast<int>(store.records[i].task_id)))
      rows.push_back(i);
  if (rows.empty())
    throw ConfigError("subset has no records in the store");
  SubsetData data;
  data.x.resize(static_cast<Eigen::Index>(rows.size()), store.d);
  data.y.resize(static_cast<Eigen::Index>(rows.size()));
  data.w.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const FeatureRecord& r = store.records[rows[i]];
    data.x.row(static_cast<Eigen::Index>(i)) =
        r.features.cast<double>().transpose();
    data.y[static_cast<Eigen::Index>(i)] = static_cast<double>(r.label);
    data.w[static_cast<Eigen::Index>(i)] = static_cast<double>(r.weight);
  }
  return data;
}

double loss_at(const SubsetData& data, const VectorXd& delta, double ridge) {
  const ArrayXd margins = (data.x * delta).array() * data.y;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < margins.size(); ++i)
    acc += data.w[i] * softplus_neg(margins[i]);
  return acc / static_cast<double>(margins.size()) + ridge * delta.squaredNorm();
}

VectorXd grad_at(const SubsetData& data, const VectorXd& delta, double ridge) {
  const Eigen::Index n = data.x.rows();
  const ArrayXd margins = (data.x * delta).array() * data.y;
  // d/dz softplus(-z) = -sigma(-z)
  const ArrayXd sig_neg = 1.0 / (1.0 + margins.exp());
  const ArrayXd coeff = -(data.w * sig_neg * data.y) / static_cast<double>(n);
  return data.x.transpose() * coeff.matrix() + 2.0 * ridge * delta;
}

}  // namespace

ProjectionMatrix ProjectionMatrix::make(int p, int d, std::uint64_t seed) {
  if (d < 1 || d > p)
    throw ConfigError("projection needs 1 <= d <= p, got d=" +
                      std::to_string(d) + " p=" + std::to_string(p));
  ProjectionMatrix pm;
  pm.p_ = p;
  pm.d_ = d;
  pm.seed_ = seed;
  pm.entries_.resize(p, d);
  rng::Stream stream(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  // Column-major fill order; regeneration is bit-identical by construction.
  for (int j = 0; j < d; ++j)
    for (int i = 0; i < p; ++i) pm.entries_(i, j) = scale * stream.gaussian();
  return pm;
}

VectorXd ProjectionMatrix::project(const VectorXd& g) const {
  if (g.size() != p_)
    throw ShapeError("projection expects gradients of length " +
                     std::to_string(p_));
  return entries_.transpose() * g;
}

void GradientStore::validate() const {
  if (n_tasks < 1) throw ConfigError("store has no tasks");
  std::vector<int> counts(n_tasks, 0);
  for (const auto& r : records) {
    if (r.task_id >= n_tasks)
      throw ConfigError("store record with task_id out of range");
    if (r.features.size() != static_cast<Eigen::Index>(d))
      throw ConfigError("store record feature length mismatch");
    if (r.label != 1 && r.label != -1)
      throw ConfigError("store record label must be +-1");
    if (!(r.weight >= 0.0f) || !std::isfinite(r.weight))
      throw ConfigError("store record weight must be finite and >= 0");
    counts[r.task_id] += 1;
  }
  for (std::uint32_t t = 0; t < n_tasks; ++t)
    if (counts[t] == 0)
      throw ConfigError("store has no records for task " + std::to_string(t));
}

std::vector<std::size_t> GradientStore::task_record_indices(
    int task_id) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (static_cast<int>(records[i].task_id) == task_id) idx.push_back(i);
  return idx;
}

void GradientStore::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open store for writing: " + path);
  out.write("GXS1", 4);
  out.write(reinterpret_cast<const char*>(&p), 4);
  out.write(reinterpret_cast<const char*>(&d), 4);
  out.write(reinterpret_cast<const char*>(&n_tasks), 4);
  out.write(reinterpret_cast<const char*>(&projection_seed), 8);
  out.write(reinterpret_cast<const char*>(&theta_checksum), 8);
  for (const auto& r : records) {
    out.write(reinterpret_cast<const char*>(&r.task_id), 4);
    out.write(reinterpret_cast<const char*>(&r.label), 1);
    out.write(reinterpret_cast<const char*>(&r.weight), 4);
    out.write(reinterpret_cast<const char*>(r.features.data()),
              static_cast<std::streamsize>(sizeof(float) * d));
  }
  if (!out) throw ConfigError("failed writing store: " + path);
}

GradientStore GradientStore::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open store: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "GXS1", 4) != 0)
    throw ConfigError("not a gradient store: " + path);
  GradientStore store;
  in.read(reinterpret_cast<char*>(&store.p), 4);
  in.read(reinterpret_cast<char*>(&store.d), 4);
  in.read(reinterpret_cast<char*>(&store.n_tasks), 4);
  in.read(reinterpret_cast<char*>(&store.projection_seed), 8);
  in.read(reinterpret_cast<char*>(&store.theta_checksum), 8);
  if (!in || store.d == 0 || store.d > store.p)
    throw ConfigError("corrupt store header: " + path);
  while (true) {
    FeatureRecord r;
    in.read(reinterpret_cast<char*>(&r.task_id), 4);
    if (in.eof()) break;
    in.read(reinterpret_cast<char*>(&r.label), 1);
    in.read(reinterpret_cast<char*>(&r.weight), 4);
    r.features.resize(store.d);
    in.read(reinterpret_cast<char*>(r.features.data()),
            static_cast<std::streamsize>(sizeof(float) * store.d));
    if (!in) throw ConfigError("truncated store record: " + path);
    store.records.push_back(std::move(r));
  }
  store.dropped_per_task.assign(store.n_tasks, 0);
  store.validate();
  return store;
}

GradientStore extract_features(const net::Mlp& policy_net,
                               const VectorXd& theta_star,
                               const net::Mlp& value_net,
                               const VectorXd& value_params,
                               const envs::TaskSuite& suite,
                               const ProjectionMatrix& projection,
                               const ExtractOptions& options,
                               std::uint64_t seed,
                               train::FlopCounter* flops) {
  if (theta_star.size() != projection.p())
    throw ConfigError("extract_features: theta dimension " +
                      std::to_string(theta_star.size()) +
                      " does not match projection p=" +
                      std::to_string(projection.p()));

  GradientStore store;
  store.p = static_cast<std::uint32_t>(projection.p());
  store.d = static_cast<std::uint32_t>(projection.d());
  store.n_tasks = static_cast<std::uint32_t>(suite.n_tasks());
  store.projection_seed = projection.seed();
  store.theta_checksum = net::param_checksum(theta_star);
  store.dropped_per_task.assign(suite.n_tasks(), 0);

  std::vector<VectorXd> debug_rows;
  std::vector<VectorXd> debug_proj_rows;

  for (int task = 0; task < suite.n_tasks(); ++task) {
    rng::Stream task_rng(rng::derive_seed(
        seed, {rng::tag("extract"), static_cast<std::uint64_t>(task)}));
    train::RolloutBatch batch = train::collect_rollouts(
        policy_net, theta_star, value_net, value_params, suite, task,
        options.steps_per_task, suite.gamma(), options.gae_lambda, task_rng,
        flops);

    // Project gradients in blocks so the sketch multiply runs as a GEMM.
    const int block = 256;
    const Eigen::Index n = static_cast<Eigen::Index>(batch.records.size());
    for (Eigen::Index start = 0; start < n; start += block) {
      const Eigen::Index b = std::min<Eigen::Index>(block, n - start);
      MatrixXd grads(b, projection.p());
      for (Eigen::Index i = 0; i < b; ++i) {
        const auto& rec = batch.records[start + i];
        grads.row(i) =
            policy_net.grad_log_prob(theta_star, rec.state, rec.action)
                .transpose();
      }
      const MatrixXd projected = grads * projection.matrix();  // b x d
      if (flops)
        flops->add(static_cast<std::uint64_t>(b) *
                   (policy_net.grad_flops() +
                    2ull * projection.p() * projection.d()));
      for (Eigen::Index i = 0; i < b; ++i) {
        const auto& rec = batch.records[start + i];
        double adv = rec.advantage;
        if (adv == 0.0) {
          store.dropped_per_task[task] += 1;
          continue;
        }
        double weight = std::abs(adv);
        if (options.weight_clip > 0.0)
          weight = std::min(weight, options.weight_clip);
        FeatureRecord fr;
        fr.task_id = static_cast<std::uint32_t>(task);
        fr.label = adv > 0.0 ? 1 : -1;
        fr.weight = static_cast<float>(weight);
        fr.features = projected.row(i).cast<float>();
        store.records.push_back(std::move(fr));
        if (options.debug_keep_full) {
          debug_rows.push_back(grads.row(i));
          debug_proj_rows.push_back(projected.row(i));
        }
      }
    }
  }

  if (options.debug_keep_full) {
    store.debug_full_gradients.resize(
        static_cast<Eigen::Index>(debug_rows.size()), projection.p());
    store.debug_projected.resize(
        static_cast<Eigen::Index>(debug_proj_rows.size()), projection.d());
    for (std::size_t i = 0; i < debug_rows.size(); ++i) {
      store.debug_full_gradients.row(static_cast<Eigen::Index>(i)) =
          debug_rows[i].transpose();
      store.debug_projected.row(static_cast<Eigen::Index>(i)) =
          debug_proj_rows[i].transpose();
    }
  }

  store.validate();
  return store;
}

double subset_loss(const GradientStore& store, const std::vector<int>& subset,
                   const VectorXd& delta, double ridge) {
  return loss_at(gather(store, subset), delta, ridge);
}

VectorXd subset_loss_gradient(const GradientStore& store,
                              const std::vector<int>& subset,
                              const VectorXd& delta, double ridge) {
  return grad_at(gather(store, subset), delta, ridge);
}

SubsetScore fit_surrogate(const GradientStore& store,
                          const std::vector<int>& subset,
                          const SurrogateConfig& config) {
  const SubsetData data = gather(store, subset);
  const Eigen::Index n = data.x.rows();
  const int d = static_cast<int>(store.d);

  SubsetScore out;
  out.subset = subset;
  std::sort(out.subset.begin(), out.subset.end());

  VectorXd delta = VectorXd::Zero(d);
  double loss = loss_at(data, delta, config.ridge);
  std::uint64_t flops = 0;
  const std::uint64_t nd = static_cast<std::uint64_t>(n) * d;

  VectorXd best_delta = delta;
  double best_loss = loss;
  bool converged = false;
  int iter = 0;

  for (; iter < config.max_iter; ++iter) {
    const ArrayXd margins = (data.x * delta).array() * data.y;
    const ArrayXd sig_neg = 1.0 / (1.0 + margins.exp());
    const ArrayXd coeff =
        -(data.w * sig_neg * data.y) / static_cast<double>(n);
    VectorXd grad = data.x.transpose() * coeff.matrix() +
                    2.0 * config.ridge * delta;
    flops += 6 * nd;

    if (grad.lpNorm<Eigen::Infinity>() <= config.tol) {
      converged = true;
      break;
    }

    // Newton direction from X^T diag(s) X + 2 mu I.
    const ArrayXd s =
        (data.w * sig_neg * (1.0 - sig_neg)) / static_cast<double>(n);
    const MatrixXd weighted = data.x.array().colwise() * s;
    MatrixXd hess = data.x.transpose() * weighted;
    hess.diagonal().array() += 2.0 * config.ridge;
    flops += 2 * nd * static_cast<std::uint64_t>(d) +
             (2ull * d * d * d) / 3;

    VectorXd step;
    Eigen::LLT<MatrixXd> llt(hess);
    if (llt.info() == Eigen::Success) {
      step = llt.solve(-grad);
    } else {
      // Singular system: steepest descent, scaled to a unit-ish step.
      step = -grad / std::max(grad.norm(), 1e-12);
    }

    // Backtracking line search (Armijo).
    const double slope = grad.dot(step);
    double t = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls) {
      const VectorXd candidate = delta + t * step;
      const double cand_loss = loss_at(data, candidate, config.ridge);
      flops += 2 * nd;
      if (cand_loss <= loss + 1e-4 * t * slope) {
        delta = candidate;
        loss = cand_loss;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;  // no further progress representable
    if (loss < best_loss) {
      best_loss = loss;
      best_delta = delta;
    }
  }

  if (converged && loss <= best_loss) {
    best_loss = loss;
    best_delta = delta;
  }
  out.delta_theta_d = best_delta;
  out.loss = best_loss;
  out.score = -best_loss;
  out.converged = converged;
  out.newton_iters = iter;
  out.flops = flops;
  return out;
}

EstimateResult estimate_subsets(const GradientStore& store,
                                const std::vector<std::vector<int>>& subsets,
                                const SurrogateConfig& config) {
  EstimateResult out;
  out.scores.reserve(subsets.size());
  for (std::size_t i = 0; i < subsets.size(); ++i) {
    try {
      SubsetScore score = fit_surrogate(store, subsets[i], config);
      out.flops += score.flops;
      out.scores.push_back(std::move(score));
    } catch (const std::exception& e) {
      out.errors.push_back("subset " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

nlohmann::json scores_to_json(const std::vector<SubsetScore>& scores,
                              std::uint64_t theta_checksum) {
  nlohmann::json arr = nlohmann::json::array();
  char checksum[32];
  std::snprintf(checksum, sizeof(checksum), "%016llx",
                static_cast<unsigned long long>(theta_checksum));
  for (const auto& s : scores) {
    nlohmann::json j;
    j["subset"] = s.subset;
    j["score"] = s.score;
    j["loss"] = s.loss;
    j["converged"] = s.converged;
    j["theta_checksum"] = checksum;
    arr.push_back(std::move(j));
  }
  return arr;
}

std::pair<std::vector<SubsetScore>, std::uint64_t> scores_from_json(
    const nlohmann::json& j) {
  std::vector<SubsetScore> scores;
  std::uint64_t checksum = 0;
  for (const auto& item : j) {
    SubsetScore s;
    s.subset = item.at("subset").get<std::vector<int>>();
    s.score = item.at("score").get<double>();
    s.loss = item.contains("loss") ? item.at("loss").get<double>() : -s.score;
    s.converged = item.at("converged").get<bool>();
    if (item.contains("theta_checksum"))
      checksum = std::stoull(item.at("theta_checksum").get<std::string>(),
                             nullptr, 16);
    scores.push_back(std::move(s));
  }
  return {scores, checksum};
}

}  // namespace gradex::surrogate
