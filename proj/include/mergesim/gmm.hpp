#pragma once

#include "mergesim/random.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace mergesim {

struct EmDegenerate : std::runtime_error {
  explicit EmDegenerate(const std::string& what) : std::runtime_error(what) {}
};

/// Weighted 1D Gaussian mixture, the result of conditioning a joint model on
/// its input dimensions.
struct Mixture1d {
  Eigen::VectorXd weights;
  Eigen::VectorXd means;
  Eigen::VectorXd variances;

  double mean() const { return weights.dot(means); }

  double variance() const {
    const double m = mean();
    double v = 0.0;
    for (int k = 0; k < weights.size(); ++k) {
      v += weights[k] * (variances[k] + (means[k] - m) * (means[k] - m));
    }
    return v;
  }

  double weight_sum() const { return weights.sum(); }
};

/// Gaussian mixture over a joint (input..., output) space, trained by EM and
/// used in regression mode: conditioning on the inputs yields a 1D mixture
/// over the output (the last dimension). Parameters are kept in a per-dim
/// standardized space; conditioning maps back to raw units.
struct Gmm {
  enum class Output { kLateral, kLongitudinal };

  struct Component {
    double weight = 0.0;
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
  };

  Output output_kind = Output::kLateral;
  Eigen::VectorXd dim_mean;
  Eigen::VectorXd dim_std;
  std::vector<Component> components;
  std::vector<double> train_ll_history; // mean log-likelihood per EM iteration

  int dim() const { return static_cast<int>(dim_mean.size()); }
  int input_dim() const { return dim() - 1; }

  struct ConditionCache {
    Eigen::MatrixXd chol_input; // lower factor of the input block
    Eigen::VectorXd regress;    // Sigma_ii^{-1} Sigma_io
    double cond_var = 0.0;
    double log_norm = 0.0; // -d/2 log 2pi - sum log L_jj for the input block
  };
  std::vector<ConditionCache> cache;

  /// Builds the conditioning caches; call after training or loading. Joint
  /// covariances can be singular when input dimensions are collinear (e.g.
  /// one-hot pairs constant within an expert's samples); the cache factors a
  /// minimally ridged copy in that case, leaving the stored parameters
  /// untouched.
  void finalize() {
    const int d_in = input_dim();
    cache.clear();
    cache.reserve(components.size());
    for (const Component& c : components) {
      ConditionCache cc;
      const Eigen::MatrixXd sigma_ii = c.cov.topLeftCorner(d_in, d_in);
      const Eigen::VectorXd sigma_io = c.cov.topRightCorner(d_in, 1);
      Eigen::LLT<Eigen::MatrixXd> llt(sigma_ii);
      double ridge = 1e-9;
      while (llt.info() != Eigen::Success && ridge <= 1e-2) {
        llt.compute(sigma_ii + ridge * Eigen::MatrixXd::Identity(d_in, d_in));
        ridge *= 10.0;
      }
      if (llt.info() != Eigen::Success) {
        throw EmDegenerate("input covariance block not positive definite");
      }
      cc.chol_input = llt.matrixL();
      cc.regress = llt.solve(sigma_io);
      cc.cond_var =
          std::max(c.cov(d_in, d_in) - sigma_io.dot(cc.regress), 1e-12);
      double log_det_half = 0.0;
      for (int i = 0; i < d_in; ++i) log_det_half += std::log(cc.chol_input(i, i));
      cc.log_norm = -0.5 * d_in * std::log(2.0 * M_PI) - log_det_half;
      cache.push_back(std::move(cc));
    }
  }
};

struct GmmTrainConfig {
  int components = 8;
  int max_iterations = 60;
  double tolerance = 1e-6;      // on the mean log-likelihood
  double covariance_floor = 1e-6;
  int kmeans_iterations = 10;
};

namespace detail {

inline double log_sum_exp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

/// Seeded k-means++ initialization followed by Lloyd iterations; returns the
/// component assignment of every row.
inline std::vector<int> kmeans_assign(const Eigen::MatrixXd& x, int k,
                                      const GmmTrainConfig& cfg, RandomEngine& rng) {
  const int n = static_cast<int>(x.rows());
  Eigen::MatrixXd centers(k, x.cols());
  std::vector<double> d2(static_cast<std::size_t>(n),
                         std::numeric_limits<double>::infinity());
  centers.row(0) = x.row(static_cast<Eigen::Index>(draw_index(rng, n)));
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      const double d = (x.row(i) - centers.row(c - 1)).squaredNorm();
      d2[i] = std::min(d2[i], d);
      total += d2[i];
    }
    double pick = draw_uniform(rng, 0.0, total);
    int chosen = n - 1;
    for (int i = 0; i < n; ++i) {
      pick -= d2[i];
      if (pick <= 0.0) {
        chosen = i;
        break;
      }
    }
    centers.row(c) = x.row(chosen);
  }

  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  for (int iter = 0; iter < cfg.kmeans_iterations; ++iter) {
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_d = (x.row(i) - centers.row(0)).squaredNorm();
      for (int c = 1; c < k; ++c) {
        const double d = (x.row(i) - centers.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      assign[i] = best;
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, x.cols());
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(k);
    for (int i = 0; i < n; ++i) {
      sums.row(assign[i]) += x.row(i);
      counts[assign[i]] += 1.0;
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0.0) {
        centers.row(c) = sums.row(c) / counts[c];
      } else {
        centers.row(c) = x.row(static_cast<Eigen::Index>(draw_index(rng, n)));
      }
    }
  }
  return assign;
}

} // namespace detail

/// Expectation-maximization over raw samples (one row per sample, output in
/// the last column). Deterministic for a fixed seed; the mean log-likelihood
/// is non-decreasing over iterations. Diagonal entries are floored to keep
/// components from collapsing; a component that still degenerates raises
/// EmDegenerate.
inline Gmm train_gmm(const Eigen::MatrixXd& samples_raw, const GmmTrainConfig& cfg,
                     std::uint64_t seed, Gmm::Output output_kind) {
  const int n = static_cast<int>(samples_raw.rows());
  const int d = static_cast<int>(samples_raw.cols());
  const int k = cfg.components;
  if (d < 2) throw std::invalid_argument("joint space needs at least two dimensions");
  if (n < 10 * k) {
    throw std::invalid_argument("need at least 10 samples per mixture component, got " +
                                std::to_string(n) + " for k=" + std::to_string(k));
  }

  Gmm model;
  model.output_kind = output_kind;
  model.dim_mean = samples_raw.colwise().mean();
  Eigen::MatrixXd x = samples_raw.rowwise() - model.dim_mean.transpose();
  model.dim_std = (x.colwise().squaredNorm() / static_cast<double>(n))
                      .cwiseSqrt()
                      .cwiseMax(1e-9)
                      .transpose();
  x = x.array().rowwise() / model.dim_std.transpose().array();

  RandomEngine rng(derive_seed(seed, "gmm-train"));
  const std::vector<int> assign = detail::kmeans_assign(x, k, cfg, rng);

  const Eigen::MatrixXd global_cov =
      (x.transpose() * x) / static_cast<double>(n) +
      cfg.covariance_floor * Eigen::MatrixXd::Identity(d, d);

  model.components.resize(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) {
    std::vector<int> rows;
    for (int i = 0; i < n; ++i) {
      if (assign[i] == c) rows.push_back(i);
    }
    Gmm::Component& comp = model.components[static_cast<std::size_t>(c)];
    comp.weight = std::max(static_cast<double>(rows.size()) / n, 1e-3);
    if (static_cast<int>(rows.size()) < d + 2) {
      comp.mean = rows.empty() ? Eigen::VectorXd(x.row(static_cast<Eigen::Index>(
                                     draw_index(rng, n))))
                               : Eigen::VectorXd(x.row(rows[0]));
      comp.cov = global_cov;
      continue;
    }
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    for (int i : rows) mean += x.row(i);
    mean /= static_cast<double>(rows.size());
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    for (int i : rows) {
      const Eigen::VectorXd diff = x.row(i).transpose() - mean;
      cov += diff * diff.transpose();
    }
    cov /= static_cast<double>(rows.size());
    for (int i = 0; i < d; ++i) cov(i, i) = std::max(cov(i, i), cfg.covariance_floor);
    comp.mean = mean;
    comp.cov = 0.5 * (cov + cov.transpose());
  }
  {
    double wsum = 0.0;
    for (const auto& c : model.components) wsum += c.weight;
    for (auto& c : model.components) c.weight /= wsum;
  }

  Eigen::MatrixXd log_resp(n, k);
  const double norm_const = -0.5 * d * std::log(2.0 * M_PI);
  Eigen::MatrixXd centered, solved;

  for (int iter = 0; iter < cfg.max_iterations; ++iter) {
    // E-step: log responsibilities via per-component Cholesky factors.
    for (int c = 0; c < k; ++c) {
      Gmm::Component& comp = model.components[static_cast<std::size_t>(c)];
      Eigen::LLT<Eigen::MatrixXd> llt(comp.cov);
      if (llt.info() != Eigen::Success) {
        comp.cov += 10.0 * cfg.covariance_floor * Eigen::MatrixXd::Identity(d, d);
        llt.compute(comp.cov);
        if (llt.info() != Eigen::Success) {
          throw EmDegenerate("component covariance collapsed despite flooring");
        }
      }
      double log_det_half = 0.0;
      for (int i = 0; i < d; ++i) log_det_half += std::log(llt.matrixL()(i, i));
      centered = (x.rowwise() - comp.mean.transpose()).transpose(); // d x n
      solved = llt.matrixL().solve(centered);
      log_resp.col(c) =
          (-0.5 * solved.colwise().squaredNorm().transpose().array() + norm_const -
           log_det_half + std::log(comp.weight))
              .matrix();
    }

    double ll = 0.0;
    for (int i = 0; i < n; ++i) {
      const double lse = detail::log_sum_exp(log_resp.row(i).transpose());
      ll += lse;
      log_resp.row(i).array() -= lse;
    }
    model.train_ll_history.push_back(ll / static_cast<double>(n));

    // M-step.
    const Eigen::MatrixXd resp = log_resp.array().exp();
    const Eigen::VectorXd nk = resp.colwise().sum();
    for (int c = 0; c < k; ++c) {
      if (nk[c] < 1e-10 * n) throw EmDegenerate("component weight vanished");
      Gmm::Component& comp = model.components[static_cast<std::size_t>(c)];
      comp.weight = nk[c] / static_cast<double>(n);
      comp.mean = (resp.col(c).transpose() * x).transpose() / nk[c];
      centered = (x.rowwise() - comp.mean.transpose()).transpose(); // d x n
      const Eigen::MatrixXd weighted =
          centered.array().rowwise() * resp.col(c).transpose().array();
      Eigen::MatrixXd cov = (weighted * centered.transpose()) / nk[c];
      cov = 0.5 * (cov + cov.transpose());
      for (int i = 0; i < d; ++i) cov(i, i) = std::max(cov(i, i), cfg.covariance_floor);
      comp.cov = cov;
    }

    if (model.train_ll_history.size() >= 2) {
      const auto& h = model.train_ll_history;
      if (std::abs(h[h.size() - 1] - h[h.size() - 2]) < cfg.tolerance) break;
    }
  }

  model.finalize();
  return model;
}

/// Conditions the joint mixture on an input vector (raw units): per-component
/// Gaussian conditioning with posterior weights proportional to the component
/// likelihood of the input.
inline Mixture1d gmr_condition(const Gmm& model, const Eigen::VectorXd& input_raw) {
  const int d_in = model.input_dim();
  if (input_raw.size() != d_in) {
    throw std::invalid_argument("gmr_condition: input dimension mismatch");
  }
  if (model.cache.size() != model.components.size()) {
    throw std::logic_error("gmr_condition: model not finalized");
  }
  const Eigen::VectorXd x =
      (input_raw - model.dim_mean.head(d_in)).cwiseQuotient(model.dim_std.head(d_in));

  const int k = static_cast<int>(model.components.size());
  Eigen::VectorXd log_w(k);
  Mixture1d out;
  out.weights.resize(k);
  out.means.resize(k);
  out.variances.resize(k);
  const double out_std = model.dim_std[d_in];
  const double out_mean = model.dim_mean[d_in];
  for (int c = 0; c < k; ++c) {
    const Gmm::Component& comp = model.components[static_cast<std::size_t>(c)];
    const Gmm::ConditionCache& cc = model.cache[static_cast<std::size_t>(c)];
    const Eigen::VectorXd diff = x - comp.mean.head(d_in);
    const Eigen::VectorXd solved =
        cc.chol_input.triangularView<Eigen::Lower>().solve(diff);
    log_w[c] = std::log(comp.weight) + cc.log_norm - 0.5 * solved.squaredNorm();
    const double mean_std_space = comp.mean[d_in] + cc.regress.dot(diff);
    out.means[c] = mean_std_space * out_std + out_mean;
    out.variances[c] = cc.cond_var * out_std * out_std;
  }
  const double lse = detail::log_sum_exp(log_w);
  out.weights = (log_w.array() - lse).exp();
  return out;
}

/// Convenience overload: conditions on (features..., horizon).
inline Mixture1d gmr_condition(const Gmm& model, const Eigen::VectorXd& features,
                               double horizon) {
  Eigen::VectorXd input(features.size() + 1);
  input << features, horizon;
  return gmr_condition(model, input);
}

/// Mean log-likelihood of raw samples under the model; test/diagnostic use.
inline double gmm_mean_log_likelihood(const Gmm& model, const Eigen::MatrixXd& samples_raw) {
  const int n = static_cast<int>(samples_raw.rows());
  const int d = model.dim();
  Eigen::MatrixXd x = samples_raw.rowwise() - model.dim_mean.transpose();
  x = x.array().rowwise() / model.dim_std.transpose().array();
  double jac = 0.0;
  for (int i = 0; i < d; ++i) jac -= std::log(model.dim_std[i]);
  std::vector<Eigen::LLT<Eigen::MatrixXd>> factors;
  std::vector<double> log_det_halves;
  for (const Gmm::Component& comp : model.components) {
    Eigen::LLT<Eigen::MatrixXd> llt(comp.cov);
    double ridge = 1e-9;
    while (llt.info() != Eigen::Success && ridge <= 1e-2) {
      llt.compute(comp.cov + ridge * Eigen::MatrixXd::Identity(d, d));
      ridge *= 10.0;
    }
    double log_det_half = 0.0;
    for (int j = 0; j < d; ++j) log_det_half += std::log(llt.matrixL()(j, j));
    factors.push_back(std::move(llt));
    log_det_halves.push_back(log_det_half);
  }
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd log_p(model.components.size());
    for (std::size_t c = 0; c < model.components.size(); ++c) {
      const Gmm::Component& comp = model.components[c];
      const Eigen::VectorXd diff = x.row(i).transpose() - comp.mean;
      const Eigen::VectorXd solved = factors[c].matrixL().solve(diff);
      log_p[static_cast<Eigen::Index>(c)] = std::log(comp.weight) -
                                            0.5 * d * std::log(2.0 * M_PI) -
                                            log_det_halves[c] - 0.5 * solved.squaredNorm();
    }
    total += detail::log_sum_exp(log_p) + jac;
  }
  return total / n;
}

} // namespace mergesim
