#pragma once

#include "mergesim/features.hpp"
#include "mergesim/random.hpp"

#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace mergesim {

struct DegenerateTrainingSet : std::runtime_error {
  explicit DegenerateTrainingSet(const std::string& what) : std::runtime_error(what) {}
};

/// Maneuver classifier: 23 inputs, one tanh hidden layer of 27 units,
/// softmax over the three maneuvers. Features are standardized with the
/// stored training-set constants before entering the network.
struct MlpModel {
  static constexpr int kInputs = kFeatureCount;
  static constexpr int kHidden = 27;
  static constexpr int kOutputs = 3;
  static constexpr int kParamCount =
      kHidden * kInputs + kHidden + kOutputs * kHidden + kOutputs;

  Eigen::Matrix<double, kHidden, kInputs> w1 =
      Eigen::Matrix<double, kHidden, kInputs>::Zero();
  Eigen::Matrix<double, kHidden, 1> b1 = Eigen::Matrix<double, kHidden, 1>::Zero();
  Eigen::Matrix<double, kOutputs, kHidden> w2 =
      Eigen::Matrix<double, kOutputs, kHidden>::Zero();
  Eigen::Matrix<double, kOutputs, 1> b2 = Eigen::Matrix<double, kOutputs, 1>::Zero();
  FeatureVector feat_mean = FeatureVector::Zero();
  FeatureVector feat_std = FeatureVector::Ones();

  FeatureVector standardize(const FeatureVector& raw) const {
    return (raw - feat_mean).cwiseQuotient(feat_std);
  }

  Eigen::Vector3d forward(const FeatureVector& raw) const {
    const FeatureVector x = standardize(raw);
    const Eigen::Matrix<double, kHidden, 1> h = (w1 * x + b1).array().tanh();
    Eigen::Vector3d z = w2 * h + b2;
    z.array() -= z.maxCoeff();
    Eigen::Vector3d p = z.array().exp();
    return p / p.sum();
  }

  ManeuverProbabilities classify(const FeatureVector& raw) const {
    const Eigen::Vector3d p = forward(raw);
    return {p[static_cast<int>(Maneuver::kLcl)], p[static_cast<int>(Maneuver::kFlw)],
            p[static_cast<int>(Maneuver::kLcr)]};
  }

  Eigen::VectorXd flatten() const {
    Eigen::VectorXd v(kParamCount);
    int at = 0;
    for (int i = 0; i < w1.size(); ++i) v[at++] = w1.data()[i];
    for (int i = 0; i < b1.size(); ++i) v[at++] = b1.data()[i];
    for (int i = 0; i < w2.size(); ++i) v[at++] = w2.data()[i];
    for (int i = 0; i < b2.size(); ++i) v[at++] = b2.data()[i];
    return v;
  }

  void unflatten(const Eigen::VectorXd& v) {
    int at = 0;
    for (int i = 0; i < w1.size(); ++i) w1.data()[i] = v[at++];
    for (int i = 0; i < b1.size(); ++i) b1.data()[i] = v[at++];
    for (int i = 0; i < w2.size(); ++i) w2.data()[i] = v[at++];
    for (int i = 0; i < b2.size(); ++i) b2.data()[i] = v[at++];
  }
};

/// Weighted cross-entropy over the given batch; fills `grad` (flattened like
/// MlpModel::flatten) with the analytic gradient when non-null.
inline double mlp_loss_and_gradient(const MlpModel& model,
                                    const std::vector<LabeledSample>& samples,
                                    const std::vector<std::size_t>& batch,
                                    const std::array<double, 3>& class_weights,
                                    Eigen::VectorXd* grad) {
  Eigen::Matrix<double, MlpModel::kHidden, MlpModel::kInputs> dw1;
  Eigen::Matrix<double, MlpModel::kHidden, 1> db1;
  Eigen::Matrix<double, MlpModel::kOutputs, MlpModel::kHidden> dw2;
  Eigen::Matrix<double, MlpModel::kOutputs, 1> db2;
  dw1.setZero();
  db1.setZero();
  dw2.setZero();
  db2.setZero();

  double loss = 0.0;
  double weight_sum = 0.0;
  for (std::size_t idx : batch) {
    const LabeledSample& s = samples[idx];
    const int label = static_cast<int>(s.label);
    const double w = class_weights[static_cast<std::size_t>(label)];
    const FeatureVector x = model.standardize(s.features);
    const Eigen::Matrix<double, MlpModel::kHidden, 1> pre = model.w1 * x + model.b1;
    const Eigen::Matrix<double, MlpModel::kHidden, 1> h = pre.array().tanh();
    Eigen::Vector3d z = model.w2 * h + model.b2;
    const double zmax = z.maxCoeff();
    const Eigen::Vector3d ez = (z.array() - zmax).exp();
    const double denom = ez.sum();
    const Eigen::Vector3d p = ez / denom;
    loss += w * (std::log(denom) - (z[label] - zmax));
    weight_sum += w;

    if (grad) {
      Eigen::Vector3d dz = p;
      dz[label] -= 1.0;
      dz *= w;
      dw2 += dz * h.transpose();
      db2 += dz;
      const Eigen::Matrix<double, MlpModel::kHidden, 1> dh = model.w2.transpose() * dz;
      const Eigen::Matrix<double, MlpModel::kHidden, 1> dpre =
          dh.cwiseProduct((1.0 - h.array().square()).matrix());
      dw1 += dpre * x.transpose();
      db1 += dpre;
    }
  }
  if (weight_sum <= 0.0) return 0.0;
  loss /= weight_sum;
  if (grad) {
    grad->resize(MlpModel::kParamCount);
    int at = 0;
    const double inv = 1.0 / weight_sum;
    for (int i = 0; i < dw1.size(); ++i) (*grad)[at++] = dw1.data()[i] * inv;
    for (int i = 0; i < db1.size(); ++i) (*grad)[at++] = db1.data()[i] * inv;
    for (int i = 0; i < dw2.size(); ++i) (*grad)[at++] = dw2.data()[i] * inv;
    for (int i = 0; i < db2.size(); ++i) (*grad)[at++] = db2.data()[i] * inv;
  }
  return loss;
}

struct MlpTrainConfig {
  int epochs = 60;
  double learning_rate = 0.01;
  int batch_size = 128;
};

/// Gradient training with Adam-style adaptive steps, inverse-frequency class
/// weights and a fixed seed: identical seeds give bitwise-identical weights.
inline MlpModel train_mlp(const std::vector<LabeledSample>& samples, std::uint64_t seed,
                          const MlpTrainConfig& cfg = {}) {
  if (samples.empty()) throw DegenerateTrainingSet("no training samples");
  std::array<std::size_t, 3> counts{0, 0, 0};
  for (const LabeledSample& s : samples) counts[static_cast<std::size_t>(s.label)]++;
  for (std::size_t c = 0; c < 3; ++c) {
    if (counts[c] == 0) {
      throw DegenerateTrainingSet(std::string("no samples for class ") +
                                  to_string(static_cast<Maneuver>(c)));
    }
  }
  std::array<double, 3> class_weights{};
  for (std::size_t c = 0; c < 3; ++c) {
    class_weights[c] =
        static_cast<double>(samples.size()) / (3.0 * static_cast<double>(counts[c]));
  }

  MlpModel model;
  for (int i = 0; i < kFeatureCount; ++i) {
    double mean = 0.0;
    for (const LabeledSample& s : samples) mean += s.features[i];
    mean /= static_cast<double>(samples.size());
    double var = 0.0;
    for (const LabeledSample& s : samples) {
      const double d = s.features[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(samples.size());
    model.feat_mean[i] = mean;
    model.feat_std[i] = std::max(std::sqrt(var), 1e-9);
  }

  RandomEngine rng(derive_seed(seed, "mlp-train"));
  const double s1 = 1.0 / std::sqrt(static_cast<double>(MlpModel::kInputs));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(MlpModel::kHidden));
  for (int i = 0; i < model.w1.size(); ++i) model.w1.data()[i] = draw_gaussian(rng, 0.0, s1);
  for (int i = 0; i < model.w2.size(); ++i) model.w2.data()[i] = draw_gaussian(rng, 0.0, s2);

  Eigen::VectorXd theta = model.flatten();
  Eigen::VectorXd m = Eigen::VectorXd::Zero(MlpModel::kParamCount);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(MlpModel::kParamCount);
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step = 0;

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Eigen::VectorXd grad;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<std::size_t> batch(order.begin() + start, order.begin() + end);
      model.unflatten(theta);
      mlp_loss_and_gradient(model, samples, batch, class_weights, &grad);
      ++step;
      m = beta1 * m + (1.0 - beta1) * grad;
      v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
      const double corr1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double corr2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      theta -= (cfg.learning_rate / corr1) *
               m.cwiseQuotient(((v / corr2).cwiseSqrt().array() + eps).matrix());
    }
  }
  model.unflatten(theta);
  return model;
}

inline std::array<double, 3> inverse_frequency_weights(const std::vector<LabeledSample>& samples) {
  std::array<std::size_t, 3> counts{0, 0, 0};
  for (const LabeledSample& s : samples) counts[static_cast<std::size_t>(s.label)]++;
  std::array<double, 3> w{};
  for (std::size_t c = 0; c < 3; ++c) {
    w[c] = counts[c] == 0 ? 0.0
                          : static_cast<double>(samples.size()) /
                                (3.0 * static_cast<double>(counts[c]));
  }
  return w;
}

} // namespace mergesim
