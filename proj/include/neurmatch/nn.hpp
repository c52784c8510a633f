#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

namespace neurmatch::nn {

inline constexpr int kModelFormatVersion = 1;

enum class Activation { kNone, kRelu, kSigmoid };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
  Activation activation = Activation::kNone;
};

struct LayerSpec {
  int width;
  Activation activation;
};

// Fully connected feed-forward network. Inputs and outputs are column
// vectors; batched calls take one sample per column.
class DenseNet {
 public:
  DenseNet() = default;
  explicit DenseNet(std::vector<DenseLayer> layers);

  // Glorot-uniform weights, zero biases.
  static DenseNet make(int input_dim, std::span<const LayerSpec> layers,
                       std::uint64_t seed);

  int input_dim() const;
  int output_dim() const;
  std::size_t parameter_count() const;

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& mutable_layers() { return layers_; }

  Eigen::VectorXd forward(const Eigen::VectorXd& x) const;
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& inputs) const;

  friend bool operator==(const DenseNet& a, const DenseNet& b);

 private:
  std::vector<DenseLayer> layers_;
};

// Parameter gradients, laid out like the network's layers.
struct Gradients {
  std::vector<Eigen::MatrixXd> weight;
  std::vector<Eigen::VectorXd> bias;

  static Gradients zeros_like(const DenseNet& net);
  Gradients& operator+=(const Gradients& other);
  Gradients& operator*=(double s);
};

Gradients backward(const DenseNet& net, const Eigen::VectorXd& x,
                   const Eigen::VectorXd& loss_grad);

// Sum of per-column gradients. `loss_grads` has one column per input column.
Gradients backward_batch(const DenseNet& net, const Eigen::MatrixXd& inputs,
                         const Eigen::MatrixXd& loss_grads);

enum class Loss { kSquaredError, kBinaryCrossEntropy };

std::string to_string(Loss loss);

// Squared error is the plain sum of squares; binary cross-entropy expects
// outputs in (0, 1).
double loss_value(Loss loss, const Eigen::VectorXd& output,
                  const Eigen::VectorXd& target);
Eigen::VectorXd loss_gradient(Loss loss, const Eigen::VectorXd& output,
                              const Eigen::VectorXd& target);

// Max over parameters of |analytic - fd| / max(|analytic|, |fd|, 1e-8),
// using central differences with step h. `grads` overrides the analytic
// gradient (used to check that corruption is caught).
double gradcheck(const DenseNet& net, const Eigen::VectorXd& x,
                 const Eigen::VectorXd& target, Loss loss, double h = 1e-5);
double gradcheck(const DenseNet& net, const Eigen::VectorXd& x,
                 const Eigen::VectorXd& target, Loss loss,
                 const Gradients& grads, double h = 1e-5);

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 32;
  int epochs = 10;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

// Stateful optimizer over one network's parameters.
class Optimizer {
 public:
  Optimizer(const DenseNet& net, const TrainConfig& cfg);
  // Applies one descent step with the (already averaged) gradients.
  void step(DenseNet& net, const Gradients& grads);

 private:
  TrainConfig cfg_;
  Gradients m_;
  Gradients v_;
  long step_count_ = 0;
};

struct Dataset {
  Eigen::MatrixXd inputs;   // input_dim x n
  Eigen::MatrixXd targets;  // output_dim x n

  Eigen::Index size() const { return inputs.cols(); }
};

struct TrainResult {
  DenseNet net;
  std::vector<double> epoch_loss;
};

// Minibatch training with a seeded per-epoch shuffle. Each epoch's reported
// loss is the mean per-sample loss seen during that epoch.
// Throws DivergenceError on a non-finite loss.
TrainResult train(DenseNet net, const Dataset& data, const TrainConfig& cfg,
                  Loss loss);

nlohmann::json to_json(const DenseNet& net);
DenseNet net_from_json(const nlohmann::json& j);

}  // namespace neurmatch::nn
