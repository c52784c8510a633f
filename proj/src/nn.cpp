#include "neurmatch/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "neurmatch/error.hpp"
#include "neurmatch/random.hpp"

namespace neurmatch::nn {
namespace {

void activate(Activation a, Eigen::MatrixXd& z) {
  switch (a) {
    case Activation::kNone:
      break;
    case Activation::kRelu:
      z = z.cwiseMax(0.0);
      break;
    case Activation::kSigmoid:
      z = z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
      break;
  }
}

// Multiplies `grad` in place by the activation derivative, expressed in
// terms of the activation output.
void activation_backward(Activation a, const Eigen::MatrixXd& out,
                         Eigen::MatrixXd& grad) {
  switch (a) {
    case Activation::kNone:
      break;
    case Activation::kRelu:
      grad = grad.cwiseProduct(
          out.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; }));
      break;
    case Activation::kSigmoid:
      grad = grad.cwiseProduct(out.cwiseProduct(
          (1.0 - out.array()).matrix()));
      break;
  }
}

// Forward pass keeping every layer's output; outputs[0] is the input.
std::vector<Eigen::MatrixXd> forward_cached(const DenseNet& net,
                                            const Eigen::MatrixXd& inputs) {
  std::vector<Eigen::MatrixXd> outs;
  outs.reserve(net.layers().size() + 1);
  outs.push_back(inputs);
  for (const auto& layer : net.layers()) {
    Eigen::MatrixXd z = layer.weight * outs.back();
    z.colwise() += layer.bias;
    activate(layer.activation, z);
    outs.push_back(std::move(z));
  }
  return outs;
}

void check_input(const DenseNet& net, Eigen::Index rows) {
  if (net.layers().empty()) throw ArgumentError("network has no layers");
  if (rows != net.input_dim()) {
    throw ArgumentError("input has " + std::to_string(rows) +
                        " entries, network expects " +
                        std::to_string(net.input_dim()));
  }
}

}  // namespace

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kNone:
      return "none";
    case Activation::kRelu:
      return "relu";
    case Activation::kSigmoid:
      return "sigmoid";
  }
  return "none";
}

Activation activation_from_string(const std::string& name) {
  if (name == "none") return Activation::kNone;
  if (name == "relu") return Activation::kRelu;
  if (name == "sigmoid") return Activation::kSigmoid;
  throw FormatError("unknown activation '" + name + "'");
}

std::string to_string(Loss loss) {
  return loss == Loss::kSquaredError ? "squared_error" : "binary_cross_entropy";
}

DenseNet::DenseNet(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw ArgumentError("network needs at least one layer");
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const auto& l = layers_[k];
    if (l.weight.rows() == 0 || l.weight.cols() == 0) {
      throw ArgumentError("layer " + std::to_string(k) + " has empty weights");
    }
    if (l.bias.size() != l.weight.rows()) {
      throw ArgumentError("layer " + std::to_string(k) +
                          ": bias size does not match output width");
    }
    if (k > 0 && l.weight.cols() != layers_[k - 1].weight.rows()) {
      throw ArgumentError("layer " + std::to_string(k) +
                          ": input width does not chain with previous layer");
    }
    if (!l.weight.allFinite() || !l.bias.allFinite()) {
      throw ArgumentError("layer " + std::to_string(k) +
                          " has non-finite parameters");
    }
  }
}

DenseNet DenseNet::make(int input_dim, std::span<const LayerSpec> specs,
                        std::uint64_t seed) {
  if (input_dim <= 0) throw ArgumentError("input_dim must be positive");
  Rng rng(seed);
  std::vector<DenseLayer> layers;
  int fan_in = input_dim;
  for (const auto& spec : specs) {
    if (spec.width <= 0) throw ArgumentError("layer width must be positive");
    DenseLayer layer;
    const double a = std::sqrt(6.0 / (fan_in + spec.width));
    layer.weight.resize(spec.width, fan_in);
    for (int r = 0; r < spec.width; ++r) {
      for (int c = 0; c < fan_in; ++c) layer.weight(r, c) = rng.uniform(-a, a);
    }
    layer.bias = Eigen::VectorXd::Zero(spec.width);
    layer.activation = spec.activation;
    layers.push_back(std::move(layer));
    fan_in = spec.width;
  }
  return DenseNet(std::move(layers));
}

int DenseNet::input_dim() const {
  return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.cols());
}

int DenseNet::output_dim() const {
  return layers_.empty() ? 0 : static_cast<int>(layers_.back().weight.rows());
}

std::size_t DenseNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

Eigen::VectorXd DenseNet::forward(const Eigen::VectorXd& x) const {
  check_input(*this, x.size());
  Eigen::MatrixXd h = x;
  for (const auto& layer : layers_) {
    Eigen::MatrixXd z = layer.weight * h;
    z.colwise() += layer.bias;
    activate(layer.activation, z);
    h = std::move(z);
  }
  return h.col(0);
}

Eigen::MatrixXd DenseNet::forward_batch(const Eigen::MatrixXd& inputs) const {
  check_input(*this, inputs.rows());
  return forward_cached(*this, inputs).back();
}

bool operator==(const DenseNet& a, const DenseNet& b) {
  if (a.layers_.size() != b.layers_.size()) return false;
  for (std::size_t k = 0; k < a.layers_.size(); ++k) {
    const auto& x = a.layers_[k];
    const auto& y = b.layers_[k];
    if (x.activation != y.activation || x.weight.rows() != y.weight.rows() ||
        x.weight.cols() != y.weight.cols() || x.weight != y.weight ||
        x.bias != y.bias) {
      return false;
    }
  }
  return true;
}

Gradients Gradients::zeros_like(const DenseNet& net) {
  Gradients g;
  for (const auto& l : net.layers()) {
    g.weight.push_back(Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()));
    g.bias.push_back(Eigen::VectorXd::Zero(l.bias.size()));
  }
  return g;
}

Gradients& Gradients::operator+=(const Gradients& other) {
  for (std::size_t k = 0; k < weight.size(); ++k) {
    weight[k] += other.weight[k];
    bias[k] += other.bias[k];
  }
  return *this;
}

Gradients& Gradients::operator*=(double s) {
  for (std::size_t k = 0; k < weight.size(); ++k) {
    weight[k] *= s;
    bias[k] *= s;
  }
  return *this;
}

namespace {

// With `preactivation_grads` set, `loss_grads` is taken with respect to the
// last layer's pre-activation (sigmoid + cross-entropy shortcut p - t).
Gradients backward_impl(const DenseNet& net, const Eigen::MatrixXd& inputs,
                        const Eigen::MatrixXd& loss_grads,
                        bool preactivation_grads) {
  check_input(net, inputs.rows());
  if (loss_grads.rows() != net.output_dim() ||
      loss_grads.cols() != inputs.cols()) {
    throw ArgumentError("loss gradient shape does not match network output");
  }
  const auto outs = forward_cached(net, inputs);
  Gradients g = Gradients::zeros_like(net);
  Eigen::MatrixXd delta = loss_grads;
  for (std::size_t k = net.layers().size(); k-- > 0;) {
    const auto& layer = net.layers()[k];
    if (!(preactivation_grads && k + 1 == net.layers().size())) {
      activation_backward(layer.activation, outs[k + 1], delta);
    }
    g.weight[k].noalias() = delta * outs[k].transpose();
    g.bias[k] = delta.rowwise().sum();
    if (k > 0) delta = layer.weight.transpose() * delta;
  }
  return g;
}

}  // namespace

Gradients backward_batch(const DenseNet& net, const Eigen::MatrixXd& inputs,
                         const Eigen::MatrixXd& loss_grads) {
  return backward_impl(net, inputs, loss_grads, false);
}

Gradients backward(const DenseNet& net, const Eigen::VectorXd& x,
                   const Eigen::VectorXd& loss_grad) {
  return backward_batch(net, x, loss_grad);
}

double loss_value(Loss loss, const Eigen::VectorXd& output,
                  const Eigen::VectorXd& target) {
  if (output.size() != target.size()) {
    throw ArgumentError("loss: output and target sizes differ");
  }
  if (loss == Loss::kSquaredError) return (output - target).squaredNorm();
  double total = 0.0;
  for (Eigen::Index k = 0; k < output.size(); ++k) {
    const double p = std::clamp(output(k), 1e-15, 1.0 - 1e-15);
    total -= target(k) * std::log(p) + (1.0 - target(k)) * std::log1p(-p);
  }
  return total;
}

Eigen::VectorXd loss_gradient(Loss loss, const Eigen::VectorXd& output,
                              const Eigen::VectorXd& target) {
  if (output.size() != target.size()) {
    throw ArgumentError("loss: output and target sizes differ");
  }
  if (loss == Loss::kSquaredError) return 2.0 * (output - target);
  Eigen::VectorXd g(output.size());
  for (Eigen::Index k = 0; k < output.size(); ++k) {
    const double p = std::clamp(output(k), 1e-15, 1.0 - 1e-15);
    g(k) = (p - target(k)) / (p * (1.0 - p));
  }
  return g;
}

double gradcheck(const DenseNet& net, const Eigen::VectorXd& x,
                 const Eigen::VectorXd& target, Loss loss, double h) {
  const auto grad =
      backward(net, x, loss_gradient(loss, net.forward(x), target));
  return gradcheck(net, x, target, loss, grad, h);
}

double gradcheck(const DenseNet& net, const Eigen::VectorXd& x,
                 const Eigen::VectorXd& target, Loss loss,
                 const Gradients& grads, double h) {
  DenseNet probe = net;
  auto eval = [&] { return loss_value(loss, probe.forward(x), target); };
  double worst = 0.0;
  auto check = [&](double& param, double analytic) {
    const double saved = param;
    param = saved + h;
    const double up = eval();
    param = saved - h;
    const double down = eval();
    param = saved;
    const double fd = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-8});
    worst = std::max(worst, std::abs(analytic - fd) / denom);
  };
  auto& layers = probe.mutable_layers();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    for (Eigen::Index c = 0; c < layers[k].weight.cols(); ++c) {
      for (Eigen::Index r = 0; r < layers[k].weight.rows(); ++r) {
        check(layers[k].weight(r, c), grads.weight[k](r, c));
      }
    }
    for (Eigen::Index r = 0; r < layers[k].bias.size(); ++r) {
      check(layers[k].bias(r), grads.bias[k](r));
    }
  }
  return worst;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ArgumentError("learning_rate must be finite and >= 0");
  }
  if (batch_size <= 0) throw ArgumentError("batch_size must be positive");
  if (epochs <= 0) throw ArgumentError("epochs must be positive");
  if (optimizer == OptimizerKind::kAdam) {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ArgumentError("adam betas must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw ArgumentError("adam epsilon must be > 0");
  }
}

Optimizer::Optimizer(const DenseNet& net, const TrainConfig& cfg)
    : cfg_(cfg),
      m_(Gradients::zeros_like(net)),
      v_(Gradients::zeros_like(net)) {}

void Optimizer::step(DenseNet& net, const Gradients& grads) {
  auto& layers = net.mutable_layers();
  const double lr = cfg_.learning_rate;
  if (cfg_.optimizer == OptimizerKind::kSgd) {
    for (std::size_t k = 0; k < layers.size(); ++k) {
      layers[k].weight -= lr * grads.weight[k];
      layers[k].bias -= lr * grads.bias[k];
    }
    return;
  }
  ++step_count_;
  const double b1 = cfg_.beta1;
  const double b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
  const double eps = cfg_.epsilon;
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseAbs2();
    param.array() -= lr * (m.array() / c1) /
                     ((v.array() / c2).sqrt() + eps);
  };
  for (std::size_t k = 0; k < layers.size(); ++k) {
    update(layers[k].weight, m_.weight[k], v_.weight[k], grads.weight[k]);
    update(layers[k].bias, m_.bias[k], v_.bias[k], grads.bias[k]);
  }
}

TrainResult train(DenseNet net, const Dataset& data, const TrainConfig& cfg,
                  Loss loss) {
  cfg.validate();
  if (data.size() == 0) throw ArgumentError("train: empty dataset");
  if (data.inputs.rows() != net.input_dim()) {
    throw ArgumentError("train: input width does not match network");
  }
  if (data.targets.rows() != net.output_dim() ||
      data.targets.cols() != data.size()) {
    throw ArgumentError("train: labels do not match network output");
  }
  const Eigen::Index n = data.size();
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(cfg.seed);
  Optimizer opt(net, cfg);
  const bool fused_logistic =
      loss == Loss::kBinaryCrossEntropy &&
      net.layers().back().activation == Activation::kSigmoid;
  TrainResult result;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span<Eigen::Index>(order));
    double epoch_loss = 0.0;
    for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
      const Eigen::Index count = std::min<Eigen::Index>(cfg.batch_size, n - start);
      Eigen::MatrixXd x(data.inputs.rows(), count);
      Eigen::MatrixXd t(data.targets.rows(), count);
      for (Eigen::Index k = 0; k < count; ++k) {
        x.col(k) = data.inputs.col(order[start + k]);
        t.col(k) = data.targets.col(order[start + k]);
      }
      const Eigen::MatrixXd y = net.forward_batch(x);
      Eigen::MatrixXd g(y.rows(), count);
      for (Eigen::Index k = 0; k < count; ++k) {
        epoch_loss += loss_value(loss, y.col(k), t.col(k));
        g.col(k) = fused_logistic ? Eigen::VectorXd(y.col(k) - t.col(k))
                                  : loss_gradient(loss, y.col(k), t.col(k));
      }
      if (!std::isfinite(epoch_loss)) {
        throw DivergenceError(
            "training diverged: non-finite loss in epoch " +
                std::to_string(epoch + 1),
            epoch + 1);
      }
      Gradients grads = backward_impl(net, x, g, fused_logistic);
      grads *= 1.0 / static_cast<double>(count);
      opt.step(net, grads);
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(n));
  }
  result.net = std::move(net);
  return result;
}

nlohmann::json to_json(const DenseNet& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers()) {
    std::vector<double> w;
    w.reserve(l.weight.size());
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) w.push_back(l.weight(r, c));
    }
    layers.push_back({{"in", l.weight.cols()},
                      {"out", l.weight.rows()},
                      {"activation", to_string(l.activation)},
                      {"weight", w},
                      {"bias", std::vector<double>(l.bias.data(),
                                                   l.bias.data() + l.bias.size())}});
  }
  return {{"format", "neurmatch-densenet"},
          {"format_version", kModelFormatVersion},
          {"input_dim", net.input_dim()},
          {"output_dim", net.output_dim()},
          {"layers", layers}};
}

DenseNet net_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "neurmatch-densenet") {
      throw FormatError("model JSON: not a densenet model");
    }
    const int version = j.at("format_version").get<int>();
    if (version != kModelFormatVersion) {
      throw FormatError("model JSON: unsupported format_version " +
                        std::to_string(version));
    }
    std::vector<DenseLayer> layers;
    for (const auto& jl : j.at("layers")) {
      const auto in = jl.at("in").get<Eigen::Index>();
      const auto out = jl.at("out").get<Eigen::Index>();
      const auto w = jl.at("weight").get<std::vector<double>>();
      const auto b = jl.at("bias").get<std::vector<double>>();
      if (in <= 0 || out <= 0 || static_cast<Eigen::Index>(w.size()) != in * out ||
          static_cast<Eigen::Index>(b.size()) != out) {
        throw FormatError("model JSON: layer parameter count mismatch");
      }
      DenseLayer l;
      l.weight.resize(out, in);
      for (Eigen::Index r = 0; r < out; ++r) {
        for (Eigen::Index c = 0; c < in; ++c) l.weight(r, c) = w[r * in + c];
      }
      l.bias = Eigen::Map<const Eigen::VectorXd>(b.data(), out);
      l.activation = activation_from_string(jl.at("activation").get<std::string>());
      layers.push_back(std::move(l));
    }
    DenseNet net(std::move(layers));
    if (net.input_dim() != j.at("input_dim").get<int>() ||
        net.output_dim() != j.at("output_dim").get<int>()) {
      throw FormatError("model JSON: declared dims disagree with layers");
    }
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model JSON: ") + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("model JSON: ") + e.what());
  }
}

}  // namespace neurmatch::nn
