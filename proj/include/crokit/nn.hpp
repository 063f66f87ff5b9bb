#pragma once

// Dense reverse-mode differentiation for the small feed-forward networks used
// by the set predictor, the coverage regressor and the ETO baselines.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "crokit/error.hpp"

namespace crokit {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Named contiguous range inside a ParamVector. Matrices are stored column-major.
struct Slice {
  std::string name;
  Index offset = 0;
  Index rows = 0;
  Index cols = 0;

  Index size() const { return rows * cols; }
};

/// Flat parameter array with a named layout. Layout ranges are disjoint and
/// cover the whole array; the length is fixed once constructed.
class ParamVector {
 public:
  ParamVector() = default;

  explicit ParamVector(std::vector<Slice> layout) : layout_(std::move(layout)) {
    Index expected = 0;
    for (const auto& s : layout_) {
      detail::require(s.offset == expected, "parameter layout must be contiguous at '" + s.name + "'");
      detail::require(s.rows >= 0 && s.cols >= 0, "negative slice shape at '" + s.name + "'");
      for (const auto& other : layout_) {
        if (&other != &s) detail::require(other.name != s.name, "duplicate slice name '" + s.name + "'");
      }
      expected += s.size();
    }
    values_ = Vec::Zero(expected);
  }

  Index size() const { return values_.size(); }
  Vec& values() { return values_; }
  const Vec& values() const { return values_; }
  const std::vector<Slice>& layout() const { return layout_; }

  bool has(std::string_view name) const {
    return std::any_of(layout_.begin(), layout_.end(), [&](const Slice& s) { return s.name == name; });
  }

  const Slice& slice(std::string_view name) const {
    for (const auto& s : layout_) {
      if (s.name == name) return s;
    }
    throw InputError("unknown parameter slice '" + std::string(name) + "'");
  }

  Eigen::Map<const Mat> matrix(std::string_view name) const {
    const Slice& s = slice(name);
    return {values_.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<Mat> matrix(std::string_view name) {
    const Slice& s = slice(name);
    return {values_.data() + s.offset, s.rows, s.cols};
  }

  nlohmann::json layout_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& s : layout_) {
      out.push_back({{"name", s.name}, {"offset", s.offset}, {"rows", s.rows}, {"cols", s.cols}});
    }
    return out;
  }

  static ParamVector from_layout_json(const nlohmann::json& j) {
    std::vector<Slice> layout;
    for (const auto& e : j) {
      layout.push_back({e.at("name").get<std::string>(), e.at("offset").get<Index>(), e.at("rows").get<Index>(),
                        e.at("cols").get<Index>()});
    }
    return ParamVector(std::move(layout));
  }

 private:
  std::vector<Slice> layout_;
  Vec values_;
};

class LayoutBuilder {
 public:
  LayoutBuilder& add(std::string name, Index rows, Index cols = 1) {
    slices_.push_back({std::move(name), next_, rows, cols});
    next_ += rows * cols;
    return *this;
  }
  ParamVector build() const { return ParamVector(slices_); }

 private:
  std::vector<Slice> slices_;
  Index next_ = 0;
};

enum class Activation { identity, tanh, sigmoid };

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

using NodeId = int;

/// Records one forward evaluation; backward() replays it in reverse creation
/// order, which is a valid topological order for a tape.
class Tape {
 public:
  explicit Tape(const ParamVector& params) : params_(&params) {}

  NodeId input(Vec x) {
    nodes_.push_back({Op::input, -1, nullptr, nullptr, std::move(x)});
    return last();
  }

  /// W x + b with W, b read from the named parameter slices.
  NodeId affine(std::string_view weight, std::string_view bias, NodeId x) {
    const Slice& w = params_->slice(weight);
    const Slice& b = params_->slice(bias);
    const Vec& in = value(x);
    detail::require(w.cols == in.size(), "affine: input dimension " + std::to_string(in.size()) +
                                             " does not match weight '" + w.name + "' with " +
                                             std::to_string(w.cols) + " columns");
    detail::require(b.size() == w.rows, "affine: bias size mismatch for '" + b.name + "'");
    Vec out = params_->matrix(weight) * in + params_->matrix(bias).col(0);
    nodes_.push_back({Op::affine, x, &w, &b, std::move(out)});
    return last();
  }

  NodeId tanh(NodeId x) {
    Vec out = value(x).array().tanh();
    nodes_.push_back({Op::tanh, x, nullptr, nullptr, std::move(out)});
    return last();
  }

  NodeId sigmoid(NodeId x) {
    Vec out = value(x).unaryExpr([](double z) { return crokit::sigmoid(z); });
    nodes_.push_back({Op::sigmoid, x, nullptr, nullptr, std::move(out)});
    return last();
  }

  NodeId activate(Activation a, NodeId x) {
    switch (a) {
      case Activation::tanh: return tanh(x);
      case Activation::sigmoid: return sigmoid(x);
      case Activation::identity: return x;
    }
    return x;
  }

  const Vec& value(NodeId id) const {
    detail::require(id >= 0 && id < static_cast<NodeId>(nodes_.size()), "tape: node id out of range");
    return nodes_[id].value;
  }

  std::size_t size() const { return nodes_.size(); }
  const ParamVector& params() const { return *params_; }

  /// Gradient of seed . value(output) with respect to every parameter.
  Vec backward(NodeId output, const Vec& seed) const {
    if (nodes_.empty() || std::all_of(nodes_.begin(), nodes_.end(), [](const Node& n) { return n.op == Op::input; })) {
      throw StateError("backward called before any forward operation was recorded");
    }
    detail::require(output >= 0 && output < static_cast<NodeId>(nodes_.size()), "tape: output id out of range");
    detail::require(seed.size() == nodes_[output].value.size(),
                    "backward: seed has size " + std::to_string(seed.size()) + ", output has size " +
                        std::to_string(nodes_[output].value.size()));
    std::vector<Vec> adjoint(nodes_.size());
    adjoint[output] = seed;
    Vec grad = Vec::Zero(params_->size());
    for (NodeId id = output; id >= 0; --id) {
      const Node& n = nodes_[id];
      if (adjoint[id].size() == 0 || n.op == Op::input) continue;
      const Vec& a = adjoint[id];
      Vec upstream;
      switch (n.op) {
        case Op::affine: {
          const Vec& in = nodes_[n.arg].value;
          Eigen::Map<Mat> gw(grad.data() + n.weight->offset, n.weight->rows, n.weight->cols);
          gw.noalias() += a * in.transpose();
          grad.segment(n.bias->offset, n.bias->size()) += a;
          upstream = params_->matrix(n.weight->name).transpose() * a;
          break;
        }
        case Op::tanh:
          upstream = a.array() * (1.0 - n.value.array().square());
          break;
        case Op::sigmoid:
          upstream = a.array() * n.value.array() * (1.0 - n.value.array());
          break;
        case Op::input:
          break;
      }
      Vec& dst = adjoint[n.arg];
      if (dst.size() == 0) {
        dst = std::move(upstream);
      } else {
        dst += upstream;
      }
    }
    return grad;
  }

  Vec backward(const Vec& seed) const {
    if (nodes_.empty()) throw StateError("backward called on an empty tape");
    return backward(last(), seed);
  }

 private:
  enum class Op { input, affine, tanh, sigmoid };
  struct Node {
    Op op;
    NodeId arg;
    const Slice* weight;
    const Slice* bias;
    Vec value;
  };

  NodeId last() const { return static_cast<NodeId>(nodes_.size()) - 1; }

  const ParamVector* params_;
  std::vector<Node> nodes_;
};

struct MlpShape {
  Index inputs = 0;
  std::vector<Index> hidden;
  Index outputs = 0;
  Activation hidden_activation = Activation::tanh;
  Activation output_activation = Activation::identity;
};

/// Fully connected network. Parameters live in slices "<prefix>layer<k>.weight"
/// and "<prefix>layer<k>.bias" so several networks can share one ParamVector.
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(MlpShape shape, std::string prefix = "") : shape_(std::move(shape)), prefix_(std::move(prefix)) {
    detail::require(shape_.inputs >= 0 && shape_.outputs > 0, "mlp: invalid input/output sizes");
    for (Index h : shape_.hidden) detail::require(h > 0, "mlp: hidden widths must be positive");
  }

  const MlpShape& shape() const { return shape_; }
  std::size_t layers() const { return shape_.hidden.size() + 1; }

  std::string weight_name(std::size_t k) const { return prefix_ + "layer" + std::to_string(k) + ".weight"; }
  std::string bias_name(std::size_t k) const { return prefix_ + "layer" + std::to_string(k) + ".bias"; }

  void append_layout(LayoutBuilder& b) const {
    Index in = shape_.inputs;
    for (std::size_t k = 0; k < layers(); ++k) {
      const Index out = k < shape_.hidden.size() ? shape_.hidden[k] : shape_.outputs;
      b.add(weight_name(k), out, in);
      b.add(bias_name(k), out);
      in = out;
    }
  }

  ParamVector make_params() const {
    LayoutBuilder b;
    append_layout(b);
    return b.build();
  }

  /// Symmetric uniform initialization scaled by fan-in; biases start at zero.
  void init_uniform(ParamVector& params, std::mt19937_64& rng, double output_scale = 1.0) const {
    for (std::size_t k = 0; k < layers(); ++k) {
      auto w = params.matrix(weight_name(k));
      const double bound = (w.cols() > 0 ? 1.0 / std::sqrt(static_cast<double>(w.cols())) : 0.0) *
                           (k + 1 == layers() ? output_scale : 1.0);
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Index j = 0; j < w.cols(); ++j) {
        for (Index i = 0; i < w.rows(); ++i) w(i, j) = u(rng);
      }
      params.matrix(bias_name(k)).setZero();
    }
  }

  NodeId record(Tape& tape, const Vec& x) const {
    detail::require(x.size() == shape_.inputs, "mlp: expected input of size " + std::to_string(shape_.inputs) +
                                                   ", got " + std::to_string(x.size()));
    NodeId h = tape.input(x);
    for (std::size_t k = 0; k < layers(); ++k) {
      h = tape.affine(weight_name(k), bias_name(k), h);
      h = tape.activate(k + 1 == layers() ? shape_.output_activation : shape_.hidden_activation, h);
    }
    return h;
  }

  Vec forward(const ParamVector& params, const Vec& x) const {
    detail::require(x.size() == shape_.inputs, "mlp: expected input of size " + std::to_string(shape_.inputs) +
                                                   ", got " + std::to_string(x.size()));
    Vec h = x;
    for (std::size_t k = 0; k < layers(); ++k) {
      Vec z = params.matrix(weight_name(k)) * h + params.matrix(bias_name(k)).col(0);
      h = apply(k + 1 == layers() ? shape_.output_activation : shape_.hidden_activation, std::move(z));
    }
    return h;
  }

  nlohmann::json to_json() const {
    return {{"inputs", shape_.inputs},
            {"hidden", shape_.hidden},
            {"outputs", shape_.outputs},
            {"hidden_activation", name(shape_.hidden_activation)},
            {"output_activation", name(shape_.output_activation)},
            {"prefix", prefix_}};
  }

  static Mlp from_json(const nlohmann::json& j) {
    MlpShape s;
    s.inputs = j.at("inputs").get<Index>();
    s.hidden = j.at("hidden").get<std::vector<Index>>();
    s.outputs = j.at("outputs").get<Index>();
    s.hidden_activation = parse_activation(j.at("hidden_activation").get<std::string>());
    s.output_activation = parse_activation(j.at("output_activation").get<std::string>());
    return Mlp(s, j.value("prefix", std::string{}));
  }

  static Vec apply(Activation a, Vec z) {
    switch (a) {
      case Activation::tanh: return z.array().tanh();
      case Activation::sigmoid: return z.unaryExpr([](double v) { return crokit::sigmoid(v); });
      case Activation::identity: return z;
    }
    return z;
  }

  static const char* name(Activation a) {
    switch (a) {
      case Activation::tanh: return "tanh";
      case Activation::sigmoid: return "sigmoid";
      case Activation::identity: return "identity";
    }
    return "identity";
  }

  static Activation parse_activation(const std::string& s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "sigmoid") return Activation::sigmoid;
    if (s == "identity") return Activation::identity;
    throw InputError("unknown activation '" + s + "'");
  }

 private:
  MlpShape shape_;
  std::string prefix_;
};

/// Raw network output describing an ellipsoid before the positivity transforms.
struct SetPredictorOutput {
  Vec mu;
  Vec L_raw;  // row-major lower triangle: (0,0), (1,0), (1,1), (2,0), ...
  double r_raw = 0.0;
};

inline Index tri_size(Index m) { return m * (m + 1) / 2; }

struct SetPredictorConfig {
  Index covariates = 2;
  Index dim = 2;
  std::vector<Index> hidden{64, 64};
  /// When false the scale r is a single learned scalar shared by every psi.
  bool psi_dependent_radius = false;
  double output_init_scale = 0.1;
};

/// The set predictor network psi -> (mu, L_raw, r_raw).
class SetPredictor {
 public:
  SetPredictor() = default;
  explicit SetPredictor(SetPredictorConfig cfg) : cfg_(std::move(cfg)) {
    detail::require(cfg_.dim >= 1 && cfg_.covariates >= 0, "set predictor: invalid dimensions");
    MlpShape s{cfg_.covariates, cfg_.hidden, cfg_.dim + tri_size(cfg_.dim) + (cfg_.psi_dependent_radius ? 1 : 0),
               Activation::tanh, Activation::identity};
    net_ = Mlp(s);
  }

  const SetPredictorConfig& config() const { return cfg_; }
  const Mlp& network() const { return net_; }
  Index dim() const { return cfg_.dim; }
  Index output_size() const { return cfg_.dim + tri_size(cfg_.dim) + 1; }

  ParamVector make_params() const {
    LayoutBuilder b;
    net_.append_layout(b);
    if (!cfg_.psi_dependent_radius) b.add("log_radius", 1);
    return b.build();
  }

  ParamVector init(std::mt19937_64& rng) const {
    ParamVector p = make_params();
    net_.init_uniform(p, rng, cfg_.output_init_scale);
    return p;
  }

  SetPredictorOutput forward(const ParamVector& theta, const Vec& psi) const { return split(theta, net_.forward(theta, psi)); }

  struct Recorded {
    Tape tape;
    NodeId output;
    SetPredictorOutput value;
  };

  Recorded record(const ParamVector& theta, const Vec& psi) const {
    Tape tape(theta);
    NodeId out = net_.record(tape, psi);
    SetPredictorOutput v = split(theta, tape.value(out));
    return {std::move(tape), out, std::move(v)};
  }

  /// Parameter gradient of <seed, output>, where seed is shaped like the output.
  Vec backward(const Recorded& rec, const SetPredictorOutput& seed) const {
    const Index m = cfg_.dim;
    Vec net_seed(net_.shape().outputs);
    net_seed.head(m) = seed.mu;
    net_seed.segment(m, tri_size(m)) = seed.L_raw;
    if (cfg_.psi_dependent_radius) net_seed(m + tri_size(m)) = seed.r_raw;
    Vec g = rec.tape.backward(rec.output, net_seed);
    if (!cfg_.psi_dependent_radius) g(rec.tape.params().slice("log_radius").offset) += seed.r_raw;
    return g;
  }

  nlohmann::json to_json() const {
    return {{"covariates", cfg_.covariates},
            {"dim", cfg_.dim},
            {"hidden", cfg_.hidden},
            {"psi_dependent_radius", cfg_.psi_dependent_radius},
            {"output_init_scale", cfg_.output_init_scale}};
  }

  static SetPredictor from_json(const nlohmann::json& j) {
    SetPredictorConfig c;
    c.covariates = j.at("covariates").get<Index>();
    c.dim = j.at("dim").get<Index>();
    c.hidden = j.at("hidden").get<std::vector<Index>>();
    c.psi_dependent_radius = j.value("psi_dependent_radius", false);
    c.output_init_scale = j.value("output_init_scale", 0.1);
    return SetPredictor(c);
  }

 private:
  SetPredictorOutput split(const ParamVector& theta, const Vec& y) const {
    const Index m = cfg_.dim;
    SetPredictorOutput o;
    o.mu = y.head(m);
    o.L_raw = y.segment(m, tri_size(m));
    o.r_raw = cfg_.psi_dependent_radius ? y(m + tri_size(m)) : theta.matrix("log_radius")(0, 0);
    return o;
  }

  SetPredictorConfig cfg_;
  Mlp net_;
};

/// Logistic model g_phi(psi): an Mlp with a single sigmoid output. The result
/// is kept strictly inside (0, 1).
inline double forward_logistic(const Mlp& net, const ParamVector& phi, const Vec& psi) {
  detail::require(net.shape().outputs == 1 && net.shape().output_activation == Activation::sigmoid,
                  "forward_logistic: network must have one sigmoid output");
  const double p = net.forward(phi, psi)(0);
  constexpr double lo = std::numeric_limits<double>::min();
  return std::clamp(p, lo, std::nextafter(1.0, 0.0));
}

enum class OptimizerKind { sgd, momentum, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double step = 1e-2;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "momentum") return OptimizerKind::momentum;
  if (s == "adam") return OptimizerKind::adam;
  throw InputError("unknown optimizer '" + s + "'");
}

inline const char* optimizer_name(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::momentum: return "momentum";
    case OptimizerKind::adam: return "adam";
  }
  return "sgd";
}

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) { detail::require(cfg_.step >= 0, "optimizer: negative step"); }

  void step(Vec& params, const Vec& grad) {
    switch (cfg_.kind) {
      case OptimizerKind::sgd:
        params -= cfg_.step * grad;
        break;
      case OptimizerKind::momentum:
        if (m_.size() != grad.size()) m_ = Vec::Zero(grad.size());
        m_ = cfg_.momentum * m_ + grad;
        params -= cfg_.step * m_;
        break;
      case OptimizerKind::adam: {
        if (m_.size() != grad.size()) {
          m_ = Vec::Zero(grad.size());
          v_ = Vec::Zero(grad.size());
        }
        ++t_;
        m_ = cfg_.beta1 * m_ + (1 - cfg_.beta1) * grad;
        v_ = cfg_.beta2 * v_ + (1 - cfg_.beta2) * grad.cwiseAbs2();
        const double c1 = 1 - std::pow(cfg_.beta1, t_);
        const double c2 = 1 - std::pow(cfg_.beta2, t_);
        params.array() -= cfg_.step * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.epsilon);
        break;
      }
    }
  }

  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  Vec m_, v_;
  int t_ = 0;
};

// Checkpoint blob: one line of JSON (layout + caller metadata), a newline,
// then the parameters as little-endian IEEE-754 doubles.

inline void write_params(std::ostream& os, const ParamVector& p, nlohmann::json meta = nlohmann::json::object()) {
  meta["layout"] = p.layout_json();
  meta["count"] = p.size();
  meta["encoding"] = "f64le";
  os << meta.dump() << '\n';
  for (Index i = 0; i < p.size(); ++i) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(p.values()(i));
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    char buf[8];
    std::memcpy(buf, &bits, 8);
    os.write(buf, 8);
  }
}

inline std::pair<ParamVector, nlohmann::json> read_params(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw InputError("checkpoint: missing JSON header");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("checkpoint: bad JSON header: ") + e.what());
  }
  ParamVector p = ParamVector::from_layout_json(meta.at("layout"));
  detail::require(meta.at("count").get<Index>() == p.size(), "checkpoint: count does not match layout");
  for (Index i = 0; i < p.size(); ++i) {
    char buf[8];
    if (!is.read(buf, 8)) throw InputError("checkpoint: truncated parameter blob");
    std::uint64_t bits;
    std::memcpy(&bits, buf, 8);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    p.values()(i) = std::bit_cast<double>(bits);
  }
  return {std::move(p), std::move(meta)};
}

inline void save_params(const std::string& path, const ParamVector& p, nlohmann::json meta = nlohmann::json::object()) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write checkpoint '" + path + "'");
  write_params(os, p, std::move(meta));
}

inline std::pair<ParamVector, nlohmann::json> load_params(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint '" + path + "'");
  return read_params(is);
}

}  // namespace crokit
