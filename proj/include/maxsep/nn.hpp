#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "maxsep/data.hpp"
#include "maxsep/errors.hpp"
#include "maxsep/eval.hpp"
#include "maxsep/matrix.hpp"
#include "maxsep/numeric_io.hpp"
#include "maxsep/rng.hpp"
#include "maxsep/separation.hpp"

namespace maxsep {

/// The four logit-head variants under comparison:
///  - MaxSepFixed: immutable separation matrix, logits = rho * P^T x.
///  - MaxSepLearnableInit: learnable matrix starting exactly at P; step-0
///    logits are bitwise identical to MaxSepFixed.
///  - RandomLearnable: learnable (C-1) -> C matrix, random fan-in init,
///    no bias, no radius.
///  - StandardLinear: ordinary feature_dim -> C linear layer with bias.
enum class HeadKind { MaxSepFixed, MaxSepLearnableInit, RandomLearnable, StandardLinear };

inline const char* head_kind_name(HeadKind k) {
  switch (k) {
    case HeadKind::MaxSepFixed: return "max_sep_fixed";
    case HeadKind::MaxSepLearnableInit: return "max_sep_learnable_init";
    case HeadKind::RandomLearnable: return "random_learnable";
    case HeadKind::StandardLinear: return "standard_linear";
  }
  throw std::invalid_argument("head_kind_name: unknown kind");
}

inline HeadKind head_kind_from_name(const std::string& name) {
  if (name == "max_sep_fixed") return HeadKind::MaxSepFixed;
  if (name == "max_sep_learnable_init") return HeadKind::MaxSepLearnableInit;
  if (name == "random_learnable") return HeadKind::RandomLearnable;
  if (name == "standard_linear") return HeadKind::StandardLinear;
  throw ConfigError("unknown head kind '" + name +
                    "' (want max_sep_fixed | max_sep_learnable_init | random_learnable | "
                    "standard_linear)");
}

enum class ScheduleKind { Cosine, Step };

struct Schedule {
  ScheduleKind kind = ScheduleKind::Cosine;
  std::vector<std::size_t> milestones;  // Step only
  double gamma = 0.1;                   // Step only
};

struct OptimizerConfig {
  double initial_lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  Schedule schedule;
};

/// Learning rate at the start of `epoch` (0-based).
/// Cosine: lr0 * 0.5 * (1 + cos(pi * epoch / total)). Step: lr0 * gamma^p
/// where p counts milestones m with m <= epoch.
inline double lr_at(const Schedule& s, std::size_t epoch, std::size_t total_epochs,
                    double initial_lr) {
  if (s.kind == ScheduleKind::Cosine) {
    if (total_epochs == 0 || epoch > total_epochs)
      throw std::invalid_argument("lr_at: need 0 <= epoch <= total_epochs with total > 0");
    const double frac = static_cast<double>(epoch) / static_cast<double>(total_epochs);
    return initial_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
  }
  std::size_t passed = 0;
  for (const std::size_t m : s.milestones)
    if (m <= epoch) ++passed;
  return initial_lr * std::pow(s.gamma, static_cast<double>(passed));
}

/// Fully connected layer, out = in * weights + bias. Bias is stored as a
/// 1 x D_out matrix so every parameter tensor shares one representation.
struct DenseLayer {
  Matrix weights, bias;
  Matrix grad_weights, grad_bias;
  Matrix mom_weights, mom_bias;
};

struct Head {
  HeadKind kind = HeadKind::MaxSepFixed;
  SeparationMatrix separation;  // MaxSepFixed only; immutable
  Radius rho{1.0};              // MaxSepFixed and MaxSepLearnableInit
  Matrix weights, bias;         // learnable kinds; bias only for StandardLinear
  Matrix grad_weights, grad_bias;
  Matrix mom_weights, mom_bias;
};

struct Network {
  std::vector<DenseLayer> layers;  // last layer emits the penultimate features
  Head head;
  std::size_t input_dim = 0;
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;
  std::vector<std::size_t> hidden_dims;  // recorded for checkpoints
};

/// One learnable tensor with its gradient/momentum buffers. `decay` marks
/// tensors subject to weight decay (weights yes, biases no).
struct TensorRef {
  std::string name;
  Matrix* param;
  Matrix* grad;
  Matrix* mom;
  bool decay;
};

inline std::vector<TensorRef> parameter_tensors(Network& net) {
  std::vector<TensorRef> out;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    DenseLayer& l = net.layers[i];
    const std::string base = "layer" + std::to_string(i);
    out.push_back({base + ".weights", &l.weights, &l.grad_weights, &l.mom_weights, true});
    out.push_back({base + ".bias", &l.bias, &l.grad_bias, &l.mom_bias, false});
  }
  Head& h = net.head;
  if (h.kind == HeadKind::MaxSepLearnableInit || h.kind == HeadKind::RandomLearnable ||
      h.kind == HeadKind::StandardLinear)
    out.push_back({"head.weights", &h.weights, &h.grad_weights, &h.mom_weights, true});
  if (h.kind == HeadKind::StandardLinear)
    out.push_back({"head.bias", &h.bias, &h.grad_bias, &h.mom_bias, false});
  return out;
}

namespace detail {

inline void init_dense(DenseLayer& l, std::size_t d_in, std::size_t d_out, Rng& rng) {
  l.weights = Matrix(d_in, d_out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  for (std::size_t i = 0; i < l.weights.size(); ++i)
    l.weights.data()[i] = rng.uniform(-bound, bound);
  l.bias = Matrix(1, d_out);
  l.grad_weights = Matrix(d_in, d_out);
  l.grad_bias = Matrix(1, d_out);
  l.mom_weights = Matrix(d_in, d_out);
  l.mom_bias = Matrix(1, d_out);
}

}  // namespace detail

/// Builds layers input_dim -> hidden... -> feature_dim with rectifiers
/// between dense layers (never before the head), then attaches the chosen
/// head. feature_dim 0 means "num_classes - 1"; any other value is only
/// legal for StandardLinear, the one head without the C-1 embedding.
/// Weights start uniform in [-1/sqrt(D_in), +1/sqrt(D_in)], biases at zero,
/// all draws from the given seed.
inline Network make_network(std::size_t input_dim, const std::vector<std::size_t>& hidden_dims,
                            std::size_t num_classes, HeadKind kind, double rho, std::uint64_t seed,
                            std::size_t feature_dim = 0) {
  if (input_dim == 0) throw std::invalid_argument("make_network: input_dim must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("make_network: need at least 2 classes");
  for (const std::size_t h : hidden_dims)
    if (h == 0) throw std::invalid_argument("make_network: hidden dims must be >= 1");
  if (!(rho > 0.0)) throw std::invalid_argument("make_network: rho must be > 0");

  const std::size_t k = num_classes - 1;
  if (feature_dim == 0) feature_dim = k;
  if (kind != HeadKind::StandardLinear && feature_dim != k)
    throw std::invalid_argument("make_network: feature_dim must equal num_classes - 1 for this head");

  Network net;
  net.input_dim = input_dim;
  net.feature_dim = feature_dim;
  net.num_classes = num_classes;
  net.hidden_dims = hidden_dims;

  Rng rng(seed);
  std::size_t prev = input_dim;
  for (const std::size_t h : hidden_dims) {
    DenseLayer l;
    detail::init_dense(l, prev, h, rng);
    net.layers.push_back(std::move(l));
    prev = h;
  }
  DenseLayer last;
  detail::init_dense(last, prev, feature_dim, rng);
  net.layers.push_back(std::move(last));

  Head& head = net.head;
  head.kind = kind;
  head.rho = Radius{rho};
  const auto init_head_matrix = [&](std::size_t d_in) {
    head.weights = Matrix(d_in, num_classes);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    for (std::size_t i = 0; i < head.weights.size(); ++i)
      head.weights.data()[i] = rng.uniform(-bound, bound);
  };
  switch (kind) {
    case HeadKind::MaxSepFixed:
      head.separation = build_separation_matrix(num_classes);
      break;
    case HeadKind::MaxSepLearnableInit: {
      const SeparationMatrix p = build_separation_matrix(num_classes);
      head.weights = p.entries;
      break;
    }
    case HeadKind::RandomLearnable:
      init_head_matrix(k);
      break;
    case HeadKind::StandardLinear:
      init_head_matrix(feature_dim);
      head.bias = Matrix(1, num_classes);
      break;
  }
  if (!head.weights.empty()) {
    head.grad_weights = Matrix(head.weights.rows(), head.weights.cols());
    head.mom_weights = Matrix(head.weights.rows(), head.weights.cols());
  }
  if (!head.bias.empty()) {
    head.grad_bias = Matrix(1, num_classes);
    head.mom_bias = Matrix(1, num_classes);
  }
  return net;
}

/// Intermediates needed by backward: the input of every dense layer, the
/// pre-rectifier outputs that were gated, and the final features/logits.
struct ForwardCache {
  std::vector<Matrix> layer_inputs;  // one per dense layer
  std::vector<Matrix> preacts;       // one per rectifier (layers.size() - 1)
  Matrix features;                   // penultimate output
  Matrix logits;
};

inline ForwardCache forward(const Network& net, const Matrix& batch) {
  if (batch.cols() != net.input_dim)
    throw ShapeError("forward: batch has " + std::to_string(batch.cols()) +
                     " columns, network expects " + std::to_string(net.input_dim));
  ForwardCache cache;
  Matrix x = batch;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const DenseLayer& l = net.layers[i];
    cache.layer_inputs.push_back(x);
    Matrix out = matmul(x, l.weights);
    for (std::size_t r = 0; r < out.rows(); ++r) {
      double* row = out.row(r);
      const double* b = l.bias.row(0);
      for (std::size_t c = 0; c < out.cols(); ++c) row[c] += b[c];
    }
    if (i + 1 < net.layers.size()) {
      cache.preacts.push_back(out);
      for (std::size_t j = 0; j < out.size(); ++j) out.data()[j] = std::max(0.0, out.data()[j]);
    }
    x = std::move(out);
  }
  cache.features = x;

  const Head& h = net.head;
  switch (h.kind) {
    case HeadKind::MaxSepFixed:
      cache.logits = head_forward(h.separation, h.rho, cache.features);
      break;
    case HeadKind::MaxSepLearnableInit: {
      cache.logits = matmul(cache.features, h.weights);
      for (std::size_t j = 0; j < cache.logits.size(); ++j) cache.logits.data()[j] *= h.rho.rho;
      break;
    }
    case HeadKind::RandomLearnable:
      cache.logits = matmul(cache.features, h.weights);
      break;
    case HeadKind::StandardLinear: {
      cache.logits = matmul(cache.features, h.weights);
      for (std::size_t r = 0; r < cache.logits.rows(); ++r) {
        double* row = cache.logits.row(r);
        const double* b = h.bias.row(0);
        for (std::size_t c = 0; c < cache.logits.cols(); ++c) row[c] += b[c];
      }
      break;
    }
  }
  return cache;
}

/// Mean cross-entropy of softmaxed logits against integer labels, plus the
/// logit gradient (softmax - one_hot) / N. Uses the max-shifted log-sum-exp,
/// so huge logits stay finite.
inline std::pair<double, Matrix> softmax_cross_entropy(const Matrix& logits,
                                                       const std::vector<int>& labels) {
  const std::size_t n = logits.rows();
  const std::size_t c_total = logits.cols();
  if (labels.size() != n)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(n) + " logit rows vs " +
                     std::to_string(labels.size()) + " labels");
  if (n == 0) throw std::invalid_argument("softmax_cross_entropy: empty batch");

  Matrix grad(n, c_total);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c_total)
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(c_total) + ")");
    const double* row = logits.row(i);
    double m = row[0];
    for (std::size_t c = 1; c < c_total; ++c) m = std::max(m, row[c]);
    double denom = 0.0;
    for (std::size_t c = 0; c < c_total; ++c) denom += std::exp(row[c] - m);
    const double lse = m + std::log(denom);
    loss += lse - row[static_cast<std::size_t>(y)];
    double* g = grad.row(i);
    for (std::size_t c = 0; c < c_total; ++c)
      g[c] = std::exp(row[c] - m) / denom / static_cast<double>(n);
    g[static_cast<std::size_t>(y)] -= 1.0 / static_cast<double>(n);
  }
  return {loss / static_cast<double>(n), std::move(grad)};
}

/// Accumulates parameter gradients for the batch behind `cache`. The fixed
/// head has no parameters; it only routes the gradient into the features.
inline void backward(Network& net, const ForwardCache& cache, const Matrix& grad_logits) {
  if (cache.layer_inputs.size() != net.layers.size() ||
      cache.preacts.size() + 1 != net.layers.size() ||
      cache.features.cols() != net.feature_dim)
    throw ShapeError("backward: cache does not match network layout");
  if (grad_logits.rows() != cache.features.rows() || grad_logits.cols() != net.num_classes)
    throw ShapeError("backward: grad_logits is " + std::to_string(grad_logits.rows()) + "x" +
                     std::to_string(grad_logits.cols()) + ", expected " +
                     std::to_string(cache.features.rows()) + "x" +
                     std::to_string(net.num_classes));

  Head& h = net.head;
  Matrix grad_feat;
  switch (h.kind) {
    case HeadKind::MaxSepFixed:
      grad_feat = head_backward(h.separation, h.rho, grad_logits);
      break;
    case HeadKind::MaxSepLearnableInit: {
      Matrix gw = matmul_at(cache.features, grad_logits);
      for (std::size_t j = 0; j < gw.size(); ++j) h.grad_weights.data()[j] += h.rho.rho * gw.data()[j];
      grad_feat = matmul_bt(grad_logits, h.weights);
      for (std::size_t j = 0; j < grad_feat.size(); ++j) grad_feat.data()[j] *= h.rho.rho;
      break;
    }
    case HeadKind::RandomLearnable: {
      Matrix gw = matmul_at(cache.features, grad_logits);
      for (std::size_t j = 0; j < gw.size(); ++j) h.grad_weights.data()[j] += gw.data()[j];
      grad_feat = matmul_bt(grad_logits, h.weights);
      break;
    }
    case HeadKind::StandardLinear: {
      Matrix gw = matmul_at(cache.features, grad_logits);
      for (std::size_t j = 0; j < gw.size(); ++j) h.grad_weights.data()[j] += gw.data()[j];
      for (std::size_t r = 0; r < grad_logits.rows(); ++r) {
        const double* g = grad_logits.row(r);
        double* gb = h.grad_bias.row(0);
        for (std::size_t c = 0; c < grad_logits.cols(); ++c) gb[c] += g[c];
      }
      grad_feat = matmul_bt(grad_logits, h.weights);
      break;
    }
  }

  Matrix g = std::move(grad_feat);
  for (std::size_t i = net.layers.size(); i > 0; --i) {
    DenseLayer& l = net.layers[i - 1];
    const Matrix& input = cache.layer_inputs[i - 1];
    Matrix gw = matmul_at(input, g);
    for (std::size_t j = 0; j < gw.size(); ++j) l.grad_weights.data()[j] += gw.data()[j];
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const double* grow = g.row(r);
      double* gb = l.grad_bias.row(0);
      for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += grow[c];
    }
    if (i - 1 == 0) break;  // no gradient needed past the first layer's input
    g = matmul_bt(g, l.weights);
    const Matrix& pre = cache.preacts[i - 2];
    for (std::size_t j = 0; j < g.size(); ++j)
      if (pre.data()[j] <= 0.0) g.data()[j] = 0.0;
  }
}

/// Momentum SGD with decoupled-from-bias weight decay:
///   v <- momentum * v + grad + weight_decay * param   (decay on weights only)
///   param <- param - lr_now * v
/// Gradients are zeroed afterwards, ready for the next accumulation.
inline void sgd_step(Network& net, const OptimizerConfig& opt, double lr_now) {
  for (const TensorRef& t : parameter_tensors(net)) {
    const double wd = t.decay ? opt.weight_decay : 0.0;
    for (std::size_t j = 0; j < t.param->size(); ++j) {
      double& v = t.mom->data()[j];
      v = opt.momentum * v + t.grad->data()[j] + wd * t.param->data()[j];
      t.param->data()[j] -= lr_now * v;
      t.grad->data()[j] = 0.0;
    }
  }
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;       // mean per-sample training loss over the epoch
  double train_acc = 0.0;  // full-pass accuracy after the epoch's updates
  double test_acc = 0.0;   // NaN when no test set is supplied
};

/// Runs `epochs` of minibatch SGD. Batches come from a fresh index shuffle
/// each epoch (seed mixed with the epoch number); the last partial batch is
/// kept. Deterministic: a seed fixes the whole trajectory bit for bit.
inline std::vector<EpochRecord> train(Network& net, const Dataset& train_ds,
                                      const Dataset* test_ds, const OptimizerConfig& opt,
                                      std::size_t epochs, std::size_t batch_size,
                                      std::uint64_t seed) {
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(opt.initial_lr > 0.0)) throw std::invalid_argument("train: initial_lr must be > 0");
  if (opt.momentum < 0.0 || opt.momentum >= 1.0)
    throw std::invalid_argument("train: momentum must be in [0, 1)");
  if (opt.weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be >= 0");
  validate_labels(train_ds);
  if (train_ds.num_classes != net.num_classes)
    throw std::invalid_argument("train: dataset has " + std::to_string(train_ds.num_classes) +
                                " classes, network expects " + std::to_string(net.num_classes));
  if (test_ds) validate_labels(*test_ds);
  const std::size_t n = train_ds.features.rows();
  if (n == 0) throw std::invalid_argument("train: empty training set");

  std::vector<EpochRecord> log;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const double lr = lr_at(opt.schedule, epoch, epochs, opt.initial_lr);
    Rng shuffle_rng(Rng::mix(seed, epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t count = std::min(batch_size, n - start);
      Matrix batch(count, train_ds.features.cols());
      std::vector<int> labels(count);
      for (std::size_t b = 0; b < count; ++b) {
        const std::size_t src = order[start + b];
        const double* srow = train_ds.features.row(src);
        std::copy(srow, srow + train_ds.features.cols(), batch.row(b));
        labels[b] = train_ds.labels[src];
      }
      const ForwardCache cache = forward(net, batch);
      auto [loss, grad] = softmax_cross_entropy(cache.logits, labels);
      backward(net, cache, grad);
      sgd_step(net, opt, lr);
      loss_sum += loss * static_cast<double>(count);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss = loss_sum / static_cast<double>(n);
    rec.train_acc =
        accuracy(argmax_rows(forward(net, train_ds.features).logits), train_ds.labels);
    rec.test_acc = test_ds ? accuracy(argmax_rows(forward(net, test_ds->features).logits),
                                      test_ds->labels)
                           : std::numeric_limits<double>::quiet_NaN();
    log.push_back(rec);
  }
  return log;
}

/// Checkpoint layout: line 1 is a JSON header (architecture + head + radius);
/// every following line is `tensor_name:v1,v2,...` in parameter order, values
/// in round-trip decimal. The fixed head's separation matrix is stored too,
/// so a checkpoint is self-contained. Momentum buffers are not saved — a
/// checkpoint captures parameters, not optimizer state.
inline void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  nlohmann::json header;
  header["format"] = "maxsep-net";
  header["version"] = 1;
  header["input_dim"] = net.input_dim;
  header["hidden_dims"] = net.hidden_dims;
  header["feature_dim"] = net.feature_dim;
  header["num_classes"] = net.num_classes;
  header["head_kind"] = head_kind_name(net.head.kind);
  header["rho"] = net.head.rho.rho;

  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  out << header.dump() << '\n';
  const auto dump_tensor = [&out](const std::string& name, const Matrix& m) {
    out << name << ':';
    for (std::size_t j = 0; j < m.size(); ++j) {
      if (j > 0) out << ',';
      out << detail::format_double(m.data()[j]);
    }
    out << '\n';
  };
  Network& mutable_net = const_cast<Network&>(net);  // TensorRef enumeration only
  for (const TensorRef& t : parameter_tensors(mutable_net)) dump_tensor(t.name, *t.param);
  if (net.head.kind == HeadKind::MaxSepFixed)
    dump_tensor("head.separation", net.head.separation.entries);
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

inline Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("checkpoint: missing header line");
  const nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.is_object())
    throw ParseError("checkpoint: header is not valid JSON");
  if (header.value("format", "") != "maxsep-net")
    throw ParseError("checkpoint: unexpected format field");
  for (const char* field : {"input_dim", "hidden_dims", "feature_dim", "num_classes", "head_kind", "rho"})
    if (!header.contains(field)) throw ParseError(std::string("checkpoint: header missing ") + field);

  Network net = make_network(header["input_dim"].get<std::size_t>(),
                             header["hidden_dims"].get<std::vector<std::size_t>>(),
                             header["num_classes"].get<std::size_t>(),
                             head_kind_from_name(header["head_kind"].get<std::string>()),
                             header["rho"].get<double>(), /*seed=*/0,
                             header["feature_dim"].get<std::size_t>());

  const auto read_into = [&](const std::string& want_name, Matrix& m) {
    if (!std::getline(in, line))
      throw IntegrityError("checkpoint: missing tensor line for " + want_name);
    const std::size_t colon = line.find(':');
    if (colon == std::string::npos)
      throw ParseError("checkpoint: malformed tensor line '" + line.substr(0, 40) + "'");
    const std::string name = line.substr(0, colon);
    if (name != want_name)
      throw IntegrityError("checkpoint: expected tensor " + want_name + ", found " + name);
    std::size_t idx = 0;
    std::size_t pos = colon + 1;
    while (pos <= line.size()) {
      std::size_t comma = line.find(',', pos);
      if (comma == std::string::npos) comma = line.size();
      if (idx >= m.size())
        throw IntegrityError("checkpoint: tensor " + name + " has more than " +
                             std::to_string(m.size()) + " values");
      m.data()[idx] = detail::parse_double(line.substr(pos, comma - pos), 0, idx);
      ++idx;
      pos = comma + 1;
    }
    if (idx != m.size())
      throw IntegrityError("checkpoint: tensor " + name + " has " + std::to_string(idx) +
                           " values, expected " + std::to_string(m.size()));
  };
  for (const TensorRef& t : parameter_tensors(net)) read_into(t.name, *t.param);
  if (net.head.kind == HeadKind::MaxSepFixed)
    read_into("head.separation", net.head.separation.entries);
  return net;
}

}  // namespace maxsep
