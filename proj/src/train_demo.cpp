#include <chrono>
#include <cmath>
#include <numeric>

#include "parallel.hpp"
#include "spectral/harness.hpp"
#include "spectral/kron_factor.hpp"

namespace spectral {

namespace {

struct Dataset {
  MatrixD x;  // samples x (input_dim + 1), last column is the bias input
  std::vector<Index> y;
};

// Gaussian mixture with clusters_per_class clusters per class; cluster means lie
// at pairwise distance about `separation`.
Dataset make_dataset(const TrainSettings& t, std::uint64_t seed) {
  Rng rng(seed, static_cast<std::uint64_t>(StreamId::data));
  const Index clusters = t.classes * t.clusters_per_class;
  MatrixD means(clusters, t.input_dim);
  const double scale = t.separation / std::sqrt(2.0 * static_cast<double>(t.input_dim));
  for (Index c = 0; c < clusters; ++c)
    for (Index i = 0; i < t.input_dim; ++i) means(c, i) = scale * rng.normal();
  Dataset d;
  d.x.resize(t.samples, t.input_dim + 1);
  d.y.resize(static_cast<std::size_t>(t.samples));
  for (Index s = 0; s < t.samples; ++s) {
    const Index c = s % clusters;
    d.y[static_cast<std::size_t>(s)] = c % t.classes;
    for (Index i = 0; i < t.input_dim; ++i) d.x(s, i) = means(c, i) + rng.normal();
    d.x(s, t.input_dim) = 1.0;
  }
  return d;
}

template <typename T>
struct Eval {
  double loss;
  double accuracy;
};

// Softmax cross-entropy; fills dlogits = (softmax - onehot) / rows when requested.
template <typename T>
Eval<T> softmax_xent(const Matrix<T>& logits, const std::vector<Index>& labels, Matrix<T>* dlogits) {
  const Index rows = logits.rows();
  double loss = 0.0;
  Index correct = 0;
  if (dlogits) dlogits->resize(rows, logits.cols());
  for (Index r = 0; r < rows; ++r) {
    const T mx = logits.row(r).maxCoeff();
    Vector<T> e = (logits.row(r).array() - mx).exp().transpose();
    const T z = e.sum();
    const Index y = labels[static_cast<std::size_t>(r)];
    loss += -(static_cast<double>(logits(r, y) - mx) - std::log(static_cast<double>(z)));
    Index arg;
    logits.row(r).maxCoeff(&arg);
    correct += arg == y;
    if (dlogits) {
      e /= z;
      e(y) -= T(1);
      dlogits->row(r) = e.transpose() / T(rows);
    }
  }
  return {loss / static_cast<double>(rows), static_cast<double>(correct) / static_cast<double>(rows)};
}

template <typename T>
struct Mlp {
  Matrix<T> w1;  // (input + 1) x hidden
  Matrix<T> w2;  // (hidden + 1) x classes

  Matrix<T> hidden(const Matrix<T>& x) const {
    Matrix<T> h(x.rows(), w1.cols() + 1);
    h.leftCols(w1.cols()) = (x * w1).cwiseMax(T(0));
    h.col(w1.cols()).setOnes();
    return h;
  }

  Eval<T> evaluate(const Matrix<T>& x, const std::vector<Index>& y) const {
    return softmax_xent<T>(Matrix<T>(hidden(x) * w2), y, nullptr);
  }

  // Mean loss gradients on a minibatch.
  Eval<T> gradients(const Matrix<T>& x, const std::vector<Index>& y, Matrix<T>& g1, Matrix<T>& g2) const {
    const Matrix<T> pre = x * w1;
    Matrix<T> h(x.rows(), w1.cols() + 1);
    h.leftCols(w1.cols()) = pre.cwiseMax(T(0));
    h.col(w1.cols()).setOnes();
    Matrix<T> dlogits;
    const Eval<T> ev = softmax_xent<T>(Matrix<T>(h * w2), y, &dlogits);
    g2 = h.transpose() * dlogits;
    Matrix<T> dh = dlogits * w2.topRows(w1.cols()).transpose();
    dh = dh.cwiseProduct((pre.array() > T(0)).template cast<T>().matrix());
    g1 = x.transpose() * dh;
    return ev;
  }
};

// Per-layer optimizer state: Kronecker factor plus momentum buffer.
template <typename T>
struct LayerState {
  KronSpectralFactor<T> kf;
  Matrix<T> momentum;
};

template <typename T>
void layer_step(LayerState<T>& st, Matrix<T>& w, const Matrix<T>& g, const ExperimentSpec& spec) {
  const UpdateConfig& cfg = spec.config;
  st.kf = kron_rgd_step_truncated(st.kf, g, cfg);
  Matrix<T> delta = kron_precondition(st.kf, g, cfg.root);
  if (cfg.clip_norm) delta = clip_preconditioned(delta, *cfg.clip_norm);
  st.momentum = static_cast<T>(spec.train.momentum) * st.momentum + delta;
  const T lr = static_cast<T>(spec.train.lr);
  w = (T(1) - lr * static_cast<T>(spec.train.weight_decay)) * w - lr * st.momentum;
}

// Full-batch gradient descent on a linear softmax model; the accuracy floor.
double logistic_floor(const Dataset& data, const TrainSettings& t, Index epochs) {
  MatrixD w = MatrixD::Zero(data.x.cols(), t.classes);
  MatrixD dl;
  const Index iters = std::max<Index>(epochs, 1) * 5;
  for (Index it = 0; it < iters; ++it) {
    softmax_xent<double>(MatrixD(data.x * w), data.y, &dl);
    w -= t.floor_lr * (data.x.transpose() * dl);
  }
  return softmax_xent<double>(MatrixD(data.x * w), data.y, nullptr).accuracy;
}

template <typename T>
void run_train_cell(const ExperimentSpec& spec, std::uint64_t seed, std::vector<TraceRecord>& rows, bool& failed,
                    std::string& failure) {
  const TrainSettings& t = spec.train;
  const Dataset data = make_dataset(t, seed);
  const Matrix<T> x = data.x.cast<T>();
  const std::string method = to_string(Method::kron_truncated);
  double elapsed = 0.0;
  auto add = [&](std::int64_t k, const char* metric, double v) {
    rows.push_back({spec.id, method, seed, k, metric, v, elapsed});
  };

  Rng init(seed, static_cast<std::uint64_t>(StreamId::init));
  Mlp<T> net;
  net.w1.resize(t.input_dim + 1, t.hidden);
  net.w2.resize(t.hidden + 1, t.classes);
  const double s1 = std::sqrt(2.0 / static_cast<double>(t.input_dim + 1));
  for (Index j = 0; j < net.w1.cols(); ++j)
    for (Index i = 0; i < net.w1.rows(); ++i) net.w1(i, j) = static_cast<T>(s1 * init.normal());
  // Small output layer so the initial predictions are close to uniform.
  for (Index j = 0; j < net.w2.cols(); ++j)
    for (Index i = 0; i < net.w2.rows(); ++i) net.w2(i, j) = static_cast<T>(1e-3 * init.normal());

  LayerState<T> l1{KronSpectralFactor<T>::identity(net.w1.rows(), net.w1.cols()), Matrix<T>::Zero(net.w1.rows(), net.w1.cols())};
  LayerState<T> l2{KronSpectralFactor<T>::identity(net.w2.rows(), net.w2.cols()), Matrix<T>::Zero(net.w2.rows(), net.w2.cols())};

  Eval<T> ev = net.evaluate(x, data.y);
  add(0, "train_loss", ev.loss);
  add(0, "train_accuracy", ev.accuracy);

  Rng shuffle(seed, method_stream(0));
  std::vector<Index> order(static_cast<std::size_t>(t.samples));
  std::iota(order.begin(), order.end(), Index(0));
  const Index batches = t.samples / t.batch_size;
  Matrix<T> xb(t.batch_size, x.cols()), g1, g2;
  std::vector<Index> yb(static_cast<std::size_t>(t.batch_size));
  try {
    for (Index epoch = 1; epoch <= spec.steps; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[shuffle.below(i + 1)]);
      for (Index b = 0; b < batches; ++b) {
        for (Index r = 0; r < t.batch_size; ++r) {
          const Index s = order[static_cast<std::size_t>(b * t.batch_size + r)];
          xb.row(r) = x.row(s);
          yb[static_cast<std::size_t>(r)] = data.y[static_cast<std::size_t>(s)];
        }
        net.gradients(xb, yb, g1, g2);
        layer_step(l1, net.w1, g1, spec);
        layer_step(l2, net.w2, g2, spec);
      }
      elapsed += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      ev = net.evaluate(x, data.y);
      if (!std::isfinite(ev.loss) || !net.w1.allFinite() || !net.w2.allFinite()) {
        failed = true;
        failure = "training loss is not finite";
        rows.push_back({spec.id, method, seed, epoch, kFailureMetric, 1.0, elapsed});
        return;
      }
      add(epoch, "train_loss", ev.loss);
      add(epoch, "train_accuracy", ev.accuracy);
    }
  } catch (const Error& e) {
    failed = true;
    failure = e.what();
    rows.push_back({spec.id, method, seed, rows.empty() ? 0 : rows.back().iteration, kFailureMetric, 1.0, elapsed});
    return;
  }
  const double floor = logistic_floor(data, t, spec.steps);
  add(spec.steps, "floor_accuracy", floor);
  add(spec.steps, "beats_floor", ev.accuracy >= floor ? 1.0 : 0.0);
}

}  // namespace

RunResult train_demo(const ExperimentSpec& spec) {
  if (spec.kind != ExperimentKind::train_demo) throw ConfigError("train_demo: spec kind must be train_demo");
  spec.validate();
  RunResult result;
  result.meta.spec_hash = fnv1a_hex(spec_to_json(spec).dump());
  result.meta.seeds = spec.seeds;
  result.meta.scalar_bits = spec.precision == Precision::f64 ? 64 : 32;
  const std::size_t ns = spec.seeds.size();
  std::vector<std::vector<TraceRecord>> rows(ns);
  std::vector<char> failed(ns, 0);
  std::vector<std::string> why(ns);
  detail::parallel_for(ns, [&](std::size_t i) {
    bool f = false;
    if (spec.precision == Precision::f64)
      run_train_cell<double>(spec, spec.seeds[i], rows[i], f, why[i]);
    else
      run_train_cell<float>(spec, spec.seeds[i], rows[i], f, why[i]);
    failed[i] = f;
  });
  result.cells = static_cast<Index>(ns);
  for (std::size_t i = 0; i < ns; ++i) {
    result.records.insert(result.records.end(), rows[i].begin(), rows[i].end());
    result.failed_cells += failed[i];
    if (failed[i]) result.failures.push_back("kron_truncated seed " + std::to_string(spec.seeds[i]) + ": " + why[i]);
  }
  return result;
}

}  // namespace spectral
