#ifndef LESIONFORGE_CLASSIFY_HPP
#define LESIONFORGE_CLASSIFY_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lesionforge/error.hpp"
#include "lesionforge/features.hpp"

namespace lesionforge {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Labels = std::vector<int>;  // 1 = malignant (positive), 0 = benign

struct Dataset {
  Matrix x;
  Labels y;
  std::vector<std::string> ids;
  std::string block;  // "ABCD", "CP" or "both"
};

// ---------------------------------------------------------------- scaling

struct Standardizer {
  Vector mean, scale;

  /// Constant columns get scale 1 so they map to zero.
  static Standardizer fit(const Matrix& x) {
    if (x.rows() == 0) throw ShapeError("cannot standardize zero rows");
    Standardizer s;
    s.mean = x.colwise().mean().transpose();
    s.scale.resize(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double var = (x.col(j).array() - s.mean[j]).square().mean();
      s.scale[j] = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    return s;
  }
  Matrix apply(const Matrix& x) const {
    if (x.cols() != mean.size()) throw ShapeError("standardizer fitted on a different feature count");
    return (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
  }
};

// ---------------------------------------------------------------- logistic

struct LogisticModel {
  double intercept = 0.0;
  Vector w;
  double lambda = 0.0, alpha = 0.0;
  std::size_t sweeps = 0;

  Vector probability(const Matrix& x) const {
    const Vector eta = (x * w).array() + intercept;
    return eta.unaryExpr([](double e) { return 1.0 / (1.0 + std::exp(-e)); });
  }
};

namespace detail {

inline void check_labels(const Matrix& x, const Labels& y) {
  if (std::size_t(x.rows()) != y.size()) throw ShapeError("feature rows and labels differ in count");
  if (y.empty()) throw ShapeError("empty training set");
  for (int v : y)
    if (v != 0 && v != 1) throw ShapeError("labels must be 0 or 1");
  if (!x.allFinite()) throw NumericError("feature matrix contains NaN or Inf");
}

inline double sigmoid(double e) { return 1.0 / (1.0 + std::exp(-e)); }

inline double soft_threshold(double z, double t) { return z > t ? z - t : z < -t ? z + t : 0.0; }

/// Gradient of the mean log-loss with respect to (intercept, w).
inline std::pair<double, Vector> logistic_gradient(const Matrix& x, const Labels& y, double b, const Vector& w) {
  const Vector eta = (x * w).array() + b;
  Vector r(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) r[i] = sigmoid(eta[i]) - y[std::size_t(i)];
  const double n = double(eta.size());
  return {r.sum() / n, x.transpose() * r / n};
}

inline double logistic_lambda_max(const Matrix& x, const Labels& y, double alpha) {
  const double base = std::accumulate(y.begin(), y.end(), 0.0) / double(y.size());
  Vector r(x.rows());
  for (Eigen::Index i = 0; i < r.size(); ++i) r[i] = base - y[std::size_t(i)];
  const double g = x.rows() ? (x.transpose() * r).cwiseAbs().maxCoeff() / double(x.rows()) : 0.0;
  // Slightly above the KKT boundary so the first grid point is exactly sparse.
  return 1.001 * std::max(g, 1e-6) / std::max(alpha, 1e-3);
}

}  // namespace detail

struct LogisticOptions {
  double tol = 1e-10;          // stop when the largest coordinate move is below this
  std::size_t max_sweeps = 20000;
};

/// Minimizes mean log-loss + lambda*(alpha*|w|_1 + (1-alpha)*|w|^2/2) by
/// cyclic coordinate descent on the quadratic majorizer (curvature bound
/// 1/4 per sample), so every step decreases the objective. The intercept is
/// unpenalized.
inline LogisticModel fit_logistic_fixed(const Matrix& x, const Labels& y, double alpha, double lambda,
                                        const LogisticModel* warm = nullptr, const LogisticOptions& opt = {}) {
  detail::check_labels(x, y);
  if (alpha < 0.0 || alpha > 1.0) throw ShapeError("alpha must lie in [0, 1]");
  const Eigen::Index n = x.rows(), p = x.cols();
  LogisticModel m;
  m.alpha = alpha;
  m.lambda = lambda;
  m.w = warm ? warm->w : Vector::Zero(p);
  m.intercept = warm ? warm->intercept : 0.0;
  Vector curv(p);
  for (Eigen::Index j = 0; j < p; ++j) curv[j] = 0.25 * x.col(j).squaredNorm() / double(n);
  Vector eta = (x * m.w).array() + m.intercept;
  Vector r(n);
  auto refresh = [&] {
    for (Eigen::Index i = 0; i < n; ++i) r[i] = detail::sigmoid(eta[i]) - y[std::size_t(i)];
  };
  refresh();
  for (m.sweeps = 0; m.sweeps < opt.max_sweeps; ++m.sweeps) {
    double biggest = 0.0;
    const double db = -(r.sum() / double(n)) / 0.25;
    if (db != 0.0) {
      m.intercept += db;
      eta.array() += db;
      refresh();
      biggest = std::abs(db);
    }
    for (Eigen::Index j = 0; j < p; ++j) {
      if (curv[j] == 0.0) continue;
      const double g = x.col(j).dot(r) / double(n);
      const double nw = detail::soft_threshold(curv[j] * m.w[j] - g, lambda * alpha) / (curv[j] + lambda * (1.0 - alpha));
      const double d = nw - m.w[j];
      if (d == 0.0) continue;
      m.w[j] = nw;
      eta += d * x.col(j);
      refresh();
      biggest = std::max(biggest, std::abs(d));
    }
    if (!std::isfinite(biggest)) throw NumericError("logistic solver diverged");
    if (biggest < opt.tol) break;
  }
  return m;
}

/// 20-point log grid from lambda_max down to lambda_max * 1e-3.
inline std::vector<double> lambda_grid(const Matrix& x, const Labels& y, double alpha, std::size_t points = 20) {
  const double top = detail::logistic_lambda_max(x, y, alpha);
  std::vector<double> g;
  for (std::size_t k = 0; k < points; ++k) g.push_back(top * std::pow(1e-3, double(k) / double(points - 1)));
  return g;
}

inline double log_loss(const Vector& prob, const Labels& y) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < prob.size(); ++i) {
    const double p = std::clamp(prob[i], 1e-15, 1.0 - 1e-15);
    s -= y[std::size_t(i)] ? std::log(p) : std::log(1.0 - p);
  }
  return s / double(prob.size());
}

namespace detail {

/// Stratified split: every class contributes round(share * count) to the
/// first part, at least one member to each side when it has two or more.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(const Labels& y, double share,
                                                                                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> a, b;
  for (int cls : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] == cls) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    auto k = std::size_t(std::lround(share * double(idx.size())));
    if (idx.size() >= 2) k = std::clamp<std::size_t>(k, 1, idx.size() - 1);
    a.insert(a.end(), idx.begin(), idx.begin() + std::ptrdiff_t(std::min(k, idx.size())));
    b.insert(b.end(), idx.begin() + std::ptrdiff_t(std::min(k, idx.size())), idx.end());
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {a, b};
}

inline Matrix take_rows(const Matrix& x, const std::vector<std::size_t>& rows) {
  Matrix out(Eigen::Index(rows.size()), x.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(Eigen::Index(k)) = x.row(Eigen::Index(rows[k]));
  return out;
}

inline Labels take_labels(const Labels& y, const std::vector<std::size_t>& rows) {
  Labels out;
  for (auto r : rows) out.push_back(y[r]);
  return out;
}

}  // namespace detail

/// Chooses lambda on a single stratified 75/25 split of the training data by
/// validation log-loss (ties keep the larger lambda), then refits on all rows.
inline LogisticModel fit_elasticnet_logistic(const Matrix& x, const Labels& y, double alpha, std::uint64_t seed = 0) {
  detail::check_labels(x, y);
  const auto grid = lambda_grid(x, y, alpha);
  const auto [fit_rows, val_rows] = detail::stratified_split(y, 0.75, seed);
  double chosen = grid.front();
  if (!val_rows.empty() && !fit_rows.empty()) {
    const Matrix xf = detail::take_rows(x, fit_rows), xv = detail::take_rows(x, val_rows);
    const Labels yf = detail::take_labels(y, fit_rows), yv = detail::take_labels(y, val_rows);
    double best = INFINITY;
    LogisticModel warm;
    const LogisticModel* prev = nullptr;
    for (double lam : grid) {
      warm = fit_logistic_fixed(xf, yf, alpha, lam, prev);
      prev = &warm;
      const double loss = log_loss(warm.probability(xv), yv);
      if (loss < best) {
        best = loss;
        chosen = lam;
      }
    }
  }
  return fit_logistic_fixed(x, y, alpha, chosen);
}

// ---------------------------------------------------------------- SVM

enum class Kernel { Linear, Rbf };

struct SvmModel {
  Kernel kernel = Kernel::Linear;
  double gamma = 1.0, cost = 1.0, bias = 0.0;
  Matrix support;  // rows with nonzero alpha
  Vector coef;     // alpha_i * y_i for those rows
  Vector dual;     // full alpha, kept for diagnostics
  double kkt_gap = 0.0;
  std::size_t iterations = 0;

  Vector decision(const Matrix& x) const;
};

inline double kernel_value(Kernel k, double gamma, const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  if (k == Kernel::Linear) return a.dot(b);
  return std::exp(-gamma * (a - b).squaredNorm());
}

inline Matrix kernel_matrix(Kernel k, double gamma, const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) out(i, j) = kernel_value(k, gamma, a.row(i).transpose(), b.row(j).transpose());
  return out;
}

inline Vector SvmModel::decision(const Matrix& x) const {
  if (support.rows() == 0) return Vector::Constant(x.rows(), bias);
  return kernel_matrix(kernel, gamma, x, support) * coef + Vector::Constant(x.rows(), bias);
}

/// Dual objective sum(alpha) - 1/2 alpha' Q alpha with Q_ij = y_i y_j K_ij.
inline double svm_dual_objective(const Matrix& q, const Vector& alpha) { return alpha.sum() - 0.5 * alpha.dot(q * alpha); }

struct SvmOptions {
  double eps = 1e-3;  // maximal KKT violation at termination
  std::size_t max_iterations = 1000000;
};

/// SMO with second-order working-set selection. Positive class (label 1)
/// maps to y = +1.
inline SvmModel fit_svm(const Matrix& x, const Labels& labels, Kernel kernel, double cost, double gamma = 1.0,
                        const SvmOptions& opt = {}) {
  detail::check_labels(x, labels);
  if (!(cost > 0.0)) throw ShapeError("SVM cost must be positive");
  const Eigen::Index n = x.rows();
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = labels[std::size_t(i)] ? 1.0 : -1.0;
  const Matrix k = kernel_matrix(kernel, gamma, x, x);
  const Matrix q = (y * y.transpose()).cwiseProduct(k);
  Vector alpha = Vector::Zero(n);
  Vector grad = Vector::Constant(n, -1.0);  // gradient of 1/2 a'Qa - sum(a)
  constexpr double tau = 1e-12;
  auto in_up = [&](Eigen::Index t) { return (y[t] > 0 && alpha[t] < cost) || (y[t] < 0 && alpha[t] > 0); };
  auto in_low = [&](Eigen::Index t) { return (y[t] > 0 && alpha[t] > 0) || (y[t] < 0 && alpha[t] < cost); };
  SvmModel m;
  m.kernel = kernel;
  m.gamma = gamma;
  m.cost = cost;
  for (m.iterations = 0; m.iterations < opt.max_iterations; ++m.iterations) {
    Eigen::Index i = -1;
    double gmax = -INFINITY, gmin = INFINITY;
    for (Eigen::Index t = 0; t < n; ++t) {
      if (in_up(t) && -y[t] * grad[t] > gmax) {
        gmax = -y[t] * grad[t];
        i = t;
      }
      if (in_low(t)) gmin = std::min(gmin, -y[t] * grad[t]);
    }
    m.kkt_gap = i < 0 ? 0.0 : gmax - gmin;
    if (i < 0 || m.kkt_gap <= opt.eps) break;
    Eigen::Index j = -1;
    double best = INFINITY;
    for (Eigen::Index t = 0; t < n; ++t) {
      if (!in_low(t)) continue;
      const double b = gmax + y[t] * grad[t];
      if (b <= 0.0) continue;
      double a = k(i, i) + k(t, t) - 2.0 * k(i, t);
      if (a <= 0.0) a = tau;
      if (-(b * b) / a < best) {
        best = -(b * b) / a;
        j = t;
      }
    }
    if (j < 0) break;
    const double oi = alpha[i], oj = alpha[j];
    double a = k(i, i) + k(j, j) - 2.0 * k(i, j);
    if (a <= 0.0) a = tau;
    // Move along y_i e_i - y_j e_j, which keeps y'alpha fixed.
    double step = (-y[i] * grad[i] + y[j] * grad[j]) / a;
    const double lo_i = y[i] > 0 ? -oi : oi - cost, hi_i = y[i] > 0 ? cost - oi : oi;
    const double lo_j = y[j] > 0 ? oj - cost : -oj, hi_j = y[j] > 0 ? oj : cost - oj;
    step = std::clamp(step, std::max(lo_i, lo_j), std::min(hi_i, hi_j));
    alpha[i] = std::clamp(oi + y[i] * step, 0.0, cost);
    alpha[j] = std::clamp(oj - y[j] * step, 0.0, cost);
    grad += q.col(i) * (alpha[i] - oi) + q.col(j) * (alpha[j] - oj);
  }
  // Bias from free vectors, or the midpoint of the feasible interval.
  double sum = 0.0, ub = INFINITY, lb = -INFINITY;
  std::size_t free = 0;
  for (Eigen::Index t = 0; t < n; ++t) {
    const double yg = y[t] * grad[t];
    if (alpha[t] > 0.0 && alpha[t] < cost) {
      sum += yg;
      ++free;
    } else if ((alpha[t] >= cost && y[t] < 0) || (alpha[t] <= 0.0 && y[t] > 0)) {
      ub = std::min(ub, yg);
    } else {
      lb = std::max(lb, yg);
    }
  }
  const double rho = free ? sum / double(free) : (std::isfinite(ub) && std::isfinite(lb) ? 0.5 * (ub + lb) : std::isfinite(ub) ? ub : std::isfinite(lb) ? lb : 0.0);
  m.bias = -rho;
  m.dual = alpha;
  std::vector<Eigen::Index> sv;
  for (Eigen::Index t = 0; t < n; ++t)
    if (alpha[t] > 0.0) sv.push_back(t);
  m.support.resize(Eigen::Index(sv.size()), x.cols());
  m.coef.resize(Eigen::Index(sv.size()));
  for (std::size_t s = 0; s < sv.size(); ++s) {
    m.support.row(Eigen::Index(s)) = x.row(sv[s]);
    m.coef[Eigen::Index(s)] = alpha[sv[s]] * y[sv[s]];
  }
  return m;
}

// ---------------------------------------------------------------- metrics

struct Metrics {
  double accuracy = 0.0, auc = 0.0, sensitivity = 0.0, specificity = 0.0;
};

/// Mann-Whitney AUC with midranks for ties.
inline double auc_mann_whitney(const Vector& scores, const Labels& y) {
  if (std::size_t(scores.size()) != y.size()) throw ShapeError("scores and labels differ in count");
  std::vector<std::size_t> order(y.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[Eigen::Index(a)] < scores[Eigen::Index(b)]; });
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t s = 0; s < order.size();) {
    std::size_t e = s;
    while (e < order.size() && scores[Eigen::Index(order[e])] == scores[Eigen::Index(order[s])]) ++e;
    const double mid = 0.5 * double(s + 1 + e);
    for (std::size_t k = s; k < e; ++k)
      if (y[order[k]]) rank_sum += mid;
    s = e;
  }
  for (int v : y) pos += std::size_t(v == 1);
  const std::size_t neg = y.size() - pos;
  if (pos == 0 || neg == 0) throw ShapeError("AUC needs both classes present");
  return (rank_sum - double(pos) * double(pos + 1) / 2.0) / (double(pos) * double(neg));
}

/// Classifies score > threshold as positive.
inline Metrics compute_metrics(const Vector& scores, const Labels& y, double threshold = 0.5) {
  if (y.empty()) throw ShapeError("metrics of an empty set");
  Metrics m;
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool pred = scores[Eigen::Index(i)] > threshold;
    (y[i] ? (pred ? tp : fn) : (pred ? fp : tn)) += 1;
  }
  m.accuracy = double(tp + tn) / double(y.size());
  m.sensitivity = tp + fn ? double(tp) / double(tp + fn) : 0.0;
  m.specificity = tn + fp ? double(tn) / double(tn + fp) : 0.0;
  m.auc = auc_mann_whitney(scores, y);
  return m;
}

// ---------------------------------------------------------------- CV

enum class ModelKind { Logistic, Svm };

struct ModelSpec {
  ModelKind kind = ModelKind::Logistic;
  double alpha = 0.5;
  Kernel kernel = Kernel::Linear;
  double cost = 1.0, gamma = 1.0;

  std::string name() const {
    if (kind == ModelKind::Logistic) return "logistic(alpha=" + format_double(alpha) + ")";
    if (kernel == Kernel::Linear) return "svm-linear(cost=" + format_double(cost) + ")";
    return "svm-rbf(cost=" + format_double(cost) + ",gamma=" + format_double(gamma) + ")";
  }
};

/// Linear alpha in {0, 0.5, 1}; SVM linear over 4 costs and radial over
/// 4 costs x 4 gammas.
inline std::vector<ModelSpec> default_model_grid() {
  std::vector<ModelSpec> g;
  for (double a : {0.0, 0.5, 1.0}) g.push_back({ModelKind::Logistic, a});
  for (double c : {0.01, 0.1, 1.0, 10.0}) g.push_back({ModelKind::Svm, 0.0, Kernel::Linear, c});
  for (double c : {0.01, 0.1, 1.0, 10.0})
    for (double gm : {0.01, 0.1, 1.0, 10.0}) g.push_back({ModelKind::Svm, 0.0, Kernel::Rbf, c, gm});
  return g;
}

/// Scores on `test` after fitting on `train`; the threshold for metrics is
/// 0.5 for logistic probabilities and 0 for SVM margins.
inline std::pair<Vector, double> fit_and_score(const ModelSpec& spec, const Matrix& train, const Labels& ytrain,
                                               const Matrix& test, std::uint64_t seed) {
  if (spec.kind == ModelKind::Logistic) {
    return {fit_elasticnet_logistic(train, ytrain, spec.alpha, seed).probability(test), 0.5};
  }
  return {fit_svm(train, ytrain, spec.kernel, spec.cost, spec.gamma).decision(test), 0.0};
}

struct FoldSplit {
  std::size_t repeat = 0, fold = 0;
  std::vector<std::size_t> train, test;
  std::uint64_t seed = 0;
};

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{std::uint32_t(master), std::uint32_t(master >> 32), std::uint32_t(a), std::uint32_t(b)};
  std::uint32_t w[2];
  seq.generate(w, w + 2);
  return (std::uint64_t(w[0]) << 32) | w[1];
}

/// Repeated stratified k-fold: each class is shuffled per repeat and dealt
/// round-robin into folds.
inline std::vector<FoldSplit> stratified_folds(const Labels& y, std::size_t folds, std::size_t repeats, std::uint64_t seed) {
  if (folds < 2) throw ShapeError("need at least 2 folds");
  for (int cls : {0, 1}) {
    const auto c = std::size_t(std::count(y.begin(), y.end(), cls));
    if (c < folds) {
      throw ShapeError("class " + std::to_string(cls) + " has " + std::to_string(c) + " members, fewer than " +
                       std::to_string(folds) + " folds");
    }
  }
  std::vector<FoldSplit> out;
  for (std::size_t r = 0; r < repeats; ++r) {
    std::mt19937_64 rng(derive_seed(seed, r));
    std::vector<std::size_t> fold_of(y.size());
    for (int cls : {0, 1}) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < y.size(); ++i)
        if (y[i] == cls) idx.push_back(i);
      std::shuffle(idx.begin(), idx.end(), rng);
      for (std::size_t k = 0; k < idx.size(); ++k) fold_of[idx[k]] = k % folds;
    }
    for (std::size_t f = 0; f < folds; ++f) {
      FoldSplit s{r, f, {}, {}, derive_seed(seed, r, f + 1)};
      for (std::size_t i = 0; i < y.size(); ++i) (fold_of[i] == f ? s.test : s.train).push_back(i);
      out.push_back(std::move(s));
    }
  }
  return out;
}

struct MetricSummary {
  double mean = 0.0, sd = 0.0;
};

struct ModelReport {
  std::string model, features;
  MetricSummary accuracy, auc, sensitivity, specificity, runtime;
  std::size_t folds = 0;
};

struct ClassificationReport {
  std::vector<ModelReport> rows;
};

inline MetricSummary summarize(const std::vector<double>& v) {
  MetricSummary s;
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / double(v.size() - 1));
  }
  return s;
}

/// Train/test matrices for one fold, built from train rows only (for
/// example a CP decomposition of the training images).
using FeatureHook = std::function<std::pair<Matrix, Matrix>(const FoldSplit&)>;

struct CvOptions {
  std::size_t folds = 5, repeats = 10;
  std::uint64_t seed = 0;
  std::size_t workers = 0;  // 0 = hardware concurrency
};

/// Runs `fn(k)` for k in [0, n) on a bounded pool; results must be written
/// to per-index slots so the outcome does not depend on scheduling.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t k = 0; k < n; ++k) fn(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t k; (k = next++) < n;) {
        try {
          fn(k);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Evaluates every model in `grid` on the given splits. Standardization is
/// fitted on each training part. Without a hook the dataset matrix is split
/// by rows.
inline ClassificationReport evaluate_splits(const Dataset& data, const std::vector<ModelSpec>& grid,
                                            const std::vector<FoldSplit>& splits, std::size_t workers = 0,
                                            const FeatureHook& hook = {}) {
  if (std::size_t(data.x.rows()) != data.y.size() && !hook) throw ShapeError("dataset rows and labels differ");
  const CvOptions opt{.workers = workers};
  struct Cell {
    Metrics m;
    double seconds = 0.0;
  };
  std::vector<std::pair<Matrix, Matrix>> fold_features(splits.size());
  parallel_for(splits.size(), opt.workers, [&](std::size_t s) {
    const auto& sp = splits[s];
    auto [tr, te] = hook ? hook(sp) : std::pair{detail::take_rows(data.x, sp.train), detail::take_rows(data.x, sp.test)};
    const auto st = Standardizer::fit(tr);
    fold_features[s] = {st.apply(tr), st.apply(te)};
  });
  std::vector<Cell> cells(splits.size() * grid.size());
  parallel_for(cells.size(), opt.workers, [&](std::size_t k) {
    const auto& sp = splits[k % splits.size()];
    const auto& spec = grid[k / splits.size()];
    const auto& [tr, te] = fold_features[k % splits.size()];
    const auto t0 = std::chrono::steady_clock::now();
    const auto [scores, threshold] = fit_and_score(spec, tr, detail::take_labels(data.y, sp.train), te, sp.seed);
    cells[k].seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    cells[k].m = compute_metrics(scores, detail::take_labels(data.y, sp.test), threshold);
  });
  ClassificationReport rep;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    std::vector<double> acc, auc, sen, spe, rt;
    for (std::size_t s = 0; s < splits.size(); ++s) {
      const auto& c = cells[g * splits.size() + s];
      acc.push_back(c.m.accuracy);
      auc.push_back(c.m.auc);
      sen.push_back(c.m.sensitivity);
      spe.push_back(c.m.specificity);
      rt.push_back(c.seconds);
    }
    rep.rows.push_back({grid[g].name(), data.block, summarize(acc), summarize(auc), summarize(sen), summarize(spe),
                        summarize(rt), splits.size()});
  }
  return rep;
}

/// Repeated stratified k-fold cross-validation of every model in `grid`.
inline ClassificationReport cross_validate(const Dataset& data, const std::vector<ModelSpec>& grid,
                                           const CvOptions& opt = {}, const FeatureHook& hook = {}) {
  return evaluate_splits(data, grid, stratified_folds(data.y, opt.folds, opt.repeats, opt.seed), opt.workers, hook);
}

/// Machine-readable report. Wall time is left out so identical seeded runs
/// produce identical bytes.
inline std::string report_csv(const ClassificationReport& rep) {
  std::ostringstream out;
  out << "model,features,folds,accuracy_mean,accuracy_sd,auc_mean,auc_sd,sensitivity_mean,sensitivity_sd,"
         "specificity_mean,specificity_sd\n";
  for (const auto& r : rep.rows) {
    out << '"' << r.model << "\"," << r.features << ',' << r.folds;
    for (const auto* s : {&r.accuracy, &r.auc, &r.sensitivity, &r.specificity})
      out << ',' << format_double(s->mean) << ',' << format_double(s->sd);
    out << '\n';
  }
  return out.str();
}

/// Human-readable table: one row per model, "mean (sd)" cells.
inline std::string report_table(const ClassificationReport& rep) {
  auto cell = [](const MetricSummary& s, double scale, int prec) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f (%.*f)", prec, s.mean * scale, prec, s.sd * scale);
    return std::string(buf);
  };
  std::size_t width = 5;
  for (const auto& r : rep.rows) width = std::max(width, r.model.size() + r.features.size() + 3);
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-*s  %-16s %-16s %-16s %-16s %s\n", int(width), "Model", "Accuracy %", "AUC %",
                "Sensitivity %", "Specificity %", "Runtime s");
  out << line;
  for (const auto& r : rep.rows) {
    const std::string name = r.model + " [" + r.features + "]";
    std::snprintf(line, sizeof line, "%-*s  %-16s %-16s %-16s %-16s %s\n", int(width), name.c_str(),
                  cell(r.accuracy, 100, 2).c_str(), cell(r.auc, 100, 2).c_str(), cell(r.sensitivity, 100, 2).c_str(),
                  cell(r.specificity, 100, 2).c_str(), cell(r.runtime, 1, 3).c_str());
    out << line;
  }
  return out.str();
}

}  // namespace lesionforge

#endif  // LESIONFORGE_CLASSIFY_HPP
