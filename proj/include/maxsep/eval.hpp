#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "maxsep/errors.hpp"
#include "maxsep/matrix.hpp"
#include "maxsep/numeric_io.hpp"

namespace maxsep {

/// In/out score lists for threshold metrics. Higher score means "looks
/// in-distribution".
struct ScoreSet {
  std::vector<double> in_scores;
  std::vector<double> out_scores;
};

struct OODMetrics {
  double fpr95 = 0.0;  // false-positive rate at 95% true-positive rate
  double auroc = 0.0;
  double aupr = 0.0;  // in-distribution as the positive class
};

/// Per-class means plus a shared pooled covariance, regularized by
/// epsilon * I for the distance solve.
struct ClassStats {
  Matrix means;       // C x D
  Matrix covariance;  // D x D, symmetric
  double epsilon = 0.0;
};

/// Row-wise argmax; ties resolve to the lowest column index.
inline std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double* row = m.row(i);
    std::size_t best = 0;
    for (std::size_t c = 1; c < m.cols(); ++c)
      if (row[c] > row[best]) best = c;
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size())
    throw ShapeError("accuracy: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  if (labels.empty()) throw std::invalid_argument("accuracy: empty input");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (predictions[i] == labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// Fraction correct per class. Classes absent from `labels` report NaN and
/// must be excluded from any averaging by the caller.
inline std::vector<double> per_class_accuracy(const std::vector<int>& predictions,
                                              const std::vector<int>& labels,
                                              std::size_t num_classes) {
  if (predictions.size() != labels.size())
    throw ShapeError("per_class_accuracy: " + std::to_string(predictions.size()) +
                     " predictions vs " + std::to_string(labels.size()) + " labels");
  std::vector<std::size_t> total(num_classes, 0), correct(num_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw std::invalid_argument("per_class_accuracy: label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(num_classes) + ")");
    ++total[static_cast<std::size_t>(y)];
    if (predictions[i] == y) ++correct[static_cast<std::size_t>(y)];
  }
  std::vector<double> acc(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c)
    acc[c] = total[c] == 0 ? std::numeric_limits<double>::quiet_NaN()
                           : static_cast<double>(correct[c]) / static_cast<double>(total[c]);
  return acc;
}

namespace detail {

inline double cosine(const double* a, const double* b, std::size_t n, const char* what) {
  double aa = 0.0, bb = 0.0, ab = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    aa += a[i] * a[i];
    bb += b[i] * b[i];
    ab += a[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0)
    throw DegenerateInputError(std::string("angular_fisher_score: zero-norm ") + what);
  return ab / std::sqrt(aa * bb);
}

}  // namespace detail

/// Angular Fisher Score: within-class over between-class angular scatter,
///   S_w = sum_i sum_{x in class i} (1 - cos(x, m_i))
///   S_b = sum_i n_i (1 - cos(m_i, m))
/// with m_i the class feature mean and m the global mean. Lower means more
/// tightly clustered, better separated features.
inline double angular_fisher_score(const Matrix& features, const std::vector<int>& labels,
                                   std::size_t num_classes) {
  if (features.rows() != labels.size())
    throw ShapeError("angular_fisher_score: " + std::to_string(features.rows()) +
                     " feature rows vs " + std::to_string(labels.size()) + " labels");
  if (features.rows() == 0) throw std::invalid_argument("angular_fisher_score: empty input");
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();

  std::vector<std::size_t> counts(num_classes, 0);
  Matrix means(num_classes, d);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw std::invalid_argument("angular_fisher_score: label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(num_classes) + ")");
    ++counts[static_cast<std::size_t>(y)];
    const double* x = features.row(i);
    double* m = means.row(static_cast<std::size_t>(y));
    for (std::size_t k = 0; k < d; ++k) m[k] += x[k];
  }
  std::vector<double> global(d, 0.0);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] == 0)
      throw std::invalid_argument("angular_fisher_score: class " + std::to_string(c) +
                                  " absent from labels");
    double* m = means.row(c);
    for (std::size_t k = 0; k < d; ++k) {
      global[k] += m[k];
      m[k] /= static_cast<double>(counts[c]);
    }
  }
  for (std::size_t k = 0; k < d; ++k) global[k] /= static_cast<double>(n);

  double s_w = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    s_w += 1.0 - detail::cosine(features.row(i), means.row(static_cast<std::size_t>(labels[i])), d,
                                "feature or class mean");
  double s_b = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c)
    s_b += static_cast<double>(counts[c]) *
           (1.0 - detail::cosine(means.row(c), global.data(), d, "class or global mean"));

  if (s_b == 0.0)
    throw UndefinedScoreError("angular_fisher_score: between-class scatter is zero");
  return s_w / s_b;
}

/// Max softmax probability per row: 1 / sum_c exp(logit_c - max_logit).
inline std::vector<double> msp_score(const Matrix& logits) {
  std::vector<double> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const double* row = logits.row(i);
    double m = row[0];
    for (std::size_t c = 1; c < logits.cols(); ++c) m = std::max(m, row[c]);
    double denom = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) denom += std::exp(row[c] - m);
    out[i] = 1.0 / denom;
  }
  return out;
}

/// Negative energy per row: T * log sum_c exp(logit_c / T), via a stable
/// log-sum-exp. Higher means more in-distribution.
inline std::vector<double> energy_score(const Matrix& logits, double temperature = 1.0) {
  if (!(temperature > 0.0))
    throw std::invalid_argument("energy_score: temperature must be > 0, got " +
                                std::to_string(temperature));
  std::vector<double> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const double* row = logits.row(i);
    double m = row[0] / temperature;
    for (std::size_t c = 1; c < logits.cols(); ++c) m = std::max(m, row[c] / temperature);
    double s = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) s += std::exp(row[c] / temperature - m);
    out[i] = temperature * (m + std::log(s));
  }
  return out;
}

/// Max raw logit per row.
inline std::vector<double> mls_score(const Matrix& logits) {
  std::vector<double> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const double* row = logits.row(i);
    double m = row[0];
    for (std::size_t c = 1; c < logits.cols(); ++c) m = std::max(m, row[c]);
    out[i] = m;
  }
  return out;
}

/// Pooled within-class covariance: Sigma = (1/N) sum_i sum_{x in class i}
/// (x - mu_i)(x - mu_i)^T. The default epsilon is scale-aware,
/// 1e-6 * trace(Sigma) / D, so the regularized matrix stays positive
/// definite regardless of feature units.
inline ClassStats fit_class_stats(const Matrix& features, const std::vector<int>& labels,
                                  std::size_t num_classes, double epsilon) {
  if (!(epsilon > 0.0))
    throw std::invalid_argument("fit_class_stats: epsilon must be > 0, got " +
                                std::to_string(epsilon));
  if (features.rows() != labels.size())
    throw ShapeError("fit_class_stats: " + std::to_string(features.rows()) + " feature rows vs " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  if (n == 0) throw std::invalid_argument("fit_class_stats: empty input");

  ClassStats stats;
  stats.epsilon = epsilon;
  stats.means = Matrix(num_classes, d);
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw std::invalid_argument("fit_class_stats: label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
    ++counts[static_cast<std::size_t>(y)];
    const double* x = features.row(i);
    double* m = stats.means.row(static_cast<std::size_t>(y));
    for (std::size_t k = 0; k < d; ++k) m[k] += x[k];
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] == 0)
      throw std::invalid_argument("fit_class_stats: class " + std::to_string(c) +
                                  " absent from labels");
    double* m = stats.means.row(c);
    for (std::size_t k = 0; k < d; ++k) m[k] /= static_cast<double>(counts[c]);
  }

  stats.covariance = Matrix(d, d);
  std::vector<double> diff(d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = features.row(i);
    const double* m = stats.means.row(static_cast<std::size_t>(labels[i]));
    for (std::size_t k = 0; k < d; ++k) diff[k] = x[k] - m[k];
    for (std::size_t r = 0; r < d; ++r) {
      double* cov_row = stats.covariance.row(r);
      const double dr = diff[r];
      for (std::size_t k = r; k < d; ++k) cov_row[k] += dr * diff[k];
    }
  }
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t k = r; k < d; ++k) {
      stats.covariance(r, k) /= static_cast<double>(n);
      stats.covariance(k, r) = stats.covariance(r, k);
    }
  return stats;
}

/// Same fit with the scale-aware default epsilon.
inline ClassStats fit_class_stats(const Matrix& features, const std::vector<int>& labels,
                                  std::size_t num_classes) {
  ClassStats tmp = fit_class_stats(features, labels, num_classes, 1.0);
  double trace = 0.0;
  for (std::size_t k = 0; k < tmp.covariance.rows(); ++k) trace += tmp.covariance(k, k);
  const double eps = 1e-6 * trace / static_cast<double>(tmp.covariance.rows());
  if (!(eps > 0.0))
    throw NumericalError("fit_class_stats: covariance trace is zero, cannot regularize");
  tmp.epsilon = eps;
  return tmp;
}

namespace detail {

/// In-place lower Cholesky factor of a symmetric PD matrix.
inline Matrix cholesky(const Matrix& a) {
  const std::size_t d = a.rows();
  Matrix l(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      if (i == j) {
        if (!(s > 0.0))
          throw NumericalError("cholesky: matrix not positive definite at pivot " +
                               std::to_string(i));
        l(i, i) = std::sqrt(s);
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }
  return l;
}

}  // namespace detail

/// Mahalanobis confidence per feature row:
///   score = -min_c (x - mu_c)^T (Sigma + eps I)^{-1} (x - mu_c),
/// evaluated through a Cholesky factorization (forward-substitute, then take
/// the squared norm) — the regularized covariance is never inverted
/// explicitly. Higher means more in-distribution; a feature exactly at a
/// class mean scores 0, the maximum.
inline std::vector<double> mahalanobis_score(const ClassStats& stats, const Matrix& features) {
  const std::size_t d = stats.covariance.rows();
  if (features.cols() != d)
    throw ShapeError("mahalanobis_score: features have " + std::to_string(features.cols()) +
                     " columns, stats expect " + std::to_string(d));
  Matrix reg = stats.covariance;
  for (std::size_t k = 0; k < d; ++k) reg(k, k) += stats.epsilon;
  const Matrix l = detail::cholesky(reg);

  const std::size_t c_total = stats.means.rows();
  std::vector<double> out(features.rows());
  std::vector<double> y(d);
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const double* x = features.row(i);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < c_total; ++c) {
      const double* m = stats.means.row(c);
      // forward-substitute L y = (x - m); quadratic form = ||y||^2
      double quad = 0.0;
      for (std::size_t r = 0; r < d; ++r) {
        double s = x[r] - m[r];
        const double* l_row = l.row(r);
        for (std::size_t k = 0; k < r; ++k) s -= l_row[k] * y[k];
        y[r] = s / l_row[r];
        quad += y[r] * y[r];
      }
      best = std::min(best, quad);
    }
    out[i] = -best;
  }
  return out;
}

/// AUROC, AUPR and FPR95 over an in/out score split.
///
/// AUROC is P(in > out) + P(tie)/2, computed from average ranks. AUPR treats
/// in-distribution as the positive class and accumulates precision over
/// descending score thresholds with step (not trapezoid) interpolation, ties
/// grouped. FPR95 is the false-positive rate at the largest threshold whose
/// true-positive rate still reaches 0.95, counting scores equal to the
/// threshold as positive predictions.
inline OODMetrics ood_metrics(const ScoreSet& scores) {
  const std::size_t n_in = scores.in_scores.size();
  const std::size_t n_out = scores.out_scores.size();
  if (n_in == 0 || n_out == 0)
    throw std::invalid_argument("ood_metrics: both score lists must be non-empty");
  for (const double s : scores.in_scores)
    if (std::isnan(s)) throw std::invalid_argument("ood_metrics: NaN in in_scores");
  for (const double s : scores.out_scores)
    if (std::isnan(s)) throw std::invalid_argument("ood_metrics: NaN in out_scores");

  OODMetrics m;

  // AUROC via average ranks (Mann-Whitney U).
  struct Tagged {
    double score;
    bool is_in;
  };
  std::vector<Tagged> all;
  all.reserve(n_in + n_out);
  for (const double s : scores.in_scores) all.push_back({s, true});
  for (const double s : scores.out_scores) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Tagged& a, const Tagged& b) { return a.score < b.score; });
  double rank_sum_in = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
    for (std::size_t k = i; k < j; ++k)
      if (all[k].is_in) rank_sum_in += avg_rank;
    i = j;
  }
  const double u = rank_sum_in - 0.5 * static_cast<double>(n_in) * static_cast<double>(n_in + 1);
  m.auroc = u / (static_cast<double>(n_in) * static_cast<double>(n_out));

  // AUPR: sweep descending thresholds; within a tie group precision moves as
  // a block, giving the step-interpolated area.
  std::size_t tp = 0, fp = 0;
  double aupr = 0.0;
  double prev_recall = 0.0;
  for (std::size_t idx = all.size(); idx > 0;) {
    std::size_t j = idx;  // walk one tie group [j, idx) from the top
    while (j > 0 && all[j - 1].score == all[idx - 1].score) --j;
    for (std::size_t k = j; k < idx; ++k)
      (all[k].is_in ? tp : fp) += 1;
    const double recall = static_cast<double>(tp) / static_cast<double>(n_in);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    aupr += (recall - prev_recall) * precision;
    prev_recall = recall;
    idx = j;
  }
  m.aupr = aupr;

  // FPR95: threshold = k-th largest in-score with k = ceil(0.95 * n_in).
  std::vector<double> in_sorted = scores.in_scores;
  std::sort(in_sorted.begin(), in_sorted.end(), std::greater<double>());
  const std::size_t k95 = (19 * n_in + 19) / 20;
  const double threshold = in_sorted[k95 - 1];
  std::size_t fp95 = 0;
  for (const double s : scores.out_scores)
    if (s >= threshold) ++fp95;
  m.fpr95 = static_cast<double>(fp95) / static_cast<double>(n_out);
  return m;
}

/// Writes the score split as CSV `split,score,label` with label 1 for
/// in-distribution rows and 0 for out rows.
inline void save_scores_csv(const ScoreSet& scores, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_scores_csv: cannot open " + path.string());
  out << "split,score,label\n";
  for (const double s : scores.in_scores) out << "in," << detail::format_double(s) << ",1\n";
  for (const double s : scores.out_scores) out << "out," << detail::format_double(s) << ",0\n";
  if (!out) throw std::runtime_error("save_scores_csv: write failed for " + path.string());
}

}  // namespace maxsep
