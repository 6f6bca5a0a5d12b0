#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "maxsep/eval.hpp"
#include "maxsep/rng.hpp"
#include "oracles.hpp"

using namespace maxsep;

namespace {

ScoreSet random_scores(std::size_t n_in, std::size_t n_out, std::uint64_t seed, bool with_ties) {
  Rng rng(seed);
  ScoreSet s;
  for (std::size_t i = 0; i < n_in; ++i)
    s.in_scores.push_back(with_ties ? std::round(rng.normal() * 4.0) / 4.0 : rng.normal() + 0.5);
  for (std::size_t i = 0; i < n_out; ++i)
    s.out_scores.push_back(with_ties ? std::round(rng.normal() * 4.0) / 4.0 : rng.normal());
  return s;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("accuracy on all-correct and alternating predictions") {
  CHECK(accuracy({0, 1, 2}, {0, 1, 2}) == 1.0);
  const std::vector<int> preds = {0, 0, 1, 1};
  const std::vector<int> labels = {0, 1, 1, 0};
  CHECK(accuracy(preds, labels) == 0.5);
  const std::vector<double> pc = per_class_accuracy(preds, labels, 2);
  CHECK(pc[0] == 0.5);
  CHECK(pc[1] == 0.5);
}

TEST_CASE("per-class accuracies average back to the overall rate") {
  Rng rng(3);
  std::vector<int> labels, preds;
  for (std::size_t i = 0; i < 500; ++i) {
    labels.push_back(static_cast<int>(rng.below(7)));
    preds.push_back(static_cast<int>(rng.below(7)));
  }
  const std::vector<double> pc = per_class_accuracy(preds, labels, 7);
  std::vector<std::size_t> counts(7, 0);
  for (const int y : labels) ++counts[static_cast<std::size_t>(y)];
  double weighted = 0.0;
  for (std::size_t c = 0; c < 7; ++c) weighted += pc[c] * static_cast<double>(counts[c]);
  CHECK(weighted / 500.0 == Catch::Approx(accuracy(preds, labels)).margin(1e-12));
}

TEST_CASE("absent classes report NaN") {
  const std::vector<double> pc = per_class_accuracy({0, 0}, {0, 0}, 3);
  CHECK(pc[0] == 1.0);
  CHECK(std::isnan(pc[1]));
  CHECK(std::isnan(pc[2]));
}

TEST_CASE("accuracy rejects mismatched lengths") {
  CHECK_THROWS_AS(accuracy({0, 1}, {0}), ShapeError);
  CHECK_THROWS_AS(per_class_accuracy({0, 1}, {0}, 2), ShapeError);
}

TEST_CASE("argmax breaks ties toward the lower index") {
  Matrix m(2, 3);
  m(0, 0) = 1.0; m(0, 1) = 3.0; m(0, 2) = 2.0;
  m(1, 0) = 5.0; m(1, 1) = 5.0; m(1, 2) = 1.0;
  CHECK(argmax_rows(m) == std::vector<int>{1, 0});
}

TEST_CASE("angular fisher score vanishes when classes sit on their means") {
  Matrix f(4, 2);
  f(0, 0) = 1.0; f(0, 1) = 2.0;
  f(1, 0) = 1.0; f(1, 1) = 2.0;
  f(2, 0) = 3.0; f(2, 1) = -1.0;
  f(3, 0) = 3.0; f(3, 1) = -1.0;
  const double afs = angular_fisher_score(f, {0, 0, 1, 1}, 2);
  CHECK(afs == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("identical samples across classes leave the score undefined") {
  Matrix f(4, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    f(i, 0) = 1.0;
    f(i, 1) = 1.0;
  }
  CHECK_THROWS_AS(angular_fisher_score(f, {0, 0, 1, 1}, 2), UndefinedScoreError);
}

TEST_CASE("zero-norm features are rejected as degenerate") {
  Matrix f(3, 2);
  f(0, 0) = 1.0;
  f(1, 0) = -1.0;
  // row 2 stays all-zero
  CHECK_THROWS_AS(angular_fisher_score(f, {0, 0, 1}, 2), DegenerateInputError);
}

TEST_CASE("angular fisher score matches the two-loop reference") {
  for (const std::uint64_t seed : {1ull, 2ull, 3ull}) {
    Rng rng(seed);
    Matrix f(60, 5);
    std::vector<int> labels(60);
    for (std::size_t i = 0; i < 60; ++i) {
      labels[i] = static_cast<int>(i % 3);
      for (std::size_t d = 0; d < 5; ++d) f(i, d) = rng.normal() + (labels[i] == 0 ? 2.0 : 0.0);
    }
    const double got = angular_fisher_score(f, labels, 3);
    const double want = oracle::angular_fisher(f, labels, 3);
    CHECK(got == Catch::Approx(want).margin(1e-12));
  }
}

TEST_CASE("angular fisher score requires every class present") {
  Matrix f = random_matrix(4, 3, 9);
  CHECK_THROWS_AS(angular_fisher_score(f, {0, 0, 1, 1}, 3), std::invalid_argument);
}

TEST_CASE("msp of uniform logits is exactly one over C") {
  Matrix logits(2, 5);
  for (std::size_t c = 0; c < 5; ++c) {
    logits(0, c) = 0.0;
    logits(1, c) = 3.7;
  }
  const std::vector<double> s = msp_score(logits);
  CHECK(s[0] == 0.2);
  CHECK(s[1] == 0.2);
}

TEST_CASE("msp of a dominant logit approaches one") {
  Matrix logits(1, 4);
  logits(0, 0) = 50.0;
  const std::vector<double> s = msp_score(logits);
  CHECK(s[0] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("msp is shift invariant") {
  Matrix logits = random_matrix(10, 6, 21);
  Matrix shifted = logits;
  for (std::size_t i = 0; i < shifted.rows(); ++i)
    for (std::size_t c = 0; c < shifted.cols(); ++c) shifted(i, c) += 17.25;
  const std::vector<double> a = msp_score(logits);
  const std::vector<double> b = msp_score(shifted);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == Catch::Approx(b[i]).margin(1e-12));
}

TEST_CASE("energy of zero logits is log C") {
  Matrix logits(1, 8);
  const std::vector<double> s = energy_score(logits, 1.0);
  CHECK(s[0] == Catch::Approx(std::log(8.0)).margin(1e-12));
}

TEST_CASE("energy approaches the dominant logit") {
  Matrix logits(1, 3);
  logits(0, 0) = 40.0;
  logits(0, 1) = -40.0;
  logits(0, 2) = -40.0;
  const std::vector<double> s = energy_score(logits, 1.0);
  CHECK(s[0] == Catch::Approx(40.0).margin(1e-10));
}

TEST_CASE("energy of logits one and two matches the closed form") {
  Matrix logits(1, 2);
  logits(0, 0) = 1.0;
  logits(0, 1) = 2.0;
  const std::vector<double> s = energy_score(logits, 1.0);
  CHECK(s[0] == Catch::Approx(std::log(std::exp(1.0) + std::exp(2.0))).margin(1e-12));
  CHECK(s[0] == Catch::Approx(2.3132616875182228).margin(1e-12));
}

TEST_CASE("energy stays finite for huge logits") {
  Matrix logits(1, 2);
  logits(0, 0) = 1000.0;
  logits(0, 1) = 0.0;
  const std::vector<double> s = energy_score(logits, 1.0);
  CHECK(std::isfinite(s[0]));
  CHECK(s[0] == Catch::Approx(1000.0).margin(1e-9));
}

TEST_CASE("energy rejects non-positive temperature") {
  Matrix logits(1, 2);
  CHECK_THROWS_AS(energy_score(logits, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(energy_score(logits, -1.0), std::invalid_argument);
}

TEST_CASE("mls picks the max logit") {
  Matrix logits(2, 3);
  logits(0, 0) = 1.0; logits(0, 1) = -1.0; logits(0, 2) = 0.0;
  logits(1, 0) = 4.5; logits(1, 1) = 4.5; logits(1, 2) = 4.5;
  const std::vector<double> s = mls_score(logits);
  CHECK(s[0] == 1.0);
  CHECK(s[1] == 4.5);
}

TEST_CASE("mls dominates energy minus log C at unit temperature") {
  Matrix logits = random_matrix(25, 7, 33);
  const std::vector<double> mls = mls_score(logits);
  const std::vector<double> energy = energy_score(logits, 1.0);
  for (std::size_t i = 0; i < mls.size(); ++i)
    CHECK(mls[i] >= energy[i] - std::log(7.0) - 1e-12);
}

TEST_CASE("class-reordering leaves msp and energy unchanged") {
  Matrix logits = random_matrix(12, 5, 44);
  Matrix permuted(12, 5);
  const std::size_t perm[5] = {3, 0, 4, 1, 2};
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t c = 0; c < 5; ++c) permuted(i, c) = logits(i, perm[c]);
  const std::vector<double> m_a = msp_score(logits), m_b = msp_score(permuted);
  const std::vector<double> e_a = energy_score(logits), e_b = energy_score(permuted);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(m_a[i] == Catch::Approx(m_b[i]).margin(1e-12));
    CHECK(e_a[i] == Catch::Approx(e_b[i]).margin(1e-12));
  }
}

TEST_CASE("mahalanobis reduces to euclidean for a dominant epsilon") {
  // two classes sitting exactly on their means -> zero covariance
  Matrix f(4, 2);
  f(0, 0) = 0.0; f(0, 1) = 0.0;
  f(1, 0) = 0.0; f(1, 1) = 0.0;
  f(2, 0) = 4.0; f(2, 1) = 0.0;
  f(3, 0) = 4.0; f(3, 1) = 0.0;
  const ClassStats stats = fit_class_stats(f, {0, 0, 1, 1}, 2, 1.0);
  Matrix query(1, 2);
  query(0, 0) = 1.0;
  query(0, 1) = 1.0;
  const std::vector<double> s = mahalanobis_score(stats, query);
  // nearest mean is (0,0) at squared distance 2, scaled by 1/epsilon = 1
  CHECK(s[0] == Catch::Approx(-2.0).margin(1e-12));
}

TEST_CASE("a feature at a class mean scores the maximum of zero") {
  Matrix f = random_matrix(30, 3, 55);
  std::vector<int> labels(30);
  for (std::size_t i = 0; i < 30; ++i) labels[i] = static_cast<int>(i % 3);
  const ClassStats stats = fit_class_stats(f, labels, 3);
  Matrix query(1, 3);
  for (std::size_t d = 0; d < 3; ++d) query(0, d) = stats.means(1, d);
  const std::vector<double> s = mahalanobis_score(stats, query);
  CHECK(s[0] == Catch::Approx(0.0).margin(1e-12));
  const std::vector<double> all = mahalanobis_score(stats, f);
  for (const double v : all) CHECK(v <= 1e-12);
}

TEST_CASE("mahalanobis matches the dense-solve reference") {
  for (const std::uint64_t seed : {5ull, 6ull}) {
    Matrix f = random_matrix(40, 4, seed);
    std::vector<int> labels(40);
    for (std::size_t i = 0; i < 40; ++i) labels[i] = static_cast<int>(i % 4);
    const ClassStats stats = fit_class_stats(f, labels, 4);
    const Matrix query = random_matrix(15, 4, seed + 100);
    const std::vector<double> got = mahalanobis_score(stats, query);
    const std::vector<double> want = oracle::mahalanobis(stats, query);
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(got[i] == Catch::Approx(want[i]).margin(1e-8));
  }
}

TEST_CASE("mahalanobis is invariant under a joint rotation") {
  Matrix f = random_matrix(50, 2, 77);
  std::vector<int> labels(50);
  for (std::size_t i = 0; i < 50; ++i) labels[i] = static_cast<int>(i % 2);
  const Matrix query = random_matrix(10, 2, 78);

  const double theta = 0.83;
  const double c = std::cos(theta), s = std::sin(theta);
  const auto rotate = [&](const Matrix& m) {
    Matrix out(m.rows(), 2);
    for (std::size_t i = 0; i < m.rows(); ++i) {
      out(i, 0) = c * m(i, 0) - s * m(i, 1);
      out(i, 1) = s * m(i, 0) + c * m(i, 1);
    }
    return out;
  };

  const ClassStats stats = fit_class_stats(f, labels, 2, 0.05);
  const ClassStats stats_rot = fit_class_stats(rotate(f), labels, 2, 0.05);
  const std::vector<double> a = mahalanobis_score(stats, query);
  const std::vector<double> b = mahalanobis_score(stats_rot, rotate(query));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == Catch::Approx(b[i]).margin(1e-8));
}

TEST_CASE("an indefinite covariance fails the factorization") {
  ClassStats stats;
  stats.means = Matrix(1, 2);
  stats.covariance = Matrix(2, 2);
  stats.covariance(0, 1) = 2.0;
  stats.covariance(1, 0) = 2.0;
  stats.epsilon = 0.1;
  CHECK_THROWS_AS(mahalanobis_score(stats, Matrix(1, 2)), NumericalError);
}

TEST_CASE("stats fitting validates inputs") {
  Matrix f = random_matrix(6, 2, 9);
  CHECK_THROWS_AS(fit_class_stats(f, {0, 0, 0, 1, 1, 1}, 2, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(fit_class_stats(f, {0, 0, 0, 0, 0, 0}, 2, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(fit_class_stats(f, {0, 0, 0, 1, 1}, 2, 0.1), ShapeError);
}

TEST_CASE("perfect separation gives the ideal metrics") {
  ScoreSet s;
  s.in_scores = {5.0, 6.0, 7.0, 8.0};
  s.out_scores = {1.0, 2.0, 3.0};
  const OODMetrics m = ood_metrics(s);
  CHECK(m.auroc == 1.0);
  CHECK(m.aupr == 1.0);
  CHECK(m.fpr95 == 0.0);
}

TEST_CASE("identical score distributions give auroc one half") {
  ScoreSet s;
  s.in_scores = {1.0, 2.0, 3.0};
  s.out_scores = {1.0, 2.0, 3.0};
  CHECK(ood_metrics(s).auroc == 0.5);
}

TEST_CASE("metrics match the brute-force oracles on random instances") {
  for (const bool ties : {false, true}) {
    for (const std::uint64_t seed : {10ull, 11ull, 12ull}) {
      const ScoreSet s = random_scores(120, 80, seed, ties);
      const OODMetrics m = ood_metrics(s);
      INFO("seed " << seed << " ties " << ties);
      CHECK(m.auroc == Catch::Approx(oracle::auroc(s.in_scores, s.out_scores)).margin(1e-12));
      CHECK(m.aupr == Catch::Approx(oracle::aupr(s.in_scores, s.out_scores)).margin(1e-12));
      CHECK(m.fpr95 == Catch::Approx(oracle::fpr95(s.in_scores, s.out_scores)).margin(1e-12));
    }
  }
}

TEST_CASE("swapping score lists flips auroc") {
  const ScoreSet s = random_scores(90, 110, 17, false);
  ScoreSet swapped;
  swapped.in_scores = s.out_scores;
  swapped.out_scores = s.in_scores;
  CHECK(ood_metrics(s).auroc == Catch::Approx(1.0 - ood_metrics(swapped).auroc).margin(1e-12));
}

TEST_CASE("strictly increasing transforms leave auroc and fpr95 fixed") {
  const ScoreSet s = random_scores(100, 100, 23, true);
  const OODMetrics base = ood_metrics(s);
  const auto apply = [&](double (*f)(double)) {
    ScoreSet t;
    for (const double v : s.in_scores) t.in_scores.push_back(f(v));
    for (const double v : s.out_scores) t.out_scores.push_back(f(v));
    return ood_metrics(t);
  };
  const OODMetrics affine = apply(+[](double x) { return 3.0 * x + 2.0; });
  const OODMetrics expo = apply(+[](double x) { return std::exp(x); });
  CHECK(base.auroc == affine.auroc);
  CHECK(base.auroc == expo.auroc);
  CHECK(base.fpr95 == affine.fpr95);
  CHECK(base.fpr95 == expo.fpr95);
}

TEST_CASE("metrics reject empty or NaN inputs") {
  ScoreSet s;
  s.in_scores = {1.0};
  CHECK_THROWS_AS(ood_metrics(s), std::invalid_argument);
  s.out_scores = {std::numeric_limits<double>::quiet_NaN()};
  CHECK_THROWS_AS(ood_metrics(s), std::invalid_argument);
}

TEST_CASE("score csv dump has the documented layout") {
  ScoreSet s;
  s.in_scores = {1.5};
  s.out_scores = {-0.25, 0.0};
  const auto path = std::filesystem::temp_directory_path() / "maxsep_scores.csv";
  save_scores_csv(s, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "split,score,label");
  std::getline(in, line);
  CHECK(line == "in,1.5,1");
  std::getline(in, line);
  CHECK(line == "out,-0.25,0");
  std::getline(in, line);
  CHECK(line == "out,0,0");
  std::filesystem::remove(path);
}
