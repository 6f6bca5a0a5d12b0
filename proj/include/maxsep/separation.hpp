#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "maxsep/errors.hpp"
#include "maxsep/matrix.hpp"
#include "maxsep/numeric_io.hpp"
#include "maxsep/rng.hpp"

namespace maxsep {

/// Closed-form maximally separated class vectors.
///
/// For C classes the matrix is (C-1) x C; column j is the unit vector
/// assigned to class j. Columns are pairwise equiangular at cosine
/// -1/(C-1) and sum to the zero vector: the vertices of a regular simplex
/// inscribed in the unit hypersphere. Used as a fixed logit head,
/// logits = rho * P^T * features.
struct SeparationMatrix {
  std::size_t num_classes = 0;
  std::size_t embed_dim = 0;  // always num_classes - 1
  Matrix entries;             // embed_dim x num_classes, column j = class vector j
};

/// Scale factor applied to the logits of the fixed head. Defaults to 1.
struct Radius {
  double rho = 1.0;
};

/// Measured deviations from the separation invariants.
struct VerificationReport {
  double max_norm_deviation = 0.0;    // max_j |  ||p_j|| - 1 |
  double max_cosine_deviation = 0.0;  // max_{i!=j} | <p_i,p_j> + 1/(C-1) |
  double sum_vector_norm = 0.0;       // || sum_j p_j ||
  bool passed = false;                // all three <= tolerance
};

/// Builds the (C-1) x C separation matrix.
///
/// The two-class base case is the 1x2 row (1, -1). Each recursion level m
/// prepends a dimension: the new class vector becomes (1, 0, ..., 0), the
/// remaining first-row entries become -1/m, and the previous level is
/// embedded below, shrunk by sqrt(1 - 1/m^2). Levels are filled iteratively
/// from the top row down with the shrink factors accumulated into a running
/// product, so the whole construction is O(C^2) time and space with no
/// recursion depth to worry about. Row r holds level m = C-1-r: a leading
/// `scale` at column r, then -scale/m across the columns to its right.
inline SeparationMatrix build_separation_matrix(std::size_t num_classes) {
  if (num_classes < 2)
    throw std::invalid_argument("build_separation_matrix: need at least 2 classes, got " +
                                std::to_string(num_classes));
  const std::size_t k = num_classes - 1;
  SeparationMatrix p;
  p.num_classes = num_classes;
  p.embed_dim = k;
  p.entries = Matrix(k, num_classes);

  double scale = 1.0;
  for (std::size_t r = 0; r < k; ++r) {
    const std::size_t m = k - r;
    if (r > 0) {
      const double level = static_cast<double>(m + 1);
      scale *= std::sqrt(1.0 - 1.0 / (level * level));
    }
    double* row = p.entries.row(r);
    row[r] = scale;
    const double off = -scale / static_cast<double>(m);
    for (std::size_t c = r + 1; c < num_classes; ++c) row[c] = off;
  }
  return p;
}

namespace detail {

/// Class vectors as contiguous rows (the stored layout keeps them as
/// strided columns, which is hostile to the pairwise dot sweeps).
inline Matrix transpose_entries(const SeparationMatrix& p) {
  Matrix t(p.num_classes, p.embed_dim);
  for (std::size_t r = 0; r < p.embed_dim; ++r) {
    const double* row = p.entries.row(r);
    for (std::size_t c = 0; c < p.num_classes; ++c) t(c, r) = row[c];
  }
  return t;
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

/// Above this class count verify_separation switches from the exact
/// all-pairs check to a seeded sample of kVerifySamplePairs pairs.
inline constexpr std::size_t kVerifyExactPairLimit = 2000;
inline constexpr std::size_t kVerifySamplePairs = 1000000;
inline constexpr std::uint64_t kVerifyDefaultSeed = 0x5eedULL;

/// Measures the separation invariants of `p` against `tolerance`.
/// Pairwise dots are checked exhaustively up to kVerifyExactPairLimit
/// classes and on a uniform random sample of pairs beyond that.
inline VerificationReport verify_separation(const SeparationMatrix& p, double tolerance,
                                            std::uint64_t sample_seed = kVerifyDefaultSeed) {
  if (tolerance <= 0.0) throw std::invalid_argument("verify_separation: tolerance must be > 0");
  const std::size_t c = p.num_classes;
  const std::size_t k = p.embed_dim;
  const Matrix vecs = detail::transpose_entries(p);

  VerificationReport rep;
  for (std::size_t j = 0; j < c; ++j) {
    const double norm = std::sqrt(detail::dot(vecs.row(j), vecs.row(j), k));
    rep.max_norm_deviation = std::max(rep.max_norm_deviation, std::abs(norm - 1.0));
  }

  std::vector<double> sum(k, 0.0);
  for (std::size_t j = 0; j < c; ++j) {
    const double* v = vecs.row(j);
    for (std::size_t r = 0; r < k; ++r) sum[r] += v[r];
  }
  rep.sum_vector_norm = std::sqrt(detail::dot(sum.data(), sum.data(), k));

  const double target = -1.0 / static_cast<double>(k);
  if (c <= kVerifyExactPairLimit) {
    for (std::size_t i = 0; i < c; ++i) {
      const double* vi = vecs.row(i);
      for (std::size_t j = i + 1; j < c; ++j) {
        const double d = detail::dot(vi, vecs.row(j), k);
        rep.max_cosine_deviation = std::max(rep.max_cosine_deviation, std::abs(d - target));
      }
    }
  } else {
    Rng rng(sample_seed);
    for (std::size_t s = 0; s < kVerifySamplePairs; ++s) {
      const std::size_t i = static_cast<std::size_t>(rng.below(c));
      std::size_t j = static_cast<std::size_t>(rng.below(c - 1));
      if (j >= i) ++j;
      const double d = detail::dot(vecs.row(i), vecs.row(j), k);
      rep.max_cosine_deviation = std::max(rep.max_cosine_deviation, std::abs(d - target));
    }
  }

  rep.passed = rep.max_norm_deviation <= tolerance && rep.max_cosine_deviation <= tolerance &&
               rep.sum_vector_norm <= tolerance;
  return rep;
}

/// C x C matrix of pairwise cosine similarities between class vectors.
/// The diagonal is 1 by definition.
inline Matrix pairwise_cosine_matrix(const SeparationMatrix& p) {
  const std::size_t c = p.num_classes;
  const std::size_t k = p.embed_dim;
  const Matrix vecs = detail::transpose_entries(p);
  std::vector<double> norms(c);
  for (std::size_t j = 0; j < c; ++j) norms[j] = std::sqrt(detail::dot(vecs.row(j), vecs.row(j), k));

  Matrix cos(c, c);
  for (std::size_t i = 0; i < c; ++i) {
    cos(i, i) = 1.0;
    for (std::size_t j = i + 1; j < c; ++j) {
      const double d = detail::dot(vecs.row(i), vecs.row(j), k) / (norms[i] * norms[j]);
      cos(i, j) = d;
      cos(j, i) = d;
    }
  }
  return cos;
}

/// logits = rho * features * P, i.e. row n gets rho * P^T * features_n.
inline Matrix head_forward(const SeparationMatrix& p, Radius rho, const Matrix& features) {
  if (features.cols() != p.embed_dim)
    throw ShapeError("head_forward: features have " + std::to_string(features.cols()) +
                     " columns, expected embed_dim " + std::to_string(p.embed_dim));
  const std::size_t n = features.rows();
  Matrix logits(n, p.num_classes);
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = features.row(i);
    double* out = logits.row(i);
    for (std::size_t r = 0; r < p.embed_dim; ++r) {
      const double xr = x[r];
      const double* prow = p.entries.row(r);
      for (std::size_t c = 0; c < p.num_classes; ++c) out[c] += xr * prow[c];
    }
    for (std::size_t c = 0; c < p.num_classes; ++c) out[c] *= rho.rho;
  }
  return logits;
}

/// Adjoint of head_forward: grad_features row n = rho * P * grad_logits_n.
inline Matrix head_backward(const SeparationMatrix& p, Radius rho, const Matrix& grad_logits) {
  if (grad_logits.cols() != p.num_classes)
    throw ShapeError("head_backward: grad has " + std::to_string(grad_logits.cols()) +
                     " columns, expected num_classes " + std::to_string(p.num_classes));
  const std::size_t n = grad_logits.rows();
  Matrix grad_features(n, p.embed_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const double* g = grad_logits.row(i);
    double* out = grad_features.row(i);
    for (std::size_t r = 0; r < p.embed_dim; ++r)
      out[r] = rho.rho * detail::dot(p.entries.row(r), g, p.num_classes);
  }
  return grad_features;
}

/// Writes the matrix as plain CSV, one row per embedding dimension.
/// Values use the shortest representation that round-trips binary64.
inline void save_matrix(const SeparationMatrix& p, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_matrix: cannot open " + path.string());
  for (std::size_t r = 0; r < p.embed_dim; ++r) {
    const double* row = p.entries.row(r);
    for (std::size_t c = 0; c < p.num_classes; ++c) {
      if (c > 0) out << ',';
      out << detail::format_double(row[c]);
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("save_matrix: write failed for " + path.string());
}

/// Reads a CSV matrix written by save_matrix and checks it is a separation
/// matrix: k x (k+1) shape and verify_separation at 1e-6.
inline SeparationMatrix load_matrix(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_matrix: cannot open " + path.string());

  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t row_idx = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() && in.peek() == std::char_traits<char>::eof()) break;
    std::vector<double> row;
    std::string tok;
    std::istringstream ls(line);
    std::size_t col_idx = 0;
    while (std::getline(ls, tok, ',')) {
      row.push_back(detail::parse_double(tok, row_idx, col_idx));
      ++col_idx;
    }
    if (row.empty())
      throw ParseError("matrix csv: row " + std::to_string(row_idx + 1) + " is empty");
    if (!rows.empty() && row.size() != rows.front().size())
      throw ParseError("matrix csv: row " + std::to_string(row_idx + 1) + " has " +
                       std::to_string(row.size()) + " columns, expected " +
                       std::to_string(rows.front().size()));
    rows.push_back(std::move(row));
    ++row_idx;
  }
  if (rows.empty()) throw ParseError("matrix csv: no rows in " + path.string());

  const std::size_t k = rows.size();
  const std::size_t c = rows.front().size();
  if (c != k + 1)
    throw IntegrityError("load_matrix: shape " + std::to_string(k) + "x" + std::to_string(c) +
                         " is not (C-1) x C");

  SeparationMatrix p;
  p.num_classes = c;
  p.embed_dim = k;
  p.entries = Matrix(k, c);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t j = 0; j < c; ++j) p.entries(r, j) = rows[r][j];

  const VerificationReport rep = verify_separation(p, 1e-6);
  if (!rep.passed)
    throw IntegrityError("load_matrix: matrix fails separation check (norm dev " +
                         detail::format_double(rep.max_norm_deviation) + ", cosine dev " +
                         detail::format_double(rep.max_cosine_deviation) + ", sum norm " +
                         detail::format_double(rep.sum_vector_norm) + ")");
  return p;
}

}  // namespace maxsep
