#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "maxsep/errors.hpp"
#include "maxsep/matrix.hpp"
#include "maxsep/numeric_io.hpp"
#include "maxsep/rng.hpp"

namespace maxsep {

/// Label value carried by out-of-distribution samples. Never valid for
/// training; validate_labels rejects it.
inline constexpr int kOodLabel = -1;

/// A feature matrix with integer labels. Immutable by convention once
/// built; generators return fresh instances.
struct Dataset {
  Matrix features;          // n x dim
  std::vector<int> labels;  // length n, in [0, num_classes) or kOodLabel
  std::size_t num_classes = 0;
  std::string name;
};

/// Per-class sample budget for long-tailed subsampling.
struct ImbalanceProfile {
  double imbalance_factor = 1.0;
  std::vector<std::size_t> per_class_counts;
};

/// Parameters for the Gaussian-blob generator.
struct BlobSpec {
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  std::size_t samples_per_class = 0;
  double mean_scale = 1.0;  // class means ~ mean_scale * N(0, I)
  double noise_std = 1.0;   // samples ~ mean + noise_std * N(0, I)
  std::uint64_t seed = 0;
};

/// Throws unless every label is a real class index in [0, num_classes).
inline void validate_labels(const Dataset& ds) {
  if (ds.labels.size() != ds.features.rows())
    throw IntegrityError("dataset '" + ds.name + "': " + std::to_string(ds.labels.size()) +
                         " labels for " + std::to_string(ds.features.rows()) + " feature rows");
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    const int y = ds.labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= ds.num_classes)
      throw IntegrityError("dataset '" + ds.name + "': label " + std::to_string(y) +
                           " at row " + std::to_string(i) + " outside [0, " +
                           std::to_string(ds.num_classes) + ")");
  }
}

/// Histogram of labels over [0, num_classes). Requires valid labels.
inline std::vector<std::size_t> class_counts(const Dataset& ds) {
  validate_labels(ds);
  std::vector<std::size_t> counts(ds.num_classes, 0);
  for (const int y : ds.labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

/// Samples `samples_per_class` points around each of `num_classes` seeded
/// Gaussian class means. Output is class-major: all of class 0, then 1, ...
inline Dataset gen_blobs(const BlobSpec& spec) {
  if (spec.num_classes == 0 || spec.dim < 2 || spec.samples_per_class == 0)
    throw std::invalid_argument("gen_blobs: need num_classes >= 1, dim >= 2, samples_per_class >= 1");
  if (spec.mean_scale <= 0.0 || spec.noise_std < 0.0)
    throw std::invalid_argument("gen_blobs: need mean_scale > 0 and noise_std >= 0");

  Rng rng(spec.seed);
  Matrix means(spec.num_classes, spec.dim);
  for (std::size_t i = 0; i < means.size(); ++i) means.data()[i] = spec.mean_scale * rng.normal();

  const std::size_t n = spec.num_classes * spec.samples_per_class;
  Dataset ds;
  ds.features = Matrix(n, spec.dim);
  ds.labels.resize(n);
  ds.num_classes = spec.num_classes;
  ds.name = "blobs";
  std::size_t row = 0;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    const double* mean = means.row(c);
    for (std::size_t s = 0; s < spec.samples_per_class; ++s, ++row) {
      double* x = ds.features.row(row);
      for (std::size_t d = 0; d < spec.dim; ++d) x[d] = mean[d] + spec.noise_std * rng.normal();
      ds.labels[row] = static_cast<int>(c);
    }
  }
  return ds;
}

/// Exponentially decaying per-class counts: class i keeps
/// round(n_max * factor^(i/(C-1))) samples, floored at 1. Class 0 is the
/// most frequent; factor 1 is the balanced limit.
inline ImbalanceProfile make_longtail_profile(std::size_t num_classes, std::size_t n_max,
                                              double imbalance_factor) {
  if (num_classes == 0) throw std::invalid_argument("make_longtail_profile: num_classes must be >= 1");
  if (n_max < 1) throw std::invalid_argument("make_longtail_profile: n_max must be >= 1");
  if (!(imbalance_factor > 0.0) || imbalance_factor > 1.0)
    throw std::invalid_argument("make_longtail_profile: imbalance_factor must be in (0, 1]");

  ImbalanceProfile profile;
  profile.imbalance_factor = imbalance_factor;
  profile.per_class_counts.resize(num_classes);
  for (std::size_t i = 0; i < num_classes; ++i) {
    const double exponent =
        num_classes == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(num_classes - 1);
    const double raw = static_cast<double>(n_max) * std::pow(imbalance_factor, exponent);
    profile.per_class_counts[i] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(raw)));
  }
  return profile;
}

/// Keeps the first count_i samples of each class under a per-class seeded
/// shuffle. Feature values are copied untouched; only membership changes.
/// Intended for training splits only — never subsample a test set.
inline Dataset subsample_longtail(const Dataset& ds, const ImbalanceProfile& profile,
                                  std::uint64_t seed) {
  if (profile.per_class_counts.size() != ds.num_classes)
    throw ShapeError("subsample_longtail: profile has " +
                     std::to_string(profile.per_class_counts.size()) + " counts for " +
                     std::to_string(ds.num_classes) + " classes");
  const std::vector<std::size_t> available = class_counts(ds);

  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    const std::size_t want = profile.per_class_counts[c];
    if (want > available[c])
      throw CapacityError("subsample_longtail: class " + std::to_string(c) + " has " +
                          std::to_string(available[c]) + " samples, profile wants " +
                          std::to_string(want));
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < ds.labels.size(); ++i)
      if (ds.labels[i] == static_cast<int>(c)) members.push_back(i);
    Rng rng(Rng::mix(seed, c));
    rng.shuffle(members);
    keep.insert(keep.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(want));
  }

  Dataset out;
  out.features = Matrix(keep.size(), ds.features.cols());
  out.labels.resize(keep.size());
  out.num_classes = ds.num_classes;
  out.name = ds.name + "-longtail";
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const double* src = ds.features.row(keep[i]);
    std::copy(src, src + ds.features.cols(), out.features.row(i));
    out.labels[i] = ds.labels[keep[i]];
  }
  return out;
}

/// Per-class split into a leading train part and trailing test part under a
/// seeded shuffle. Every class must have at least train_per_class samples.
inline std::pair<Dataset, Dataset> split_per_class(const Dataset& ds, std::size_t train_per_class,
                                                   std::uint64_t seed) {
  const std::vector<std::size_t> available = class_counts(ds);
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    if (available[c] < train_per_class)
      throw CapacityError("split_per_class: class " + std::to_string(c) + " has " +
                          std::to_string(available[c]) + " samples, split wants " +
                          std::to_string(train_per_class));
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < ds.labels.size(); ++i)
      if (ds.labels[i] == static_cast<int>(c)) members.push_back(i);
    Rng rng(Rng::mix(seed, c));
    rng.shuffle(members);
    train_idx.insert(train_idx.end(), members.begin(),
                     members.begin() + static_cast<std::ptrdiff_t>(train_per_class));
    test_idx.insert(test_idx.end(), members.begin() + static_cast<std::ptrdiff_t>(train_per_class),
                    members.end());
  }

  const auto gather = [&](const std::vector<std::size_t>& idx, const std::string& suffix) {
    Dataset out;
    out.features = Matrix(idx.size(), ds.features.cols());
    out.labels.resize(idx.size());
    out.num_classes = ds.num_classes;
    out.name = ds.name + suffix;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double* src = ds.features.row(idx[i]);
      std::copy(src, src + ds.features.cols(), out.features.row(i));
      out.labels[i] = ds.labels[idx[i]];
    }
    return out;
  };
  return {gather(train_idx, "-train"), gather(test_idx, "-test")};
}

namespace detail {

inline std::uint32_t read_be_u32(std::istream& in, const std::string& field) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  if (!in) throw ParseError("idx: truncated while reading " + field);
  return (static_cast<std::uint32_t>(buf[0]) << 24) | (static_cast<std::uint32_t>(buf[1]) << 16) |
         (static_cast<std::uint32_t>(buf[2]) << 8) | static_cast<std::uint32_t>(buf[3]);
}

}  // namespace detail

/// Loads an IDX image/label file pair (the classic big-endian binary layout:
/// images carry magic 0x00000803 and dims N, rows, cols; labels carry magic
/// 0x00000801 and dim N). Pixels are scaled to [0,1]; images are flattened
/// row-major. num_classes is taken as max(label)+1.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw ParseError("idx: cannot open images file " + images_path.string());
  const std::uint32_t img_magic = detail::read_be_u32(img, "images magic");
  if (img_magic != 0x00000803u) {
    char hex[16];
    std::snprintf(hex, sizeof(hex), "0x%08x", img_magic);
    throw ParseError(std::string("idx: unexpected magic in images file: ") + hex +
                     " (want 0x00000803)");
  }
  const std::uint32_t n_images = detail::read_be_u32(img, "image count");
  const std::uint32_t rows = detail::read_be_u32(img, "image rows");
  const std::uint32_t cols = detail::read_be_u32(img, "image cols");
  if (rows == 0 || cols == 0) throw ParseError("idx: zero image dimensions");

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw ParseError("idx: cannot open labels file " + labels_path.string());
  const std::uint32_t lab_magic = detail::read_be_u32(lab, "labels magic");
  if (lab_magic != 0x00000801u) {
    char hex[16];
    std::snprintf(hex, sizeof(hex), "0x%08x", lab_magic);
    throw ParseError(std::string("idx: unexpected magic in labels file: ") + hex +
                     " (want 0x00000801)");
  }
  const std::uint32_t n_labels = detail::read_be_u32(lab, "label count");
  if (n_images != n_labels)
    throw ParseError("idx: image count " + std::to_string(n_images) + " != label count " +
                     std::to_string(n_labels));

  const std::size_t dim = static_cast<std::size_t>(rows) * cols;
  Dataset ds;
  ds.features = Matrix(n_images, dim);
  ds.labels.resize(n_images);
  ds.name = images_path.stem().string();

  std::vector<unsigned char> pixel_row(dim);
  for (std::uint32_t i = 0; i < n_images; ++i) {
    img.read(reinterpret_cast<char*>(pixel_row.data()), static_cast<std::streamsize>(dim));
    if (!img) throw ParseError("idx: images data truncated at image " + std::to_string(i));
    double* x = ds.features.row(i);
    for (std::size_t d = 0; d < dim; ++d) x[d] = pixel_row[d] / 255.0;
  }
  int max_label = 0;
  for (std::uint32_t i = 0; i < n_labels; ++i) {
    unsigned char y = 0;
    lab.read(reinterpret_cast<char*>(&y), 1);
    if (!lab) throw ParseError("idx: labels data truncated at label " + std::to_string(i));
    ds.labels[i] = static_cast<int>(y);
    max_label = std::max(max_label, static_cast<int>(y));
  }
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  return ds;
}

enum class OodKind { UniformNoise, ShiftedBlobs };

/// Generates an out-of-distribution set relative to `reference`.
///
/// UniformNoise draws each feature uniformly over the reference per-dimension
/// bounding box. ShiftedBlobs re-estimates the reference class means and the
/// pooled within-class noise scale, displaces each mean by `shift_offset`
/// along a seeded random direction, and samples fresh blobs; offset 0 is thus
/// a fresh draw from (an estimate of) the in-distribution itself. Labels are
/// kOodLabel throughout.
inline Dataset gen_ood(OodKind kind, const Dataset& reference, std::size_t n, std::uint64_t seed,
                       double shift_offset = 0.0) {
  if (n < 1) throw std::invalid_argument("gen_ood: n must be >= 1");
  if (reference.features.rows() == 0 || reference.features.cols() == 0)
    throw std::invalid_argument("gen_ood: reference dataset is empty");
  const std::size_t dim = reference.features.cols();

  Dataset out;
  out.features = Matrix(n, dim);
  out.labels.assign(n, kOodLabel);
  out.num_classes = reference.num_classes;
  Rng rng(seed);

  if (kind == OodKind::UniformNoise) {
    out.name = "ood-uniform-noise";
    std::vector<double> lo(dim, std::numeric_limits<double>::infinity());
    std::vector<double> hi(dim, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < reference.features.rows(); ++i) {
      const double* x = reference.features.row(i);
      for (std::size_t d = 0; d < dim; ++d) {
        lo[d] = std::min(lo[d], x[d]);
        hi[d] = std::max(hi[d], x[d]);
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      double* x = out.features.row(i);
      for (std::size_t d = 0; d < dim; ++d) x[d] = rng.uniform(lo[d], hi[d]);
    }
    return out;
  }

  // ShiftedBlobs: empirical class means and pooled within-class std.
  out.name = "ood-shifted-blobs";
  const std::vector<std::size_t> counts = class_counts(reference);
  const std::size_t c_total = reference.num_classes;
  Matrix means(c_total, dim);
  for (std::size_t i = 0; i < reference.features.rows(); ++i) {
    const double* x = reference.features.row(i);
    double* m = means.row(static_cast<std::size_t>(reference.labels[i]));
    for (std::size_t d = 0; d < dim; ++d) m[d] += x[d];
  }
  for (std::size_t c = 0; c < c_total; ++c) {
    if (counts[c] == 0)
      throw DegenerateInputError("gen_ood: reference class " + std::to_string(c) + " is empty");
    double* m = means.row(c);
    for (std::size_t d = 0; d < dim; ++d) m[d] /= static_cast<double>(counts[c]);
  }
  double ss = 0.0;
  for (std::size_t i = 0; i < reference.features.rows(); ++i) {
    const double* x = reference.features.row(i);
    const double* m = means.row(static_cast<std::size_t>(reference.labels[i]));
    for (std::size_t d = 0; d < dim; ++d) {
      const double diff = x[d] - m[d];
      ss += diff * diff;
    }
  }
  const double pooled_std =
      std::sqrt(ss / (static_cast<double>(reference.features.rows()) * static_cast<double>(dim)));

  Matrix shifted(c_total, dim);
  for (std::size_t c = 0; c < c_total; ++c) {
    std::vector<double> dir(dim);
    double norm_sq = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      dir[d] = rng.normal();
      norm_sq += dir[d] * dir[d];
    }
    const double norm = std::sqrt(norm_sq);
    double* row = shifted.row(c);
    const double* m = means.row(c);
    for (std::size_t d = 0; d < dim; ++d) row[d] = m[d] + shift_offset * dir[d] / norm;
  }

  std::size_t row = 0;
  for (std::size_t c = 0; c < c_total && row < n; ++c) {
    const std::size_t share = n / c_total + (c < n % c_total ? 1 : 0);
    const double* m = shifted.row(c);
    for (std::size_t s = 0; s < share && row < n; ++s, ++row) {
      double* x = out.features.row(row);
      for (std::size_t d = 0; d < dim; ++d) x[d] = m[d] + pooled_std * rng.normal();
    }
  }
  return out;
}

/// Writes the dataset as CSV with header `label,f0,...,f{D-1}`.
inline void save_dataset_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_dataset_csv: cannot open " + path.string());
  out << "label";
  for (std::size_t d = 0; d < ds.features.cols(); ++d) out << ",f" << d;
  out << '\n';
  for (std::size_t i = 0; i < ds.features.rows(); ++i) {
    out << ds.labels[i];
    const double* x = ds.features.row(i);
    for (std::size_t d = 0; d < ds.features.cols(); ++d) out << ',' << detail::format_double(x[d]);
    out << '\n';
  }
  if (!out) throw std::runtime_error("save_dataset_csv: write failed for " + path.string());
}

}  // namespace maxsep
