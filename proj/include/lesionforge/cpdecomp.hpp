#ifndef LESIONFORGE_CPDECOMP_HPP
#define LESIONFORGE_CPDECOMP_HPP

// CP decomposition of stacked images by alternating least squares, and
// projection of held-out images onto a trained factor space.
//
// Index conventions: the stack is N x H x J with J = 3W (channels side by
// side along the width). The mode-1 unfolding puts X[n,i,j] at column
// i + H*j, and the Khatri-Rao product puts C[j,r]*B[i,r] at row j*H + i, so
// X_(1) = A (C kr B)^T.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lesionforge/detail/binary_io.hpp"
#include "lesionforge/error.hpp"
#include "lesionforge/features.hpp"
#include "lesionforge/imaging.hpp"

namespace lesionforge {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct StackedTensor {
  std::vector<std::string> ids;
  std::size_t height = 0;  // mode-2 extent (image rows)
  std::size_t depth = 0;   // mode-3 extent (3 * image width)
  Matrix data;             // (height*depth) x N; column n is image n, row index i + height*j

  std::size_t count() const noexcept { return std::size_t(data.cols()); }
  double at(std::size_t n, std::size_t i, std::size_t j) const { return data(Eigen::Index(i + height * j), Eigen::Index(n)); }
  Eigen::Map<const Matrix> slice(std::size_t n) const {
    return {data.col(Eigen::Index(n)).data(), Eigen::Index(height), Eigen::Index(depth)};
  }
};

/// tensor[n, i, j + W*c] = image_n(i, j, c).
inline StackedTensor stack_images(const std::vector<ImagePlane>& images, std::vector<std::string> ids = {}) {
  if (images.empty()) throw ShapeError("cannot stack an empty image list");
  if (ids.empty())
    for (std::size_t n = 0; n < images.size(); ++n) ids.push_back(std::to_string(n));
  if (ids.size() != images.size()) throw ShapeError("stack_images: id count does not match image count");
  const auto& first = images.front();
  if (first.channels() != 3) throw ShapeError("stack_images needs 3-channel images");
  StackedTensor t;
  t.ids = std::move(ids);
  t.height = first.height();
  t.depth = 3 * first.width();
  t.data.resize(Eigen::Index(t.height * t.depth), Eigen::Index(images.size()));
  const std::size_t w = first.width();
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (!images[n].same_geometry(first)) throw ShapeError("stack_images: image " + t.ids[n] + " has a different shape");
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t y = 0; y < t.height; ++y)
          t.data(Eigen::Index(y + t.height * (x + w * c)), Eigen::Index(n)) = images[n].at(y, x, c);
  }
  return t;
}

inline std::vector<ImagePlane> unstack_images(const StackedTensor& t) {
  if (t.depth % 3 != 0) throw ShapeError("mode-3 extent is not a multiple of 3");
  const std::size_t w = t.depth / 3;
  std::vector<ImagePlane> out;
  for (std::size_t n = 0; n < t.count(); ++n) {
    std::vector<double> d(t.height * w * 3);
    for (std::size_t y = 0; y < t.height; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < 3; ++c) d[(y * w + x) * 3 + c] = t.at(n, y, x + w * c);
    out.emplace_back(t.height, w, 3, std::move(d));
  }
  return out;
}

/// N x (H*J) matrix with X[n,i,j] at column i + H*j.
inline Matrix mode1_unfold(const StackedTensor& t) { return t.data.transpose(); }

inline StackedTensor mode1_fold(const Matrix& x1, std::size_t height, std::size_t depth,
                                std::vector<std::string> ids = {}) {
  if (std::size_t(x1.cols()) != height * depth) throw ShapeError("mode1_fold: column count != height*depth");
  if (ids.empty())
    for (Eigen::Index n = 0; n < x1.rows(); ++n) ids.push_back(std::to_string(n));
  if (ids.size() != std::size_t(x1.rows())) throw ShapeError("mode1_fold: id count does not match rows");
  return {std::move(ids), height, depth, x1.transpose()};
}

/// Column-wise Kronecker product: row j*rows(b) + i holds c(j,r) * b(i,r).
inline Matrix khatri_rao(const Matrix& c, const Matrix& b) {
  if (c.cols() != b.cols()) throw ShapeError("khatri_rao: column counts differ");
  Matrix out(c.rows() * b.rows(), c.cols());
  for (Eigen::Index r = 0; r < c.cols(); ++r)
    for (Eigen::Index j = 0; j < c.rows(); ++j) out.col(r).segment(j * b.rows(), b.rows()) = c(j, r) * b.col(r);
  return out;
}

struct CpOptions {
  std::size_t rank = 24;
  std::size_t max_sweeps = 100;
  double fit_tol = 1e-6;
  std::uint64_t seed = 0;
  std::size_t restarts = 3;
  double jitter = 1e-10;
};

struct CpModel {
  Matrix a, b, c;  // N x R, H x R, J x R
  std::vector<std::string> ids;
  std::vector<double> fit_trace;  // fit after each sweep of the kept restart
  std::size_t kept_restart = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;

  std::size_t rank() const noexcept { return std::size_t(a.cols()); }
  double fit() const { return fit_trace.empty() ? 0.0 : fit_trace.back(); }
};

namespace detail {

/// Rows of the mode-1 MTTKRP: out(n,r) = sum_ij X[n,i,j] b(i,r) c(j,r).
inline Matrix mttkrp_mode1(const StackedTensor& x, const Matrix& b, const Matrix& c) {
  Matrix out(Eigen::Index(x.count()), b.cols());
  for (std::size_t n = 0; n < x.count(); ++n) {
    const Matrix t = x.slice(n) * c;  // H x R
    out.row(Eigen::Index(n)) = (b.array() * t.array()).colwise().sum();
  }
  return out;
}

inline Matrix mttkrp_mode2(const StackedTensor& x, const Matrix& a, const Matrix& c) {
  Matrix out = Matrix::Zero(Eigen::Index(x.height), a.cols());
  for (std::size_t n = 0; n < x.count(); ++n)
    out += (x.slice(n) * c) * a.row(Eigen::Index(n)).asDiagonal();
  return out;
}

inline Matrix mttkrp_mode3(const StackedTensor& x, const Matrix& a, const Matrix& b) {
  Matrix out = Matrix::Zero(Eigen::Index(x.depth), a.cols());
  for (std::size_t n = 0; n < x.count(); ++n)
    out += (x.slice(n).transpose() * b) * a.row(Eigen::Index(n)).asDiagonal();
  return out;
}

/// m * (v + jitter*I)^-1 for symmetric positive semidefinite v.
inline Matrix solve_normal(const Matrix& m, const Matrix& v, double jitter) {
  Matrix reg = v;
  reg.diagonal().array() += jitter;
  return reg.ldlt().solve(m.transpose()).transpose();
}

/// 1 - ||X - [[A,B,C]]|| / ||X||, from the explicit residual.
inline double cp_fit(const StackedTensor& x, const Matrix& a, const Matrix& b, const Matrix& c) {
  double res = 0.0, norm = 0.0;
  for (std::size_t n = 0; n < x.count(); ++n) {
    const auto s = x.slice(n);
    const Matrix rec = b * a.row(Eigen::Index(n)).asDiagonal() * c.transpose();
    res += (s - rec).squaredNorm();
    norm += s.squaredNorm();
  }
  if (norm == 0.0) return res == 0.0 ? 1.0 : -INFINITY;
  return 1.0 - std::sqrt(res / norm);
}

/// Unit-norm B and C columns, scale into A; sign chosen so the largest-
/// magnitude entry of every B and C column is positive; columns ordered by
/// decreasing A norm.
inline void canonicalize(Matrix& a, Matrix& b, Matrix& c) {
  const Eigen::Index r = a.cols();
  auto fix_sign = [&](Matrix& f, Eigen::Index k) {
    Eigen::Index idx = 0;
    f.col(k).cwiseAbs().maxCoeff(&idx);
    if (f(idx, k) < 0.0) {
      f.col(k) *= -1.0;
      a.col(k) *= -1.0;
    }
  };
  for (Eigen::Index k = 0; k < r; ++k) {
    for (Matrix* f : {&b, &c}) {
      const double nrm = f->col(k).norm();
      if (nrm > 0.0) {
        f->col(k) /= nrm;
        a.col(k) *= nrm;
      }
      fix_sign(*f, k);
    }
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(r));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index p, Eigen::Index q) { return a.col(p).norm() > a.col(q).norm(); });
  Matrix a2(a.rows(), r), b2(b.rows(), r), c2(c.rows(), r);
  for (Eigen::Index k = 0; k < r; ++k) {
    a2.col(k) = a.col(order[std::size_t(k)]);
    b2.col(k) = b.col(order[std::size_t(k)]);
    c2.col(k) = c.col(order[std::size_t(k)]);
  }
  a = std::move(a2);
  b = std::move(b2);
  c = std::move(c2);
}

struct AlsRun {
  Matrix a, b, c;
  std::vector<double> trace;
};

inline AlsRun als_once(const StackedTensor& x, const CpOptions& opt, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto r = Eigen::Index(opt.rank);
  AlsRun run;
  run.b.resize(Eigen::Index(x.height), r);
  run.c.resize(Eigen::Index(x.depth), r);
  for (Eigen::Index k = 0; k < run.b.size(); ++k) run.b.data()[k] = u(rng);
  for (Eigen::Index k = 0; k < run.c.size(); ++k) run.c.data()[k] = u(rng);
  for (std::size_t sweep = 0; sweep < opt.max_sweeps; ++sweep) {
    const Matrix btb = run.b.transpose() * run.b, ctc = run.c.transpose() * run.c;
    run.a = solve_normal(mttkrp_mode1(x, run.b, run.c), ctc.cwiseProduct(btb), opt.jitter);
    const Matrix ata = run.a.transpose() * run.a;
    run.b = solve_normal(mttkrp_mode2(x, run.a, run.c), ctc.cwiseProduct(ata), opt.jitter);
    const Matrix btb2 = run.b.transpose() * run.b;
    run.c = solve_normal(mttkrp_mode3(x, run.a, run.b), btb2.cwiseProduct(ata), opt.jitter);
    const double fit = cp_fit(x, run.a, run.b, run.c);
    if (!std::isfinite(fit) || !run.a.allFinite() || !run.b.allFinite() || !run.c.allFinite()) {
      throw NumericError("CP-ALS produced a non-finite value at sweep " + std::to_string(sweep));
    }
    run.trace.push_back(fit);
    if (run.trace.size() >= 2 && std::abs(fit - run.trace[run.trace.size() - 2]) < opt.fit_tol) break;
  }
  return run;
}

inline std::uint64_t restart_seed(std::uint64_t seed, std::size_t restart) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(restart)};
  std::uint64_t out[1];
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  out[0] = (std::uint64_t(words[0]) << 32) | words[1];
  return out[0];
}

}  // namespace detail

/// Rank-R CP-ALS with seeded restarts; keeps the restart with the best final
/// fit (earliest on ties) and returns it canonicalized.
inline CpModel cp_als(const StackedTensor& x, const CpOptions& opt) {
  if (opt.rank == 0) throw ShapeError("CP rank must be at least 1");
  if (opt.max_sweeps == 0) throw ShapeError("max_sweeps must be positive");
  if (x.count() == 0) throw ShapeError("cannot decompose an empty stack");
  if (!x.data.allFinite()) throw NumericError("stacked tensor contains non-finite values");
  const std::size_t restarts = std::max<std::size_t>(1, opt.restarts);
  CpModel best;
  if (x.count() < opt.rank) {
    best.warnings.push_back("rank " + std::to_string(opt.rank) + " exceeds the " + std::to_string(x.count()) +
                            " stacked images; factor A is not identifiable");
  }
  bool have = false;
  for (std::size_t k = 0; k < restarts; ++k) {
    auto run = detail::als_once(x, opt, detail::restart_seed(opt.seed, k));
    if (!have || run.trace.back() > best.fit()) {
      best.a = std::move(run.a);
      best.b = std::move(run.b);
      best.c = std::move(run.c);
      best.fit_trace = std::move(run.trace);
      best.kept_restart = k;
      have = true;
    }
  }
  detail::canonicalize(best.a, best.b, best.c);
  best.ids = x.ids;
  best.seed = opt.seed;
  return best;
}

/// Moore-Penrose inverse of a symmetric PSD matrix; eigenvalues at or below
/// 1e-12 times the largest are treated as zero.
inline Matrix symmetric_pinv(const Matrix& v, double rel_cutoff = 1e-12) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(v);
  const Vector& ev = es.eigenvalues();
  const double top = ev.cwiseAbs().maxCoeff();
  Vector inv(ev.size());
  for (Eigen::Index k = 0; k < ev.size(); ++k) inv[k] = (top > 0.0 && ev[k] > rel_cutoff * top) ? 1.0 / ev[k] : 0.0;
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

/// A_test = X_(1) F (F^T F)^+ with F = C kr B.
inline Matrix project_test(const CpModel& model, const StackedTensor& x) {
  if (std::size_t(model.b.rows()) != x.height || std::size_t(model.c.rows()) != x.depth) {
    throw ShapeError("test stack is " + std::to_string(x.height) + "x" + std::to_string(x.depth) +
                     " but the model expects " + std::to_string(model.b.rows()) + "x" +
                     std::to_string(model.c.rows()));
  }
  const Matrix ftf = (model.c.transpose() * model.c).cwiseProduct(model.b.transpose() * model.b);
  return detail::mttkrp_mode1(x, model.b, model.c) * symmetric_pinv(ftf);
}

/// Model container "CPM1": magic, u32 version, u64 N/H/J/R, u64 seed,
/// u32 kept restart, u32 trace length + f64 trace, N ids, A/B/C as f64
/// column-major, u32 CRC32 of everything before it.
inline std::vector<std::uint8_t> serialize_model(const CpModel& m) {
  detail::ByteWriter w;
  w.bytes("CPM1", 4);
  w.u32(1);
  w.u64(std::uint64_t(m.a.rows()));
  w.u64(std::uint64_t(m.b.rows()));
  w.u64(std::uint64_t(m.c.rows()));
  w.u64(std::uint64_t(m.a.cols()));
  w.u64(m.seed);
  w.u32(std::uint32_t(m.kept_restart));
  w.u32(std::uint32_t(m.fit_trace.size()));
  for (double f : m.fit_trace) w.f64(f);
  for (const auto& id : m.ids) w.str(id);
  for (const Matrix* f : {&m.a, &m.b, &m.c})
    for (Eigen::Index k = 0; k < f->size(); ++k) w.f64(f->data()[k]);
  w.u32(detail::crc32_of(w.buffer()));
  return std::move(w.buffer());
}

inline CpModel parse_model(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::string_view(magic, 4) != "CPM1") throw FormatError("not a CP model file (bad magic)");
  if (const auto v = r.u32("version"); v != 1) throw FormatError("unsupported CP model version " + std::to_string(v));
  const auto n = r.u64("N"), h = r.u64("H"), j = r.u64("J"), rank = r.u64("R");
  if (rank == 0 || (n + h + j) * rank * 8 > bytes.size()) throw FormatError("CP model header is implausible");
  CpModel m;
  m.seed = r.u64("seed");
  m.kept_restart = r.u32("kept restart");
  m.fit_trace.resize(r.u32("trace length"));
  for (auto& f : m.fit_trace) f = r.f64("fit trace");
  for (std::uint64_t k = 0; k < n; ++k) m.ids.push_back(r.str("image id"));
  auto read = [&](Matrix& f, std::uint64_t rows, const char* what) {
    f.resize(Eigen::Index(rows), Eigen::Index(rank));
    for (Eigen::Index k = 0; k < f.size(); ++k) f.data()[k] = r.f64(what);
  };
  read(m.a, n, "factor A");
  read(m.b, h, "factor B");
  read(m.c, j, "factor C");
  const auto end = r.position();
  if (r.u32("crc32") != detail::crc32_of(bytes.first(end))) throw FormatError("CP model checksum mismatch");
  if (r.remaining() != 0) throw FormatError("trailing bytes after CP model checksum");
  return m;
}

inline void save_model(const CpModel& m, const std::filesystem::path& path) {
  detail::write_file_atomic(path, serialize_model(m));
}

inline CpModel load_model(const std::filesystem::path& path) { return parse_model(detail::read_file_bytes(path)); }

inline std::vector<std::string> loading_column_names(std::size_t rank) {
  std::vector<std::string> n;
  for (std::size_t k = 1; k <= rank; ++k) n.push_back("cp_" + std::to_string(k));
  return n;
}

/// id,label,cp_1..cp_R; `labels` may be empty (label column then 0).
inline std::string loadings_csv(const Matrix& a, const std::vector<std::string>& ids, const std::vector<int>& labels) {
  if (ids.size() != std::size_t(a.rows())) throw ShapeError("loadings_csv: id count does not match rows");
  std::vector<FeatureRow> rows;
  for (Eigen::Index n = 0; n < a.rows(); ++n) {
    FeatureRow row{ids[std::size_t(n)], labels.empty() ? 0 : labels.at(std::size_t(n)), {}};
    for (Eigen::Index k = 0; k < a.cols(); ++k) row.values.push_back(a(n, k));
    rows.push_back(std::move(row));
  }
  return features_csv(rows, loading_column_names(std::size_t(a.cols())));
}

struct ClusterSummary {
  std::size_t column = 0;     // 0-based factor column
  double importance = 0.0;    // |mean z (label 1) - mean z (label 0)|
  double mean_z_positive = 0.0, mean_z_negative = 0.0;
  std::vector<std::string> top_positive, top_negative;  // ids by largest / smallest z
};

struct ClusterReport {
  std::vector<ClusterSummary> ranked;
  std::vector<std::string> notices;
};

/// Ranks factor columns by the absolute standardized two-class mean gap.
/// Constant columns cannot be standardized and are skipped with a notice.
inline ClusterReport rank_clusters_report(const Matrix& a, const std::vector<std::string>& ids,
                                          const std::vector<int>& labels, std::size_t top_k = 3) {
  if (ids.size() != std::size_t(a.rows()) || labels.size() != ids.size()) {
    throw ShapeError("rank_clusters_report: ids and labels must align with loading rows");
  }
  ClusterReport rep;
  for (Eigen::Index k = 0; k < a.cols(); ++k) {
    const Vector col = a.col(k);
    const double mean = col.mean();
    const double sd = std::sqrt((col.array() - mean).square().mean());
    if (!(sd > 0.0)) {
      rep.notices.push_back("cluster " + std::to_string(k + 1) + " skipped: constant loadings");
      continue;
    }
    const Vector z = (col.array() - mean) / sd;
    double s1 = 0.0, s0 = 0.0;
    std::size_t n1 = 0, n0 = 0;
    for (Eigen::Index n = 0; n < z.size(); ++n) {
      if (labels[std::size_t(n)]) {
        s1 += z[n];
        ++n1;
      } else {
        s0 += z[n];
        ++n0;
      }
    }
    ClusterSummary c;
    c.column = std::size_t(k);
    c.mean_z_positive = n1 ? s1 / double(n1) : 0.0;
    c.mean_z_negative = n0 ? s0 / double(n0) : 0.0;
    c.importance = std::abs(c.mean_z_positive - c.mean_z_negative);
    std::vector<std::size_t> order(std::size_t(z.size()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t p, std::size_t q) { return z[Eigen::Index(p)] > z[Eigen::Index(q)]; });
    const std::size_t kk = std::min(top_k, order.size());
    for (std::size_t t = 0; t < kk; ++t) c.top_positive.push_back(ids[order[t]]);
    for (std::size_t t = 0; t < kk; ++t) c.top_negative.push_back(ids[order[order.size() - 1 - t]]);
    rep.ranked.push_back(std::move(c));
  }
  std::stable_sort(rep.ranked.begin(), rep.ranked.end(),
                   [](const ClusterSummary& p, const ClusterSummary& q) { return p.importance > q.importance; });
  return rep;
}

inline std::string cluster_report_text(const ClusterReport& rep, std::size_t show = 3) {
  std::ostringstream out;
  for (std::size_t i = 0; i < std::min(show, rep.ranked.size()); ++i) {
    const auto& c = rep.ranked[i];
    out << "cluster " << c.column + 1 << "  importance " << format_double(c.importance) << "  mean z (1) "
        << format_double(c.mean_z_positive) << "  mean z (0) " << format_double(c.mean_z_negative) << "\n  top +:";
    for (const auto& id : c.top_positive) out << ' ' << id;
    out << "\n  top -:";
    for (const auto& id : c.top_negative) out << ' ' << id;
    out << '\n';
  }
  for (const auto& n : rep.notices) out << "note: " << n << '\n';
  return out.str();
}

}  // namespace lesionforge

#endif  // LESIONFORGE_CPDECOMP_HPP
