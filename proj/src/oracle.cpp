#include "extrap/oracle.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>

namespace extrap::oracle {

namespace nd = ndgrad;

namespace {

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t.at(r, c);
  return m;
}

Tensor from_eigen(const Eigen::MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) t.at(r, c) = m(r, c);
  return t;
}

void require_finite(const Tensor& J, const char* what) {
  if (!J.all_finite()) throw OracleError(std::string(what) + ": non-finite Jacobian entry");
}

// Reverse-mode Jacobian of a row-wise map: replicate z once per output and
// pick output i from row i, so one backward pass yields every row.
Tensor analytic_jacobian(const std::function<Var(const Var&)>& f, std::span<const double> z) {
  const std::size_t dz = z.size();
  const std::size_t dx = f(Var::constant(Tensor({1, dz}, std::vector<double>(z.begin(), z.end())))).value().cols();
  Tensor zs({dx, dz});
  for (std::size_t i = 0; i < dx; ++i) std::copy(z.begin(), z.end(), zs.storage().begin() + static_cast<std::ptrdiff_t>(i * dz));
  Var zv = Var::parameter(std::move(zs));
  Var out = f(zv);
  Tensor pick({dx, dx});
  for (std::size_t i = 0; i < dx; ++i) pick.at(i, i) = 1.0;
  nd::backward(nd::sum(nd::mul(out, Var::constant(std::move(pick)))));
  return zv.grad();
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc;
}

std::vector<double> concat(std::span<const double> a, std::span<const double> b) {
  std::vector<double> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

std::vector<double> apply_point(const Generator& gen, std::span<const double> c, std::span<const double> s) {
  auto z = concat(c, s);
  const std::size_t dz = z.size();
  return gen.apply(Tensor({1, dz}, std::move(z))).storage();
}

void project_to_sphere(std::vector<double>& s, double radius) {
  double norm = std::sqrt(std::inner_product(s.begin(), s.end(), s.begin(), 0.0));
  if (norm < 1e-300) {
    s.assign(s.size(), 0.0);
    s[0] = radius;
    return;
  }
  for (auto& v : s) v *= radius / norm;
}

std::vector<std::vector<double>> boundary_grid(std::size_t d_s, double radius, std::size_t n) {
  std::vector<std::vector<double>> pts;
  pts.reserve(n);
  if (d_s == 1) return {{radius}, {-radius}};
  if (d_s == 2) {
    for (std::size_t k = 0; k < n; ++k) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      pts.push_back({radius * std::cos(a), radius * std::sin(a)});
    }
    return pts;
  }
  Rng rng(0x5ee);
  for (std::size_t k = 0; k < n; ++k) {
    auto v = rng.normal_vector(d_s);
    project_to_sphere(v, radius);
    pts.push_back(std::move(v));
  }
  return pts;
}

// Lattice over the s-ball plus its boundary circle. The generators are
// piecewise linear, so J is constant on small regions that random draws can
// miss; a lattice visits every region wider than its step.
std::vector<std::vector<double>> ball_grid(std::size_t d_s, double radius) {
  auto pts = boundary_grid(d_s, radius, 128);
  if (d_s != 2) return pts;
  const int m = 64;
  for (int i = -m; i <= m; ++i)
    for (int j = -m; j <= m; ++j) {
      if (i * i + j * j > m * m) continue;
      pts.push_back({radius * i / m, radius * j / m});
    }
  return pts;
}

}  // namespace

Tensor jacobian(const Generator& gen, std::span<const double> z, JacobianMethod method, double h) {
  const std::size_t dz = static_cast<std::size_t>(gen.spec().d_z());
  if (z.size() != dz) throw nd::ShapeError("jacobian: z has " + std::to_string(z.size()) + " entries, expected " + std::to_string(dz));
  Tensor J;
  if (method == JacobianMethod::Analytic) {
    J = analytic_jacobian([&](const Var& v) { return gen.apply(v); }, z);
  } else {
    if (!(h > 0.0)) throw std::invalid_argument("jacobian: step must be positive");
    const std::size_t dx = static_cast<std::size_t>(gen.spec().d_x);
    J = Tensor({dx, dz});
    std::vector<double> zp(z.begin(), z.end());
    for (std::size_t j = 0; j < dz; ++j) {
      const double orig = zp[j];
      zp[j] = orig + h;
      const auto xp = gen.apply(Tensor({1, dz}, zp)).storage();
      zp[j] = orig - h;
      const auto xm = gen.apply(Tensor({1, dz}, zp)).storage();
      zp[j] = orig;
      for (std::size_t i = 0; i < dx; ++i) J.at(i, j) = (xp[i] - xm[i]) / (2.0 * h);
    }
  }
  require_finite(J, "jacobian");
  return J;
}

IndexSets influenced_indices(const Tensor& J, std::size_t d_c, double tol) {
  if (J.rank() != 2 || J.cols() < d_c) throw nd::ShapeError("influenced_indices: J must be d_x x d_z with d_z >= d_c");
  IndexSets sets;
  for (std::size_t i = 0; i < J.rows(); ++i) {
    bool by_s = false, by_c = false;
    for (std::size_t j = 0; j < J.cols(); ++j) {
      if (std::abs(J.at(i, j)) <= tol) continue;
      (j < d_c ? by_c : by_s) = true;
    }
    if (by_s) sets.I_s.push_back(i);
    if (by_c) sets.I_c.push_back(i);
    if (by_c && !by_s) sets.I_c_minus_s.push_back(i);
  }
  return sets;
}

JacobianReport jacobian_report(const Generator& gen, const LatentSample& z, double tol) {
  JacobianReport r;
  r.z = z;
  r.J = jacobian(gen, z.z());
  r.sets = influenced_indices(r.J, static_cast<std::size_t>(gen.spec().d_c), tol);
  r.tol = tol;
  return r;
}

double spectral_norm(const Tensor& J, int max_iterations, double tol) {
  const Eigen::MatrixXd m = to_eigen(J);
  const Eigen::MatrixXd gram = m.transpose() * m;
  if (gram.norm() == 0.0) return 0.0;
  // Fixed, generic start vector: never orthogonal to the top direction for a
  // non-degenerate J, and keeps the result deterministic.
  Eigen::VectorXd v0(gram.cols());
  for (Eigen::Index i = 0; i < v0.size(); ++i) v0(i) = 1.0 + 0.1 * static_cast<double>(i) + 0.01 * static_cast<double>(i * i);
  v0.normalize();
  // Power iteration by repeated squaring: iterate k applies gram^(2^k), so a
  // small gap between the top two singular values still converges quickly.
  Eigen::MatrixXd power = gram / gram.norm();
  double lambda = 0.0;
  for (int it = 0; it < max_iterations; ++it) {
    Eigen::VectorXd v = power * v0;
    const double norm = v.norm();
    if (norm == 0.0) throw OracleError("spectral_norm: start vector annihilated");
    v /= norm;
    const double next = v.dot(gram * v);
    if (it > 0 && std::abs(next - lambda) <= tol * std::abs(next)) return std::sqrt(next);
    lambda = next;
    power = power * power;
    power /= power.norm();
  }
  throw OracleError("spectral_norm: power iteration did not converge in " + std::to_string(max_iterations) + " iterations");
}

std::vector<double> singular_values(const Tensor& J) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(J));
  const auto& sv = svd.singularValues();
  return {sv.data(), sv.data() + sv.size()};
}

std::size_t numerical_rank(const Tensor& J, double rel_tol) {
  const auto sv = singular_values(J);
  if (sv.empty() || sv[0] == 0.0) return 0;
  return static_cast<std::size_t>(std::count_if(sv.begin(), sv.end(), [&](double s) { return s > rel_tol * sv[0]; }));
}

Tensor select_rows(const Tensor& J, std::span<const std::size_t> rows) {
  if (rows.empty()) throw std::invalid_argument("select_rows: empty row set");
  Tensor out({rows.size(), J.cols()});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= J.rows()) throw std::out_of_range("select_rows: row " + std::to_string(rows[r]) + " out of range");
    for (std::size_t c = 0; c < J.cols(); ++c) out.at(r, c) = J.at(rows[r], c);
  }
  return out;
}

SpectralBound spectral_bound(const Generator& gen, std::span<const LatentSample> points) {
  SpectralBound b;
  for (const auto& p : points) b.J_u = std::max(b.J_u, spectral_norm(jacobian(gen, p.z())));
  b.n_points = points.size();
  return b;
}

SpectralBound spectral_bound(const Generator& gen, std::size_t n_samples, Rng& rng, std::span<const LatentSample> extra) {
  if (n_samples < 1) throw std::invalid_argument("spectral_bound: need at least one sample");
  Dataset support = sample_source(gen, n_samples, rng);
  std::vector<LatentSample> points = std::move(support.latents);
  // Discrete c: the support is one s-ball per class embedding, cover it.
  if (gen.spec().task == Task::BinaryClassification) {
    for (const auto& c : gen.class_embeddings())
      for (auto& s : ball_grid(static_cast<std::size_t>(gen.spec().d_s), gen.radius())) points.push_back({c, s});
  }
  points.insert(points.end(), extra.begin(), extra.end());
  return spectral_bound(gen, points);
}

ManifoldDistance manifold_distance(const Generator& gen, std::span<const double> c1, std::span<const double> c2,
                                   std::size_t n_boundary) {
  const auto dc = static_cast<std::size_t>(gen.spec().d_c);
  const auto ds = static_cast<std::size_t>(gen.spec().d_s);
  if (c1.size() != dc || c2.size() != dc) throw nd::ShapeError("manifold_distance: c must have d_c entries");
  if (n_boundary < 2) throw std::invalid_argument("manifold_distance: need at least 2 boundary points");
  ManifoldDistance result;
  if (std::equal(c1.begin(), c1.end(), c2.begin())) return result;
  // Canonical order makes the result exactly symmetric.
  if (std::lexicographical_compare(c2.begin(), c2.end(), c1.begin(), c1.end())) {
    auto swapped = manifold_distance(gen, c2, c1, n_boundary);
    std::swap(swapped.s1, swapped.s2);
    return swapped;
  }
  const double radius = gen.radius();
  const auto grid = boundary_grid(ds, radius, n_boundary);
  const std::size_t n = grid.size();
  std::vector<std::vector<double>> x1(n), x2(n);
  for (std::size_t k = 0; k < n; ++k) {
    x1[k] = apply_point(gen, c1, grid[k]);
    x2[k] = apply_point(gen, c2, grid[k]);
  }
  struct Pair {
    double d;
    std::size_t a, b;
  };
  std::vector<Pair> pairs;
  pairs.reserve(n * n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) pairs.push_back({sq_dist(x1[a], x2[b]), a, b});
  const std::size_t starts = std::min<std::size_t>(4, pairs.size());
  std::partial_sort(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(starts), pairs.end(),
                    [](const Pair& p, const Pair& q) { return p.d < q.d || (p.d == q.d && (p.a < q.a || (p.a == q.a && p.b < q.b))); });

  auto objective = [&](const std::vector<double>& s1, const std::vector<double>& s2) {
    return sq_dist(apply_point(gen, c1, s1), apply_point(gen, c2, s2));
  };
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t start = 0; start < starts; ++start) {
    std::vector<double> s1 = grid[pairs[start].a], s2 = grid[pairs[start].b];
    double f = pairs[start].d;
    double step = 0.1 * radius;
    for (int it = 0; it < 500 && step > 1e-14; ++it) {
      const auto xa = apply_point(gen, c1, s1);
      const auto xb = apply_point(gen, c2, s2);
      const Tensor Ja = jacobian(gen, concat(c1, s1));
      const Tensor Jb = jacobian(gen, concat(c2, s2));
      std::vector<double> g1(ds, 0.0), g2(ds, 0.0);
      for (std::size_t i = 0; i < xa.size(); ++i) {
        const double r = 2.0 * (xa[i] - xb[i]);
        for (std::size_t j = 0; j < ds; ++j) {
          g1[j] += r * Ja.at(i, dc + j);
          g2[j] -= r * Jb.at(i, dc + j);
        }
      }
      const double gnorm = std::sqrt(std::inner_product(g1.begin(), g1.end(), g1.begin(), 0.0) +
                                     std::inner_product(g2.begin(), g2.end(), g2.begin(), 0.0));
      if (gnorm < 1e-300) break;
      bool improved = false;
      while (step > 1e-14) {
        std::vector<double> t1 = s1, t2 = s2;
        for (std::size_t j = 0; j < ds; ++j) {
          t1[j] -= step * g1[j] / gnorm;
          t2[j] -= step * g2[j] / gnorm;
        }
        project_to_sphere(t1, radius);
        project_to_sphere(t2, radius);
        const double ft = objective(t1, t2);
        if (ft < f) {
          const double gain = f - ft;
          s1 = std::move(t1);
          s2 = std::move(t2);
          f = ft;
          step *= 1.5;
          improved = gain > 1e-16 * std::max(1.0, f);
          break;
        }
        step *= 0.5;
      }
      if (!improved) break;
    }
    if (f < best) {
      best = f;
      result.s1 = s1;
      result.s2 = s2;
    }
  }
  result.value = std::sqrt(best);
  if (result.value < 1e-9) {
    result.value = 0.0;
    result.intersect = true;
  }
  return result;
}

nlohmann::json DenseBoundReport::to_json() const {
  return {{"J_u", J_u}, {"D_min", D_min}, {"bound", bound}, {"distance", distance}, {"satisfied", satisfied},
          {"n_points", n_points}};
}

DenseBoundReport make_dense_bound_report(double J_u, double D_min, double distance) {
  if (!(J_u > 0.0)) throw std::invalid_argument("dense bound: J_u must be positive");
  if (D_min < 0.0 || distance < 0.0) throw std::invalid_argument("dense bound: distances must be non-negative");
  DenseBoundReport r;
  r.J_u = J_u;
  r.D_min = D_min;
  r.bound = D_min / (2.0 * J_u);
  r.distance = distance;
  r.satisfied = distance <= r.bound;
  return r;
}

DenseBoundReport check_dense_bound(const Generator& gen, std::span<const double> s_tgt, std::span<const double> c_tgt,
                                   const DenseBoundOptions& options) {
  if (gen.spec().task != Task::BinaryClassification || gen.class_embeddings().size() < 2)
    throw std::invalid_argument("check_dense_bound: needs a generator with discrete classes");
  const double norm = std::sqrt(std::inner_product(s_tgt.begin(), s_tgt.end(), s_tgt.begin(), 0.0));
  std::vector<LatentSample> extra;
  extra.push_back({std::vector<double>(c_tgt.begin(), c_tgt.end()), std::vector<double>(s_tgt.begin(), s_tgt.end())});
  if (norm > gen.radius()) {
    std::vector<double> edge(s_tgt.begin(), s_tgt.end());
    for (auto& v : edge) v *= gen.radius() / norm;
    extra.push_back({std::vector<double>(c_tgt.begin(), c_tgt.end()), std::move(edge)});
  }
  Rng rng = Rng::keyed(options.seed, {0xb0d});
  const SpectralBound ju = spectral_bound(gen, options.n_support, rng, extra);
  double d_min = std::numeric_limits<double>::infinity();
  for (const auto& c : gen.class_embeddings()) {
    if (std::equal(c.begin(), c.end(), c_tgt.begin(), c_tgt.end())) continue;
    d_min = std::min(d_min, manifold_distance(gen, c_tgt, c, options.n_boundary).value);
  }
  if (!std::isfinite(d_min)) throw std::invalid_argument("check_dense_bound: c_tgt is the only class");
  DenseBoundReport r = make_dense_bound_report(ju.J_u, d_min, std::max(0.0, norm - gen.radius()));
  r.n_points = ju.n_points;
  return r;
}

std::vector<std::pair<Indices, Indices>> nontrivial_partitions(std::span<const std::size_t> rows) {
  const std::size_t m = rows.size();
  if (m < 2) return {};
  if (m > 20) throw std::invalid_argument("nontrivial_partitions: too many rows");
  std::vector<std::pair<Indices, Indices>> out;
  // The last row always lands in the second part, so each split appears once.
  for (std::size_t mask = 1; mask < (std::size_t{1} << (m - 1)); ++mask) {
    Indices a, b;
    for (std::size_t i = 0; i < m; ++i) ((i + 1 < m && (mask >> i) & 1U) ? a : b).push_back(rows[i]);
    out.emplace_back(std::move(a), std::move(b));
  }
  return out;
}

std::vector<PartitionResult> mechanistic_dependence(const Tensor& J, std::span<const std::size_t> rows, double rel_tol) {
  if (rows.size() < 2) throw std::invalid_argument("mechanistic_dependence: need at least 2 rows");
  const std::size_t all = numerical_rank(select_rows(J, rows), rel_tol);
  std::vector<PartitionResult> out;
  for (auto& [a, b] : nontrivial_partitions(rows)) {
    PartitionResult r;
    r.rank_all = all;
    r.rank_first = numerical_rank(select_rows(J, a), rel_tol);
    r.rank_second = numerical_rank(select_rows(J, b), rel_tol);
    r.dependent = r.rank_all < r.rank_first + r.rank_second;
    r.first = std::move(a);
    r.second = std::move(b);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<PartitionResult> mechanistic_dependence_check(const Generator& gen, const LatentSample& z, double rel_tol,
                                                          double index_tol) {
  const JacobianReport rep = jacobian_report(gen, z, index_tol);
  if (rep.sets.I_c_minus_s.size() < 2)
    throw std::invalid_argument("mechanistic_dependence_check: |I_c\\s| = " + std::to_string(rep.sets.I_c_minus_s.size()) +
                                " < 2");
  return mechanistic_dependence(rep.J, rep.sets.I_c_minus_s, rel_tol);
}

InversionResult invert(const Generator& gen, std::span<const double> x, std::span<const double> z0, int max_iterations,
                       double tol) {
  const std::size_t dz = z0.size();
  InversionResult res;
  res.z.assign(z0.begin(), z0.end());
  auto residual = [&](const std::vector<double>& z) {
    auto xr = gen.apply(Tensor({1, dz}, z)).storage();
    Eigen::VectorXd r(static_cast<Eigen::Index>(xr.size()));
    for (std::size_t i = 0; i < xr.size(); ++i) r(static_cast<Eigen::Index>(i)) = xr[i] - x[i];
    return r;
  };
  Eigen::VectorXd r = residual(res.z);
  double cost = r.squaredNorm();
  double damping = 1e-6;
  for (int it = 0; it < max_iterations && cost > tol * tol; ++it) {
    res.iterations = it + 1;
    const Eigen::MatrixXd J = to_eigen(jacobian(gen, res.z));
    const Eigen::MatrixXd jtj = J.transpose() * J;
    const Eigen::VectorXd g = J.transpose() * r;
    bool accepted = false;
    for (int tries = 0; tries < 30; ++tries) {
      Eigen::MatrixXd a = jtj;
      a.diagonal().array() += damping;
      const Eigen::VectorXd step = a.ldlt().solve(g);
      std::vector<double> cand(res.z);
      for (std::size_t j = 0; j < dz; ++j) cand[j] -= step(static_cast<Eigen::Index>(j));
      const Eigen::VectorXd rc = residual(cand);
      const double cc = rc.squaredNorm();
      if (cc < cost) {
        res.z = std::move(cand);
        r = rc;
        cost = cc;
        damping = std::max(damping * 0.1, 1e-12);
        accepted = true;
        break;
      }
      damping *= 10.0;
    }
    if (!accepted) break;
  }
  res.residual = std::sqrt(cost);
  return res;
}

std::vector<double> GeneratorModel::encode(std::span<const double> x) const {
  const std::size_t dz = d_z();
  Rng rng(0x1a7e);
  InversionResult best;
  best.residual = std::numeric_limits<double>::infinity();
  for (int start = 0; start < 8; ++start) {
    std::vector<double> z0 = start == 0 ? std::vector<double>(dz, 0.0) : rng.normal_vector(dz);
    auto r = invert(gen_, x, z0, 200);
    if (r.residual < best.residual) best = std::move(r);
    if (best.residual < 1e-10) break;
  }
  return best.z;
}

ComposedModel::ComposedModel(Generator gen, Tensor map) : gen_(std::move(gen)), map_(std::move(map)) {
  const auto dz = static_cast<std::size_t>(gen_.spec().d_z());
  if (map_.rank() != 2 || map_.rows() != dz || map_.cols() != dz) throw nd::ShapeError("ComposedModel: map must be d_z x d_z");
  const Eigen::MatrixXd m = to_eigen(map_);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(m);
  if (!lu.isInvertible()) throw std::invalid_argument("ComposedModel: map is singular");
  inverse_ = from_eigen(lu.inverse());
}

std::vector<double> ComposedModel::encode(std::span<const double> x) const {
  const std::vector<double> z = GeneratorModel(gen_).encode(x);
  const std::size_t dz = z.size();
  std::vector<double> zh(dz, 0.0);
  for (std::size_t j = 0; j < dz; ++j)
    for (std::size_t i = 0; i < dz; ++i) zh[j] += z[i] * inverse_.at(i, j);
  return zh;
}

Var ComposedModel::decode(const Var& z_hat) const { return gen_.apply(nd::matmul(z_hat, Var::constant(map_))); }

std::vector<double> EstimatorLatentModel::encode(std::span<const double> x) const {
  const auto p = model_->predict(x);
  return concat(p.c_hat, p.s_hat);
}

Var EstimatorLatentModel::decode(const Var& z_hat) const {
  const auto dc = static_cast<std::size_t>(model_->shape().d_c);
  const auto dz = static_cast<std::size_t>(model_->shape().d_z());
  return model_->decode(nd::columns(z_hat, 0, dc), nd::columns(z_hat, dc, dz));
}

Tensor decoder_jacobian(const LatentModel& model, std::span<const double> z_hat) {
  Tensor J = analytic_jacobian([&](const Var& v) { return model.decode(v); }, z_hat);
  require_finite(J, "decoder_jacobian");
  return J;
}

RankEqualityReport rank_equality_check(const Generator& gen, const LatentModel& model, std::size_t n_points,
                                       std::span<const Indices> row_sets, Rng& rng, double rel_tol) {
  if (model.d_z() != static_cast<std::size_t>(gen.spec().d_z()))
    throw std::invalid_argument("rank_equality_check: latent dimensions differ");
  static constexpr double kSweep[] = {1e-6, 1e-7, 1e-8, 1e-9, 1e-10};
  RankEqualityReport rep;
  rep.rel_tol = rel_tol;
  for (double t : kSweep) rep.sweep.emplace_back(t, 0);
  if (n_points == 0) return rep;
  const Dataset pts = sample_source(gen, n_points, rng);
  for (std::size_t p = 0; p < n_points; ++p) {
    const auto z = pts.latents[p].z();
    const auto x = gen.apply(pts.latents[p]);
    const Tensor Jg = jacobian(gen, z);
    const Tensor Jh = decoder_jacobian(model, model.encode(x));
    for (const auto& rows : row_sets) {
      const Tensor a = select_rows(Jg, rows), b = select_rows(Jh, rows);
      ++rep.comparisons;
      if (numerical_rank(a, rel_tol) != numerical_rank(b, rel_tol)) ++rep.mismatches;
      for (auto& [t, count] : rep.sweep)
        if (numerical_rank(a, t) != numerical_rank(b, t)) ++count;
    }
  }
  return rep;
}

}  // namespace extrap::oracle
