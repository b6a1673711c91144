#include "extrap/synthgen.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace extrap {

namespace nd = ndgrad;

std::string to_string(ShiftMode mode) { return mode == ShiftMode::Dense ? "dense" : "sparse"; }

std::string to_string(Task task) { return task == Task::BinaryClassification ? "classification" : "regression"; }

ShiftMode parse_shift_mode(const std::string& s) {
  if (s == "dense") return ShiftMode::Dense;
  if (s == "sparse") return ShiftMode::Sparse;
  throw std::invalid_argument("unknown shift mode '" + s + "' (expected dense|sparse)");
}

Task parse_task(const std::string& s) {
  if (s == "classification") return Task::BinaryClassification;
  if (s == "regression") return Task::Regression;
  throw std::invalid_argument("unknown task '" + s + "' (expected classification|regression)");
}

void GeneratorSpec::validate() const {
  if (d_c < 1 || d_s < 1) throw std::invalid_argument("d_c and d_s must be positive");
  if (d_x != d_c + d_s)
    throw std::invalid_argument("d_x must equal d_c + d_s (got d_x=" + std::to_string(d_x) + ")");
  if (mlp_layers < 1) throw std::invalid_argument("mlp_layers must be >= 1");
  if (!(condition_limit > 1.0)) throw std::invalid_argument("condition_limit must exceed 1");
  if (!(radius > 0.0)) throw std::invalid_argument("radius must be positive");
}

std::vector<double> LatentSample::z() const {
  std::vector<double> out(c);
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

Var Mlp::apply(const Var& x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = nd::affine(h, Var::constant(layers[i].weight), Var::constant(layers[i].bias));
    if (i + 1 < layers.size()) h = nd::leaky_relu(h, alpha);
  }
  return h;
}

double condition_number(const Tensor& matrix) {
  Eigen::MatrixXd m(matrix.rows(), matrix.cols());
  for (std::size_t r = 0; r < matrix.rows(); ++r)
    for (std::size_t c = 0; c < matrix.cols(); ++c) m(r, c) = matrix.at(r, c);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& sv = svd.singularValues();
  const double smin = sv(sv.size() - 1);
  return smin > 0.0 ? sv(0) / smin : std::numeric_limits<double>::infinity();
}

namespace {

constexpr int kMaxConditionAttempts = 1000;
constexpr double kBiasStd = 0.1;

AffineLayer draw_layer(std::size_t in, std::size_t out, double limit, Rng& rng) {
  const double std_dev = 1.0 / std::sqrt(static_cast<double>(in));
  for (int attempt = 0; attempt < kMaxConditionAttempts; ++attempt) {
    Tensor w({in, out});
    for (auto& v : w.storage()) v = std_dev * rng.normal();
    if (condition_number(w) <= limit) {
      Tensor b({out});
      for (auto& v : b.storage()) v = kBiasStd * rng.normal();
      return {std::move(w), std::move(b)};
    }
  }
  throw GeneratorError("could not draw a " + std::to_string(in) + "x" + std::to_string(out) +
                       " layer with condition number <= " + std::to_string(limit) + " in " +
                       std::to_string(kMaxConditionAttempts) + " attempts");
}

Mlp draw_mlp(std::size_t in, std::size_t out, int layers, double limit, Rng& rng) {
  Mlp mlp;
  for (int i = 0; i < layers; ++i) mlp.layers.push_back(draw_layer(i == 0 ? in : out, out, limit, rng));
  return mlp;
}

std::vector<std::vector<double>> draw_class_embeddings(const GeneratorSpec& spec) {
  if (spec.task != Task::BinaryClassification) return {};
  Rng rng = Rng::keyed(spec.seed, {0xc1a55});
  std::vector<double> c1(spec.d_c), c2(spec.d_c);
  for (auto& v : c1) v = rng.normal();
  for (auto& v : c2) v = 2.0 + rng.normal();
  return {c1, c2};
}

Tensor selection_matrix(std::size_t rows, std::span<const std::size_t> picks) {
  Tensor sel({rows, picks.size()});
  for (std::size_t j = 0; j < picks.size(); ++j) sel.at(picks[j], j) = 1.0;
  return sel;
}

}  // namespace

Generator::Generator(GeneratorSpec spec, Mechanism mechanism, std::vector<std::vector<double>> class_embeddings)
    : spec_(std::move(spec)), mechanism_(std::move(mechanism)), class_embeddings_(std::move(class_embeddings)) {
  spec_.validate();
}

Generator Generator::identity(const GeneratorSpec& spec) {
  Tensor eye({static_cast<std::size_t>(spec.d_z()), static_cast<std::size_t>(spec.d_x)});
  for (int i = 0; i < spec.d_z(); ++i) eye.at(i, i) = 1.0;
  return linear(spec, std::move(eye));
}

Generator Generator::linear(const GeneratorSpec& spec, Tensor a) {
  if (a.rows() != static_cast<std::size_t>(spec.d_z()) || a.cols() != static_cast<std::size_t>(spec.d_x))
    throw nd::ShapeError("linear generator: matrix " + nd::to_string(a.shape()) + " does not map d_z -> d_x");
  Tensor bias({static_cast<std::size_t>(spec.d_x)});
  mechanism::Dense dense;
  dense.mlp.layers.push_back({std::move(a), std::move(bias)});
  GeneratorSpec s = spec;
  s.mode = ShiftMode::Dense;
  s.mlp_layers = 1;
  return Generator(s, std::move(dense), draw_class_embeddings(s));
}

Generator build_generator(const GeneratorSpec& spec) {
  spec.validate();
  Rng rng = Rng::keyed(spec.seed, {0x3a7});
  const auto dz = static_cast<std::size_t>(spec.d_z());
  const auto dc = static_cast<std::size_t>(spec.d_c);
  if (spec.mode == ShiftMode::Dense) {
    mechanism::Dense dense{draw_mlp(dz, static_cast<std::size_t>(spec.d_x), spec.mlp_layers, spec.condition_limit, rng)};
    return Generator(spec, std::move(dense), draw_class_embeddings(spec));
  }
  if (spec.d_s > spec.d_c) throw std::invalid_argument("sparse mode needs d_s <= d_c to duplicate outputs");
  mechanism::Sparse sparse;
  sparse.mlp = draw_mlp(dc, dc, spec.mlp_layers, spec.condition_limit, rng);
  std::vector<std::size_t> pool(dc);
  for (std::size_t i = 0; i < dc; ++i) pool[i] = i;
  rng.shuffle(std::span<std::size_t>(pool));
  sparse.duplicated.assign(pool.begin(), pool.begin() + spec.d_s);
  return Generator(spec, std::move(sparse), draw_class_embeddings(spec));
}

Generator build_scoped_generator(const GeneratorSpec& spec, std::vector<std::size_t> scope_rows) {
  spec.validate();
  const auto dx = static_cast<std::size_t>(spec.d_x);
  const auto ds = static_cast<std::size_t>(spec.d_s);
  if (scope_rows.size() < ds || scope_rows.size() > dx)
    throw std::invalid_argument("scope must cover between d_s and d_x rows");
  for (auto r : scope_rows)
    if (r >= dx) throw std::invalid_argument("scope row out of range");
  Rng rng = Rng::keyed(spec.seed, {0x5c0, scope_rows.size()});
  mechanism::Scoped scoped;
  scoped.mlp = draw_mlp(static_cast<std::size_t>(spec.d_c), dx, spec.mlp_layers, spec.condition_limit, rng);
  // Mixing restricted to the scope rows, conditioned like the MLP layers.
  for (int attempt = 0;; ++attempt) {
    if (attempt == kMaxConditionAttempts) throw GeneratorError("could not draw a conditioned mixing matrix");
    Tensor block({ds, scope_rows.size()});
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(ds));
    for (auto& v : block.storage()) v = std_dev * rng.normal();
    if (condition_number(block) > spec.condition_limit) continue;
    scoped.mixing = Tensor({ds, dx});
    for (std::size_t i = 0; i < ds; ++i)
      for (std::size_t j = 0; j < scope_rows.size(); ++j) scoped.mixing.at(i, scope_rows[j]) = block.at(i, j);
    break;
  }
  scoped.rows = std::move(scope_rows);
  GeneratorSpec s = spec;
  s.mode = scoped.rows.size() == dx ? ShiftMode::Dense : ShiftMode::Sparse;
  return Generator(s, std::move(scoped), draw_class_embeddings(s));
}

Generator build_boundary_leak_generator(const GeneratorSpec& spec, double beta) {
  spec.validate();
  if (spec.task != Task::BinaryClassification) throw std::invalid_argument("boundary-leak generator is a classification device");
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  auto embeddings = draw_class_embeddings(spec);
  mechanism::BoundaryLeak leak;
  leak.beta = beta;
  leak.direction.resize(spec.d_c);
  double norm = 0.0;
  for (int i = 0; i < spec.d_c; ++i) {
    leak.direction[i] = embeddings[1][i] - embeddings[0][i];
    norm += leak.direction[i] * leak.direction[i];
  }
  norm = std::sqrt(norm);
  for (auto& v : leak.direction) v /= norm;
  GeneratorSpec s = spec;
  s.mode = ShiftMode::Dense;
  return Generator(s, std::move(leak), std::move(embeddings));
}

Var Generator::apply(const Var& z) const {
  const auto dc = static_cast<std::size_t>(spec_.d_c);
  const auto dz = static_cast<std::size_t>(spec_.d_z());
  if (z.value().rank() != 2 || z.value().cols() != dz)
    throw nd::ShapeError("generator expects z of shape [n," + std::to_string(dz) + "], got " + nd::to_string(z.shape()));
  Var x = std::visit(
      [&](const auto& m) -> Var {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, mechanism::Dense>) {
          return m.mlp.apply(z);
        } else if constexpr (std::is_same_v<M, mechanism::Sparse>) {
          Var c = nd::columns(z, 0, dc);
          Var s = nd::columns(z, dc, dz);
          Var v = m.mlp.apply(c);
          Var dup = nd::matmul(v, Var::constant(selection_matrix(dc, m.duplicated)));
          return nd::concat_columns(v, nd::add(dup, s));
        } else if constexpr (std::is_same_v<M, mechanism::Scoped>) {
          Var c = nd::columns(z, 0, dc);
          Var s = nd::columns(z, dc, dz);
          return nd::add(m.mlp.apply(c), nd::matmul(s, Var::constant(m.mixing)));
        } else {
          Var c = nd::columns(z, 0, dc);
          Var s = nd::columns(z, dc, dz);
          const std::size_t n = z.value().rows();
          Var excess = nd::leaky_relu(nd::add_scalar(nd::row_norm(s), -spec_.radius), 0.0);
          Tensor dir({1, dc});
          for (std::size_t j = 0; j < dc; ++j) dir[j] = m.beta * m.direction[j];
          Var leak = nd::matmul(nd::reshape(excess, {n, 1}), Var::constant(std::move(dir)));
          return nd::concat_columns(nd::add(c, leak), s);
        }
      },
      mechanism_);
  return output_scale_ == 1.0 ? x : nd::scale(x, output_scale_);
}

Tensor Generator::apply(const Tensor& z) const { return apply(Var::constant(z)).value(); }

std::vector<double> Generator::apply(const LatentSample& latent) const {
  auto z = latent.z();
  const std::size_t dz = z.size();
  return apply(Tensor({1, dz}, std::move(z))).storage();
}

std::vector<double> Generator::layer_condition_numbers() const {
  std::vector<double> out;
  auto collect = [&](const Mlp& mlp) {
    for (const auto& layer : mlp.layers) out.push_back(condition_number(layer.weight));
  };
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (!std::is_same_v<M, mechanism::BoundaryLeak>) collect(m.mlp);
      },
      mechanism_);
  return out;
}

Generator Generator::scaled(double factor) const {
  Generator copy = *this;
  copy.output_scale_ *= factor;
  return copy;
}

// ---------------------------------------------------------------- sampling

std::vector<double> sample_truncated_normal(std::size_t d, double radius, Rng& rng) {
  std::vector<double> s(d);
  for (;;) {
    double norm2 = 0.0;
    for (auto& v : s) {
      v = rng.normal();
      norm2 += v * v;
    }
    if (norm2 <= radius * radius) return s;
  }
}

namespace {

// Draws c (and the label) for one sample per the task's label model.
void draw_invariant(const Generator& gen, Rng& rng, LatentSample& latent, int& label, double& value) {
  const auto& spec = gen.spec();
  if (spec.task == Task::BinaryClassification) {
    label = rng.bernoulli(0.5) ? 1 : 0;
    latent.c = gen.class_embeddings()[label];
  } else {
    value = rng.uniform(0.0, 4.0);
    latent.c.resize(spec.d_c);
    for (auto& v : latent.c) v = value + rng.normal();
  }
}

}  // namespace

Dataset sample_source(const Generator& gen, std::size_t n, Rng& rng) {
  if (n == 0) throw std::invalid_argument("sample_source: n must be >= 1");
  const auto& spec = gen.spec();
  Dataset data;
  data.task = spec.task;
  data.latents.resize(n);
  const auto dz = static_cast<std::size_t>(spec.d_z());
  Tensor z({n, dz});
  for (std::size_t i = 0; i < n; ++i) {
    int label = 0;
    double value = 0.0;
    auto& latent = data.latents[i];
    draw_invariant(gen, rng, latent, label, value);
    latent.s = sample_truncated_normal(spec.d_s, spec.radius, rng);
    if (spec.task == Task::BinaryClassification)
      data.classes.push_back(label);
    else
      data.values.push_back(value);
    auto zi = latent.z();
    std::copy(zi.begin(), zi.end(), z.storage().begin() + static_cast<std::ptrdiff_t>(i * dz));
  }
  data.xs = gen.apply(z);
  return data;
}

TargetSample sample_target(const Generator& gen, double distance, Rng& rng) {
  const auto& spec = gen.spec();
  if (distance != 0.0 && !(distance > spec.radius))
    throw std::invalid_argument("target distance must be 0 or beyond the support radius " + std::to_string(spec.radius));
  TargetSample target;
  draw_invariant(gen, rng, target.latent, target.label, target.value);
  target.latent.s.assign(spec.d_s, 0.0);
  if (distance > 0.0) {
    double norm = 0.0;
    while (norm < 1e-12) {
      norm = 0.0;
      for (auto& v : target.latent.s) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
    }
    for (auto& v : target.latent.s) v *= distance / norm;
  }
  target.distance = distance;
  auto x = gen.apply(target.latent);
  const std::size_t dx = x.size();
  target.x = Tensor({1, dx}, std::move(x));
  return target;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.task = task;
  const std::size_t dx = xs.cols();
  out.xs = Tensor({indices.size(), dx});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    for (std::size_t j = 0; j < dx; ++j) out.xs.at(k, j) = xs.at(i, j);
    if (!classes.empty()) out.classes.push_back(classes[i]);
    if (!values.empty()) out.values.push_back(values[i]);
    out.latents.push_back(latents[i]);
  }
  return out;
}

// ---------------------------------------------------------------- CSV

void write_dataset_csv(std::ostream& os, const Dataset& data) {
  const std::size_t dx = data.xs.cols();
  const std::size_t dc = data.latents.empty() ? 0 : data.latents[0].c.size();
  const std::size_t ds = data.latents.empty() ? 0 : data.latents[0].s.size();
  for (std::size_t j = 0; j < dx; ++j) os << 'x' << j << ',';
  os << "label";
  for (std::size_t j = 0; j < dc; ++j) os << ",c" << j;
  for (std::size_t j = 0; j < ds; ++j) os << ",s" << j;
  os << '\n';
  os << std::setprecision(17);
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t j = 0; j < dx; ++j) os << data.xs.at(i, j) << ',';
    if (data.task == Task::BinaryClassification)
      os << data.classes[i];
    else
      os << data.values[i];
    for (double v : data.latents[i].c) os << ',' << v;
    for (double v : data.latents[i].s) os << ',' << v;
    os << '\n';
  }
}

Dataset read_dataset_csv(std::istream& is, const GeneratorSpec& spec) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("dataset CSV: missing header");
  const std::size_t dx = spec.d_x, dc = spec.d_c, ds = spec.d_s;
  const std::size_t width = dx + 1 + dc + ds;
  Dataset data;
  data.task = spec.task;
  std::vector<double> xs;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> fields;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        fields.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw std::runtime_error("dataset CSV line " + std::to_string(line_no) + ": bad number '" + cell + "'");
      }
    }
    if (fields.size() != width)
      throw std::runtime_error("dataset CSV line " + std::to_string(line_no) + ": expected " + std::to_string(width) +
                               " fields, got " + std::to_string(fields.size()));
    xs.insert(xs.end(), fields.begin(), fields.begin() + static_cast<std::ptrdiff_t>(dx));
    if (spec.task == Task::BinaryClassification)
      data.classes.push_back(static_cast<int>(fields[dx]));
    else
      data.values.push_back(fields[dx]);
    LatentSample latent;
    latent.c.assign(fields.begin() + static_cast<std::ptrdiff_t>(dx + 1), fields.begin() + static_cast<std::ptrdiff_t>(dx + 1 + dc));
    latent.s.assign(fields.begin() + static_cast<std::ptrdiff_t>(dx + 1 + dc), fields.end());
    data.latents.push_back(std::move(latent));
  }
  if (data.latents.empty()) throw std::runtime_error("dataset CSV: no rows");
  data.xs = Tensor({data.latents.size(), dx}, std::move(xs));
  return data;
}

}  // namespace extrap
