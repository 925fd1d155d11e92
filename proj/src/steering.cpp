#include "vs2/steering.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vs2/errors.hpp"

namespace vs2 {

std::string to_string(SteerMode mode) {
  switch (mode) {
    case SteerMode::Reconstruction: return "reconstruction";
    case SteerMode::Amplified: return "amplified";
    case SteerMode::Steering: return "steering";
  }
  return "?";
}

SteerMode parse_steer_mode(std::string_view name) {
  if (name == "reconstruction") return SteerMode::Reconstruction;
  if (name == "amplified") return SteerMode::Amplified;
  if (name == "steering") return SteerMode::Steering;
  throw ConfigError("unknown steering mode '" + std::string(name) + "'");
}

void SteeringConfig::validate() const {
  if (!std::isfinite(gamma) || !std::isfinite(lambda)) throw ConfigError("gamma and lambda must be finite");
  if (k && *k == 0) throw ConfigError("k override must be positive");
}

namespace {

Vec difference(const Vec& a, const Vec& b) {
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

void check_finite(std::span<const double> x) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw DataError("non-finite input at index " + std::to_string(i));
  }
}

}  // namespace

SteeringVector steering_vector_vs2(const SaeModel& model, std::span<const double> x, double gamma,
                                   std::optional<std::size_t> k) {
  check_finite(x);
  const auto code = encode_topk(model, x, k);
  SteeringVector v;
  v.direction = difference(decode(model, code.scaled(gamma)), decode(model, code));
  v.source = SteeringSource::Vs2;
  v.gamma = gamma;
  return v;
}

Vec apply_steering(std::span<const double> x, const SteeringVector& v, double lambda) {
  if (v.direction.size() != x.size()) throw ShapeError("steering vector and embedding differ in dimension");
  const double x_norm = norm(x);
  if (!(x_norm > 0.0)) throw DegenerateInputError("cannot steer a zero-norm embedding");
  if (lambda == 0.0 || all_zero(v.direction)) return Vec(x.begin(), x.end());

  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + lambda * v.direction[i];
  const double out_norm = norm(std::span<const double>(out));
  if (!(out_norm > 0.0)) throw CancellationError("steered embedding cancels to zero");
  const double scale = x_norm / out_norm;
  for (auto& o : out) o *= scale;
  return out;
}

Vec sae_steer(const SaeModel& model, std::span<const double> x, const SteeringConfig& config) {
  config.validate();
  check_finite(x);
  switch (config.mode) {
    case SteerMode::Reconstruction:
      return reconstruct(model, x, config.k).x_hat;
    case SteerMode::Amplified:
      return decode(model, encode_topk(model, x, config.k).scaled(config.gamma));
    case SteerMode::Steering:
      return apply_steering(x, steering_vector_vs2(model, x, config.gamma, config.k), config.lambda);
  }
  throw ConfigError("unhandled steering mode");
}

Vec manipulation_variant(const SaeModel& model, std::span<const double> x, double gamma_override, double lambda) {
  if (gamma_override != 0.0 && gamma_override != -1.0) {
    throw ConfigError("manipulation gamma must be 0 (zero-out) or -1 (negate)");
  }
  return apply_steering(x, steering_vector_vs2(model, x, gamma_override), lambda);
}

Vec head_confidence(const ClassifierHead& head, std::span<const double> x) {
  Vec p = head.cosine_scores(x);
  const double top = *std::max_element(p.begin(), p.end());
  double total = 0.0;
  for (auto& v : p) {
    v = std::exp(v - top);
    total += v;
  }
  for (auto& v : p) v /= total;
  return p;
}

PrototypeTable build_prototypes(const SaeModel& model, const EmbeddingBundle& bundle, const ClassifierHead& head,
                                std::size_t m, bool use_true_labels) {
  if (m == 0) throw ConfigError("prototype exemplar count m must be positive");
  if (use_true_labels && !bundle.has_labels()) throw ConfigError("true-label prototypes need a labelled bundle");
  if (bundle.dim != model.dim || head.dim() != model.dim) throw ShapeError("bundle, head and model dims differ");
  const std::size_t classes = head.num_classes();

  // (confidence for the assigned class, row) per class
  std::vector<std::vector<std::pair<double, std::size_t>>> candidates(classes);
  for (std::size_t r = 0; r < bundle.rows; ++r) {
    const auto x = bundle.row_vec(r);
    const auto conf = head_confidence(head, x);
    std::size_t cls = 0;
    if (use_true_labels) {
      cls = (*bundle.labels)[r];
      if (cls >= classes) throw ConfigError("bundle label exceeds head class count");
    } else {
      cls = static_cast<std::size_t>(std::max_element(conf.begin(), conf.end()) - conf.begin());
    }
    candidates[cls].emplace_back(conf[cls], r);
  }

  std::vector<std::string> missing;
  for (std::size_t c = 0; c < classes; ++c) {
    if (candidates[c].empty()) missing.push_back(head.class_names()[c]);
  }
  if (!missing.empty()) {
    std::string names;
    for (const auto& n : missing) names += (names.empty() ? "" : ", ") + n;
    throw CoverageError("no exemplars for classes: " + names);
  }

  PrototypeTable table;
  table.num_classes = classes;
  table.latent_dim = model.latent_dim;
  table.m = m;
  table.codes.assign(classes * model.latent_dim, 0.0);
  table.exemplars.resize(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    auto& cand = candidates[c];
    const std::size_t take = std::min(m, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(),
                      [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    double* out = table.codes.data() + c * model.latent_dim;
    for (std::size_t t = 0; t < take; ++t) {
      const auto row = cand[t].second;
      table.exemplars[c].push_back(row);
      for (const auto& e : encode_topk(model, bundle.row_vec(row)).entries) out[e.index] += e.value;
    }
    for (std::size_t j = 0; j < model.latent_dim; ++j) out[j] /= static_cast<double>(take);
  }
  return table;
}

SteeringVector steering_vector_prototype(const SaeModel& model, std::size_t class_id, const PrototypeTable& table,
                                         double gamma) {
  if (class_id >= table.num_classes) throw KeyError("class " + std::to_string(class_id) + " not in prototype table");
  if (table.latent_dim != model.latent_dim) throw ShapeError("prototype table does not match model latent_dim");
  const auto zbar = table.code(class_id);
  Vec amplified(zbar.begin(), zbar.end());
  for (auto& z : amplified) z *= gamma;
  SteeringVector v;
  v.direction = difference(decode_dense(model, amplified), decode_dense(model, zbar));
  v.source = SteeringSource::Prototype;
  v.gamma = gamma;
  v.class_id = class_id;
  return v;
}

}  // namespace vs2
