#include "vs2/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "vs2/errors.hpp"

namespace vs2 {

std::vector<ScoredClass> classify(std::span<const double> x, const ClassifierHead& head, std::size_t top) {
  if (top > head.num_classes()) {
    throw ConfigError("requested top-" + std::to_string(top) + " of " + std::to_string(head.num_classes()) +
                      " classes");
  }
  const auto scores = head.cosine_scores(x);
  std::vector<ScoredClass> ranked(scores.size());
  for (std::size_t c = 0; c < scores.size(); ++c) ranked[c] = {c, scores[c]};
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(top), ranked.end(),
                    [](const ScoredClass& a, const ScoredClass& b) {
                      return a.score != b.score ? a.score > b.score : a.class_id < b.class_id;
                    });
  ranked.resize(top);
  return ranked;
}

// ---------------------------------------------------------------------------
// evaluate

Json EvalReport::to_json() const {
  Json j;
  j["config"] = config;
  j["top1"] = top1;
  j["top5"] = top5;
  j["rows"] = rows;
  Json classes = Json::array();
  for (const auto& c : per_class) {
    Json e;
    e["class"] = c.class_id;
    e["name"] = c.name;
    e["acc"] = c.accuracy;
    e["support"] = c.support;
    e["top_confusion"] = c.top_confusion ? Json(*c.top_confusion) : Json(nullptr);
    classes.push_back(std::move(e));
  }
  j["per_class"] = std::move(classes);
  return j;
}

EvalReport evaluate(const EmbeddingBundle& test, const ClassifierHead& head, const SteerFn& steer,
                    const EvalOptions& options) {
  if (!test.has_labels()) throw ConfigError("evaluation needs a labelled test bundle");
  if (test.dim != head.dim()) throw ShapeError("test dim does not match head dim");
  for (const auto l : *test.labels) {
    if (l >= head.num_classes()) throw ConfigError("test label " + std::to_string(l) + " exceeds head classes");
  }
  const auto started = std::chrono::steady_clock::now();
  const std::size_t top = std::min<std::size_t>(5, head.num_classes());
  std::vector<std::vector<std::size_t>> ranked(test.rows);

  std::vector<std::exception_ptr> failures(test.rows);
  const auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t r = begin; r < test.rows; r += stride) {
      try {
        Vec x = test.row_vec(r);
        if (steer) x = steer(r, x);
        for (const auto& s : classify(x, head, top)) ranked[r].push_back(s.class_id);
      } catch (...) {
        failures[r] = std::current_exception();
        return;
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, test.rows));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
  }
  for (const auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }

  EvalReport report;
  report.rows = test.rows;
  report.config = options.config;
  report.predictions.resize(test.rows);
  const std::size_t classes = head.num_classes();
  std::vector<std::size_t> support(classes, 0), correct(classes, 0);
  std::vector<std::vector<std::size_t>> confusion(classes, std::vector<std::size_t>(classes, 0));
  std::size_t hits1 = 0, hits5 = 0;
  for (std::size_t r = 0; r < test.rows; ++r) {
    const auto truth = (*test.labels)[r];
    const auto pred = ranked[r].front();
    report.predictions[r] = pred;
    ++support[truth];
    ++confusion[truth][pred];
    if (pred == truth) {
      ++correct[truth];
      ++hits1;
    }
    if (std::find(ranked[r].begin(), ranked[r].end(), truth) != ranked[r].end()) ++hits5;
  }
  const double total = static_cast<double>(std::max<std::size_t>(1, test.rows));
  report.top1 = static_cast<double>(hits1) / total;
  report.top5 = static_cast<double>(hits5) / total;
  for (std::size_t c = 0; c < classes; ++c) {
    ClassStats s;
    s.class_id = c;
    s.name = head.class_names()[c];
    s.support = support[c];
    s.accuracy = support[c] == 0 ? 0.0 : static_cast<double>(correct[c]) / static_cast<double>(support[c]);
    std::size_t worst = 0;
    for (std::size_t p = 0; p < classes; ++p) {
      if (p != c && confusion[c][p] > worst) {
        worst = confusion[c][p];
        s.top_confusion = p;
      }
    }
    report.per_class.push_back(std::move(s));
  }
  report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

// ---------------------------------------------------------------------------
// Steering closures

SteerFn make_sae_steer(const SaeModel& model, SteeringConfig config) {
  config.validate();
  return [&model, config](std::size_t, std::span<const double> x) { return sae_steer(model, x, config); };
}

SteerFn make_manipulation_steer(const SaeModel& model, double gamma_override, double lambda) {
  return [&model, gamma_override, lambda](std::size_t, std::span<const double> x) {
    return manipulation_variant(model, x, gamma_override, lambda);
  };
}

SteerFn make_prototype_steer(const SaeModel& model, const PrototypeTable& table, const EmbeddingBundle& test,
                             double gamma, double lambda) {
  if (!test.has_labels()) throw ConfigError("oracle prototype steering needs true labels");
  std::vector<SteeringVector> vectors;
  for (std::size_t c = 0; c < table.num_classes; ++c) {
    vectors.push_back(steering_vector_prototype(model, c, table, gamma));
  }
  return [&test, vectors = std::move(vectors), lambda](std::size_t row, std::span<const double> x) {
    const auto label = (*test.labels)[row];
    if (label >= vectors.size()) throw KeyError("no prototype for class " + std::to_string(label));
    return apply_steering(x, vectors[label], lambda);
  };
}

namespace {

// Retrieval-space query for a test row.
class QueryResolver {
 public:
  QueryResolver(const EmbeddingBundle& test, const EmbeddingBundle* retrieval) : retrieval_(retrieval) {
    if (retrieval_ == nullptr) return;
    std::unordered_map<std::string, std::size_t> by_id;
    for (std::size_t r = 0; r < retrieval_->rows; ++r) by_id.emplace(retrieval_->ids[r], r);
    rows_.resize(test.rows);
    for (std::size_t r = 0; r < test.rows; ++r) {
      const auto hit = by_id.find(test.ids[r]);
      if (hit == by_id.end()) throw KeyError("test id '" + test.ids[r] + "' has no retrieval-space embedding");
      rows_[r] = hit->second;
    }
  }

  Vec query(std::size_t row, std::span<const double> steering_query) const {
    if (retrieval_ == nullptr) return Vec(steering_query.begin(), steering_query.end());
    return retrieval_->row_vec(rows_[row]);
  }

 private:
  const EmbeddingBundle* retrieval_;
  std::vector<std::size_t> rows_;
};

}  // namespace

SteerFn make_vs2pp_steer(const SaeModel& model, const EmbeddingCache& cache, const ClassifierHead& head,
                         const EmbeddingBundle& test, const EmbeddingBundle* retrieval_queries,
                         const Vs2ppConfig& config) {
  if (cache.separate_retrieval_space() && retrieval_queries == nullptr) {
    throw ConfigError("cache has a separate retrieval space; retrieval-space queries are required");
  }
  auto resolver = std::make_shared<const QueryResolver>(test, retrieval_queries);
  return [&model, &cache, &head, &test, resolver, config](std::size_t row, std::span<const double> x) {
    const auto neighbors = cache.retrieve(resolver->query(row, x), config.neighbors, test.ids[row]);
    std::optional<std::uint32_t> label;
    if (test.has_labels()) label = (*test.labels)[row];
    ContrastiveGroups groups;
    if (config.force_equal_groups) {
      groups.positives = neighbors.rows;
      groups.negatives = neighbors.rows;
      groups.policy = config.policy;
    } else {
      groups = split_groups(x, label, neighbors, cache.steering(), &head, config.policy);
    }
    const auto v = steering_vector_vs2pp(model, x, groups, cache.steering(), config.gamma);
    return apply_steering(x, v, config.lambda);
  };
}

SteerFn make_rag_steer(const EmbeddingCache& cache, const EmbeddingBundle& test,
                       const EmbeddingBundle* retrieval_queries, std::size_t neighbors, double alpha) {
  if (cache.separate_retrieval_space() && retrieval_queries == nullptr) {
    throw ConfigError("cache has a separate retrieval space; retrieval-space queries are required");
  }
  auto resolver = std::make_shared<const QueryResolver>(test, retrieval_queries);
  return [&cache, &test, resolver, neighbors, alpha](std::size_t row, std::span<const double> x) {
    const auto found = cache.retrieve(resolver->query(row, x), neighbors, test.ids[row]);
    return weighted_rag(x, found, cache.steering(), alpha);
  };
}

// ---------------------------------------------------------------------------
// Sweeps and ablations

std::pair<std::size_t, std::size_t> SweepGrid::best_cell() const {
  std::pair<std::size_t, std::size_t> best{0, 0};
  for (std::size_t g = 0; g < accuracy.size(); ++g) {
    for (std::size_t l = 0; l < accuracy[g].size(); ++l) {
      if (accuracy[g][l] > accuracy[best.first][best.second]) best = {g, l};
    }
  }
  return best;
}

Json SweepGrid::to_json() const {
  Json j;
  j["gammas"] = gammas;
  j["lambdas"] = lambdas;
  j["accuracy"] = accuracy;
  j["baseline"] = baseline;
  const auto [g, l] = best_cell();
  j["best"] = {{"gamma", gammas[g]}, {"lambda", lambdas[l]}, {"top1", accuracy[g][l]}};
  return j;
}

SweepGrid sweep(const EmbeddingBundle& test, const ClassifierHead& head, const SaeModel& model,
                const std::vector<double>& gammas, const std::vector<double>& lambdas, const EvalOptions& options) {
  if (gammas.empty() || lambdas.empty()) throw ConfigError("sweep grids must be non-empty");
  SweepGrid grid;
  grid.gammas = gammas;
  grid.lambdas = lambdas;
  grid.baseline = evaluate(test, head, {}, options).top1;
  for (const double g : gammas) {
    auto& row = grid.accuracy.emplace_back();
    for (const double l : lambdas) {
      SteeringConfig cfg;
      cfg.gamma = g;
      cfg.lambda = l;
      row.push_back(evaluate(test, head, make_sae_steer(model, cfg), options).top1);
    }
  }
  return grid;
}

bool ManipulationReport::ordering_holds() const {
  return negate.top1 <= zero_out.top1 && zero_out.top1 < baseline.top1;
}

Json ManipulationReport::to_json() const {
  Json j;
  j["baseline"] = baseline.top1;
  j["vs2"] = vs2.top1;
  j["zero_out"] = zero_out.top1;
  j["negate"] = negate.top1;
  j["ordering_holds"] = ordering_holds();
  return j;
}

ManipulationReport manipulation_ablation(const EmbeddingBundle& test, const ClassifierHead& head,
                                         const SaeModel& model, double lambda, double gamma,
                                         const EvalOptions& options) {
  ManipulationReport r;
  r.baseline = evaluate(test, head, {}, options);
  SteeringConfig cfg;
  cfg.gamma = gamma;
  cfg.lambda = lambda;
  r.vs2 = evaluate(test, head, make_sae_steer(model, cfg), options);
  r.zero_out = evaluate(test, head, make_manipulation_steer(model, 0.0, lambda), options);
  r.negate = evaluate(test, head, make_manipulation_steer(model, -1.0, lambda), options);
  return r;
}

Json TopNCurve::to_json() const {
  Json j = Json::array();
  for (const auto& p : points) j.push_back({{"n", p.n}, {"top1", p.top1}});
  return j;
}

TopNCurve topn_ablation(const EmbeddingBundle& test, const ClassifierHead& head, const SaeModel& model,
                        const EmbeddingCache& cache, const std::vector<std::size_t>& n_values,
                        const Vs2ppConfig& base, const EmbeddingBundle* retrieval_queries,
                        const EvalOptions& options) {
  if (n_values.empty()) throw ConfigError("top-N ablation needs at least one N");
  TopNCurve curve;
  for (const auto n : n_values) {
    Vs2ppConfig cfg = base;
    cfg.neighbors = n;
    const auto report = evaluate(test, head, make_vs2pp_steer(model, cache, head, test, retrieval_queries, cfg), options);
    curve.points.push_back({n, report.top1});
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Analysis

Json OrthogonalityReport::to_json(std::size_t top) const {
  Json j;
  j["names"] = names;
  j["cosine"] = cosine;
  j["mean_off_diagonal"] = mean_off_diagonal;
  Json pairs = Json::array();
  for (std::size_t i = 0; i < std::min(top, ranked.size()); ++i) {
    const auto& p = ranked[i];
    pairs.push_back({{"rank", i + 1}, {"a", names[p.a]}, {"b", names[p.b]}, {"cosine", p.cosine}});
  }
  j["top_pairs"] = std::move(pairs);
  return j;
}

OrthogonalityReport prototype_orthogonality(const std::vector<SteeringVector>& vectors,
                                            const std::vector<std::string>& names) {
  if (vectors.size() < 2) throw ConfigError("orthogonality needs at least two classes");
  if (names.size() != vectors.size()) throw ShapeError("one name per steering vector is required");
  Vec norms;
  for (std::size_t c = 0; c < vectors.size(); ++c) {
    const double n = norm(std::span<const double>(vectors[c].direction));
    if (!(n > 0.0)) throw DegenerateInputError("steering vector for class '" + names[c] + "' has zero norm");
    if (vectors[c].direction.size() != vectors[0].direction.size()) throw ShapeError("steering vectors differ in dim");
    norms.push_back(n);
  }
  OrthogonalityReport r;
  r.names = names;
  const std::size_t c = vectors.size();
  r.cosine.assign(c, std::vector<double>(c, 1.0));
  double sum = 0.0;
  for (std::size_t a = 0; a < c; ++a) {
    for (std::size_t b = a + 1; b < c; ++b) {
      const double cos = dot(std::span<const double>(vectors[a].direction), std::span<const double>(vectors[b].direction)) /
                         (norms[a] * norms[b]);
      r.cosine[a][b] = r.cosine[b][a] = cos;
      r.ranked.push_back({a, b, cos});
      sum += cos;
    }
  }
  r.mean_off_diagonal = sum / static_cast<double>(r.ranked.size());
  std::stable_sort(r.ranked.begin(), r.ranked.end(),
                   [](const OverlapPair& x, const OverlapPair& y) { return x.cosine > y.cosine; });
  return r;
}

Json CoverageReport::to_json() const {
  Json j;
  j["feature"] = feature;
  j["degenerate"] = degenerate;
  Json items = Json::array();
  for (const auto& e : top) items.push_back({{"row", e.row}, {"id", e.id}, {"activation", e.activation}});
  j["top"] = std::move(items);
  Json hist = Json::object();
  for (const auto& [label, count] : label_histogram) hist[std::to_string(label)] = count;
  j["label_histogram"] = std::move(hist);
  return j;
}

CoverageReport concept_coverage(const SaeModel& model, const EmbeddingBundle& bundle, std::size_t feature,
                                std::size_t m) {
  if (feature >= model.latent_dim) throw KeyError("feature " + std::to_string(feature) + " out of range");
  if (model.is_dead(feature)) throw DeadFeatureError("feature " + std::to_string(feature) + " is dead");
  if (bundle.dim != model.dim) throw ShapeError("bundle dim does not match model dim");
  std::vector<CoverageEntry> all;
  all.reserve(bundle.rows);
  for (std::size_t r = 0; r < bundle.rows; ++r) {
    const auto x = bundle.row_vec(r);
    double act = 0.0;
    for (std::size_t i = 0; i < model.dim; ++i) act += model.enc(feature, i) * (x[i] - model.pre_bias[i]);
    all.push_back({r, bundle.ids[r], act});
  }
  const std::size_t take = std::min(m, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(),
                    [](const CoverageEntry& a, const CoverageEntry& b) {
                      return a.activation != b.activation ? a.activation > b.activation : a.row < b.row;
                    });
  all.resize(take);
  CoverageReport report;
  report.feature = feature;
  report.degenerate = std::all_of(all.begin(), all.end(), [](const CoverageEntry& e) { return e.activation == 0.0; });
  if (bundle.has_labels()) {
    for (const auto& e : all) ++report.label_histogram[(*bundle.labels)[e.row]];
  }
  report.top = std::move(all);
  return report;
}

std::vector<ClassDelta> class_deltas(const EvalReport& baseline, const EvalReport& treated) {
  if (baseline.per_class.size() != treated.per_class.size()) throw ShapeError("reports cover different classes");
  std::vector<ClassDelta> out;
  for (std::size_t c = 0; c < baseline.per_class.size(); ++c) {
    const auto& b = baseline.per_class[c];
    const auto& t = treated.per_class[c];
    if (b.support != t.support) throw ShapeError("reports were computed on different test sets");
    out.push_back({c, b.name, b.accuracy, t.accuracy, b.support});
  }
  std::stable_sort(out.begin(), out.end(), [](const ClassDelta& a, const ClassDelta& b) { return a.delta() > b.delta(); });
  return out;
}

Json gain_loss_json(const std::vector<ClassDelta>& deltas, std::size_t top) {
  const auto entry = [](const ClassDelta& d) {
    return Json{{"class", d.class_id}, {"name", d.name}, {"baseline", d.baseline}, {"treated", d.treated},
                {"delta", d.delta()}, {"support", d.support}};
  };
  Json j;
  j["gains"] = Json::array();
  j["losses"] = Json::array();
  for (std::size_t i = 0; i < deltas.size() && j["gains"].size() < top; ++i) {
    if (deltas[i].delta() > 0) j["gains"].push_back(entry(deltas[i]));
  }
  for (std::size_t i = deltas.size(); i-- > 0 && j["losses"].size() < top;) {
    if (deltas[i].delta() < 0) j["losses"].push_back(entry(deltas[i]));
  }
  return j;
}

double mean_intra_class_code_distance(const SaeModel& model, const EmbeddingBundle& labelled) {
  if (!labelled.has_labels()) throw ConfigError("intra-class distance needs labels");
  const std::size_t n = model.latent_dim;
  std::vector<Vec> codes(labelled.rows);
  Vec centroids(labelled.num_classes * n, 0.0);
  std::vector<std::size_t> counts(labelled.num_classes, 0);
  for (std::size_t r = 0; r < labelled.rows; ++r) {
    codes[r] = encode_topk(model, labelled.row_vec(r)).dense(n);
    const auto c = (*labelled.labels)[r];
    ++counts[c];
    for (std::size_t j = 0; j < n; ++j) centroids[c * n + j] += codes[r][j];
  }
  for (std::size_t c = 0; c < labelled.num_classes; ++c) {
    if (counts[c] == 0) continue;
    for (std::size_t j = 0; j < n; ++j) centroids[c * n + j] /= static_cast<double>(counts[c]);
  }
  double total = 0.0;
  for (std::size_t r = 0; r < labelled.rows; ++r) {
    const auto c = (*labelled.labels)[r];
    double sq = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = codes[r][j] - centroids[c * n + j];
      sq += e * e;
    }
    total += std::sqrt(sq);
  }
  return total / static_cast<double>(std::max<std::size_t>(1, labelled.rows));
}

// ---------------------------------------------------------------------------
// SVG

namespace {

std::string fmt(double v, int precision = 3) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

}  // namespace

std::string sweep_heatmap_svg(const SweepGrid& grid) {
  constexpr int cell = 48, margin = 60;
  const int w = margin + cell * static_cast<int>(grid.lambdas.size()) + 20;
  const int h = margin + cell * static_cast<int>(grid.gammas.size()) + 20;
  double lo = 1.0, hi = 0.0;
  for (const auto& row : grid.accuracy) {
    for (const double a : row) {
      lo = std::min(lo, a);
      hi = std::max(hi, a);
    }
  }
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  svg << "<text x=\"" << margin << "\" y=\"16\" font-size=\"12\">top-1 accuracy (rows: gamma, columns: lambda)</text>\n";
  for (std::size_t l = 0; l < grid.lambdas.size(); ++l) {
    svg << "<text x=\"" << margin + cell * static_cast<int>(l) + 4 << "\" y=\"" << margin - 6
        << "\" font-size=\"10\">" << fmt(grid.lambdas[l], 2) << "</text>\n";
  }
  for (std::size_t g = 0; g < grid.gammas.size(); ++g) {
    const int y = margin + cell * static_cast<int>(g);
    svg << "<text x=\"4\" y=\"" << y + cell / 2 << "\" font-size=\"10\">" << fmt(grid.gammas[g], 2) << "</text>\n";
    for (std::size_t l = 0; l < grid.lambdas.size(); ++l) {
      const double a = grid.accuracy[g][l];
      const double t = hi > lo ? (a - lo) / (hi - lo) : 0.5;
      const int red = static_cast<int>(255 * t);
      const int blue = 255 - red;
      const int x = margin + cell * static_cast<int>(l);
      svg << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell
          << "\" fill=\"rgb(" << red << ",64," << blue << ")\"/>\n";
      svg << "<text x=\"" << x + 6 << "\" y=\"" << y + cell / 2 + 4 << "\" font-size=\"10\" fill=\"white\">"
          << fmt(100.0 * a, 1) << "</text>\n";
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string topn_curve_svg(const TopNCurve& curve) {
  constexpr int w = 400, h = 240, margin = 40;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  svg << "<text x=\"" << margin << "\" y=\"16\" font-size=\"12\">top-1 accuracy vs neighbors N</text>\n";
  svg << "<line x1=\"" << margin << "\" y1=\"" << h - margin << "\" x2=\"" << w - 10 << "\" y2=\"" << h - margin
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << margin << "\" y1=\"" << 20 << "\" x2=\"" << margin << "\" y2=\"" << h - margin
      << "\" stroke=\"black\"/>\n";
  const std::size_t count = curve.points.size();
  std::string points;
  for (std::size_t i = 0; i < count; ++i) {
    const double x = margin + (count > 1 ? (w - margin - 20) * static_cast<double>(i) / static_cast<double>(count - 1) : 0.0);
    const double y = (h - margin) - (h - margin - 30) * curve.points[i].top1;
    points += fmt(x, 1) + "," + fmt(y, 1) + " ";
    svg << "<circle cx=\"" << fmt(x, 1) << "\" cy=\"" << fmt(y, 1) << "\" r=\"3\"/>\n";
    svg << "<text x=\"" << fmt(x - 6, 1) << "\" y=\"" << h - margin + 14 << "\" font-size=\"10\">"
        << curve.points[i].n << "</text>\n";
  }
  svg << "<polyline fill=\"none\" stroke=\"steelblue\" points=\"" << points << "\"/>\n";
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace vs2
