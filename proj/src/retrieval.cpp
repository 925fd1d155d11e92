#include "vs2/retrieval.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "vs2/binary_io.hpp"
#include "vs2/errors.hpp"

namespace vs2 {

CosineIndex::CosineIndex(std::shared_ptr<const EmbeddingBundle> corpus) : corpus_(std::move(corpus)) {
  if (!corpus_) throw ConfigError("index needs a corpus");
  norms_.resize(corpus_->rows);
  for (std::size_t r = 0; r < corpus_->rows; ++r) {
    norms_[r] = norm(corpus_->row(r));
    if (!(norms_[r] > 0.0)) {
      throw DegenerateInputError("corpus row " + std::to_string(r) + " ('" + corpus_->ids[r] + "') has zero norm");
    }
  }
}

NeighborSet CosineIndex::search(std::span<const double> query, std::size_t n,
                                const std::optional<std::string>& query_id) const {
  const auto& corpus = *corpus_;
  if (query.size() != corpus.dim) throw ShapeError("query dim does not match corpus dim");
  if (n < 1) throw ConfigError("neighbor count must be at least 1");
  const double qn = norm(query);
  if (!(qn > 0.0)) throw DegenerateInputError("query has zero norm");

  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(corpus.rows);
  for (std::size_t r = 0; r < corpus.rows; ++r) {
    if (query_id && corpus.ids[r] == *query_id) continue;
    scored.emplace_back(dot(query, corpus.row(r)) / (qn * norms_[r]), r);
  }
  if (n > scored.size()) {
    throw ConfigError("requested " + std::to_string(n) + " neighbors from a corpus of " +
                      std::to_string(scored.size()));
  }
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(),
                    [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  NeighborSet out;
  out.query_id = query_id.value_or("");
  for (std::size_t i = 0; i < n; ++i) {
    out.rows.push_back(scored[i].second);
    out.ids.push_back(corpus.ids[scored[i].second]);
    out.similarities.push_back(scored[i].first);
  }
  return out;
}

NeighborSet knn(const EmbeddingBundle& corpus, std::span<const double> query, std::size_t n,
                const std::optional<std::string>& query_id) {
  // Non-owning: the index does not outlive this call.
  const CosineIndex index(std::shared_ptr<const EmbeddingBundle>(&corpus, [](const EmbeddingBundle*) {}));
  return index.search(query, n, query_id);
}

std::size_t pseudo_label(std::span<const double> x, const ClassifierHead& head) {
  const auto scores = head.cosine_scores(x);
  // max_element returns the first maximum, i.e. the lowest class id on ties.
  return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

// ---------------------------------------------------------------------------
// EmbeddingCache

EmbeddingCache::EmbeddingCache(std::shared_ptr<const EmbeddingBundle> steering)
    : steering_(steering), index_(steering) {
  to_steering_.resize(steering_->rows);
  for (std::size_t r = 0; r < steering_->rows; ++r) to_steering_[r] = r;
}

EmbeddingCache::EmbeddingCache(std::shared_ptr<const EmbeddingBundle> steering,
                               std::shared_ptr<const EmbeddingBundle> retrieval,
                               std::map<std::string, std::string> id_map)
    : steering_(std::move(steering)), index_(std::move(retrieval)), separate_(true) {
  std::unordered_map<std::string, std::size_t> steering_rows;
  for (std::size_t r = 0; r < steering_->rows; ++r) steering_rows.emplace(steering_->ids[r], r);
  const auto& ret = index_.corpus();
  to_steering_.resize(ret.rows);
  for (std::size_t r = 0; r < ret.rows; ++r) {
    const auto mapped = id_map.find(ret.ids[r]);
    const std::string& sid = mapped == id_map.end() ? ret.ids[r] : mapped->second;
    const auto hit = steering_rows.find(sid);
    if (hit == steering_rows.end()) {
      throw KeyError("retrieval id '" + ret.ids[r] + "' has no steering-space embedding");
    }
    to_steering_[r] = hit->second;
  }
}

NeighborSet EmbeddingCache::retrieve(std::span<const double> retrieval_query, std::size_t n,
                                     const std::optional<std::string>& query_id) const {
  auto found = index_.search(retrieval_query, n, query_id);
  for (std::size_t i = 0; i < found.size(); ++i) {
    found.rows[i] = to_steering_[found.rows[i]];
    found.ids[i] = steering_->ids[found.rows[i]];
  }
  return found;
}

CacheManifest CacheManifest::load(const std::filesystem::path& path) {
  CacheManifest m;
  const auto base = path.parent_path();
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    m.steering = base / j.at("steering").get<std::string>();
    if (j.contains("retrieval")) m.retrieval = base / j.at("retrieval").get<std::string>();
    if (j.contains("id_map")) m.id_map = j.at("id_map").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed cache manifest: ") + e.what());
  }
  return m;
}

void CacheManifest::save(const std::filesystem::path& path) const {
  nlohmann::ordered_json j;
  j["steering"] = steering.string();
  if (retrieval) j["retrieval"] = retrieval->string();
  j["id_map"] = id_map;
  write_file(path, j.dump(2) + "\n");
}

EmbeddingCache CacheManifest::open() const {
  auto steer = std::make_shared<const EmbeddingBundle>(load_bundle(steering));
  if (!retrieval) return EmbeddingCache(std::move(steer));
  auto ret = std::make_shared<const EmbeddingBundle>(load_bundle(*retrieval));
  return EmbeddingCache(std::move(steer), std::move(ret), id_map);
}

// ---------------------------------------------------------------------------
// Contrastive groups

std::string to_string(GroupPolicy policy) {
  switch (policy) {
    case GroupPolicy::Oracle: return "oracle";
    case GroupPolicy::PseudoQuery: return "pseudo_query";
    case GroupPolicy::PseudoMajority: return "pseudo_majority";
  }
  return "?";
}

GroupPolicy parse_group_policy(std::string_view name) {
  if (name == "oracle") return GroupPolicy::Oracle;
  if (name == "pseudo_query") return GroupPolicy::PseudoQuery;
  if (name == "pseudo_majority") return GroupPolicy::PseudoMajority;
  throw ConfigError("unknown group policy '" + std::string(name) + "'");
}

std::vector<bool> positive_mask(std::optional<std::size_t> query_label, std::span<const std::size_t> neighbor_labels,
                                GroupPolicy policy) {
  std::size_t target = 0;
  if (policy == GroupPolicy::PseudoMajority) {
    std::map<std::size_t, std::size_t> counts;
    for (const auto l : neighbor_labels) ++counts[l];
    std::size_t best = 0;
    for (const auto& [label, count] : counts) {
      if (count > best) {
        best = count;
        target = label;
      }
    }
  } else {
    if (!query_label) throw ConfigError("policy " + to_string(policy) + " needs a query label");
    target = *query_label;
  }
  std::vector<bool> mask(neighbor_labels.size());
  for (std::size_t i = 0; i < neighbor_labels.size(); ++i) mask[i] = neighbor_labels[i] == target;
  return mask;
}

ContrastiveGroups split_groups(std::span<const double> query, std::optional<std::uint32_t> query_label,
                               const NeighborSet& neighbors, const EmbeddingBundle& corpus,
                               const ClassifierHead* head, GroupPolicy policy) {
  std::optional<std::size_t> qlabel;
  std::vector<std::size_t> labels;
  labels.reserve(neighbors.size());
  if (policy == GroupPolicy::Oracle) {
    if (!query_label || !corpus.has_labels()) throw ConfigError("oracle grouping requires true labels");
    qlabel = *query_label;
    for (const auto r : neighbors.rows) labels.push_back((*corpus.labels)[r]);
  } else {
    if (head == nullptr) throw ConfigError("pseudo-label grouping requires a classifier head");
    if (policy == GroupPolicy::PseudoQuery) qlabel = pseudo_label(query, *head);
    for (const auto r : neighbors.rows) labels.push_back(pseudo_label(corpus.row_vec(r), *head));
  }
  const auto mask = positive_mask(qlabel, labels, policy);
  ContrastiveGroups groups;
  groups.policy = policy;
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    (mask[i] ? groups.positives : groups.negatives).push_back(neighbors.rows[i]);
  }
  return groups;
}

SteeringVector steering_vector_vs2pp(const SaeModel& model, std::span<const double> query,
                                     const ContrastiveGroups& groups, const EmbeddingBundle& corpus, double gamma) {
  if (groups.positives.empty() && groups.negatives.empty()) {
    throw EmptyGroupsError("both contrastive groups are empty");
  }
  if (groups.positives.empty()) {
    auto v = steering_vector_vs2(model, query, gamma);
    v.source = SteeringSource::Vs2pp;
    return v;
  }
  const auto anchor = [&](const std::vector<std::size_t>& rows) {
    Vec sum(model.dim, 0.0);
    for (const auto r : rows) {
      const auto v = steering_vector_vs2(model, corpus.row_vec(r), gamma);
      for (std::size_t i = 0; i < model.dim; ++i) sum[i] += v.direction[i];
    }
    if (!rows.empty()) {
      for (auto& s : sum) s /= static_cast<double>(rows.size());
    }
    return sum;
  };
  const Vec pos = anchor(groups.positives);
  const Vec neg = anchor(groups.negatives);
  SteeringVector out;
  out.direction.resize(model.dim);
  for (std::size_t i = 0; i < model.dim; ++i) out.direction[i] = pos[i] - neg[i];
  out.source = SteeringSource::Vs2pp;
  out.gamma = gamma;
  return out;
}

Vec rag_weights(const NeighborSet& neighbors) {
  double total = 0.0;
  for (const double s : neighbors.similarities) total += s;
  if (total == 0.0 || !std::isfinite(total)) throw DegenerateWeightsError("neighbor similarities sum to zero");
  Vec w(neighbors.similarities);
  for (auto& v : w) v /= total;
  return w;
}

Vec weighted_rag(std::span<const double> query, const NeighborSet& neighbors, const EmbeddingBundle& corpus,
                 double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0, 1]");
  if (query.size() != corpus.dim) throw ShapeError("query dim does not match corpus dim");
  if (neighbors.size() == 0) throw DegenerateWeightsError("no neighbors to blend");
  const Vec w = rag_weights(neighbors);
  Vec blend(corpus.dim, 0.0);
  for (std::size_t j = 0; j < neighbors.size(); ++j) {
    const auto r = corpus.row(neighbors.rows[j]);
    for (std::size_t i = 0; i < corpus.dim; ++i) blend[i] += w[j] * r[i];
  }
  Vec out(corpus.dim);
  for (std::size_t i = 0; i < corpus.dim; ++i) out[i] = alpha * query[i] + (1.0 - alpha) * blend[i];
  return out;
}

}  // namespace vs2
