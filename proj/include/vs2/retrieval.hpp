#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vs2/embedding_store.hpp"
#include "vs2/sae_model.hpp"
#include "vs2/steering.hpp"

namespace vs2 {

inline constexpr std::size_t kDefaultNeighbors = 50;

/// Neighbors of one query, most similar first.
struct NeighborSet {
  std::string query_id;
  std::vector<std::size_t> rows;  // rows of the corpus the set refers to
  std::vector<std::string> ids;
  Vec similarities;

  std::size_t size() const { return rows.size(); }
};

/// Exhaustive cosine search over an immutable corpus. Row norms are computed
/// once at construction.
class CosineIndex {
 public:
  /// Throws DegenerateInputError if any corpus row has zero norm.
  explicit CosineIndex(std::shared_ptr<const EmbeddingBundle> corpus);

  /// The n rows most similar to query; ties go to the lower row index. A row
  /// whose id equals query_id is skipped.
  NeighborSet search(std::span<const double> query, std::size_t n,
                     const std::optional<std::string>& query_id = {}) const;

  const EmbeddingBundle& corpus() const { return *corpus_; }

 private:
  std::shared_ptr<const EmbeddingBundle> corpus_;
  Vec norms_;
};

NeighborSet knn(const EmbeddingBundle& corpus, std::span<const double> query, std::size_t n,
                const std::optional<std::string>& query_id = {});

/// Argmax of cosine similarity against the head prototypes, lowest class on ties.
std::size_t pseudo_label(std::span<const double> x, const ClassifierHead& head);

/// Cached training embeddings used by VS2++: a steering-space bundle (what the
/// SAE encodes) and an optional separate retrieval-space bundle (what kNN
/// searches), joined by id. Neighbor sets returned by retrieve() always refer
/// to steering-space rows.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::shared_ptr<const EmbeddingBundle> steering);
  /// id_map maps retrieval ids to steering ids; ids map to themselves when absent.
  EmbeddingCache(std::shared_ptr<const EmbeddingBundle> steering, std::shared_ptr<const EmbeddingBundle> retrieval,
                 std::map<std::string, std::string> id_map = {});

  const EmbeddingBundle& steering() const { return *steering_; }
  bool separate_retrieval_space() const { return separate_; }
  std::size_t retrieval_dim() const { return index_.corpus().dim; }

  NeighborSet retrieve(std::span<const double> retrieval_query, std::size_t n,
                       const std::optional<std::string>& query_id = {}) const;

 private:
  std::shared_ptr<const EmbeddingBundle> steering_;
  CosineIndex index_;
  bool separate_ = false;
  std::vector<std::size_t> to_steering_;  // retrieval row -> steering row
};

/// JSON manifest describing a cache on disk:
///   {"steering": "<vseb>", "retrieval": "<vseb>" (optional), "id_map": {"<retrieval id>": "<steering id>"}}
/// Relative paths resolve against the manifest's directory.
struct CacheManifest {
  std::filesystem::path steering;
  std::optional<std::filesystem::path> retrieval;
  std::map<std::string, std::string> id_map;

  static CacheManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  EmbeddingCache open() const;
};

enum class GroupPolicy { Oracle, PseudoQuery, PseudoMajority };

std::string to_string(GroupPolicy policy);
GroupPolicy parse_group_policy(std::string_view name);

struct ContrastiveGroups {
  std::vector<std::size_t> positives;  // corpus rows
  std::vector<std::size_t> negatives;
  GroupPolicy policy = GroupPolicy::PseudoQuery;

  bool positives_empty() const { return positives.empty(); }
  bool negatives_empty() const { return negatives.empty(); }
};

/// Positions of the neighbors that belong to the positive group.
///   Oracle / PseudoQuery: neighbor label == query label.
///   PseudoMajority: neighbor label == modal neighbor label (lowest on ties).
std::vector<bool> positive_mask(std::optional<std::size_t> query_label, std::span<const std::size_t> neighbor_labels,
                                GroupPolicy policy);

/// Partitions neighbors (rows of corpus) into positives and negatives.
/// Oracle uses true labels (query_label and corpus labels); the pseudo
/// policies label the query and neighbors with head.
ContrastiveGroups split_groups(std::span<const double> query, std::optional<std::uint32_t> query_label,
                               const NeighborSet& neighbors, const EmbeddingBundle& corpus,
                               const ClassifierHead* head, GroupPolicy policy);

/// Mean VS2 vector over positives minus mean VS2 vector over negatives (zero
/// when there are none). With no positives, falls back to VS2 of the query.
SteeringVector steering_vector_vs2pp(const SaeModel& model, std::span<const double> query,
                                     const ContrastiveGroups& groups, const EmbeddingBundle& corpus, double gamma);

/// Normalized similarity weights s_j / sum(s).
Vec rag_weights(const NeighborSet& neighbors);

/// alpha q + (1 - alpha) sum_j w_j r_j over the neighbor rows of corpus.
Vec weighted_rag(std::span<const double> query, const NeighborSet& neighbors, const EmbeddingBundle& corpus,
                 double alpha);

}  // namespace vs2
