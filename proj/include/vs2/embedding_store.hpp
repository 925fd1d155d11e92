#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vs2/vector_ops.hpp"

namespace vs2 {

/// A row-major matrix of embeddings with per-row identifiers, optional class
/// labels and free-form provenance metadata.
///
/// Scalars are held as 32-bit floats, which is also the on-disk precision, so
/// a save/load cycle is bit-exact. Numerical code widens rows to double via
/// row_vec().
struct EmbeddingBundle {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<float> data;
  std::vector<std::string> ids;
  std::optional<std::vector<std::uint32_t>> labels;
  // Only meaningful when labels are present; every label must be below it.
  std::uint32_t num_classes = 0;
  std::vector<std::string> class_names;
  std::map<std::string, std::string> meta;

  std::span<const float> row(std::size_t i) const { return {data.data() + i * dim, dim}; }
  Vec row_vec(std::size_t i) const { return to_vec(row(i)); }
  bool has_labels() const { return labels.has_value(); }

  /// Throws DataError / FormatError describing the first violated invariant.
  void validate() const;

  /// Row index of an id, if present. Linear scan; build a map for repeated lookups.
  std::optional<std::size_t> find_id(const std::string& id) const;

  bool operator==(const EmbeddingBundle&) const = default;
};

/// Zero-shot cosine head: one prototype embedding per class.
class ClassifierHead {
 public:
  ClassifierHead(std::size_t dim, std::vector<float> prototypes, std::vector<std::string> class_names);

  std::size_t num_classes() const { return class_names_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  std::span<const float> prototype(std::size_t c) const { return {prototypes_.data() + c * dim_, dim_}; }

  /// Cosine similarity of x against every prototype.
  /// Throws DegenerateInputError for a zero-norm x, ShapeError on dim mismatch.
  Vec cosine_scores(std::span<const double> x) const;

  /// Serialized form: a VSEB bundle whose rows are prototypes and ids are class names.
  EmbeddingBundle to_bundle() const;
  static ClassifierHead from_bundle(const EmbeddingBundle& bundle);

 private:
  std::size_t dim_;
  std::vector<float> prototypes_;
  std::vector<std::string> class_names_;
  std::vector<double> norms_;
};

EmbeddingBundle load_bundle(const std::filesystem::path& path);
void save_bundle(const EmbeddingBundle& bundle, const std::filesystem::path& path);

/// In-memory forms of the VSEB codec, used by the file functions and by tests.
std::string encode_bundle(const EmbeddingBundle& bundle);
EmbeddingBundle decode_bundle(std::string_view bytes);

/// Comma-separated numeric rows; with has_labels the last column is an integer
/// class id. Ids are synthesized as "row_<i>".
EmbeddingBundle import_csv(const std::filesystem::path& path, bool has_labels);
EmbeddingBundle parse_csv(std::string_view text, bool has_labels);

ClassifierHead load_head(const std::filesystem::path& path);
void save_head(const ClassifierHead& head, const std::filesystem::path& path);

}  // namespace vs2
