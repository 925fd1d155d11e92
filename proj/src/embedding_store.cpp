#include "vs2/embedding_store.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "vs2/binary_io.hpp"
#include "vs2/errors.hpp"

namespace vs2 {

namespace {

constexpr std::string_view kMagic = "VSEB";
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kFlagLabels = 1u;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace

void EmbeddingBundle::validate() const {
  if (data.size() != rows * dim) {
    throw DataError("bundle payload has " + std::to_string(data.size()) + " scalars, expected " +
                    std::to_string(rows) + " x " + std::to_string(dim));
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < dim; ++c) {
      if (!std::isfinite(data[r * dim + c])) {
        throw DataError("non-finite value at row " + std::to_string(r) + ", column " + std::to_string(c));
      }
    }
  }
  if (ids.size() != rows) {
    throw DataError("bundle has " + std::to_string(ids.size()) + " ids for " + std::to_string(rows) + " rows");
  }
  std::unordered_set<std::string_view> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) throw DataError("duplicate id '" + id + "'");
  }
  if (labels) {
    if (labels->size() != rows) throw DataError("label count does not match row count");
    for (std::size_t r = 0; r < rows; ++r) {
      if ((*labels)[r] >= num_classes) {
        throw DataError("label " + std::to_string((*labels)[r]) + " at row " + std::to_string(r) +
                        " is not below num_classes=" + std::to_string(num_classes));
      }
    }
  }
}

std::optional<std::size_t> EmbeddingBundle::find_id(const std::string& id) const {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == id) return i;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// ClassifierHead

ClassifierHead::ClassifierHead(std::size_t dim, std::vector<float> prototypes, std::vector<std::string> class_names)
    : dim_(dim), prototypes_(std::move(prototypes)), class_names_(std::move(class_names)) {
  if (class_names_.size() < 2) throw DataError("classifier head needs at least 2 classes");
  if (dim_ == 0 || prototypes_.size() != class_names_.size() * dim_) {
    throw ShapeError("classifier head prototype matrix does not match num_classes x dim");
  }
  norms_.reserve(class_names_.size());
  for (std::size_t c = 0; c < class_names_.size(); ++c) {
    const auto p = prototype(c);
    for (const float v : p) {
      if (!std::isfinite(v)) throw DataError("non-finite prototype entry for class " + class_names_[c]);
    }
    const double n = norm(p);
    if (!(n > 0.0)) throw DataError("prototype for class '" + class_names_[c] + "' has zero norm");
    norms_.push_back(n);
  }
}

Vec ClassifierHead::cosine_scores(std::span<const double> x) const {
  if (x.size() != dim_) {
    throw ShapeError("query has dim " + std::to_string(x.size()) + ", head expects " + std::to_string(dim_));
  }
  const double xn = norm(x);
  if (!(xn > 0.0)) throw DegenerateInputError("cannot score a zero-norm embedding");
  Vec scores(num_classes());
  for (std::size_t c = 0; c < scores.size(); ++c) {
    scores[c] = dot(x, prototype(c)) / (xn * norms_[c]);
  }
  return scores;
}

EmbeddingBundle ClassifierHead::to_bundle() const {
  EmbeddingBundle b;
  b.rows = num_classes();
  b.dim = dim_;
  b.data = prototypes_;
  b.ids = class_names_;
  b.class_names = class_names_;
  b.meta["kind"] = "classifier_head";
  return b;
}

ClassifierHead ClassifierHead::from_bundle(const EmbeddingBundle& bundle) {
  bundle.validate();
  return ClassifierHead(bundle.dim, bundle.data, bundle.ids);
}

ClassifierHead load_head(const std::filesystem::path& path) { return ClassifierHead::from_bundle(load_bundle(path)); }

void save_head(const ClassifierHead& head, const std::filesystem::path& path) { save_bundle(head.to_bundle(), path); }

// ---------------------------------------------------------------------------
// VSEB codec

std::string encode_bundle(const EmbeddingBundle& bundle) {
  bundle.validate();
  ByteWriter w;
  w.bytes(kMagic);
  w.u32(kVersion);
  w.u64(bundle.rows);
  w.u64(bundle.dim);
  w.u32(bundle.labels ? kFlagLabels : 0u);
  for (const float v : bundle.data) w.f32(v);
  if (bundle.labels) {
    for (const auto l : *bundle.labels) w.u32(l);
  }
  nlohmann::ordered_json meta;
  meta["ids"] = bundle.ids;
  meta["class_names"] = bundle.class_names;
  meta["num_classes"] = bundle.num_classes;
  meta["meta"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : bundle.meta) meta["meta"][k] = v;
  const std::string blob = meta.dump();
  w.u64(blob.size());
  w.bytes(blob);
  return std::move(w).take();
}

EmbeddingBundle decode_bundle(std::string_view bytes) {
  if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic) {
    throw FormatError("not a VSEB file (bad magic)");
  }
  ByteReader r(bytes.substr(kMagic.size()));
  const auto version = r.u32();
  if (version != kVersion) throw FormatError("unsupported VSEB version " + std::to_string(version));
  EmbeddingBundle b;
  b.rows = r.u64();
  b.dim = r.u64();
  const auto flags = r.u32();
  if ((flags & ~kFlagLabels) != 0) throw FormatError("unknown VSEB flag bits set");

  const std::uint64_t scalars = checked_count(b.rows, b.dim);
  r.require(checked_count(scalars, 4), "embedding payload");
  b.data.resize(scalars);
  for (auto& v : b.data) v = r.f32();
  if (flags & kFlagLabels) {
    r.require(checked_count(b.rows, 4), "label block");
    std::vector<std::uint32_t> labels(b.rows);
    for (auto& l : labels) l = r.u32();
    b.labels = std::move(labels);
  }
  const auto blob_len = r.u64();
  r.require(blob_len, "metadata blob");
  const auto blob = r.bytes(blob_len);
  if (!r.exhausted()) throw FormatError("trailing bytes after VSEB metadata");

  try {
    const auto meta = nlohmann::json::parse(blob);
    b.ids = meta.at("ids").get<std::vector<std::string>>();
    b.class_names = meta.at("class_names").get<std::vector<std::string>>();
    b.num_classes = meta.at("num_classes").get<std::uint32_t>();
    b.meta = meta.at("meta").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed VSEB metadata: ") + e.what());
  }
  b.validate();
  return b;
}

EmbeddingBundle load_bundle(const std::filesystem::path& path) {
  return decode_bundle(read_file(path));
}

void save_bundle(const EmbeddingBundle& bundle, const std::filesystem::path& path) {
  write_file(path, encode_bundle(bundle));
}

// ---------------------------------------------------------------------------
// CSV import

EmbeddingBundle parse_csv(std::string_view text, bool has_labels) {
  EmbeddingBundle b;
  std::vector<std::uint32_t> labels;
  std::size_t width = 0;
  std::size_t line_no = 0;
  for (const auto raw_line : split(text, '\n')) {
    const auto line = trim(raw_line);
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (b.rows == 0) {
      width = cells.size();
      if (has_labels && width < 2) throw FormatError("labelled CSV needs at least one value column");
      b.dim = has_labels ? width - 1 : width;
    } else if (cells.size() != width) {
      throw FormatError("ragged CSV: line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                        " columns, expected " + std::to_string(width));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto cell = trim(cells[c]);
      const bool is_label = has_labels && c + 1 == cells.size();
      if (is_label) {
        std::uint32_t label = 0;
        const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), label);
        if (ec != std::errc() || ptr != cell.data() + cell.size()) {
          throw DataError("invalid label '" + std::string(cell) + "' at row " + std::to_string(b.rows));
        }
        labels.push_back(label);
      } else {
        double value = 0.0;
        const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
        if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty()) {
          throw DataError("non-numeric cell '" + std::string(cell) + "' at row " + std::to_string(b.rows) +
                          ", column " + std::to_string(c));
        }
        b.data.push_back(static_cast<float>(value));
      }
    }
    b.ids.push_back("row_" + std::to_string(b.rows));
    ++b.rows;
  }
  if (b.rows == 0) throw FormatError("CSV contains no rows");
  if (has_labels) {
    std::uint32_t max_label = 0;
    for (const auto l : labels) max_label = std::max(max_label, l);
    b.num_classes = max_label + 1;
    b.labels = std::move(labels);
  }
  b.validate();
  return b;
}

EmbeddingBundle import_csv(const std::filesystem::path& path, bool has_labels) {
  auto b = parse_csv(read_file(path), has_labels);
  b.meta["source"] = path.filename().string();
  return b;
}

}  // namespace vs2
