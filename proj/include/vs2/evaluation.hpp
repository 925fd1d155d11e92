#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vs2/embedding_store.hpp"
#include "vs2/retrieval.hpp"
#include "vs2/sae_model.hpp"
#include "vs2/steering.hpp"

namespace vs2 {

using Json = nlohmann::ordered_json;

struct ScoredClass {
  std::size_t class_id = 0;
  double score = 0.0;
};

/// Classes ranked by cosine similarity, descending; equal scores rank the
/// lower class id first.
std::vector<ScoredClass> classify(std::span<const double> x, const ClassifierHead& head, std::size_t top);

/// Maps a test row (index, embedding) to the embedding that gets classified.
using SteerFn = std::function<Vec(std::size_t row, std::span<const double> x)>;

struct ClassStats {
  std::size_t class_id = 0;
  std::string name;
  double accuracy = 0.0;
  std::size_t support = 0;
  std::optional<std::size_t> top_confusion;  // most frequent wrong prediction
};

struct EvalReport {
  double top1 = 0.0;
  double top5 = 0.0;
  std::size_t rows = 0;
  std::vector<ClassStats> per_class;
  std::vector<std::size_t> predictions;
  Json config = Json::object();
  double runtime_seconds = 0.0;  // not serialized, so reruns stay byte-identical

  Json to_json() const;
};

struct EvalOptions {
  std::size_t threads = 1;
  Json config = Json::object();
};

/// Steers each labelled test row (identity when steer is empty), classifies it
/// and aggregates top-1 / top-5 / per-class statistics. Parallel and serial
/// runs give identical reports.
EvalReport evaluate(const EmbeddingBundle& test, const ClassifierHead& head, const SteerFn& steer = {},
                    const EvalOptions& options = {});

// Steering closures ----------------------------------------------------------

SteerFn make_sae_steer(const SaeModel& model, SteeringConfig config);
SteerFn make_manipulation_steer(const SaeModel& model, double gamma_override, double lambda);

/// Oracle prototype steering: each row is steered with the prototype vector of
/// its true class.
SteerFn make_prototype_steer(const SaeModel& model, const PrototypeTable& table, const EmbeddingBundle& test,
                             double gamma, double lambda);

struct Vs2ppConfig {
  std::size_t neighbors = kDefaultNeighbors;
  GroupPolicy policy = GroupPolicy::PseudoQuery;
  double gamma = kDefaultGamma;
  double lambda = kDefaultLambda;
  // Forces S- := S+ so the contrastive vector cancels (identity check).
  bool force_equal_groups = false;
};

/// VS2++ over a cache. Retrieval queries come from retrieval_queries (matched
/// to test rows by id) when given, otherwise from the test embeddings.
SteerFn make_vs2pp_steer(const SaeModel& model, const EmbeddingCache& cache, const ClassifierHead& head,
                         const EmbeddingBundle& test, const EmbeddingBundle* retrieval_queries,
                         const Vs2ppConfig& config);

/// Weighted-RAG baseline over the same cache.
SteerFn make_rag_steer(const EmbeddingCache& cache, const EmbeddingBundle& test,
                       const EmbeddingBundle* retrieval_queries, std::size_t neighbors, double alpha);

// Sweeps and ablations --------------------------------------------------------

struct SweepGrid {
  std::vector<double> gammas;
  std::vector<double> lambdas;
  std::vector<std::vector<double>> accuracy;  // [gamma][lambda]
  double baseline = 0.0;

  std::pair<std::size_t, std::size_t> best_cell() const;
  Json to_json() const;
};

SweepGrid sweep(const EmbeddingBundle& test, const ClassifierHead& head, const SaeModel& model,
                const std::vector<double>& gammas, const std::vector<double>& lambdas,
                const EvalOptions& options = {});

struct ManipulationReport {
  EvalReport baseline, vs2, zero_out, negate;
  // negate <= zero_out < baseline
  bool ordering_holds() const;
  Json to_json() const;
};

ManipulationReport manipulation_ablation(const EmbeddingBundle& test, const ClassifierHead& head,
                                         const SaeModel& model, double lambda, double gamma = kDefaultGamma,
                                         const EvalOptions& options = {});

struct TopNPoint {
  std::size_t n = 0;
  double top1 = 0.0;
};

struct TopNCurve {
  std::vector<TopNPoint> points;
  Json to_json() const;
};

TopNCurve topn_ablation(const EmbeddingBundle& test, const ClassifierHead& head, const SaeModel& model,
                        const EmbeddingCache& cache, const std::vector<std::size_t>& n_values,
                        const Vs2ppConfig& base, const EmbeddingBundle* retrieval_queries = nullptr,
                        const EvalOptions& options = {});

// Analysis -------------------------------------------------------------------

struct OverlapPair {
  std::size_t a = 0;
  std::size_t b = 0;
  double cosine = 0.0;
};

struct OrthogonalityReport {
  std::vector<std::string> names;
  std::vector<std::vector<double>> cosine;  // symmetric, unit diagonal
  double mean_off_diagonal = 0.0;
  std::vector<OverlapPair> ranked;          // off-diagonal pairs, most similar first

  Json to_json(std::size_t top = 10) const;
};

OrthogonalityReport prototype_orthogonality(const std::vector<SteeringVector>& vectors,
                                            const std::vector<std::string>& names);

struct CoverageEntry {
  std::size_t row = 0;
  std::string id;
  double activation = 0.0;
};

struct CoverageReport {
  std::size_t feature = 0;
  std::vector<CoverageEntry> top;
  std::map<std::uint32_t, std::size_t> label_histogram;
  bool degenerate = false;  // every activation is zero

  Json to_json() const;
};

/// The m rows with the highest pre-activation on a latent, descending.
CoverageReport concept_coverage(const SaeModel& model, const EmbeddingBundle& bundle, std::size_t feature,
                                std::size_t m);

struct ClassDelta {
  std::size_t class_id = 0;
  std::string name;
  double baseline = 0.0;
  double treated = 0.0;
  std::size_t support = 0;
  double delta() const { return treated - baseline; }
};

/// Per-class accuracy change of treated over baseline, largest gain first.
std::vector<ClassDelta> class_deltas(const EvalReport& baseline, const EvalReport& treated);
Json gain_loss_json(const std::vector<ClassDelta>& deltas, std::size_t top = 10);

/// Mean distance from each row's dense top-k code to its class-mean code.
double mean_intra_class_code_distance(const SaeModel& model, const EmbeddingBundle& labelled);

// Static plots ---------------------------------------------------------------

std::string sweep_heatmap_svg(const SweepGrid& grid);
std::string topn_curve_svg(const TopNCurve& curve);

}  // namespace vs2
