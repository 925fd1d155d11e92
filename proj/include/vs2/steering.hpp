#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vs2/embedding_store.hpp"
#include "vs2/sae_model.hpp"

namespace vs2 {

inline constexpr double kDefaultGamma = 1.5;
inline constexpr double kDefaultLambda = 2.1;

enum class SteerMode { Reconstruction, Amplified, Steering };

std::string to_string(SteerMode mode);
SteerMode parse_steer_mode(std::string_view name);

struct SteeringConfig {
  double gamma = kDefaultGamma;
  double lambda = kDefaultLambda;
  SteerMode mode = SteerMode::Steering;
  std::optional<std::size_t> k;  // defaults to the model's k

  void validate() const;
};

enum class SteeringSource { Vs2, Vs2pp, Prototype };

struct SteeringVector {
  Vec direction;
  SteeringSource source = SteeringSource::Vs2;
  double gamma = 1.0;
  std::optional<std::size_t> class_id;  // set for prototype vectors
};

/// Per-class mean dense code of the most confident exemplars.
struct PrototypeTable {
  std::size_t num_classes = 0;
  std::size_t latent_dim = 0;
  std::size_t m = 0;
  Vec codes;                                       // num_classes x latent_dim
  std::vector<std::vector<std::size_t>> exemplars;  // bundle rows used per class

  std::span<const double> code(std::size_t c) const { return {codes.data() + c * latent_dim, latent_dim}; }
};

/// v = decode(gamma * c) - decode(c) with c the top-k code of x.
SteeringVector steering_vector_vs2(const SaeModel& model, std::span<const double> x, double gamma,
                                   std::optional<std::size_t> k = {});

/// x + lambda v, rescaled to the norm of x. Returns x unchanged (bitwise) when
/// lambda is zero or v is identically zero.
Vec apply_steering(std::span<const double> x, const SteeringVector& v, double lambda);

/// The three SAE-based token modifications: reconstruction, amplified
/// reconstruction, and VS2 steering.
Vec sae_steer(const SaeModel& model, std::span<const double> x, const SteeringConfig& config);

/// VS2 steering with the code zeroed (gamma 0) or negated (gamma -1).
Vec manipulation_variant(const SaeModel& model, std::span<const double> x, double gamma_override, double lambda);

/// Softmax (temperature 1) over cosine head scores.
Vec head_confidence(const ClassifierHead& head, std::span<const double> x);

/// For each class, averages the dense top-k codes of the m rows assigned to
/// that class (true label, or head prediction) with the highest head
/// confidence for it. Throws CoverageError naming classes with no rows.
PrototypeTable build_prototypes(const SaeModel& model, const EmbeddingBundle& bundle, const ClassifierHead& head,
                                std::size_t m, bool use_true_labels);

/// decode(gamma * zbar) - decode(zbar) for the class prototype code zbar.
SteeringVector steering_vector_prototype(const SaeModel& model, std::size_t class_id, const PrototypeTable& table,
                                         double gamma);

}  // namespace vs2
