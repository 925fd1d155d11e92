#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vs2/embedding_store.hpp"
#include "vs2/vector_ops.hpp"

namespace vs2 {

/// Which activations survive top-k selection. Magnitude keeps the k largest
/// |a|; Signed keeps the k largest a.
enum class TopkRule { Magnitude, Signed };

std::string to_string(TopkRule rule);
TopkRule parse_topk_rule(std::string_view name);

struct CodeEntry {
  std::size_t index = 0;
  double value = 0.0;
  bool operator==(const CodeEntry&) const = default;
};

/// Sparse latent code, ordered by selection priority (strongest first, then
/// ascending latent index).
struct SparseCode {
  std::vector<CodeEntry> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  SparseCode scaled(double factor) const;
  Vec dense(std::size_t latent_dim) const;
  std::vector<std::size_t> indices() const;
  bool operator==(const SparseCode&) const = default;
};

/// Top-k sparse autoencoder parameters.
///
/// enc_weights is latent_dim x dim and dec_weights is dim x latent_dim, both
/// row-major. Latents flagged in dead_mask never enter a code.
struct SaeModel {
  std::size_t dim = 0;
  std::size_t latent_dim = 0;
  std::size_t k = 0;
  Vec enc_weights;
  Vec dec_weights;
  Vec pre_bias;
  Vec enc_bias;
  std::vector<std::uint8_t> dead_mask;
  TopkRule selection = TopkRule::Magnitude;

  // Checkpoint bookkeeping carried in the file trailer.
  std::uint64_t steps = 0;
  std::string config_json = "{}";

  /// All-zero parameters with the given shape.
  static SaeModel zeros(std::size_t dim, std::size_t expansion_factor, std::size_t k);

  std::size_t expansion_factor() const { return dim == 0 ? 0 : latent_dim / dim; }
  std::size_t live_latents() const;
  bool is_dead(std::size_t j) const { return dead_mask[j] != 0; }

  double& enc(std::size_t j, std::size_t i) { return enc_weights[j * dim + i]; }
  double enc(std::size_t j, std::size_t i) const { return enc_weights[j * dim + i]; }
  double& dec(std::size_t i, std::size_t j) { return dec_weights[i * latent_dim + j]; }
  double dec(std::size_t i, std::size_t j) const { return dec_weights[i * latent_dim + j]; }

  /// Throws ShapeError / DataError when an invariant is violated.
  void validate() const;

  bool operator==(const SaeModel&) const = default;
};

/// W_enc (x - b_pre), with dead latents forced to zero.
Vec pre_activations(const SaeModel& model, std::span<const double> x);

/// ReLU(W_enc (x - b_pre) + b_enc); the l1 training path only.
Vec encode_relu(const SaeModel& model, std::span<const double> x);

/// Keeps the k strongest live activations. Ties resolve to the lower index.
/// Throws ConfigError when k exceeds the number of live latents.
SparseCode select_topk(std::span<const double> acts, std::size_t k, std::span<const std::uint8_t> dead_mask = {},
                       TopkRule rule = TopkRule::Magnitude);

/// W_dec z + b_pre, accumulated over the code's columns only.
Vec decode(const SaeModel& model, const SparseCode& code);
Vec decode_dense(const SaeModel& model, std::span<const double> z);

/// Top-k code of x using the model's own selection rule and live mask.
SparseCode encode_topk(const SaeModel& model, std::span<const double> x, std::optional<std::size_t> k = {});

struct Reconstruction {
  Vec x_hat;
  SparseCode code;
};

Reconstruction reconstruct(const SaeModel& model, std::span<const double> x, std::optional<std::size_t> k = {});

/// ||X - X_hat||_F^2 / ||X - mean(X)||_F^2 over the rows of batch.
/// Throws DegenerateBatchError for fewer than two rows or zero variance.
double fvu(const SaeModel& model, const EmbeddingBundle& batch);

/// Same ratio for precomputed reconstructions (rows x dim, row-major).
double fvu(const EmbeddingBundle& batch, std::span<const double> reconstructions);

std::string encode_model(const SaeModel& model);
SaeModel decode_model(std::string_view bytes);
void save_model(const SaeModel& model, const std::filesystem::path& path);
SaeModel load_model(const std::filesystem::path& path);

}  // namespace vs2
