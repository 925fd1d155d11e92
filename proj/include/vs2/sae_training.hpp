#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vs2/embedding_store.hpp"
#include "vs2/errors.hpp"
#include "vs2/sae_model.hpp"

namespace vs2 {

enum class LossMode { TopK, L1, Pass };

std::string to_string(LossMode mode);
LossMode parse_loss_mode(std::string_view name);

struct TrainConfig {
  LossMode mode = LossMode::TopK;
  std::size_t k = 64;
  std::size_t expansion_factor = 4;
  double alpha_l1 = 1e-3;
  double w_aux = 0.8;
  double lr_peak = 5e-4;
  double warmup_fraction = 0.05;
  std::size_t epochs = 100;
  std::size_t batch_size = 512;
  std::size_t dead_threshold = 100;
  std::uint64_t seed = 0;
  TopkRule selection = TopkRule::Magnitude;
  double class_mean_decay = 0.99;
  // Rows used for the FVU recorded at each checkpoint (0 = all rows).
  std::size_t fvu_rows = 4096;
  // Optimizer steps between log records (0 = once per epoch).
  std::size_t log_every = 0;

  /// Throws ConfigError on any invariant violation.
  void validate() const;
  std::string to_json() const;
};

/// Running per-class mean of dense top-k codes, maintained as an EMA.
struct ClassMeanState {
  std::size_t num_classes = 0;
  std::size_t latent_dim = 0;
  double decay = 0.99;
  Vec means;                        // num_classes x latent_dim
  std::vector<std::uint8_t> seen;   // class has received at least one batch

  ClassMeanState() = default;
  ClassMeanState(std::size_t num_classes, std::size_t latent_dim, double decay = 0.99);

  std::span<const double> mean(std::size_t c) const { return {means.data() + c * latent_dim, latent_dim}; }
};

/// A view of a training batch: rows of the bundle selected by index.
struct Batch {
  const EmbeddingBundle* data = nullptr;
  std::vector<std::size_t> rows;

  std::size_t size() const { return rows.size(); }
  static Batch all(const EmbeddingBundle& data);
};

/// Parameter-shaped gradient buffers.
struct Gradients {
  Vec enc_weights;
  Vec dec_weights;
  Vec pre_bias;
  Vec enc_bias;

  static Gradients zeros_like(const SaeModel& model);
};

struct LossParams {
  double alpha_l1 = 0.0;
  double w_aux = 0.0;
};

struct LossResult {
  double loss = 0.0;
  double recon_loss = 0.0;
  Gradients grads;
  // Dense top-k codes of the batch rows (TopK and Pass modes), batch x latent_dim.
  Vec codes;
};

/// Batch-mean loss and its exact gradient.
///
///  topk: ||x - x_hat||^2 through the top-k path; gradient flows only through
///        the selected latents.
///  l1:   ||x - x_hat||^2 + alpha ||z||_1 with the ReLU encoder.
///  pass: topk loss + w_aux ||z - zbar_class||^2, zbar held constant. Classes
///        the state has not seen yet contribute no alignment term.
LossResult compute_loss(const SaeModel& model, const Batch& batch, LossMode mode, const LossParams& params,
                        const ClassMeanState* class_means = nullptr);

/// EMA update with the batch's per-class average code; a class seen for the
/// first time takes the batch average directly.
ClassMeanState update_class_means(ClassMeanState state, std::span<const double> codes,
                                  std::span<const std::uint32_t> labels);

/// Worst relative error between analytic gradients and central differences
/// over every parameter.
double gradient_check(const SaeModel& model, const Batch& batch, LossMode mode, const LossParams& params,
                      double epsilon, const ClassMeanState* class_means = nullptr);

struct LogRecord {
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double fvu = 0.0;
  std::size_t live_latents = 0;
};

struct TrainingLog {
  std::vector<LogRecord> records;

  std::string to_jsonl() const;
  void save(const std::filesystem::path& path) const;
};

/// Linear warmup to lr_peak over warmup_fraction of total_steps, then linear
/// decay to zero at total_steps. Steps are 1-based.
double learning_rate(const TrainConfig& config, std::uint64_t step, std::uint64_t total_steps);

struct TrainResult {
  SaeModel model;
  TrainingLog log;
  // Latents that were pruned, in the order they died.
  std::vector<std::size_t> pruned;
};

/// Raised when the loss becomes non-finite; carries the last good state.
class TrainingDivergedError : public NumericsError {
 public:
  TrainingDivergedError(const std::string& what, SaeModel last_good, TrainingLog log)
      : NumericsError(what), last_good_(std::move(last_good)), log_(std::move(log)) {}
  const SaeModel& last_good() const { return last_good_; }
  const TrainingLog& log() const { return log_; }

 private:
  SaeModel last_good_;
  TrainingLog log_;
};

/// Initial parameters: W_enc ~ U(-1/sqrt(d), 1/sqrt(d)), W_dec = W_enc^T,
/// b_enc = 0, b_pre = data mean.
SaeModel initialize_model(const TrainConfig& config, const EmbeddingBundle& data);

/// Adam training. Deterministic for a given seed.
TrainResult train(const TrainConfig& config, const EmbeddingBundle& data);

}  // namespace vs2
