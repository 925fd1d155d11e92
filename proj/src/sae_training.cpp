#include "vs2/sae_training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "vs2/binary_io.hpp"

namespace vs2 {

std::string to_string(LossMode mode) {
  switch (mode) {
    case LossMode::TopK: return "topk";
    case LossMode::L1: return "l1";
    case LossMode::Pass: return "pass";
  }
  return "?";
}

LossMode parse_loss_mode(std::string_view name) {
  if (name == "topk") return LossMode::TopK;
  if (name == "l1") return LossMode::L1;
  if (name == "pass") return LossMode::Pass;
  throw ConfigError("unknown training mode '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (!(lr_peak > 0.0) || !std::isfinite(lr_peak)) throw ConfigError("lr_peak must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must be in [0, 1)");
  if (mode == LossMode::L1 && !(alpha_l1 >= 0.0)) throw ConfigError("alpha_l1 must be non-negative");
  if (!std::isfinite(w_aux) || w_aux < 0.0) throw ConfigError("w_aux must be finite and non-negative");
  if (k < 1) throw ConfigError("k must be at least 1");
  if (expansion_factor < 1) throw ConfigError("expansion_factor must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(class_mean_decay >= 0.0 && class_mean_decay < 1.0)) throw ConfigError("class_mean_decay must be in [0, 1)");
}

std::string TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["mode"] = to_string(mode);
  j["k"] = k;
  j["expansion_factor"] = expansion_factor;
  j["alpha_l1"] = alpha_l1;
  j["w_aux"] = w_aux;
  j["lr_peak"] = lr_peak;
  j["warmup_fraction"] = warmup_fraction;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["dead_threshold"] = dead_threshold;
  j["seed"] = seed;
  j["selection"] = to_string(selection);
  j["class_mean_decay"] = class_mean_decay;
  return j.dump();
}

ClassMeanState::ClassMeanState(std::size_t num_classes, std::size_t latent_dim, double decay)
    : num_classes(num_classes), latent_dim(latent_dim), decay(decay), means(num_classes * latent_dim, 0.0),
      seen(num_classes, 0) {}

Batch Batch::all(const EmbeddingBundle& data) {
  Batch b;
  b.data = &data;
  b.rows.resize(data.rows);
  std::iota(b.rows.begin(), b.rows.end(), std::size_t{0});
  return b;
}

Gradients Gradients::zeros_like(const SaeModel& model) {
  return {Vec(model.enc_weights.size(), 0.0), Vec(model.dec_weights.size(), 0.0), Vec(model.pre_bias.size(), 0.0),
          Vec(model.enc_bias.size(), 0.0)};
}

LossResult compute_loss(const SaeModel& model, const Batch& batch, LossMode mode, const LossParams& params,
                        const ClassMeanState* class_means) {
  if (batch.data == nullptr || batch.rows.empty()) throw ConfigError("loss needs a non-empty batch");
  const auto& data = *batch.data;
  if (data.dim != model.dim) throw ShapeError("batch dim does not match model dim");
  if (mode == LossMode::Pass) {
    if (!data.has_labels()) throw ConfigError("pass loss requires labels");
    if (class_means == nullptr) throw ConfigError("pass loss requires class means");
    if (class_means->latent_dim != model.latent_dim || class_means->num_classes < data.num_classes) {
      throw ShapeError("class mean state does not match the model / labels");
    }
  }

  const std::size_t d = model.dim;
  const std::size_t n = model.latent_dim;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  LossResult out;
  out.grads = Gradients::zeros_like(model);
  auto& g = out.grads;
  if (mode != LossMode::L1) out.codes.assign(batch.size() * n, 0.0);

  Vec x(d), centered(d), x_hat(d), g_out(d);
  std::vector<std::pair<std::size_t, double>> active;  // (latent, activation)
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto row = data.row(batch.rows[b]);
    for (std::size_t i = 0; i < d; ++i) {
      x[i] = row[i];
      centered[i] = x[i] - model.pre_bias[i];
    }

    active.clear();
    if (mode == LossMode::L1) {
      for (std::size_t j = 0; j < n; ++j) {
        const double* w = model.enc_weights.data() + j * d;
        double acc = model.enc_bias[j];
        for (std::size_t i = 0; i < d; ++i) acc += w[i] * centered[i];
        if (acc > 0.0) active.emplace_back(j, acc);
      }
    } else {
      const auto code = select_topk(pre_activations(model, x), model.k, model.dead_mask, model.selection);
      for (const auto& e : code.entries) {
        active.emplace_back(e.index, e.value);
        out.codes[b * n + e.index] = e.value;
      }
    }

    x_hat = model.pre_bias;
    for (const auto& [j, z] : active) {
      for (std::size_t i = 0; i < d; ++i) x_hat[i] += model.dec(i, j) * z;
    }
    double recon = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double e = x_hat[i] - x[i];
      recon += e * e;
      g_out[i] = 2.0 * e * inv_b;
      g.pre_bias[i] += g_out[i];
    }
    out.recon_loss += recon * inv_b;
    double sample_loss = recon;

    const double* zbar = nullptr;
    if (mode == LossMode::Pass) {
      const auto label = (*data.labels)[batch.rows[b]];
      if (class_means->seen[label]) {
        zbar = class_means->means.data() + label * n;
        const double* z = out.codes.data() + b * n;
        double align = 0.0;
        for (std::size_t j = 0; j < n; ++j) align += (z[j] - zbar[j]) * (z[j] - zbar[j]);
        sample_loss += params.w_aux * align;
      }
    }
    if (mode == LossMode::L1) {
      for (const auto& [j, z] : active) sample_loss += params.alpha_l1 * z;
    }
    out.loss += sample_loss * inv_b;

    for (const auto& [j, z] : active) {
      double dz = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        dz += model.dec(i, j) * g_out[i];
        g.dec_weights[i * n + j] += g_out[i] * z;
      }
      if (zbar != nullptr) dz += 2.0 * params.w_aux * (z - zbar[j]) * inv_b;
      if (mode == LossMode::L1) {
        dz += params.alpha_l1 * inv_b;
        g.enc_bias[j] += dz;
      }
      const double* w = model.enc_weights.data() + j * d;
      double* gw = g.enc_weights.data() + j * d;
      for (std::size_t i = 0; i < d; ++i) {
        gw[i] += dz * centered[i];
        g.pre_bias[i] -= dz * w[i];
      }
    }
  }
  return out;
}

ClassMeanState update_class_means(ClassMeanState state, std::span<const double> codes,
                                  std::span<const std::uint32_t> labels) {
  const std::size_t n = state.latent_dim;
  if (codes.size() != labels.size() * n) throw ShapeError("code matrix does not match label count");
  Vec sums(state.num_classes * n, 0.0);
  std::vector<std::size_t> counts(state.num_classes, 0);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const auto c = labels[b];
    if (c >= state.num_classes) throw DataError("label " + std::to_string(c) + " out of range");
    ++counts[c];
    for (std::size_t j = 0; j < n; ++j) sums[c * n + j] += codes[b * n + j];
  }
  for (std::size_t c = 0; c < state.num_classes; ++c) {
    if (counts[c] == 0) continue;
    double* m = state.means.data() + c * n;
    const double inv = 1.0 / static_cast<double>(counts[c]);
    for (std::size_t j = 0; j < n; ++j) {
      const double avg = sums[c * n + j] * inv;
      // m + (1 - decay)(avg - m) == decay*m + (1 - decay)*avg, and is an exact
      // fixed point when avg == m.
      m[j] = state.seen[c] ? m[j] + (1.0 - state.decay) * (avg - m[j]) : avg;
    }
    state.seen[c] = 1;
  }
  return state;
}

double gradient_check(const SaeModel& model, const Batch& batch, LossMode mode, const LossParams& params,
                      double epsilon, const ClassMeanState* class_means) {
  const auto analytic = compute_loss(model, batch, mode, params, class_means).grads;
  SaeModel probe = model;
  double worst = 0.0;
  const auto check = [&](Vec SaeModel::*tensor, const Vec& grad) {
    auto& values = probe.*tensor;
    for (std::size_t p = 0; p < values.size(); ++p) {
      const double saved = values[p];
      values[p] = saved + epsilon;
      const double up = compute_loss(probe, batch, mode, params, class_means).loss;
      values[p] = saved - epsilon;
      const double down = compute_loss(probe, batch, mode, params, class_means).loss;
      values[p] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double scale = std::max({std::abs(numeric), std::abs(grad[p]), 1e-6});
      worst = std::max(worst, std::abs(numeric - grad[p]) / scale);
    }
  };
  check(&SaeModel::enc_weights, analytic.enc_weights);
  check(&SaeModel::dec_weights, analytic.dec_weights);
  check(&SaeModel::pre_bias, analytic.pre_bias);
  check(&SaeModel::enc_bias, analytic.enc_bias);
  return worst;
}

std::string TrainingLog::to_jsonl() const {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["lr"] = r.lr;
    j["loss"] = r.loss;
    j["fvu"] = r.fvu;
    j["live_latents"] = r.live_latents;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void TrainingLog::save(const std::filesystem::path& path) const { write_file(path, to_jsonl()); }

double learning_rate(const TrainConfig& config, std::uint64_t step, std::uint64_t total_steps) {
  if (total_steps == 0 || step == 0 || step > total_steps) return 0.0;
  const auto warmup = static_cast<std::uint64_t>(config.warmup_fraction * static_cast<double>(total_steps));
  if (step <= warmup) {
    return config.lr_peak * static_cast<double>(step) / static_cast<double>(warmup);
  }
  return config.lr_peak * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup);
}

SaeModel initialize_model(const TrainConfig& config, const EmbeddingBundle& data) {
  config.validate();
  auto model = SaeModel::zeros(data.dim, config.expansion_factor, config.k);
  model.selection = config.selection;
  std::mt19937_64 rng(config.seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(data.dim));
  std::uniform_real_distribution<double> init(-bound, bound);
  for (auto& w : model.enc_weights) w = init(rng);
  for (std::size_t j = 0; j < model.latent_dim; ++j) {
    for (std::size_t i = 0; i < model.dim; ++i) model.dec(i, j) = model.enc(j, i);
  }
  for (std::size_t r = 0; r < data.rows; ++r) {
    const auto row = data.row(r);
    for (std::size_t i = 0; i < data.dim; ++i) model.pre_bias[i] += row[i];
  }
  if (data.rows > 0) {
    for (auto& b : model.pre_bias) b /= static_cast<double>(data.rows);
  }
  model.config_json = config.to_json();
  return model;
}

namespace {

struct AdamState {
  Vec m, v;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void adam_step(Vec& params, const Vec& grad, AdamState& state, double lr, std::uint64_t t) {
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    state.m[p] = kBeta1 * state.m[p] + (1.0 - kBeta1) * grad[p];
    state.v[p] = kBeta2 * state.v[p] + (1.0 - kBeta2) * grad[p] * grad[p];
    const double m_hat = state.m[p] / c1;
    const double v_hat = state.v[p] / c2;
    params[p] -= lr * m_hat / (std::sqrt(v_hat) + kAdamEps);
  }
}

void normalize_decoder_columns(SaeModel& model) {
  for (std::size_t j = 0; j < model.latent_dim; ++j) {
    double sq = 0.0;
    for (std::size_t i = 0; i < model.dim; ++i) sq += model.dec(i, j) * model.dec(i, j);
    if (sq <= 0.0) continue;
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t i = 0; i < model.dim; ++i) model.dec(i, j) *= inv;
  }
}

EmbeddingBundle fvu_subset(const EmbeddingBundle& data, std::size_t max_rows, std::uint64_t seed) {
  if (max_rows == 0 || max_rows >= data.rows) return data;
  std::vector<std::size_t> idx(data.rows);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(max_rows);
  std::sort(idx.begin(), idx.end());
  EmbeddingBundle sub;
  sub.rows = max_rows;
  sub.dim = data.dim;
  sub.data.reserve(max_rows * data.dim);
  for (const auto r : idx) {
    const auto row = data.row(r);
    sub.data.insert(sub.data.end(), row.begin(), row.end());
    sub.ids.push_back(data.ids[r]);
  }
  return sub;
}

}  // namespace

TrainResult train(const TrainConfig& config, const EmbeddingBundle& data) {
  config.validate();
  data.validate();
  if (data.rows < config.batch_size) {
    throw ConfigError("training data has " + std::to_string(data.rows) + " rows, fewer than batch_size=" +
                      std::to_string(config.batch_size));
  }
  if (config.mode == LossMode::Pass && !data.has_labels()) throw ConfigError("pass mode requires labelled data");
  if (config.k > data.dim * config.expansion_factor) throw ConfigError("k exceeds latent_dim");

  TrainResult result;
  result.model = initialize_model(config, data);
  auto& model = result.model;
  auto& log = result.log;

  const EmbeddingBundle probe = fvu_subset(data, config.fvu_rows, config.seed);
  const Batch probe_batch = Batch::all(probe);
  const LossParams params{config.alpha_l1, config.w_aux};
  const LossMode probe_mode = config.mode == LossMode::L1 ? LossMode::L1 : LossMode::TopK;

  const std::uint64_t steps_per_epoch = data.rows / config.batch_size;
  const std::uint64_t total_steps = steps_per_epoch * config.epochs;
  const std::uint64_t log_every = config.log_every == 0 ? steps_per_epoch : config.log_every;

  const auto record = [&](std::uint64_t step, double lr, double loss) {
    log.records.push_back({step, lr, loss, fvu(model, probe), model.live_latents()});
  };
  record(0, 0.0, compute_loss(model, probe_batch, probe_mode, params).loss);

  std::mt19937_64 rng(config.seed);
  AdamState adam_enc(model.enc_weights.size()), adam_dec(model.dec_weights.size()),
      adam_pre(model.pre_bias.size()), adam_bias(model.enc_bias.size());
  ClassMeanState class_means;
  if (config.mode == LossMode::Pass) {
    class_means = ClassMeanState(data.num_classes, model.latent_dim, config.class_mean_decay);
  }
  std::vector<std::size_t> idle(model.latent_dim, 0);
  std::vector<std::size_t> order(data.rows);
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::uint64_t step = 0;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  Batch batch;
  batch.data = &data;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::uint64_t s = 0; s < steps_per_epoch; ++s) {
      ++step;
      batch.rows.assign(order.begin() + static_cast<std::ptrdiff_t>(s * config.batch_size),
                        order.begin() + static_cast<std::ptrdiff_t>((s + 1) * config.batch_size));
      const double lr = learning_rate(config, step, total_steps);
      auto res = compute_loss(model, batch, config.mode, params,
                              config.mode == LossMode::Pass ? &class_means : nullptr);
      if (!std::isfinite(res.loss)) {
        throw TrainingDivergedError("loss became non-finite at step " + std::to_string(step), model, log);
      }
      adam_step(model.enc_weights, res.grads.enc_weights, adam_enc, lr, step);
      adam_step(model.dec_weights, res.grads.dec_weights, adam_dec, lr, step);
      adam_step(model.pre_bias, res.grads.pre_bias, adam_pre, lr, step);
      adam_step(model.enc_bias, res.grads.enc_bias, adam_bias, lr, step);
      if (config.mode == LossMode::L1) normalize_decoder_columns(model);

      if (config.mode != LossMode::L1) {
        // A latent fires when it holds a non-zero value in some code of the batch.
        std::vector<std::uint8_t> fired(model.latent_dim, 0);
        for (std::size_t b = 0; b < batch.size(); ++b) {
          for (std::size_t j = 0; j < model.latent_dim; ++j) {
            if (res.codes[b * model.latent_dim + j] != 0.0) fired[j] = 1;
          }
        }
        for (std::size_t j = 0; j < model.latent_dim; ++j) {
          if (model.is_dead(j)) continue;
          idle[j] = fired[j] ? 0 : idle[j] + 1;
          if (config.dead_threshold > 0 && idle[j] >= config.dead_threshold && model.live_latents() > model.k) {
            model.dead_mask[j] = 1;
            result.pruned.push_back(j);
          }
        }
      }
      if (config.mode == LossMode::Pass) {
        std::vector<std::uint32_t> labels;
        labels.reserve(batch.size());
        for (const auto r : batch.rows) labels.push_back((*data.labels)[r]);
        class_means = update_class_means(std::move(class_means), res.codes, labels);
      }

      loss_sum += res.loss;
      ++loss_count;
      if (step % log_every == 0 || step == total_steps) {
        record(step, lr, loss_sum / static_cast<double>(loss_count));
        loss_sum = 0.0;
        loss_count = 0;
      }
    }
  }
  model.steps = step;
  model.validate();
  return result;
}

}  // namespace vs2
