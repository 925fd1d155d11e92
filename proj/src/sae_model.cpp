#include "vs2/sae_model.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "vs2/binary_io.hpp"
#include "vs2/errors.hpp"

namespace vs2 {

namespace {

constexpr std::string_view kMagic = "VSSA";
constexpr std::uint32_t kVersion = 1;

void check_input(const SaeModel& model, std::span<const double> x) {
  if (x.size() != model.dim) {
    throw ShapeError("input has dim " + std::to_string(x.size()) + ", model expects " + std::to_string(model.dim));
  }
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double a) { return std::isfinite(a); });
}

}  // namespace

std::string to_string(TopkRule rule) { return rule == TopkRule::Magnitude ? "magnitude" : "signed"; }

TopkRule parse_topk_rule(std::string_view name) {
  if (name == "magnitude") return TopkRule::Magnitude;
  if (name == "signed") return TopkRule::Signed;
  throw ConfigError("unknown top-k selection rule '" + std::string(name) + "'");
}

SparseCode SparseCode::scaled(double factor) const {
  SparseCode out = *this;
  for (auto& e : out.entries) e.value *= factor;
  return out;
}

Vec SparseCode::dense(std::size_t latent_dim) const {
  Vec z(latent_dim, 0.0);
  for (const auto& e : entries) z.at(e.index) = e.value;
  return z;
}

std::vector<std::size_t> SparseCode::indices() const {
  std::vector<std::size_t> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.index);
  return out;
}

SaeModel SaeModel::zeros(std::size_t dim, std::size_t expansion_factor, std::size_t k) {
  if (dim == 0 || expansion_factor == 0) throw ConfigError("model dim and expansion factor must be positive");
  SaeModel m;
  m.dim = dim;
  m.latent_dim = dim * expansion_factor;
  m.k = k;
  m.enc_weights.assign(m.latent_dim * dim, 0.0);
  m.dec_weights.assign(dim * m.latent_dim, 0.0);
  m.pre_bias.assign(dim, 0.0);
  m.enc_bias.assign(m.latent_dim, 0.0);
  m.dead_mask.assign(m.latent_dim, 0);
  if (k < 1 || k > m.latent_dim) throw ConfigError("k must be in [1, latent_dim]");
  return m;
}

std::size_t SaeModel::live_latents() const {
  return static_cast<std::size_t>(std::count(dead_mask.begin(), dead_mask.end(), std::uint8_t{0}));
}

void SaeModel::validate() const {
  if (dim == 0 || latent_dim == 0 || latent_dim % dim != 0) {
    throw ShapeError("latent_dim must be a positive multiple of dim");
  }
  if (enc_weights.size() != latent_dim * dim || dec_weights.size() != dim * latent_dim ||
      pre_bias.size() != dim || enc_bias.size() != latent_dim || dead_mask.size() != latent_dim) {
    throw ShapeError("parameter arrays do not match the declared shape");
  }
  if (k < 1 || k > latent_dim) throw DataError("k must be in [1, latent_dim]");
  if (!all_finite(enc_weights) || !all_finite(dec_weights) || !all_finite(pre_bias) || !all_finite(enc_bias)) {
    throw DataError("model has non-finite parameters");
  }
  if (live_latents() < k) {
    throw DataError("model has " + std::to_string(live_latents()) + " live latents, fewer than k=" + std::to_string(k));
  }
}

Vec pre_activations(const SaeModel& model, std::span<const double> x) {
  check_input(model, x);
  Vec centered(model.dim);
  for (std::size_t i = 0; i < model.dim; ++i) centered[i] = x[i] - model.pre_bias[i];
  Vec acts(model.latent_dim, 0.0);
  for (std::size_t j = 0; j < model.latent_dim; ++j) {
    if (model.is_dead(j)) continue;
    const double* w = model.enc_weights.data() + j * model.dim;
    double acc = 0.0;
    for (std::size_t i = 0; i < model.dim; ++i) acc += w[i] * centered[i];
    acts[j] = acc;
  }
  return acts;
}

Vec encode_relu(const SaeModel& model, std::span<const double> x) {
  check_input(model, x);
  Vec z(model.latent_dim, 0.0);
  for (std::size_t j = 0; j < model.latent_dim; ++j) {
    double acc = model.enc_bias[j];
    for (std::size_t i = 0; i < model.dim; ++i) acc += model.enc(j, i) * (x[i] - model.pre_bias[i]);
    z[j] = std::max(acc, 0.0);
  }
  return z;
}

SparseCode select_topk(std::span<const double> acts, std::size_t k, std::span<const std::uint8_t> dead_mask,
                       TopkRule rule) {
  if (!dead_mask.empty() && dead_mask.size() != acts.size()) {
    throw ShapeError("dead mask length does not match activation length");
  }
  std::vector<std::size_t> live;
  live.reserve(acts.size());
  for (std::size_t j = 0; j < acts.size(); ++j) {
    if (dead_mask.empty() || dead_mask[j] == 0) live.push_back(j);
  }
  if (k > live.size()) {
    throw ConfigError("k=" + std::to_string(k) + " exceeds the " + std::to_string(live.size()) + " live latents");
  }
  const auto key = [&](std::size_t j) { return rule == TopkRule::Magnitude ? std::abs(acts[j]) : acts[j]; };
  const auto stronger = [&](std::size_t a, std::size_t b) {
    const double ka = key(a);
    const double kb = key(b);
    return ka != kb ? ka > kb : a < b;
  };
  std::partial_sort(live.begin(), live.begin() + static_cast<std::ptrdiff_t>(k), live.end(), stronger);
  SparseCode code;
  code.entries.reserve(k);
  for (std::size_t r = 0; r < k; ++r) code.entries.push_back({live[r], acts[live[r]]});
  return code;
}

Vec decode(const SaeModel& model, const SparseCode& code) {
  Vec out = model.pre_bias;
  for (const auto& e : code.entries) {
    if (e.index >= model.latent_dim) {
      throw ShapeError("code index " + std::to_string(e.index) + " out of range for latent_dim " +
                       std::to_string(model.latent_dim));
    }
    for (std::size_t i = 0; i < model.dim; ++i) out[i] += model.dec(i, e.index) * e.value;
  }
  return out;
}

Vec decode_dense(const SaeModel& model, std::span<const double> z) {
  if (z.size() != model.latent_dim) throw ShapeError("dense code length does not match latent_dim");
  Vec out = model.pre_bias;
  for (std::size_t j = 0; j < model.latent_dim; ++j) {
    if (z[j] == 0.0) continue;
    for (std::size_t i = 0; i < model.dim; ++i) out[i] += model.dec(i, j) * z[j];
  }
  return out;
}

SparseCode encode_topk(const SaeModel& model, std::span<const double> x, std::optional<std::size_t> k) {
  return select_topk(pre_activations(model, x), k.value_or(model.k), model.dead_mask, model.selection);
}

Reconstruction reconstruct(const SaeModel& model, std::span<const double> x, std::optional<std::size_t> k) {
  Reconstruction r;
  r.code = encode_topk(model, x, k);
  r.x_hat = decode(model, r.code);
  return r;
}

double fvu(const EmbeddingBundle& batch, std::span<const double> reconstructions) {
  if (batch.rows < 2) throw DegenerateBatchError("FVU needs at least two rows");
  if (reconstructions.size() != batch.rows * batch.dim) throw ShapeError("reconstruction matrix has the wrong size");
  Vec mean(batch.dim, 0.0);
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const auto row = batch.row(r);
    for (std::size_t i = 0; i < batch.dim; ++i) mean[i] += row[i];
  }
  for (auto& m : mean) m /= static_cast<double>(batch.rows);
  double residual = 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const auto row = batch.row(r);
    for (std::size_t i = 0; i < batch.dim; ++i) {
      const double e = row[i] - reconstructions[r * batch.dim + i];
      const double c = row[i] - mean[i];
      residual += e * e;
      total += c * c;
    }
  }
  if (!(total > 0.0)) throw DegenerateBatchError("batch has zero variance");
  return residual / total;
}

double fvu(const SaeModel& model, const EmbeddingBundle& batch) {
  if (batch.dim != model.dim) throw ShapeError("batch dim does not match model dim");
  Vec recon;
  recon.reserve(batch.rows * batch.dim);
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const auto x_hat = reconstruct(model, batch.row_vec(r)).x_hat;
    recon.insert(recon.end(), x_hat.begin(), x_hat.end());
  }
  return fvu(batch, recon);
}

// ---------------------------------------------------------------------------
// VSSA checkpoint codec

std::string encode_model(const SaeModel& model) {
  model.validate();
  ByteWriter w;
  w.bytes(kMagic);
  w.u32(kVersion);
  w.u64(model.dim);
  w.u64(model.latent_dim);
  w.u64(model.k);
  for (std::size_t byte = 0; byte < (model.latent_dim + 7) / 8; ++byte) {
    std::uint8_t bits = 0;
    for (std::size_t b = 0; b < 8; ++b) {
      const std::size_t j = byte * 8 + b;
      if (j < model.latent_dim && model.is_dead(j)) bits |= static_cast<std::uint8_t>(1u << b);
    }
    w.u8(bits);
  }
  for (const auto* tensor : {&model.enc_weights, &model.dec_weights, &model.pre_bias, &model.enc_bias}) {
    for (const double v : *tensor) w.f32(static_cast<float>(v));
  }
  nlohmann::ordered_json trailer;
  try {
    trailer["config"] = nlohmann::ordered_json::parse(model.config_json);
  } catch (const nlohmann::json::exception&) {
    throw DataError("model config_json is not valid JSON");
  }
  trailer["selection"] = to_string(model.selection);
  trailer["steps"] = model.steps;
  const std::string blob = trailer.dump();
  w.u64(blob.size());
  w.bytes(blob);
  return std::move(w).take();
}

SaeModel decode_model(std::string_view bytes) {
  if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic) {
    throw FormatError("not a VSSA checkpoint (bad magic)");
  }
  ByteReader r(bytes.substr(kMagic.size()));
  const auto version = r.u32();
  if (version != kVersion) throw FormatError("unsupported VSSA version " + std::to_string(version));
  SaeModel m;
  m.dim = r.u64();
  m.latent_dim = r.u64();
  m.k = r.u64();
  if (m.dim == 0 || m.latent_dim == 0 || m.latent_dim % m.dim != 0) {
    throw FormatError("checkpoint latent_dim is not a positive multiple of dim");
  }
  if (m.k < 1 || m.k > m.latent_dim) throw FormatError("checkpoint k out of range");

  const std::uint64_t mask_bytes = (m.latent_dim + 7) / 8;
  const std::uint64_t weights = checked_count(m.latent_dim, m.dim);
  r.require(mask_bytes, "dead mask");
  r.require(checked_count(checked_count(weights, 2) + m.dim + m.latent_dim, 4) + mask_bytes, "parameter block");
  m.dead_mask.assign(m.latent_dim, 0);
  for (std::uint64_t byte = 0; byte < mask_bytes; ++byte) {
    const auto bits = r.u8();
    for (std::size_t b = 0; b < 8; ++b) {
      const std::size_t j = byte * 8 + b;
      const bool set = (bits >> b) & 1u;
      if (j >= m.latent_dim) {
        if (set) throw FormatError("dead mask has bits set beyond latent_dim");
      } else {
        m.dead_mask[j] = set ? 1 : 0;
      }
    }
  }
  const auto read_tensor = [&](Vec& t, std::uint64_t n) {
    t.resize(n);
    for (auto& v : t) v = r.f32();
  };
  read_tensor(m.enc_weights, weights);
  read_tensor(m.dec_weights, weights);
  read_tensor(m.pre_bias, m.dim);
  read_tensor(m.enc_bias, m.latent_dim);
  const auto blob_len = r.u64();
  const auto blob = r.bytes(blob_len);
  if (!r.exhausted()) throw FormatError("trailing bytes after VSSA trailer");
  try {
    const auto trailer = nlohmann::ordered_json::parse(blob);
    m.config_json = trailer.at("config").dump();
    m.selection = parse_topk_rule(trailer.at("selection").get<std::string>());
    m.steps = trailer.at("steps").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed VSSA trailer: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  m.validate();
  return m;
}

void save_model(const SaeModel& model, const std::filesystem::path& path) { write_file(path, encode_model(model)); }

SaeModel load_model(const std::filesystem::path& path) { return decode_model(read_file(path)); }

}  // namespace vs2
