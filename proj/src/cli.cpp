#include "vs2/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "vs2/binary_io.hpp"
#include "vs2/embedding_store.hpp"
#include "vs2/errors.hpp"
#include "vs2/evaluation.hpp"
#include "vs2/retrieval.hpp"
#include "vs2/sae_model.hpp"
#include "vs2/sae_training.hpp"
#include "vs2/steering.hpp"

namespace vs2::cli {

namespace {

namespace fs = std::filesystem;

// Numeric knobs share one struct so the config file and flags bind to the
// same storage regardless of subcommand.
struct Options {
  std::size_t threads = 0;

  // paths
  std::string csv, output, ids_file, class_names_file, embeddings, sae, head, log, cache, cache_bundle,
      query_retrieval, svg, vectors, output_table, output_vectors, test, eval_output, gain_loss;
  std::vector<std::string> meta;
  bool labels = false;
  bool as_head = false;

  // training
  std::string train_mode = "topk";
  std::string selection = "magnitude";
  std::size_t k = 64;
  std::size_t expansion = 4;
  double alpha = 1e-3;
  double w_aux = 0.8;
  double lr = 5e-4;
  double warmup = 0.05;
  std::size_t epochs = 100;
  std::size_t batch_size = 512;
  std::size_t dead_threshold = 100;
  std::uint64_t seed = 0;

  // steering
  std::string steer_mode = "steering";
  double gamma = kDefaultGamma;
  double lambda = kDefaultLambda;
  std::optional<std::size_t> k_override;
  std::optional<double> gamma_override;

  // retrieval
  std::string policy = "pseudo_query";
  std::size_t neighbors = kDefaultNeighbors;
  double rag_alpha = 0.5;
  bool force_equal_groups = false;
  std::string n_values = "10,25,50,100";

  // sweep / analysis
  std::string gammas = "1,1.25,1.5,1.75,2";
  std::string lambdas = "0,1,2.1,3,4";
  std::size_t m = 10;
  bool true_labels = false;
  std::size_t top = 10;
  std::size_t feature = 0;
};

std::vector<double> parse_doubles(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("invalid number '" + item + "' in list '" + list + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty list '" + list + "'");
  return out;
}

std::vector<std::size_t> parse_counts(const std::string& list) {
  std::vector<std::size_t> out;
  for (const double v : parse_doubles(list)) {
    if (v < 1 || v != static_cast<double>(static_cast<std::size_t>(v))) {
      throw ConfigError("invalid count in list '" + list + "'");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::vector<std::string> lines;
  std::stringstream ss(read_file(path));
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

void write_json(const fs::path& path, const Json& j) { write_file(path, j.dump(2) + "\n"); }

const CLI::Validator kWritable(
    [](std::string& value) {
      const auto parent = fs::path(value).parent_path();
      if (!parent.empty() && !fs::is_directory(parent)) return "directory does not exist: " + parent.string();
      return std::string();
    },
    "PATH(writable)");

SteeringConfig steering_config(const Options& o) {
  SteeringConfig c;
  c.gamma = o.gamma;
  c.lambda = o.lambda;
  c.mode = parse_steer_mode(o.steer_mode);
  c.k = o.k_override;
  c.validate();
  return c;
}

Json steering_json(const SteeringConfig& c) {
  Json j;
  j["mode"] = to_string(c.mode);
  j["gamma"] = c.gamma;
  j["lambda"] = c.lambda;
  if (c.k) j["k"] = *c.k;
  return j;
}

EvalOptions eval_options(const Options& o, Json config) {
  EvalOptions e;
  e.threads = resolve_threads(o.threads);
  e.config = std::move(config);
  return e;
}

std::unique_ptr<EmbeddingCache> open_cache(const Options& o) {
  if (!o.cache.empty()) return std::make_unique<EmbeddingCache>(CacheManifest::load(o.cache).open());
  return std::make_unique<EmbeddingCache>(std::make_shared<const EmbeddingBundle>(load_bundle(o.cache_bundle)));
}

// ---------------------------------------------------------------------------
// Subcommand bodies

void cmd_ingest(const Options& o, std::ostream& err) {
  auto bundle = import_csv(o.csv, o.labels);
  if (!o.ids_file.empty()) {
    bundle.ids = read_lines(o.ids_file);
  }
  if (!o.class_names_file.empty()) bundle.class_names = read_lines(o.class_names_file);
  for (const auto& kv : o.meta) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--meta expects key=value, got '" + kv + "'");
    bundle.meta[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  if (o.as_head) {
    if (bundle.class_names.empty()) throw ConfigError("--head requires --class-names");
    bundle.ids = bundle.class_names;
    save_head(ClassifierHead::from_bundle(bundle), o.output);
  } else {
    save_bundle(bundle, o.output);
  }
  err << "ingested " << bundle.rows << " rows of dim " << bundle.dim << "\n";
}

void cmd_train(const Options& o, std::ostream& err) {
  TrainConfig c;
  c.mode = parse_loss_mode(o.train_mode);
  c.selection = parse_topk_rule(o.selection);
  c.k = o.k;
  c.expansion_factor = o.expansion;
  c.alpha_l1 = o.alpha;
  c.w_aux = o.w_aux;
  c.lr_peak = o.lr;
  c.warmup_fraction = o.warmup;
  c.epochs = o.epochs;
  c.batch_size = o.batch_size;
  c.dead_threshold = o.dead_threshold;
  c.seed = o.seed;
  const auto data = load_bundle(o.embeddings);
  const auto result = train(c, data);
  save_model(result.model, o.output);
  if (!o.log.empty()) result.log.save(o.log);
  const auto& last = result.log.records.back();
  err << "trained " << result.model.steps << " steps; fvu " << result.log.records.front().fvu << " -> " << last.fvu
      << ", live latents " << last.live_latents << "\n";
}

void cmd_steer(const Options& o, std::ostream& err) {
  const auto model = load_model(o.sae);
  auto bundle = load_bundle(o.embeddings);
  const auto cfg = o.gamma_override ? SteeringConfig{} : steering_config(o);
  for (std::size_t r = 0; r < bundle.rows; ++r) {
    const auto x = bundle.row_vec(r);
    const Vec y = o.gamma_override ? manipulation_variant(model, x, *o.gamma_override, o.lambda) : sae_steer(model, x, cfg);
    for (std::size_t i = 0; i < bundle.dim; ++i) bundle.data[r * bundle.dim + i] = static_cast<float>(y[i]);
  }
  bundle.meta["steering"] = o.gamma_override ? "manipulation gamma=" + std::to_string(*o.gamma_override)
                                             : steering_json(cfg).dump();
  save_bundle(bundle, o.output);
  err << "steered " << bundle.rows << " rows\n";
}

void cmd_eval(const Options& o, std::ostream& err) {
  const auto test = load_bundle(o.embeddings);
  const auto head = load_head(o.head);
  Json config;
  config["command"] = "eval";
  SteerFn steer;
  std::optional<SaeModel> model;
  if (!o.sae.empty()) {
    model = load_model(o.sae);
    const auto cfg = steering_config(o);
    steer = make_sae_steer(*model, cfg);
    config["steering"] = steering_json(cfg);
  } else {
    config["steering"] = "identity";
  }
  const auto report = evaluate(test, head, steer, eval_options(o, config));
  write_json(o.output, report.to_json());
  if (!o.gain_loss.empty()) {
    const auto baseline = evaluate(test, head, {}, eval_options(o, Json::object()));
    write_json(o.gain_loss, gain_loss_json(class_deltas(baseline, report), o.top));
  }
  err << "top1 " << report.top1 << " top5 " << report.top5 << " (" << report.runtime_seconds << " s)\n";
}

Vs2ppConfig vs2pp_config(const Options& o) {
  Vs2ppConfig c;
  c.neighbors = o.neighbors;
  c.policy = parse_group_policy(o.policy);
  c.gamma = o.gamma;
  c.lambda = o.lambda;
  c.force_equal_groups = o.force_equal_groups;
  return c;
}

void cmd_vs2pp(const Options& o, std::ostream& err) {
  const auto test = load_bundle(o.embeddings);
  const auto head = load_head(o.head);
  const auto model = load_model(o.sae);
  const auto cache = open_cache(o);
  std::optional<EmbeddingBundle> queries;
  if (!o.query_retrieval.empty()) queries = load_bundle(o.query_retrieval);
  const auto cfg = vs2pp_config(o);
  Json config;
  config["command"] = "vs2pp";
  config["policy"] = to_string(cfg.policy);
  config["neighbors"] = cfg.neighbors;
  config["gamma"] = cfg.gamma;
  config["lambda"] = cfg.lambda;
  config["force_equal_groups"] = cfg.force_equal_groups;
  const auto steer = make_vs2pp_steer(model, *cache, head, test, queries ? &*queries : nullptr, cfg);
  const auto report = evaluate(test, head, steer, eval_options(o, config));
  write_json(o.output, report.to_json());
  err << "top1 " << report.top1 << " top5 " << report.top5 << "\n";
}

void cmd_rag(const Options& o, std::ostream& err) {
  const auto test = load_bundle(o.embeddings);
  const auto head = load_head(o.head);
  const auto cache = open_cache(o);
  std::optional<EmbeddingBundle> queries;
  if (!o.query_retrieval.empty()) queries = load_bundle(o.query_retrieval);
  Json config;
  config["command"] = "rag";
  config["alpha"] = o.rag_alpha;
  config["neighbors"] = o.neighbors;
  const auto steer = make_rag_steer(*cache, test, queries ? &*queries : nullptr, o.neighbors, o.rag_alpha);
  const auto report = evaluate(test, head, steer, eval_options(o, config));
  write_json(o.output, report.to_json());
  err << "top1 " << report.top1 << "\n";
}

void cmd_sweep(const Options& o, std::ostream& err) {
  const auto test = load_bundle(o.embeddings);
  const auto head = load_head(o.head);
  const auto model = load_model(o.sae);
  const auto grid = sweep(test, head, model, parse_doubles(o.gammas), parse_doubles(o.lambdas),
                          eval_options(o, Json::object()));
  Json j;
  j["config"] = {{"command", "sweep"}};
  j["top1"] = grid.baseline;
  j["grid"] = grid.to_json();
  write_json(o.output, j);
  if (!o.svg.empty()) write_file(o.svg, sweep_heatmap_svg(grid));
  const auto [g, l] = grid.best_cell();
  err << "best gamma " << grid.gammas[g] << " lambda " << grid.lambdas[l] << " top1 " << grid.accuracy[g][l] << "\n";
}

void cmd_ablate(const Options& o, std::ostream& err) {
  const auto test = load_bundle(o.embeddings);
  const auto head = load_head(o.head);
  const auto model = load_model(o.sae);
  const auto report = manipulation_ablation(test, head, model, o.lambda, o.gamma, eval_options(o, Json::object()));
  Json j = report.to_json();
  j["config"] = {{"command", "ablate"}, {"gamma", o.gamma}, {"lambda", o.lambda}};
  write_json(o.output, j);
  if (!report.ordering_holds()) err << "warning: manipulation ordering negate <= zero_out < baseline does not hold\n";
  err << "baseline " << report.baseline.top1 << " vs2 " << report.vs2.top1 << " zero_out " << report.zero_out.top1
      << " negate " << report.negate.top1 << "\n";
}

void cmd_prototypes(const Options& o, std::ostream& err) {
  const auto bundle = load_bundle(o.embeddings);
  const auto head = load_head(o.head);
  const auto model = load_model(o.sae);
  const auto table = build_prototypes(model, bundle, head, o.m, o.true_labels);

  EmbeddingBundle codes;
  codes.rows = table.num_classes;
  codes.dim = table.latent_dim;
  codes.ids = head.class_names();
  codes.class_names = head.class_names();
  codes.meta["kind"] = "prototype_codes";
  codes.meta["m"] = std::to_string(o.m);
  for (const double v : table.codes) codes.data.push_back(static_cast<float>(v));
  save_bundle(codes, o.output_table);

  EmbeddingBundle vectors;
  vectors.rows = table.num_classes;
  vectors.dim = model.dim;
  vectors.ids = head.class_names();
  vectors.class_names = head.class_names();
  vectors.meta["kind"] = "prototype_steering_vectors";
  vectors.meta["gamma"] = std::to_string(o.gamma);
  for (std::size_t c = 0; c < table.num_classes; ++c) {
    for (const double v : steering_vector_prototype(model, c, table, o.gamma).direction) {
      vectors.data.push_back(static_cast<float>(v));
    }
  }
  if (!o.output_vectors.empty()) save_bundle(vectors, o.output_vectors);

  if (!o.test.empty()) {
    if (o.eval_output.empty()) throw ConfigError("--test requires --eval-output");
    const auto test = load_bundle(o.test);
    Json config{{"command", "prototypes"}, {"m", o.m}, {"gamma", o.gamma}, {"lambda", o.lambda}};
    const auto report =
        evaluate(test, head, make_prototype_steer(model, table, test, o.gamma, o.lambda), eval_options(o, config));
    write_json(o.eval_output, report.to_json());
    err << "oracle prototype top1 " << report.top1 << "\n";
  }
  err << "built prototypes for " << table.num_classes << " classes\n";
}

void cmd_orthogonality(const Options& o, std::ostream& err) {
  const auto bundle = load_bundle(o.vectors);
  std::vector<SteeringVector> vectors;
  for (std::size_t r = 0; r < bundle.rows; ++r) {
    SteeringVector v;
    v.direction = bundle.row_vec(r);
    v.source = SteeringSource::Prototype;
    v.class_id = r;
    vectors.push_back(std::move(v));
  }
  const auto report = prototype_orthogonality(vectors, bundle.ids);
  write_json(o.output, report.to_json(o.top));
  err << "mean off-diagonal cosine " << report.mean_off_diagonal << "\n";
}

void cmd_coverage(const Options& o, std::ostream& err) {
  const auto model = load_model(o.sae);
  const auto bundle = load_bundle(o.embeddings);
  const auto report = concept_coverage(model, bundle, o.feature, o.m);
  write_json(o.output, report.to_json());
  if (report.degenerate) err << "warning: feature " << o.feature << " is zero on every listed row\n";
}

void cmd_topn(const Options& o, std::ostream& err) {
  const auto test = load_bundle(o.embeddings);
  const auto head = load_head(o.head);
  const auto model = load_model(o.sae);
  const auto cache = open_cache(o);
  std::optional<EmbeddingBundle> queries;
  if (!o.query_retrieval.empty()) queries = load_bundle(o.query_retrieval);
  const auto curve = topn_ablation(test, head, model, *cache, parse_counts(o.n_values), vs2pp_config(o),
                                   queries ? &*queries : nullptr, eval_options(o, Json::object()));
  Json j;
  j["config"] = {{"command", "topn"}, {"policy", o.policy}, {"gamma", o.gamma}, {"lambda", o.lambda}};
  j["curve"] = curve.to_json();
  write_json(o.output, j);
  if (!o.svg.empty()) write_file(o.svg, topn_curve_svg(curve));
  for (const auto& p : curve.points) err << "N=" << p.n << " top1 " << p.top1 << "\n";
}

// ---------------------------------------------------------------------------
// App construction

struct Command {
  CLI::App* app;
  void (*body)(const Options&, std::ostream&);
};

std::vector<Command> build(CLI::App& app, Options& o) {
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", "key=value config file; command-line flags override it");
  app.add_option("--threads", o.threads, "worker threads (default: VS2_THREADS or 1)");

  std::vector<Command> cmds;
  const auto input = [](CLI::App* s, const std::string& name, std::string& dst, const std::string& help) {
    return s->add_option(name, dst, help)->check(CLI::ExistingFile);
  };
  const auto output = [](CLI::App* s, const std::string& name, std::string& dst, const std::string& help) {
    return s->add_option(name, dst, help)->check(kWritable);
  };
  const auto steering_flags = [&](CLI::App* s) {
    s->add_option("--gamma", o.gamma, "amplification factor")->capture_default_str();
    s->add_option("--lambda", o.lambda, "steering magnitude")->capture_default_str();
  };
  const auto cache_flags = [&](CLI::App* s) {
    auto* manifest = input(s, "--cache", o.cache, "cache manifest (JSON)");
    auto* bundle = input(s, "--cache-bundle", o.cache_bundle, "cache VSEB used for both retrieval and steering");
    manifest->excludes(bundle);
    input(s, "--query-retrieval", o.query_retrieval, "retrieval-space embeddings of the test rows");
    s->add_option("--neighbors", o.neighbors, "neighbors retrieved per query")->capture_default_str();
  };

  auto* ingest = app.add_subcommand("ingest", "convert CSV embeddings to VSEB");
  input(ingest, "--csv", o.csv, "input CSV")->required();
  output(ingest, "--output", o.output, "output VSEB")->required();
  ingest->add_flag("--labels", o.labels, "last CSV column holds integer labels");
  input(ingest, "--ids", o.ids_file, "file with one row id per line");
  input(ingest, "--class-names", o.class_names_file, "file with one class name per line");
  ingest->add_option("--meta", o.meta, "metadata key=value (repeatable)")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  ingest->add_flag("--head", o.as_head, "write a classifier head (ids = class names)");
  cmds.push_back({ingest, cmd_ingest});

  auto* tr = app.add_subcommand("train-sae", "train a sparse autoencoder");
  input(tr, "--embeddings", o.embeddings, "training VSEB")->required();
  output(tr, "--output", o.output, "output VSSA checkpoint")->required();
  output(tr, "--log", o.log, "JSON-lines training log");
  tr->add_option("--mode", o.train_mode, "topk | l1 | pass")->capture_default_str()
      ->check(CLI::IsMember({"topk", "l1", "pass"}));
  tr->add_option("--selection", o.selection, "magnitude | signed")->capture_default_str()
      ->check(CLI::IsMember({"magnitude", "signed"}));
  tr->add_option("--k", o.k, "active latents per code")->capture_default_str();
  tr->add_option("--expansion", o.expansion, "latent_dim / dim")->capture_default_str();
  tr->add_option("--alpha", o.alpha, "l1 strength")->capture_default_str();
  tr->add_option("--w-aux", o.w_aux, "prototype-alignment weight")->capture_default_str();
  tr->add_option("--lr", o.lr, "peak learning rate")->capture_default_str();
  tr->add_option("--warmup", o.warmup, "warmup fraction of steps")->capture_default_str();
  tr->add_option("--epochs", o.epochs)->capture_default_str();
  tr->add_option("--batch-size", o.batch_size)->capture_default_str();
  tr->add_option("--dead-threshold", o.dead_threshold, "idle batches before a latent is pruned")->capture_default_str();
  tr->add_option("--seed", o.seed)->capture_default_str();
  cmds.push_back({tr, cmd_train});

  auto* steer = app.add_subcommand("steer", "steer every row of a bundle");
  input(steer, "--embeddings", o.embeddings, "input VSEB")->required();
  input(steer, "--sae", o.sae, "VSSA checkpoint")->required();
  output(steer, "--output", o.output, "output VSEB")->required();
  auto* mode = steer->add_option("--mode", o.steer_mode, "reconstruction | amplified | steering")
                   ->check(CLI::IsMember({"reconstruction", "amplified", "steering"}));
  steer->add_option("--k", o.k_override, "sparsity override");
  steering_flags(steer);
  auto* manip = steer->add_option("--gamma-override", o.gamma_override, "manipulation: 0 (zero-out) or -1 (negate)")
                    ->check(CLI::IsMember({"0", "-1"}));
  manip->excludes(mode);
  cmds.push_back({steer, cmd_steer});

  auto* ev = app.add_subcommand("eval", "zero-shot evaluation, optionally with SAE steering");
  input(ev, "--embeddings", o.embeddings, "labelled test VSEB")->required();
  input(ev, "--head", o.head, "classifier head VSEB")->required();
  output(ev, "--output", o.output, "report JSON")->required();
  input(ev, "--sae", o.sae, "VSSA checkpoint; enables steering");
  ev->add_option("--mode", o.steer_mode, "reconstruction | amplified | steering")
      ->check(CLI::IsMember({"reconstruction", "amplified", "steering"}));
  ev->add_option("--k", o.k_override, "sparsity override");
  output(ev, "--gain-loss", o.gain_loss, "per-class gain/loss table vs identity (JSON)");
  ev->add_option("--top", o.top, "rows in the gain/loss table")->capture_default_str();
  steering_flags(ev);
  cmds.push_back({ev, cmd_eval});

  auto* pp = app.add_subcommand("vs2pp", "retrieval-augmented contrastive steering evaluation");
  input(pp, "--embeddings", o.embeddings, "labelled test VSEB")->required();
  input(pp, "--head", o.head, "classifier head VSEB")->required();
  input(pp, "--sae", o.sae, "VSSA checkpoint")->required();
  output(pp, "--output", o.output, "report JSON")->required();
  cache_flags(pp);
  pp->add_option("--policy", o.policy, "oracle | pseudo_query | pseudo_majority")->capture_default_str()
      ->check(CLI::IsMember({"oracle", "pseudo_query", "pseudo_majority"}));
  pp->add_flag("--force-equal-groups", o.force_equal_groups, "use S- = S+ (the vector cancels)");
  steering_flags(pp);
  cmds.push_back({pp, cmd_vs2pp});

  auto* rag = app.add_subcommand("rag", "weighted retrieval-augmented embedding baseline");
  input(rag, "--embeddings", o.embeddings, "labelled test VSEB")->required();
  input(rag, "--head", o.head, "classifier head VSEB")->required();
  output(rag, "--output", o.output, "report JSON")->required();
  cache_flags(rag);
  rag->add_option("--alpha", o.rag_alpha, "weight of the query embedding")->capture_default_str();
  cmds.push_back({rag, cmd_rag});

  auto* sw = app.add_subcommand("sweep", "gamma x lambda sensitivity grid");
  input(sw, "--embeddings", o.embeddings, "labelled test VSEB")->required();
  input(sw, "--head", o.head, "classifier head VSEB")->required();
  input(sw, "--sae", o.sae, "VSSA checkpoint")->required();
  output(sw, "--output", o.output, "grid JSON")->required();
  output(sw, "--svg", o.svg, "heatmap SVG");
  sw->add_option("--gammas", o.gammas, "comma-separated gamma values")->capture_default_str();
  sw->add_option("--lambdas", o.lambdas, "comma-separated lambda values")->capture_default_str();
  cmds.push_back({sw, cmd_sweep});

  auto* ab = app.add_subcommand("ablate", "zero-out / negate manipulation ablation");
  input(ab, "--embeddings", o.embeddings, "labelled test VSEB")->required();
  input(ab, "--head", o.head, "classifier head VSEB")->required();
  input(ab, "--sae", o.sae, "VSSA checkpoint")->required();
  output(ab, "--output", o.output, "report JSON")->required();
  steering_flags(ab);
  cmds.push_back({ab, cmd_ablate});

  auto* pr = app.add_subcommand("prototypes", "oracle prototype codes and steering vectors");
  input(pr, "--embeddings", o.embeddings, "exemplar VSEB")->required();
  input(pr, "--head", o.head, "classifier head VSEB")->required();
  input(pr, "--sae", o.sae, "VSSA checkpoint")->required();
  output(pr, "--output-table", o.output_table, "prototype codes VSEB")->required();
  output(pr, "--output-vectors", o.output_vectors, "prototype steering vectors VSEB");
  pr->add_option("--m", o.m, "exemplars per class")->capture_default_str();
  pr->add_flag("--true-labels", o.true_labels, "assign exemplars by true label instead of prediction");
  input(pr, "--test", o.test, "labelled test VSEB for oracle-prototype evaluation");
  output(pr, "--eval-output", o.eval_output, "oracle-prototype report JSON");
  steering_flags(pr);
  cmds.push_back({pr, cmd_prototypes});

  auto* orth = app.add_subcommand("orthogonality", "pairwise cosine of per-class steering vectors");
  input(orth, "--vectors", o.vectors, "steering vectors VSEB (ids = class names)")->required();
  output(orth, "--output", o.output, "report JSON")->required();
  orth->add_option("--top", o.top, "pairs to list")->capture_default_str();
  cmds.push_back({orth, cmd_orthogonality});

  auto* cov = app.add_subcommand("coverage", "top-activating rows of one latent");
  input(cov, "--sae", o.sae, "VSSA checkpoint")->required();
  input(cov, "--embeddings", o.embeddings, "VSEB")->required();
  output(cov, "--output", o.output, "report JSON")->required();
  cov->add_option("--feature", o.feature, "latent index")->required();
  cov->add_option("--m", o.m, "rows to list")->capture_default_str();
  cmds.push_back({cov, cmd_coverage});

  auto* tn = app.add_subcommand("topn", "VS2++ accuracy as a function of N");
  input(tn, "--embeddings", o.embeddings, "labelled test VSEB")->required();
  input(tn, "--head", o.head, "classifier head VSEB")->required();
  input(tn, "--sae", o.sae, "VSSA checkpoint")->required();
  output(tn, "--output", o.output, "curve JSON")->required();
  output(tn, "--svg", o.svg, "curve SVG");
  cache_flags(tn);
  tn->add_option("--n-values", o.n_values, "comma-separated N values")->capture_default_str();
  tn->add_option("--policy", o.policy, "oracle | pseudo_query | pseudo_majority")->capture_default_str()
      ->check(CLI::IsMember({"oracle", "pseudo_query", "pseudo_majority"}));
  steering_flags(tn);
  cmds.push_back({tn, cmd_topn});

  for (auto& c : cmds) {
    if (c.app->get_name() == "vs2pp" || c.app->get_name() == "rag" || c.app->get_name() == "topn") {
      c.app->callback([app = c.app, &o] {
        if (app->count("--cache") + app->count("--cache-bundle") == 0) {
          throw CLI::RequiredError("--cache or --cache-bundle");
        }
      });
    }
  }
  return cmds;
}

// Splits out --config and returns the remaining args with the file's settings
// inserted directly after the subcommand name, so later flags win.
std::vector<std::string> apply_config(CLI::App& app, std::vector<std::string> args) {
  std::optional<std::string> config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config_path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (!config_path) return args;
  if (!fs::is_regular_file(*config_path)) throw CLI::ValidationError("--config", "file not found: " + *config_path);

  std::size_t sub_pos = args.size();
  CLI::App* sub = nullptr;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (auto* s = app.get_subcommand_no_throw(args[i]); s != nullptr) {
      sub = s;
      sub_pos = i;
      break;
    }
  }
  if (sub == nullptr) throw CLI::RequiredError("a subcommand");

  std::vector<std::string> injected;
  for (const auto& [key, value] : parse_config_text(read_file(*config_path))) {
    const std::string flag = "--" + key;
    const CLI::Option* opt = sub->get_option_no_throw(flag);
    if (opt == nullptr) opt = app.get_option_no_throw(flag);
    if (opt == nullptr) throw CLI::ExtrasError("unknown config key '" + key + "'", CLI::ExitCodes::ExtrasError);
    if (opt->get_items_expected_min() == 0) {
      if (value == "true" || value == "1") injected.push_back(flag);
    } else {
      injected.push_back(flag);
      injected.push_back(value);
    }
  }
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub_pos + 1), injected.begin(), injected.end());
  return args;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  std::vector<std::pair<std::string, std::string>> out;
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + " is not key=value");
    }
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') && value.back() == value.front()) {
      value = value.substr(1, value.size() - 2);
    }
    std::replace(key.begin(), key.end(), '_', '-');
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

std::size_t resolve_threads(std::size_t flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("VS2_THREADS"); env != nullptr) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return 1;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Sparse autoencoder training and sparse steering of cached embeddings", "vs2"};
  const auto cmds = build(app, o);
  try {
    auto argv = apply_config(app, args);
    std::reverse(argv.begin(), argv.end());
    app.parse(argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  for (const auto& c : cmds) {
    if (!c.app->parsed()) continue;
    try {
      c.body(o, err);
      return kExitOk;
    } catch (const Error& e) {
      err << "error: " << e.what() << "\n";
      return kExitDomainError;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return kExitDomainError;
    }
  }
  return kExitUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace vs2::cli
