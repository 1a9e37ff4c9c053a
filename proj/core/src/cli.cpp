#include "xfdreid/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "xfdreid/common.hpp"
#include "xfdreid/datamodel.hpp"
#include "xfdreid/evaluation.hpp"
#include "xfdreid/gradcheck.hpp"
#include "xfdreid/pooling.hpp"
#include "xfdreid/retrieval.hpp"
#include "xfdreid/synthfix.hpp"
#include "xfdreid/training.hpp"

namespace xfdreid::cli {

namespace {

using ordered_json = nlohmann::ordered_json;

int env_threads() {
  if (const char* v = std::getenv("XFDREID_THREADS")) {
    const int n = std::atoi(v);
    if (n >= 1) return n;
  }
  return 1;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::io_error, "cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

ordered_json input_entry(const std::string& path) {
  ordered_json j;
  j["file"] = std::filesystem::path(path).filename().string();
  j["fnv1a64"] = hex64(hash_file(path));
  return j;
}

// Binary artifacts cannot embed provenance, so they get a .meta.json sidecar.
void write_meta_sidecar(const std::string& artifact_path, const ordered_json& meta) {
  std::ofstream out(artifact_path + ".meta.json", std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot write meta sidecar for '" + artifact_path + "'");
  out << meta.dump(2) << "\n";
}

// ------------------------------------------------------------------- synth

struct SynthArgs {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

int run_synth(const SynthArgs& args) {
  FixtureConfig config;
  if (!args.config_path.empty())
    config = fixture_config_from_json_text(read_text_file(args.config_path));
  if (args.seed_set) config.seed = args.seed;

  Fixture fixture = generate(config);
  FixturePaths paths = write_fixture(args.out_dir, fixture, config.emit_flip);

  ordered_json meta;
  meta["tool"] = "synth";
  meta["config"] = ordered_json::parse(fixture_config_to_json_text(config));
  write_meta_sidecar(paths.features, meta);

  std::cout << "wrote " << paths.features << "\n";
  std::cout << "wrote " << paths.manifest << "\n";
  std::cout << "wrote " << paths.corruption << "\n";
  if (!paths.flip_features.empty()) std::cout << "wrote " << paths.flip_features << "\n";
  return 0;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string features, manifest, config_path, out, init;
  int stage = 1;
  std::string preset;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string mode;
  int max_epochs = -1;
  double base_lr = -1.0;
  int batch_size = -1;
  bool dump_config = false;
};

int run_train(const TrainArgs& args) {
  ordered_json overrides;
  if (!args.mode.empty()) overrides["mode"] = args.mode;
  if (args.max_epochs >= 0) overrides["max_epochs"] = args.max_epochs;
  if (args.base_lr >= 0) overrides["base_lr"] = args.base_lr;
  if (args.batch_size >= 0) overrides["batch_size"] = args.batch_size;
  if (args.seed_set) overrides["seed"] = args.seed;
  if (!args.preset.empty()) overrides["preset"] = args.preset;

  const std::string config_text =
      args.config_path.empty() ? std::string() : read_text_file(args.config_path);
  TrainConfig config = resolve_train_config(stage_from_int(args.stage), "ours", config_text,
                                            overrides.is_null() ? "" : overrides.dump());

  if (args.dump_config) {
    std::cout << train_config_to_json_text(config) << "\n";
    return 0;
  }
  if (args.features.empty() || args.manifest.empty())
    fail(Errc::usage_error, "train requires --features and --manifest");
  if (args.out.empty()) fail(Errc::usage_error, "train requires --out");

  Dataset dataset = load_dataset(args.features, args.manifest);

  TrainResult result;
  if (!args.init.empty()) {
    HeadFile init = load_head(args.init);
    result = train(dataset, config, init.params);
  } else {
    result = train(dataset, config);
  }

  for (const auto& e : result.history) {
    std::printf("epoch %d/%d lr %.6e total %.6f id %.6f tri %.6f i2t %.6f t2i %.6f\n", e.epoch + 1,
                config.schedule.max_epochs, e.lr, e.total, e.id, e.tri, e.i2t, e.t2i);
  }

  ordered_json meta;
  meta["tool"] = "train";
  meta["config"] = ordered_json::parse(train_config_to_json_text(config));
  ordered_json inputs;
  inputs["features"] = input_entry(args.features);
  inputs["manifest"] = input_entry(args.manifest);
  if (!args.init.empty()) inputs["init"] = input_entry(args.init);
  meta["inputs"] = inputs;

  HeadFile head;
  head.params = std::move(result.params);
  head.mode = config.mode;
  head.meta_json = meta.dump();
  save_head(args.out, head);
  std::cout << "wrote " << args.out << "\n";
  return 0;
}

// -------------------------------------------------------------------- pool

struct PoolArgs {
  std::string features, manifest, head, flip_features, out;
  std::string mode = "mean";
  std::string split = "all";
  std::string precision = "f64";
  std::uint64_t seed = 0;
};

int run_pool(const PoolArgs& args) {
  Dataset dataset = load_dataset(args.features, args.manifest, args.flip_features);
  const PoolingMode mode = pooling_mode_from_string(args.mode);
  const Precision precision = precision_from_string(args.precision);

  HeadFile head;
  const bool have_head = !args.head.empty();
  if (have_head) head = load_head(args.head);
  if (mode == PoolingMode::attn && !have_head)
    fail(Errc::bad_config, "attention pooling requires --head");

  Mat embeddings = embed_dataset(dataset, mode, have_head ? &head.params : nullptr, precision);

  FeatureFile out_file;
  out_file.feature_dim = dataset.feature_dim;
  out_file.seq_len = 1;
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    const TrackletRecord& rec = dataset.records[i];
    if (args.split != "all" && std::string(split_name(rec.split)) != args.split) continue;
    FrameFeatureSequence seq;
    seq.tracklet_index = rec.tracklet_index;
    seq.frames = embeddings.row(static_cast<Eigen::Index>(i));
    out_file.sequences.push_back(std::move(seq));
  }
  if (out_file.sequences.empty())
    fail(Errc::empty_protocol, "no tracklet matches split filter '" + args.split + "'");
  write_feature_file(args.out, out_file);

  ordered_json meta;
  meta["tool"] = "pool";
  ordered_json config;
  config["mode"] = args.mode;
  config["split"] = args.split;
  config["precision"] = args.precision;
  config["seed"] = args.seed;
  config["flip"] = !args.flip_features.empty();
  meta["config"] = config;
  ordered_json inputs;
  inputs["features"] = input_entry(args.features);
  inputs["manifest"] = input_entry(args.manifest);
  if (!args.flip_features.empty()) inputs["flip_features"] = input_entry(args.flip_features);
  if (have_head) inputs["head"] = input_entry(args.head);
  meta["inputs"] = inputs;
  write_meta_sidecar(args.out, meta);

  std::cout << "wrote " << args.out << " (" << out_file.sequences.size() << " embeddings)\n";
  return 0;
}

// ------------------------------------------------------------------ rerank

struct RerankArgs {
  std::string query_emb, gallery_emb, out;
  RerankParams params;
  bool gallery_only = false;
  int threads = env_threads();
  std::uint64_t seed = 0;
};

Mat embedding_rows(const std::string& path) {
  FeatureFile file = read_feature_file(path);
  if (file.seq_len != 1)
    fail(Errc::shape_mismatch, "'" + path + "' is not a pooled-embedding file (T != 1)");
  Mat rows(file.sequences.size(), file.feature_dim);
  for (std::size_t i = 0; i < file.sequences.size(); ++i)
    rows.row(static_cast<Eigen::Index>(i)) = file.sequences[i].frames.row(0);
  return rows;
}

int run_rerank(const RerankArgs& args) {
  // float32 storage rounds the unit norms, so repair them on load
  EmbeddingSet queries = make_embedding_set(embedding_rows(args.query_emb), {}, true);
  EmbeddingSet gallery = make_embedding_set(embedding_rows(args.gallery_emb), {}, true);

  RerankOptions options;
  options.gallery_only_neighborhoods = args.gallery_only;
  DistanceMatrix d = k_reciprocal_rerank(queries, gallery, args.params, args.threads, options);
  write_distance_file(args.out, d);

  ordered_json meta;
  meta["tool"] = "rerank";
  ordered_json config;
  config["k1"] = args.params.k1;
  config["k2"] = args.params.k2;
  config["lambda"] = args.params.lambda;
  config["gallery_only_neighborhoods"] = args.gallery_only;
  config["seed"] = args.seed;
  meta["config"] = config;
  ordered_json inputs;
  inputs["query_emb"] = input_entry(args.query_emb);
  inputs["gallery_emb"] = input_entry(args.gallery_emb);
  meta["inputs"] = inputs;
  write_meta_sidecar(args.out, meta);

  std::cout << "wrote " << args.out << " (" << d.num_queries() << " x " << d.num_gallery()
            << ")\n";
  return 0;
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  std::string features, manifest, head, flip_features, out;
  std::string mode;
  bool rerank = false;
  RerankParams params;
  int threads = env_threads();
  std::string precision = "f64";
  std::uint64_t seed = 0;
};

int run_eval(const EvalArgs& args) {
  Dataset dataset = load_dataset(args.features, args.manifest, args.flip_features);

  HeadFile head;
  const bool have_head = !args.head.empty();
  if (have_head) head = load_head(args.head);

  PoolingMode mode = PoolingMode::mean;
  if (!args.mode.empty())
    mode = pooling_mode_from_string(args.mode);
  else if (have_head)
    mode = head.mode;
  if (mode == PoolingMode::attn && !have_head)
    fail(Errc::bad_config, "attention pooling requires --head");

  EvalOptions options;
  options.mode = mode;
  if (args.rerank) options.rerank = args.params;
  options.threads = args.threads;
  options.precision = precision_from_string(args.precision);
  options.seed = args.seed;

  Mat embeddings =
      embed_dataset(dataset, mode, have_head ? &head.params : nullptr, options.precision);
  EvalReport report = evaluate(dataset, embeddings, options);

  std::cout << format_report_table(report);

  if (!args.out.empty()) {
    ordered_json extra;
    ordered_json inputs;
    inputs["features"] = input_entry(args.features);
    inputs["manifest"] = input_entry(args.manifest);
    if (!args.flip_features.empty()) inputs["flip_features"] = input_entry(args.flip_features);
    if (have_head) inputs["head"] = input_entry(args.head);
    extra["inputs"] = inputs;
    std::ofstream out(args.out, std::ios::trunc);
    if (!out) fail(Errc::io_error, "cannot open '" + args.out + "' for writing");
    out << report_to_json_text(report, extra.dump());
    std::cout << "wrote " << args.out << "\n";
  }
  return 0;
}

// ------------------------------------------------------------------ ablate

struct AblateArgs {
  std::string features, manifest, head_mean, head_attn, flip_features, out;
  RerankParams params;
  int threads = env_threads();
  std::string precision = "f64";
  std::uint64_t seed = 0;
};

int run_ablate(const AblateArgs& args) {
  Dataset dataset = load_dataset(args.features, args.manifest, args.flip_features);
  const Precision precision = precision_from_string(args.precision);

  HeadFile head_mean, head_attn;
  const bool have_mean_head = !args.head_mean.empty();
  const bool have_attn_head = !args.head_attn.empty();
  if (have_mean_head) head_mean = load_head(args.head_mean);
  if (have_attn_head) head_attn = load_head(args.head_attn);

  std::map<PoolingMode, Mat> embeddings;
  embeddings[PoolingMode::mean] = embed_dataset(
      dataset, PoolingMode::mean, have_mean_head ? &head_mean.params : nullptr, precision);
  if (have_attn_head)
    embeddings[PoolingMode::attn] =
        embed_dataset(dataset, PoolingMode::attn, &head_attn.params, precision);

  std::vector<AblationCell> grid;
  grid.push_back({"mean", PoolingMode::mean, false, args.params});
  grid.push_back({"mean + rerank", PoolingMode::mean, true, args.params});
  if (have_attn_head) {
    grid.push_back({"attn", PoolingMode::attn, false, args.params});
    grid.push_back({"attn + rerank", PoolingMode::attn, true, args.params});
  }

  auto rows = ablation_run(dataset, embeddings, grid, args.threads, args.seed, precision);
  std::cout << format_ablation_table(rows);

  if (!args.out.empty()) {
    ordered_json extra;
    ordered_json inputs;
    inputs["features"] = input_entry(args.features);
    inputs["manifest"] = input_entry(args.manifest);
    if (have_mean_head) inputs["head_mean"] = input_entry(args.head_mean);
    if (have_attn_head) inputs["head_attn"] = input_entry(args.head_attn);
    extra["inputs"] = inputs;
    extra["seed"] = args.seed;
    extra["precision"] = args.precision;
    std::ofstream out(args.out, std::ios::trunc);
    if (!out) fail(Errc::io_error, "cannot open '" + args.out + "' for writing");
    out << ablation_to_json_text(rows, extra.dump());
    std::cout << "wrote " << args.out << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  std::uint64_t seed = 7;
  int trials = 100;
  double tolerance = 1e-5;
};

int run_gradcheck_cmd(const GradcheckArgs& args) {
  GradCheckConfig config;
  config.seed = args.seed;
  config.trials = args.trials;
  GradCheckResult result = run_gradcheck(config);
  std::cout << format_gradcheck(result);
  const bool ok = result.all_below(args.tolerance);
  std::cout << (ok ? "PASS" : "FAIL") << " (tolerance " << args.tolerance << ")\n";
  return ok ? 0 : 1;
}

}  // namespace

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"tracklet-level person re-identification on precomputed frame embeddings"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "generate a deterministic synthetic dataset");
  synth->add_option("--config", synth_args.config_path, "fixture config JSON");
  synth->add_option("--out-dir", synth_args.out_dir, "output directory")->required();
  auto* synth_seed = synth->add_option("--seed", synth_args.seed, "override the config seed");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train the pooling head and losses");
  train_cmd->add_option("--features", train_args.features, "feature file");
  train_cmd->add_option("--manifest", train_args.manifest, "manifest CSV");
  train_cmd->add_option("--config", train_args.config_path, "training config JSON");
  train_cmd->add_option("--stage", train_args.stage, "training stage")->check(CLI::Range(1, 2));
  train_cmd->add_option("--preset", train_args.preset, "config preset (ours|baseline)");
  auto* train_seed = train_cmd->add_option("--seed", train_args.seed, "training seed");
  train_cmd->add_option("--out", train_args.out, "output head JSON");
  train_cmd->add_option("--init", train_args.init, "initial head (stage-2 fine-tuning)");
  train_cmd->add_option("--mode", train_args.mode, "pooling mode (mean|attn)");
  train_cmd->add_option("--max-epochs", train_args.max_epochs, "override max_epochs");
  train_cmd->add_option("--base-lr", train_args.base_lr, "override base_lr");
  train_cmd->add_option("--batch-size", train_args.batch_size, "override batch size (P*K, K=4)");
  train_cmd->add_flag("--dump-config", train_args.dump_config,
                      "print the resolved config and exit");

  PoolArgs pool_args;
  auto* pool = app.add_subcommand("pool", "pool tracklets into embeddings");
  pool->add_option("--features", pool_args.features)->required();
  pool->add_option("--manifest", pool_args.manifest)->required();
  pool->add_option("--mode", pool_args.mode, "mean|attn");
  pool->add_option("--head", pool_args.head, "trained head JSON");
  pool->add_option("--flip-features", pool_args.flip_features);
  pool->add_option("--split", pool_args.split, "all|train|query|gallery");
  pool->add_option("--precision", pool_args.precision, "f32|f64");
  pool->add_option("--seed", pool_args.seed);
  pool->add_option("--out", pool_args.out)->required();

  RerankArgs rerank_args;
  auto* rerank = app.add_subcommand("rerank", "k-reciprocal re-ranking of pooled embeddings");
  rerank->add_option("--query-emb", rerank_args.query_emb)->required();
  rerank->add_option("--gallery-emb", rerank_args.gallery_emb)->required();
  rerank->add_option("--k1", rerank_args.params.k1);
  rerank->add_option("--k2", rerank_args.params.k2);
  rerank->add_option("--lambda", rerank_args.params.lambda);
  rerank->add_flag("--gallery-only-neighborhoods", rerank_args.gallery_only);
  rerank->add_option("--threads", rerank_args.threads);
  rerank->add_option("--seed", rerank_args.seed);
  rerank->add_option("--out", rerank_args.out)->required();

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "score the three protocols and the overall mAP");
  eval_cmd->add_option("--features", eval_args.features)->required();
  eval_cmd->add_option("--manifest", eval_args.manifest)->required();
  eval_cmd->add_option("--head", eval_args.head);
  eval_cmd->add_option("--mode", eval_args.mode, "mean|attn");
  eval_cmd->add_option("--flip-features", eval_args.flip_features);
  eval_cmd->add_flag("--rerank", eval_args.rerank);
  eval_cmd->add_option("--k1", eval_args.params.k1);
  eval_cmd->add_option("--k2", eval_args.params.k2);
  eval_cmd->add_option("--lambda", eval_args.params.lambda);
  eval_cmd->add_option("--threads", eval_args.threads);
  eval_cmd->add_option("--precision", eval_args.precision);
  eval_cmd->add_option("--seed", eval_args.seed);
  eval_cmd->add_option("--out", eval_args.out, "report JSON path");

  AblateArgs ablate_args;
  auto* ablate = app.add_subcommand("ablate", "pooling-mode x re-ranking ablation table");
  ablate->add_option("--features", ablate_args.features)->required();
  ablate->add_option("--manifest", ablate_args.manifest)->required();
  ablate->add_option("--head-mean", ablate_args.head_mean);
  ablate->add_option("--head-attn", ablate_args.head_attn);
  ablate->add_option("--flip-features", ablate_args.flip_features);
  ablate->add_option("--k1", ablate_args.params.k1);
  ablate->add_option("--k2", ablate_args.params.k2);
  ablate->add_option("--lambda", ablate_args.params.lambda);
  ablate->add_option("--threads", ablate_args.threads);
  ablate->add_option("--precision", ablate_args.precision);
  ablate->add_option("--seed", ablate_args.seed);
  ablate->add_option("--out", ablate_args.out, "table JSON path");

  GradcheckArgs gradcheck_args;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gradcheck_cmd->add_option("--seed", gradcheck_args.seed);
  gradcheck_cmd->add_option("--trials", gradcheck_args.trials)->check(CLI::PositiveNumber);
  gradcheck_cmd->add_option("--tolerance", gradcheck_args.tolerance);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  synth_args.seed_set = synth_seed->count() > 0;
  train_args.seed_set = train_seed->count() > 0;

  try {
    if (app.got_subcommand(synth)) return run_synth(synth_args);
    if (app.got_subcommand(train_cmd)) return run_train(train_args);
    if (app.got_subcommand(pool)) return run_pool(pool_args);
    if (app.got_subcommand(rerank)) return run_rerank(rerank_args);
    if (app.got_subcommand(eval_cmd)) return run_eval(eval_args);
    if (app.got_subcommand(ablate)) return run_ablate(ablate_args);
    if (app.got_subcommand(gradcheck_cmd)) return run_gradcheck_cmd(gradcheck_args);
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return e.code() == Errc::usage_error ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int dispatch(const std::vector<std::string>& args) {
  std::vector<std::string> full;
  full.reserve(args.size() + 1);
  full.emplace_back("xfdreid");
  full.insert(full.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  argv.reserve(full.size());
  for (const auto& s : full) argv.push_back(s.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data());
}

}  // namespace xfdreid::cli
