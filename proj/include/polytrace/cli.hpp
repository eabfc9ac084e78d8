#pragma once

// Command implementations behind the polytrace binary: synth-data, train,
// eval (with LOO aggregation), visualize. Flag > config file > default.
// Exit codes: 0 ok, 1 usage, 2 I/O, 3 config, 4 checkpoint, 5 numeric,
// 6 data/contract, 7 internal.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <optional>

#include "polytrace/checkpoint.hpp"
#include "polytrace/config.hpp"

namespace polytrace::cli {

using real_t = float;

enum ExitCode {
  kOk = 0,
  kUsage = 1,
  kIo = 2,
  kConfig = 3,
  kCheckpoint = 4,
  kNumeric = 5,
  kData = 6,
  kInternal = 7,
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, fusion, modality, protocol, holdout;
  std::optional<int> iterations;
  std::optional<double> learning_rate;
};

inline void apply_env_device(RunConfig& cfg) {
  if (const char* dev = std::getenv("POLYTRACE_DEVICE")) {
    if (*dev) cfg.device = dev;
  }
  if (cfg.device != "cpu")
    throw ConfigError("unsupported device '" + cfg.device + "'; supported devices: cpu");
}

inline RunConfig resolve_config(const std::string& config_path, const Overrides& ov) {
  RunConfig cfg = load_config(config_path);
  if (ov.seed) {
    cfg.data.seed = *ov.seed;
    cfg.train.seed = *ov.seed;
  }
  if (ov.out) cfg.out_dir = *ov.out;
  if (ov.fusion) cfg.fusion_mode = *ov.fusion;
  if (ov.modality) cfg.modality_mode = *ov.modality;
  if (ov.protocol) cfg.protocol = *ov.protocol;
  if (ov.holdout) cfg.holdout = *ov.holdout;
  if (ov.iterations) cfg.train.iterations = *ov.iterations;
  if (ov.learning_rate) cfg.train.learning_rate = *ov.learning_rate;
  apply_env_device(cfg);
  (void)cfg.model_config();   // validate mode strings eagerly
  (void)cfg.protocol_spec();  // validate protocol
  return cfg;
}

inline std::shared_ptr<const std::vector<RgbdSample<real_t>>> build_corpus(
    const RunConfig& cfg) {
  if (!cfg.external_manifest.empty())
    return std::make_shared<const std::vector<RgbdSample<real_t>>>(load_external<real_t>(
        cfg.external_root, cfg.external_manifest, cfg.data.image_size));
  return std::make_shared<const std::vector<RgbdSample<real_t>>>(
      generate_corpus<real_t>(cfg.data));
}

inline void ensure_writable_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ofstream probe(dir + "/.write_probe");
  if (!probe) throw IoError("output directory is not writable: " + dir);
  probe.close();
  fs::remove(dir + "/.write_probe", ec);
}

inline Models<real_t> build_models(const RunConfig& cfg) {
  Models<real_t> models(cfg.model_config());
  if (!cfg.encoder_weights_path.empty()) {
    nn::ParamSet<real_t> enc;
    models.gen.enc_rgb.collect(enc, "gen.enc_rgb");
    models.gen.enc_dep.collect(enc, "gen.enc_dep");
    load_weights_into(cfg.encoder_weights_path, enc);
  }
  if (!cfg.embedder_weights_path.empty()) {
    nn::ParamSet<real_t> emb;
    models.embedder.collect(emb);
    load_weights_into(cfg.embedder_weights_path, emb);
  }
  return models;
}

// ---------------------------------------------------------------------------

inline void do_synth_data(const RunConfig& cfg, const std::string& out_dir) {
  ensure_writable_dir(out_dir);
  auto corpus = generate_corpus<real_t>(cfg.data);
  save_corpus(corpus, out_dir);
  nlohmann::json meta;
  meta["config_hash"] = config_hash(cfg);
  meta["seed"] = cfg.data.seed;
  meta["n_samples"] = corpus.size();
  meta["image_size"] = cfg.data.image_size;
  std::ofstream mf(out_dir + "/corpus_meta.json");
  mf << meta.dump(2) << "\n";
  if (!mf) throw IoError("cannot write corpus metadata under: " + out_dir);
  std::cout << "wrote " << corpus.size() << " samples to " << out_dir << "\n";
}

inline void do_train(const RunConfig& cfg, const std::string& resume_path) {
  ensure_writable_dir(cfg.out_dir);
  auto corpus = build_corpus(cfg);
  auto split = make_split(corpus, cfg.protocol_spec(), cfg.data.seed, cfg.ratios);
  auto models = build_models(cfg);
  Trainer<real_t> trainer(models, split, cfg.train);

  const std::string cfg_hash = config_hash(cfg);
  std::int64_t start = 0;
  if (!resume_path.empty()) {
    auto info = load_checkpoint(resume_path, models, &trainer.generator_optimizer(),
                                &trainer.discriminator_optimizer());
    start = info.iteration;
    if (info.config_hash != cfg_hash)
      std::cerr << "warning: checkpoint config hash " << info.config_hash
                << " differs from current config " << cfg_hash << "\n";
  }

  {
    std::ofstream cf(cfg.out_dir + "/resolved_config.json");
    cf << to_json(cfg).dump(2) << "\n";
    if (!cf) throw IoError("cannot write resolved config under: " + cfg.out_dir);
  }

  const std::string log_path = cfg.out_dir + "/training_log.csv";
  std::ofstream log(log_path, start > 0 ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot open training log: " + log_path);
  if (start == 0) log << "# config_hash=" << cfg_hash << "\n" << step_report_header() << "\n";

  char ckpt_name[32];
  fit<real_t>(
      trainer, cfg.train, start,
      [&](std::int64_t iter, const StepReport& r) {
        log << step_report_csv(iter, r) << "\n";
        if (!log) throw IoError("training log write failure: " + log_path);
      },
      [&](std::int64_t iter) {
        std::snprintf(ckpt_name, sizeof(ckpt_name), "/ckpt_%06lld",
                      static_cast<long long>(iter));
        save_checkpoint(cfg.out_dir + ckpt_name, models, &trainer.generator_optimizer(),
                        &trainer.discriminator_optimizer(), iter, cfg.train.seed, cfg_hash);
      });
  log.flush();
  std::cout << "trained to iteration " << cfg.train.iterations << "; artifacts in "
            << cfg.out_dir << "\n";
}

inline EvalReport do_eval(const RunConfig& cfg, const std::string& checkpoint_path) {
  ensure_writable_dir(cfg.out_dir);
  auto corpus = build_corpus(cfg);
  auto split = make_split(corpus, cfg.protocol_spec(), cfg.data.seed, cfg.ratios);
  auto models = build_models(cfg);
  auto info = load_checkpoint<real_t>(checkpoint_path, models);
  const std::string cfg_hash = config_hash(cfg);
  if (info.config_hash != cfg_hash)
    std::cerr << "warning: checkpoint config hash " << info.config_hash
              << " differs from current config " << cfg_hash << "\n";

  EvalReport report = evaluate_protocol(models.gen, models.phi, split, cfg.target_bpcer);

  std::ofstream txt(cfg.out_dir + "/report.txt");
  txt << report_to_text(report) << "config_hash: " << cfg_hash << "\n";
  std::ofstream csv(cfg.out_dir + "/report.csv");
  csv << report_csv_header() << ",config_hash\n"
      << report_to_csv(report) << "," << cfg_hash << "\n";
  if (!txt || !csv) throw IoError("cannot write reports under: " + cfg.out_dir);
  std::cout << report_to_text(report);
  return report;
}

// Aggregates the acer column of several report.csv files into mean +/- std.
inline std::pair<double, double> do_eval_aggregate(const std::vector<std::string>& csvs,
                                                   const std::string& out_dir) {
  require(!csvs.empty(), "aggregate: no report files given");
  std::vector<double> acers;
  for (const auto& path : csvs) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read report csv: " + path);
    std::string header, row;
    std::getline(f, header);
    std::getline(f, row);
    auto split_cols = [](const std::string& line) {
      std::vector<std::string> cols;
      std::stringstream ss(line);
      std::string col;
      while (std::getline(ss, col, ',')) cols.push_back(col);
      return cols;
    };
    const auto header_cols = split_cols(header);
    const auto row_cols = split_cols(row);
    std::size_t acer_at = std::string::npos;
    for (std::size_t i = 0; i < header_cols.size(); ++i)
      if (header_cols[i] == "acer") acer_at = i;
    if (acer_at == std::string::npos || row_cols.size() <= acer_at ||
        row_cols[acer_at].empty())
      throw DataError("report csv lacks an acer value: " + path);
    acers.push_back(std::stod(row_cols[acer_at]));
  }
  auto [mean, sd] = aggregate_mean_std(acers);
  if (!out_dir.empty()) {
    ensure_writable_dir(out_dir);
    std::ofstream f(out_dir + "/aggregate.csv");
    f << "n,acer_mean,acer_std\n" << acers.size() << "," << fmt2(mean) << "," << fmt2(sd)
      << "\n";
    if (!f) throw IoError("cannot write aggregate under: " + out_dir);
  }
  std::printf("acer mean=%s std=%s over %zu runs\n", fmt2(mean).c_str(), fmt2(sd).c_str(),
              acers.size());
  return {mean, sd};
}

// Montage: one row per sample, six columns
// (rgb input/trace/renorm, depth input/trace/renorm).
template <class R>
Tensor<R> build_grid(Generator<R>& gen, const std::vector<RgbdSample<R>>& corpus,
                     const std::vector<int>& indices) {
  ag::NoGradGuard ng;
  const int S = corpus[indices[0]].rgb.dim(1);
  const int gap = 2;
  const int rows = static_cast<int>(indices.size());
  Tensor<R> grid({3, rows * S + (rows + 1) * gap, 6 * S + 7 * gap}, R(1));

  const int gh = grid.dim(1), gw = grid.dim(2);
  auto blit = [&](const Tensor<R>& panel, int row, int col) {
    // panel: [1|3,S,S] in [-1,1]
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const std::int64_t at =
              (static_cast<std::int64_t>(c) * gh + gap + row * (S + gap) + y) * gw + gap +
              col * (S + gap) + x;
          grid[at] = panel.dim(0) == 3
                         ? panel[(static_cast<std::int64_t>(c) * S + y) * S + x]
                         : panel[static_cast<std::int64_t>(y) * S + x];
        }
  };
  auto rescale_trace = [](Tensor<R> t) {  // [-2,2] -> [-1,1] for display
    for (auto& v : t.data) v *= R(0.5);
    return t;
  };

  for (int r = 0; r < rows; ++r) {
    std::vector<int> one = {indices[r]};
    auto fwd = gen.forward(gen.uses_rgb() ? stack_rgb(corpus, one) : Tensor<R>(),
                           gen.uses_dep() ? stack_dep(corpus, one) : Tensor<R>(), false);
    if (gen.uses_rgb()) {
      blit(slice_sample(fwd.input_rgb->value, 0), r, 0);
      blit(rescale_trace(slice_sample(fwd.trace_rgb->value, 0)), r, 1);
      blit(renormalize(slice_sample(fwd.trace_rgb->value, 0)), r, 2);
    }
    if (gen.uses_dep()) {
      blit(slice_sample(fwd.input_dep->value, 0), r, 3);
      blit(rescale_trace(slice_sample(fwd.trace_dep->value, 0)), r, 4);
      blit(renormalize(slice_sample(fwd.trace_dep->value, 0)), r, 5);
    }
  }
  return grid;
}

inline void do_visualize(const RunConfig& cfg, const std::string& checkpoint_path, int n) {
  if (n == 0) return;  // nothing to write
  require(n > 0, "visualize: n must be >= 0");
  ensure_writable_dir(cfg.out_dir);
  auto corpus = build_corpus(cfg);
  auto split = make_split(corpus, cfg.protocol_spec(), cfg.data.seed, cfg.ratios);
  auto models = build_models(cfg);
  auto info = load_checkpoint<real_t>(checkpoint_path, models);
  (void)info;

  std::vector<int> indices(split.test.begin(),
                           split.test.begin() + std::min<std::size_t>(n, split.test.size()));
  render_traces(models.gen, models.phi, *corpus, indices, cfg.out_dir + "/panels");
  auto grid = build_grid(models.gen, *corpus, indices);
  write_image(cfg.out_dir + "/grid.ppm", grid);
  std::cout << "wrote " << indices.size() << " sample rows to " << cfg.out_dir << "\n";
}

// ---------------------------------------------------------------------------

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const IoError*>(&e)) return kIo;
  if (dynamic_cast<const ConfigError*>(&e)) return kConfig;
  if (dynamic_cast<const CheckpointError*>(&e)) return kCheckpoint;
  if (dynamic_cast<const NumericError*>(&e)) return kNumeric;
  if (dynamic_cast<const DataError*>(&e)) return kData;
  if (dynamic_cast<const ContractError*>(&e)) return kData;
  return kInternal;
}

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{
      "polytrace: multi-modal spoof-trace disentanglement on RGB-D faces\n"
      "Trains a two-stream adversarial generator with cross-modality fusion,\n"
      "evaluates APCER/BPCER/ACER at a BPCER-anchored threshold, and renders\n"
      "disentangled traces."};
  app.footer(
      "exit codes: 0 ok, 1 usage, 2 I/O error, 3 config error, 4 checkpoint error,\n"
      "            5 numeric error, 6 data/contract error, 7 internal error\n"
      "environment: POLYTRACE_DEVICE selects the compute device (cpu)");
  app.require_subcommand(1);

  std::string config_path, out, resume, checkpoint, fusion, modality, protocol, holdout;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int iterations = -1, n_vis = 4;
  double lr = -1;
  std::vector<std::string> aggregate;

  auto add_common = [&](CLI::App* sub, bool with_modes) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--out", out, "output directory (overrides io.out_dir)");
    sub->add_option("--seed", seed, "seed override")->each([&](const std::string&) {
      seed_set = true;
    });
    if (with_modes) {
      sub->add_option("--fusion", fusion, "fusion mode: full|concat|none");
      sub->add_option("--modality", modality, "modality mode: both|rgb|dep");
      sub->add_option("--protocol", protocol, "protocol: grandtest|loo");
      sub->add_option("--holdout", holdout, "LOO held-out attack type");
    }
  };

  auto* synth = app.add_subcommand("synth-data", "generate the synthetic corpus to disk");
  add_common(synth, false);

  auto* train = app.add_subcommand("train", "train models, write log and checkpoints");
  add_common(train, true);
  train->add_option("--resume", resume, "checkpoint directory to resume from");
  train->add_option("--iterations", iterations, "iteration count override");
  train->add_option("--learning-rate", lr, "learning rate override");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint, write reports");
  add_common(eval, true);
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory");
  eval->add_option("--aggregate", aggregate,
                   "aggregate acer mean/std (sample std, n-1) over report.csv files");

  auto* vis = app.add_subcommand("visualize", "render disentangled traces");
  add_common(vis, true);
  vis->add_option("--checkpoint", checkpoint, "checkpoint directory");
  vis->add_option("-n,--num", n_vis, "number of test samples to render");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    Overrides ov;
    if (seed_set) ov.seed = seed;
    if (!out.empty()) ov.out = out;
    if (!fusion.empty()) ov.fusion = fusion;
    if (!modality.empty()) ov.modality = modality;
    if (!protocol.empty()) ov.protocol = protocol;
    if (!holdout.empty()) ov.holdout = holdout;
    if (iterations >= 0) ov.iterations = iterations;
    if (lr >= 0) ov.learning_rate = lr;
    RunConfig cfg = resolve_config(config_path, ov);

    if (synth->parsed()) {
      do_synth_data(cfg, out.empty() ? cfg.out_dir + "/corpus" : out);
    } else if (train->parsed()) {
      do_train(cfg, resume);
    } else if (eval->parsed()) {
      if (!aggregate.empty()) {
        do_eval_aggregate(aggregate, cfg.out_dir);
      } else {
        if (checkpoint.empty()) throw ConfigError("eval requires --checkpoint");
        do_eval(cfg, checkpoint);
      }
    } else if (vis->parsed()) {
      if (checkpoint.empty()) throw ConfigError("visualize requires --checkpoint");
      do_visualize(cfg, checkpoint, n_vis);
    }
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace polytrace::cli
