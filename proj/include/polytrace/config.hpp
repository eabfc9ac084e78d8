#pragma once

// Single JSON config drives all commands: nested {data, model, train, eval,
// io} sections, unknown keys rejected, flag > file > default precedence.
// The content digest of the resolved config is stamped into every artifact.

#include <fstream>
#include <json.hpp>
#include <string>

#include "polytrace/training.hpp"

namespace polytrace {

struct RunConfig {
  // data
  SynthConfig data;
  SplitRatios ratios;
  std::string external_root;      // non-empty: load external corpus
  std::string external_manifest;

  // model
  double width_multiplier = 0.25;
  double disc_width_multiplier = 1.0;
  int n_scales = 2;
  int reduction = 8;
  int decoder_blocks = 3;
  std::string encoder_weights_path;
  std::string embedder_weights_path;

  // train
  TrainConfig train;
  std::string fusion_mode = "full";
  std::string modality_mode = "both";

  // eval
  std::string protocol = "grandtest";
  std::string holdout = "glasses";
  double target_bpcer = 1.0;

  // io
  std::string out_dir = "runs/default";
  std::string device = "cpu";

  ModelConfig model_config() const {
    ModelConfig mc;
    mc.gen.width_mult = width_multiplier;
    mc.gen.reduction = reduction;
    mc.gen.decoder_blocks = decoder_blocks;
    mc.gen.fusion = fusion_mode_from(fusion_mode);
    mc.gen.modality = modality_mode_from(modality_mode);
    mc.disc_width_mult = disc_width_multiplier;
    mc.n_scales = n_scales;
    mc.seed = train.seed;
    return mc;
  }

  ProtocolSpec protocol_spec() const {
    ProtocolSpec ps;
    if (protocol == "grandtest") {
      ps.protocol = Protocol::grandtest;
    } else if (protocol == "loo") {
      ps.protocol = Protocol::loo;
      ps.holdout = attack_from(holdout);
    } else {
      throw ConfigError("unknown protocol: " + protocol);
    }
    return ps;
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& section,
                           std::initializer_list<const char*> known) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown config key: " + section + "." + it.key());
  }
}

template <class T>
void get_to(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

inline void parse_into(const nlohmann::json& j, RunConfig& cfg) {
  detail::reject_unknown(j, "", {"data", "model", "train", "eval", "io"});
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown(d, "data",
                           {"n_identities", "n_per_identity", "attack_types", "image_size",
                            "seed", "split", "external_root", "external_manifest"});
    detail::get_to(d, "n_identities", cfg.data.n_identities);
    detail::get_to(d, "n_per_identity", cfg.data.n_per_identity);
    detail::get_to(d, "image_size", cfg.data.image_size);
    detail::get_to(d, "seed", cfg.data.seed);
    if (d.contains("attack_types")) {
      cfg.data.attack_types.clear();
      for (const auto& a : d.at("attack_types"))
        cfg.data.attack_types.push_back(attack_from(a.get<std::string>()));
    }
    if (d.contains("split")) {
      const auto& s = d.at("split");
      detail::reject_unknown(s, "data.split", {"train", "val", "test"});
      detail::get_to(s, "train", cfg.ratios.train);
      detail::get_to(s, "val", cfg.ratios.val);
      detail::get_to(s, "test", cfg.ratios.test);
    }
    detail::get_to(d, "external_root", cfg.external_root);
    detail::get_to(d, "external_manifest", cfg.external_manifest);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown(m, "model",
                           {"width_multiplier", "disc_width_multiplier", "n_scales",
                            "reduction", "decoder_blocks", "encoder_weights_path",
                            "embedder_weights_path"});
    detail::get_to(m, "width_multiplier", cfg.width_multiplier);
    detail::get_to(m, "disc_width_multiplier", cfg.disc_width_multiplier);
    detail::get_to(m, "n_scales", cfg.n_scales);
    detail::get_to(m, "reduction", cfg.reduction);
    detail::get_to(m, "decoder_blocks", cfg.decoder_blocks);
    detail::get_to(m, "encoder_weights_path", cfg.encoder_weights_path);
    detail::get_to(m, "embedder_weights_path", cfg.embedder_weights_path);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown(
        t, "train",
        {"batch_size", "learning_rate", "iterations", "seed", "fusion_mode",
         "modality_mode", "center_update_rate", "stop_trace_grad_for_classifier",
         "mix_probability", "checkpoint_every", "weights"});
    detail::get_to(t, "batch_size", cfg.train.batch_size);
    detail::get_to(t, "learning_rate", cfg.train.learning_rate);
    detail::get_to(t, "iterations", cfg.train.iterations);
    detail::get_to(t, "seed", cfg.train.seed);
    detail::get_to(t, "fusion_mode", cfg.fusion_mode);
    detail::get_to(t, "modality_mode", cfg.modality_mode);
    detail::get_to(t, "center_update_rate", cfg.train.center_update_rate);
    detail::get_to(t, "stop_trace_grad_for_classifier",
                   cfg.train.stop_trace_grad_for_classifier);
    detail::get_to(t, "mix_probability", cfg.train.mix_probability);
    detail::get_to(t, "checkpoint_every", cfg.train.checkpoint_every);
    if (t.contains("weights")) {
      const auto& w = t.at("weights");
      detail::reject_unknown(w, "train.weights",
                             {"alpha1", "alpha2", "alpha3", "alpha4", "alpha5", "alpha6",
                              "alpha7", "alpha8", "lambda_t"});
      detail::get_to(w, "alpha1", cfg.train.weights.alpha1);
      detail::get_to(w, "alpha2", cfg.train.weights.alpha2);
      detail::get_to(w, "alpha3", cfg.train.weights.alpha3);
      detail::get_to(w, "alpha4", cfg.train.weights.alpha4);
      detail::get_to(w, "alpha5", cfg.train.weights.alpha5);
      detail::get_to(w, "alpha6", cfg.train.weights.alpha6);
      detail::get_to(w, "alpha7", cfg.train.weights.alpha7);
      detail::get_to(w, "alpha8", cfg.train.weights.alpha8);
      detail::get_to(w, "lambda_t", cfg.train.weights.lambda_t);
    }
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::reject_unknown(e, "eval", {"protocol", "holdout", "target_bpcer"});
    detail::get_to(e, "protocol", cfg.protocol);
    detail::get_to(e, "holdout", cfg.holdout);
    detail::get_to(e, "target_bpcer", cfg.target_bpcer);
  }
  if (j.contains("io")) {
    const auto& io = j.at("io");
    detail::reject_unknown(io, "io", {"out_dir", "device"});
    detail::get_to(io, "out_dir", cfg.out_dir);
    detail::get_to(io, "device", cfg.device);
  }
}

inline RunConfig load_config(const std::string& path) {
  RunConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config parse failure in " + path + ": " + e.what());
  }
  parse_into(j, cfg);
  return cfg;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  nlohmann::json attacks = nlohmann::json::array();
  for (auto a : c.data.attack_types) attacks.push_back(to_string(a));
  j["data"] = {{"n_identities", c.data.n_identities},
               {"n_per_identity", c.data.n_per_identity},
               {"attack_types", attacks},
               {"image_size", c.data.image_size},
               {"seed", c.data.seed},
               {"split",
                {{"train", c.ratios.train}, {"val", c.ratios.val}, {"test", c.ratios.test}}},
               {"external_root", c.external_root},
               {"external_manifest", c.external_manifest}};
  j["model"] = {{"width_multiplier", c.width_multiplier},
                {"disc_width_multiplier", c.disc_width_multiplier},
                {"n_scales", c.n_scales},
                {"reduction", c.reduction},
                {"decoder_blocks", c.decoder_blocks},
                {"encoder_weights_path", c.encoder_weights_path},
                {"embedder_weights_path", c.embedder_weights_path}};
  j["train"] = {{"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"iterations", c.train.iterations},
                {"seed", c.train.seed},
                {"fusion_mode", c.fusion_mode},
                {"modality_mode", c.modality_mode},
                {"center_update_rate", c.train.center_update_rate},
                {"stop_trace_grad_for_classifier", c.train.stop_trace_grad_for_classifier},
                {"mix_probability", c.train.mix_probability},
                {"checkpoint_every", c.train.checkpoint_every},
                {"weights",
                 {{"alpha1", c.train.weights.alpha1},
                  {"alpha2", c.train.weights.alpha2},
                  {"alpha3", c.train.weights.alpha3},
                  {"alpha4", c.train.weights.alpha4},
                  {"alpha5", c.train.weights.alpha5},
                  {"alpha6", c.train.weights.alpha6},
                  {"alpha7", c.train.weights.alpha7},
                  {"alpha8", c.train.weights.alpha8},
                  {"lambda_t", c.train.weights.lambda_t}}}};
  j["eval"] = {{"protocol", c.protocol},
               {"holdout", c.holdout},
               {"target_bpcer", c.target_bpcer}};
  j["io"] = {{"out_dir", c.out_dir}, {"device", c.device}};
  return j;
}

// Digest of the canonical (sorted-key) dump of the resolved config. The io
// section is excluded: output placement is not part of run semantics.
inline std::string config_hash(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("io");
  const std::string dump = j.dump();
  return hex64(fnv1a64(dump.data(), dump.size()));
}

}  // namespace polytrace
