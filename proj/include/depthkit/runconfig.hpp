#pragma once

// Run configuration as a canonical JSON document.  Parsing is strict: unknown
// keys anywhere in the tree are rejected so a typo like "warmup_step" cannot
// silently fall back to a default.  to_json() emits the fully resolved form
// (every default filled in), which the training command writes next to its
// outputs and embeds in checkpoints.

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "depthkit/model.hpp"
#include "depthkit/trainkit.hpp"

namespace depthkit {

struct RunConfig {
  ModelConfig model;        // model.variant comes from the "variant" object
  TrainConfig train;
  std::string corpus_path;  // data.corpus
  std::string doc_separator;  // data.separator; empty means no splitting
  std::string out_dir = "runs/out";
  uint64_t seed = 1;        // drives init, the split, and batch order
};

namespace detail {

inline void expect_keys(const nlohmann::json& j,
                        const std::vector<std::string>& allowed,
                        const std::string& where) {
  if (!j.is_object()) {
    throw ConfigError(where + " must be a JSON object");
  }
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const auto& k : allowed) {
      if (item.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw ConfigError("unknown config key " + where + "." + item.key());
    }
  }
}

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

inline uint64_t get_seed(const nlohmann::json& j, const std::string& key,
                         uint64_t fallback) {
  if (!j.contains(key)) return fallback;
  int64_t s = j.at(key).get<int64_t>();
  if (s < 0) throw ConfigError(key + " must be >= 0");
  return uint64_t(s);
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::expect_keys;
  using detail::get_or;
  RunConfig rc;
  expect_keys(j, {"model", "variant", "train", "data", "out_dir", "seed"},
              "$");

  if (j.contains("model")) {
    const auto& m = j.at("model");
    expect_keys(m,
                {"n_layers", "n_heads", "dim", "vocab", "context", "bias",
                 "lnv_enabled"},
                "model");
    rc.model.n_layers = get_or<int64_t>(m, "n_layers", rc.model.n_layers);
    rc.model.n_heads = get_or<int64_t>(m, "n_heads", rc.model.n_heads);
    rc.model.dim = get_or<int64_t>(m, "dim", rc.model.dim);
    rc.model.vocab = get_or<int64_t>(m, "vocab", rc.model.vocab);
    rc.model.context = get_or<int64_t>(m, "context", rc.model.context);
    rc.model.bias = get_or<bool>(m, "bias", rc.model.bias);
    rc.model.lnv_enabled = get_or<bool>(m, "lnv_enabled", rc.model.lnv_enabled);
  }

  std::string vname = "gd_lt";
  std::optional<std::string> ordering;
  std::optional<int> k;
  std::optional<std::string> lnv_mode;
  if (j.contains("variant")) {
    const auto& v = j.at("variant");
    expect_keys(v, {"name", "ordering", "k", "lnv_mode"}, "variant");
    vname = get_or<std::string>(v, "name", vname);
    if (v.contains("ordering")) ordering = v.at("ordering").get<std::string>();
    if (v.contains("k")) k = v.at("k").get<int>();
    if (v.contains("lnv_mode")) lnv_mode = v.at("lnv_mode").get<std::string>();
  }
  rc.model.variant = make_variant(vname, ordering, k, lnv_mode);

  if (j.contains("train")) {
    const auto& t = j.at("train");
    expect_keys(t,
                {"steps", "warmup_steps", "peak_lr", "min_lr_ratio", "beta1",
                 "beta2", "eps", "weight_decay", "clip_norm",
                 "batch_sequences", "grad_accum", "eval_every", "eval_batches",
                 "scalar_lr_mult", "val_fraction"},
                "train");
    TrainConfig& tc = rc.train;
    tc.steps = get_or<int64_t>(t, "steps", tc.steps);
    tc.warmup_steps = get_or<int64_t>(t, "warmup_steps", tc.warmup_steps);
    tc.peak_lr = get_or<double>(t, "peak_lr", tc.peak_lr);
    tc.min_lr_ratio = get_or<double>(t, "min_lr_ratio", tc.min_lr_ratio);
    tc.beta1 = get_or<double>(t, "beta1", tc.beta1);
    tc.beta2 = get_or<double>(t, "beta2", tc.beta2);
    tc.eps = get_or<double>(t, "eps", tc.eps);
    tc.weight_decay = get_or<double>(t, "weight_decay", tc.weight_decay);
    tc.clip_norm = get_or<double>(t, "clip_norm", tc.clip_norm);
    tc.batch_sequences = get_or<int64_t>(t, "batch_sequences", tc.batch_sequences);
    tc.grad_accum = get_or<int64_t>(t, "grad_accum", tc.grad_accum);
    tc.eval_every = get_or<int64_t>(t, "eval_every", tc.eval_every);
    tc.eval_batches = get_or<int64_t>(t, "eval_batches", tc.eval_batches);
    tc.scalar_lr_mult = get_or<double>(t, "scalar_lr_mult", tc.scalar_lr_mult);
    tc.val_fraction = get_or<double>(t, "val_fraction", tc.val_fraction);
  }

  if (j.contains("data")) {
    const auto& d = j.at("data");
    expect_keys(d, {"corpus", "separator"}, "data");
    rc.corpus_path = get_or<std::string>(d, "corpus", rc.corpus_path);
    rc.doc_separator = get_or<std::string>(d, "separator", rc.doc_separator);
  }

  rc.out_dir = get_or<std::string>(j, "out_dir", rc.out_dir);
  rc.seed = detail::get_seed(j, "seed", rc.seed);
  rc.train.seed = rc.seed;
  return rc;
}

inline nlohmann::json to_json(const RunConfig& rc) {
  nlohmann::json j;
  j["model"] = {{"n_layers", rc.model.n_layers},
                {"n_heads", rc.model.n_heads},
                {"dim", rc.model.dim},
                {"vocab", rc.model.vocab},
                {"context", rc.model.context},
                {"bias", rc.model.bias},
                {"lnv_enabled", rc.model.lnv_enabled}};
  const UpdateVariant& v = rc.model.variant;
  nlohmann::json vj;
  vj["name"] = variant_name(v);
  if (v.kind == UpdateKind::IMEX || v.kind == UpdateKind::PRKVerlet) {
    vj["ordering"] = v.ordering == Ordering::AMA ? "ama" : "mam";
  }
  if (v.kind == UpdateKind::IMEX) {
    vj["k"] = v.k;
    vj["lnv_mode"] =
        v.lnv_mode == LnvMode::EndOnly ? "end_only" : "every_update";
  }
  j["variant"] = vj;
  const TrainConfig& tc = rc.train;
  j["train"] = {{"steps", tc.steps},
                {"warmup_steps", tc.warmup_steps},
                {"peak_lr", tc.peak_lr},
                {"min_lr_ratio", tc.min_lr_ratio},
                {"beta1", tc.beta1},
                {"beta2", tc.beta2},
                {"eps", tc.eps},
                {"weight_decay", tc.weight_decay},
                {"clip_norm", tc.clip_norm},
                {"batch_sequences", tc.batch_sequences},
                {"grad_accum", tc.grad_accum},
                {"eval_every", tc.eval_every},
                {"eval_batches", tc.eval_batches},
                {"scalar_lr_mult", tc.scalar_lr_mult},
                {"val_fraction", tc.val_fraction}};
  j["data"] = {{"corpus", rc.corpus_path}, {"separator", rc.doc_separator}};
  j["out_dir"] = rc.out_dir;
  j["seed"] = rc.seed;
  return j;
}

// Canonical serialized form: sorted keys, two-space indent, trailing newline.
inline std::string canonical_config(const RunConfig& rc) {
  return to_json(rc).dump(2) + "\n";
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  try {
    return run_config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config value error in " + path + ": " + e.what());
  }
}

}  // namespace depthkit
