#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "dynser/common.hpp"
#include "dynser/mfcc.hpp"
#include "dynser/model.hpp"
#include "dynser/train.hpp"

namespace dynser {

inline nlohmann::json mfcc_config_to_json(const MfccConfig& c) {
  return nlohmann::json{{"sample_rate_hz", c.sample_rate_hz},
                        {"clip_seconds", c.clip_seconds},
                        {"frame_length", c.frame_length},
                        {"hop_length", c.hop_length},
                        {"fft_size", c.fft_size},
                        {"n_mels", c.n_mels},
                        {"n_mfcc", c.n_mfcc},
                        {"fmin_hz", c.fmin_hz},
                        {"fmax_hz", c.fmax_hz},
                        {"log_floor", c.log_floor}};
}

inline MfccConfig mfcc_config_from_json(const nlohmann::json& j) {
  MfccConfig c;
  c.sample_rate_hz = j.value("sample_rate_hz", c.sample_rate_hz);
  c.clip_seconds = j.value("clip_seconds", c.clip_seconds);
  c.frame_length = j.value("frame_length", c.frame_length);
  c.hop_length = j.value("hop_length", c.hop_length);
  c.fft_size = j.value("fft_size", c.fft_size);
  c.n_mels = j.value("n_mels", c.n_mels);
  c.n_mfcc = j.value("n_mfcc", c.n_mfcc);
  c.fmin_hz = j.value("fmin_hz", c.fmin_hz);
  c.fmax_hz = j.value("fmax_hz", c.fmax_hz);
  c.log_floor = j.value("log_floor", c.log_floor);
  return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"epochs", c.epochs},
                        {"lr", c.lr},
                        {"batch_size", c.batch_size},
                        {"beta1", c.beta1},
                        {"beta2", c.beta2},
                        {"adam_eps", c.adam_eps},
                        {"k_folds", c.k_folds},
                        {"track_train_ua", c.track_train_ua}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.k_folds = j.value("k_folds", c.k_folds);
  c.track_train_ua = j.value("track_train_ua", c.track_train_ua);
  return c;
}

struct PathsConfig {
  std::string manifest;
  std::string root;       // defaults to the manifest's directory
  std::string cache_dir;  // DYNSER_CACHE_DIR env var takes precedence
  std::string out_dir = "out";
};

// Merged view of every knob a run needs; echoed verbatim into reports.
struct RunConfig {
  MfccConfig audio;
  ModelHyper hyper;
  TrainConfig train;
  ModelVariant variant = ModelVariant::kProposed;
  PathsConfig paths;
  std::uint64_t seed = 42;
  bool quiet = false;
};

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  return nlohmann::json{{"audio", mfcc_config_to_json(c.audio)},
                        {"model",
                         {{"variant", variant_name(c.variant)},
                          {"hyper", hyper_to_json(c.hyper)}}},
                        {"train", train_config_to_json(c.train)},
                        {"paths",
                         {{"manifest", c.paths.manifest},
                          {"root", c.paths.root},
                          {"cache_dir", c.paths.cache_dir},
                          {"out_dir", c.paths.out_dir}}},
                        {"seed", c.seed}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  if (j.contains("audio")) c.audio = mfcc_config_from_json(j["audio"]);
  if (j.contains("model")) {
    const auto& m = j["model"];
    if (m.contains("variant")) {
      c.variant = variant_from_name(m["variant"].get<std::string>());
    }
    if (m.contains("hyper")) c.hyper = hyper_from_json(m["hyper"]);
  }
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    c.paths.manifest = p.value("manifest", c.paths.manifest);
    c.paths.root = p.value("root", c.paths.root);
    c.paths.cache_dir = p.value("cache_dir", c.paths.cache_dir);
    c.paths.out_dir = p.value("out_dir", c.paths.out_dir);
  }
  c.seed = j.value("seed", c.seed);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) {
    throw ParameterError("config: " + path + " is not valid JSON");
  }
  return run_config_from_json(j);
}

}  // namespace dynser
