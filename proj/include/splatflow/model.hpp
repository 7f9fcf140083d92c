#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "splatflow/flow.hpp"
#include "splatflow/gaussian.hpp"
#include "splatflow/renderer.hpp"
#include "splatflow/tape.hpp"

namespace splatflow {

struct ModelConfig {
  int hidden_dim = 128;
  int blocks = 4;
  int heads = 4;
  int registers = 8;
  int pos_embed_channels = 8;
  int patch_size = 8;
  int cond_grid = 8;  // patch grid side (image size / patch size)
  int ffn_mult = 4;   // GEGLU expansion
  int t_embed_dim = 128;
  double cond_drop_prob = 0.10;

  int token_in_width() const { return 4 * kParamChannels; }   // noisy + grad pairs
  int token_out_width() const { return 2 * kParamChannels; }  // x-prediction pairs
  int cond_in_channels() const { return 3 + 6 + pos_embed_channels; }
  int head_dim() const { return hidden_dim / heads; }

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
  std::string describe() const;
};

// Per-view patch tokens before the learned projection: pooled RGB (3),
// pooled Plucker rays (6); the learned positional embedding joins on-tape.
struct ConditionTokens {
  Eigen::MatrixXd features;  // (views * grid * grid) x 9
  int views = 0;
  int grid = 0;
};

ConditionTokens encode_condition(std::span<const View> views, int patch_size);

// [cos, sin] sinusoidal features of 1000 * t.
Eigen::MatrixXd timestep_embedding(double t, int dim);

struct ParameterStore {
  struct Entry {
    Eigen::MatrixXd value;
    Eigen::MatrixXd m, v;  // Adam moments
  };
  std::map<std::string, Entry> entries;  // name-ordered iteration

  Eigen::MatrixXd& at(const std::string& name);
  const Eigen::MatrixXd& at(const std::string& name) const;
  std::int64_t total_elements() const;
};

class DenoiserModel {
 public:
  DenoiserModel(const ModelConfig& cfg, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

  // Builds the forward graph on `tape` and returns the output node
  // ((N/2) x 2C x-prediction tokens). Gaussian tokens carry no positional
  // encoding; sequence is [gaussians || condition || registers].
  int forward(Tape& tape, int gauss_tokens, const ConditionTokens& cond, double t,
              bool drop_cond) const;

  // Inference-only convenience wrapper.
  Eigen::MatrixXd predict(const Eigen::MatrixXd& tokens, const ConditionTokens& cond,
                          double t, bool drop_cond) const;

 private:
  ModelConfig cfg_;
  ParameterStore store_;
};

// Binds a model and fixed conditioning into the sampler-facing interface.
class ConditionedDenoiser : public Denoiser {
 public:
  ConditionedDenoiser(const DenoiserModel& model, ConditionTokens cond)
      : model_(model), cond_(std::move(cond)) {}
  Eigen::MatrixXd predict(const Eigen::MatrixXd& tokens, double t,
                          bool drop_condition) override {
    return model_.predict(tokens, cond_, t, drop_condition);
  }

 private:
  const DenoiserModel& model_;
  ConditionTokens cond_;
};

struct Checkpoint {
  ModelConfig config;
  std::int64_t step = 0;
  NormStats stats;
  std::uint64_t rng_state = 0;
  bool rng_has_spare = false;
  double rng_spare = 0.0;
  std::string run_config_hash;
  ParameterStore store;
};

// Versioned binary container: config/stats/rng as JSON, parameters and
// optimizer moments as named float64 little-endian blobs. Round-trips
// bit-exactly.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Throws with both configs when they differ.
void ensure_config_match(const ModelConfig& expected, const ModelConfig& loaded);

}  // namespace splatflow
