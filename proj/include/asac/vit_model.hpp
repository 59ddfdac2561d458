#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asac/attention.hpp"
#include "asac/layers.hpp"
#include "asac/tensor.hpp"
#include "asac/vq_controller.hpp"

namespace asac::model {

enum class HeadKind { multiclass, binary, multilabel };
enum class TaskMode { none, input, decoder, both };

std::string to_string(HeadKind kind);
std::string to_string(TaskMode mode);
HeadKind head_kind_from_string(const std::string& s);
TaskMode task_mode_from_string(const std::string& s);

/// Invalid or inconsistent configuration; `key` names the offending dotted path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error(key.empty() ? message : key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t channels = 1;
  std::size_t patch_size = 4;
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t model_dim = 64;
  std::size_t ffn_dim = 128;
  std::size_t num_classes = 2;
  HeadKind head_kind = HeadKind::binary;
  TaskMode task_mode = TaskMode::none;
  std::size_t num_tasks = 1;
  std::size_t task_dim = 8;  // decoder-side task embedding width
  bool use_asac = true;
  vq::ControllerConfig controller{};  // input_dim is derived from the sequence length
  double dropout_p = 0.1;
  double attention_dropout_p = 0.1;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_width() const { return channels * patch_size * patch_size; }
  std::size_t seq_len() const;
  std::size_t output_width() const { return head_kind == HeadKind::binary ? 1 : num_classes; }
  bool task_in_input() const { return task_mode == TaskMode::input || task_mode == TaskMode::both; }
  bool task_in_decoder() const { return task_mode == TaskMode::decoder || task_mode == TaskMode::both; }
  /// Controller settings with input_dim and decoder task width filled in.
  vq::ControllerConfig resolved_controller() const;
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& config);
nlohmann::json to_json(const vq::ControllerConfig& config);
/// Strict parse: unknown keys and type mismatches throw ConfigError naming the key path.
/// Missing keys keep the values already in `base`.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}, const std::string& path = "model");
vq::ControllerConfig controller_config_from_json(const nlohmann::json& j, vq::ControllerConfig base = {},
                                                 const std::string& path = "model.controller");

/// [channels x H x W] -> [num_patches x channels*p*p]; patches in row-major grid
/// order, each patch channel-major then row-major.
Tensor patchify(const Tensor& image, std::size_t patch_size);
/// Batched form: [batch x channels x H x W] -> [batch x num_patches x channels*p*p].
Tensor patchify_batch(const Tensor& images, std::size_t patch_size);

struct LayerTrace {
  Tensor scores;          // Z
  Tensor reconstruction;  // Zhat
  std::optional<vq::AttentionController::Output> controller;
};

struct ForwardResult {
  Tensor logits;                   // [batch x output_width]
  std::vector<LayerTrace> layers;  // empty for the baseline model
};

/// Patch transformer with ASAC or plain attention in every layer.
class AsacModel {
 public:
  AsacModel(const ModelConfig& config, std::uint64_t init_seed);
  AsacModel(const AsacModel&) = delete;
  AsacModel& operator=(const AsacModel&) = delete;
  AsacModel(AsacModel&&) = default;
  AsacModel& operator=(AsacModel&&) = default;

  /// Token sequence [batch x seq_len x model_dim]. task_ids is empty or one per image.
  Tensor embed(const Tensor& images, std::span<const std::size_t> task_ids, const ForwardContext& ctx) const;
  /// images: [batch x channels x H x W] with values in [0, 1].
  ForwardResult forward(const Tensor& images, std::span<const std::size_t> task_ids, const ForwardContext& ctx) const;

  /// One EMA step per controller from the traces of a training forward pass.
  void update_codebooks(const ForwardResult& result, std::mt19937_64& rng);

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  std::size_t num_layers() const { return blocks_.size(); }
  attention::MultiHeadAttention& attention(std::size_t layer) { return blocks_.at(layer).attn; }
  const attention::MultiHeadAttention& attention(std::size_t layer) const { return blocks_.at(layer).attn; }

 private:
  struct Block {
    LayerNorm ln1;
    attention::MultiHeadAttention attn;
    LayerNorm ln2;
    Linear ff1, ff2;
  };

  void check_task_ids(std::span<const std::size_t> task_ids, std::size_t batch) const;

  ModelConfig config_;
  ParameterStore store_;
  Linear patch_proj_;
  Tensor cls_token_;       // [1 x model_dim]
  Tensor pos_embedding_;   // [seq_len x model_dim]
  Tensor task_input_;      // [num_tasks x model_dim], input/both modes
  Tensor task_decoder_;    // [num_tasks x task_dim], decoder/both modes
  std::vector<Block> blocks_;
  LayerNorm final_ln_;
  Linear head_;
};

/// Little-endian checkpoint: "ASACCKPT", u32 version, u64 length + JSON config,
/// then per parameter u32 name length, name, u32 rank, u64 dims, f64 data.
inline constexpr std::uint32_t kCheckpointVersion = 1;
std::string serialize_checkpoint(const AsacModel& model);
AsacModel deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const AsacModel& model, const std::string& path);
AsacModel load_checkpoint(const std::string& path);
/// Copies every parameter value from src into dst (identical configs required).
void copy_parameters(const AsacModel& src, AsacModel& dst);

}  // namespace asac::model
