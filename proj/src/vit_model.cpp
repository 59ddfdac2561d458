#include "asac/vit_model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "asac/binary_io.hpp"

namespace asac::io {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path);
}

}  // namespace asac::io

namespace asac::model {

using nlohmann::json;

std::string to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::multiclass: return "multiclass";
    case HeadKind::binary: return "binary";
    case HeadKind::multilabel: return "multilabel";
  }
  return "?";
}

std::string to_string(TaskMode mode) {
  switch (mode) {
    case TaskMode::none: return "none";
    case TaskMode::input: return "input";
    case TaskMode::decoder: return "decoder";
    case TaskMode::both: return "both";
  }
  return "?";
}

HeadKind head_kind_from_string(const std::string& s) {
  if (s == "multiclass") return HeadKind::multiclass;
  if (s == "binary") return HeadKind::binary;
  if (s == "multilabel") return HeadKind::multilabel;
  throw ConfigError("", "unknown head kind '" + s + "'");
}

TaskMode task_mode_from_string(const std::string& s) {
  if (s == "none") return TaskMode::none;
  if (s == "input") return TaskMode::input;
  if (s == "decoder") return TaskMode::decoder;
  if (s == "both") return TaskMode::both;
  throw ConfigError("", "unknown task mode '" + s + "'");
}

std::size_t ModelConfig::seq_len() const { return num_patches() + 1 + (task_in_input() ? 1 : 0); }

vq::ControllerConfig ModelConfig::resolved_controller() const {
  vq::ControllerConfig c = controller;
  c.input_dim = seq_len();
  c.decoder_task_dim = task_in_decoder() ? task_dim : 0;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& msg) { throw ConfigError("model." + key, msg); };
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
    fail("patch_size", "image_size must be a positive multiple of patch_size");
  if (channels == 0) fail("channels", "must be positive");
  if (num_layers == 0) fail("num_layers", "must be positive");
  if (num_heads == 0 || model_dim % num_heads != 0) fail("num_heads", "must divide model_dim");
  if (ffn_dim == 0) fail("ffn_dim", "must be positive");
  if (head_kind != HeadKind::binary && num_classes < 2) fail("num_classes", "must be at least 2");
  if (task_mode != TaskMode::none && num_tasks == 0) fail("num_tasks", "must be positive");
  if (task_in_decoder() && !use_asac) fail("task_mode", "decoder task input requires use_asac");
  if (task_in_decoder() && task_dim == 0) fail("task_dim", "must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout_p", "must lie in [0, 1)");
  if (!(attention_dropout_p >= 0.0 && attention_dropout_p < 1.0)) fail("attention_dropout_p", "must lie in [0, 1)");
  if (use_asac) {
    try {
      resolved_controller().validate();
    } catch (const std::exception& e) {
      fail("controller", e.what());
    }
  }
}

json to_json(const vq::ControllerConfig& c) {
  return json{{"hidden_dim", c.hidden_dim},         {"latent_dim", c.latent_dim},
              {"codebook_dim", c.codebook_dim},     {"codebook_size", c.codebook_size},
              {"commitment_cost", c.commitment_cost}, {"ema_decay", c.ema_decay},
              {"dead_threshold", c.dead_threshold}, {"leaky_slope", c.leaky_slope}};
}

json to_json(const ModelConfig& m) {
  return json{{"image_size", m.image_size},
              {"channels", m.channels},
              {"patch_size", m.patch_size},
              {"num_layers", m.num_layers},
              {"num_heads", m.num_heads},
              {"model_dim", m.model_dim},
              {"ffn_dim", m.ffn_dim},
              {"num_classes", m.num_classes},
              {"head_kind", to_string(m.head_kind)},
              {"task_mode", to_string(m.task_mode)},
              {"num_tasks", m.num_tasks},
              {"task_dim", m.task_dim},
              {"use_asac", m.use_asac},
              {"controller", to_json(m.controller)},
              {"dropout_p", m.dropout_p},
              {"attention_dropout_p", m.attention_dropout_p}};
}

namespace {

template <class T>
void read_field(const json& value, const std::string& key, T& out) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!value.is_boolean()) throw ConfigError(key, "expected a boolean");
      out = value.get<bool>();
    } else if constexpr (std::is_same_v<T, std::size_t>) {
      if (!value.is_number_unsigned() && !(value.is_number_integer() && value.get<long long>() >= 0))
        throw ConfigError(key, "expected a non-negative integer");
      out = value.get<std::size_t>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!value.is_number()) throw ConfigError(key, "expected a number");
      out = value.get<T>();
    } else {
      if (!value.is_string()) throw ConfigError(key, "expected a string");
      out = value.get<T>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(key, e.what());
  }
}

void require_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path, "expected an object");
}

}  // namespace

vq::ControllerConfig controller_config_from_json(const json& j, vq::ControllerConfig c, const std::string& path) {
  require_object(j, path);
  for (const auto& [key, value] : j.items()) {
    const std::string k = path + "." + key;
    if (key == "hidden_dim") read_field(value, k, c.hidden_dim);
    else if (key == "latent_dim") read_field(value, k, c.latent_dim);
    else if (key == "codebook_dim") read_field(value, k, c.codebook_dim);
    else if (key == "codebook_size") read_field(value, k, c.codebook_size);
    else if (key == "commitment_cost") read_field(value, k, c.commitment_cost);
    else if (key == "ema_decay") read_field(value, k, c.ema_decay);
    else if (key == "dead_threshold") read_field(value, k, c.dead_threshold);
    else if (key == "leaky_slope") read_field(value, k, c.leaky_slope);
    else throw ConfigError(k, "unknown key");
  }
  return c;
}

ModelConfig model_config_from_json(const json& j, ModelConfig m, const std::string& path) {
  require_object(j, path);
  for (const auto& [key, value] : j.items()) {
    const std::string k = path + "." + key;
    if (key == "image_size") read_field(value, k, m.image_size);
    else if (key == "channels") read_field(value, k, m.channels);
    else if (key == "patch_size") read_field(value, k, m.patch_size);
    else if (key == "num_layers") read_field(value, k, m.num_layers);
    else if (key == "num_heads") read_field(value, k, m.num_heads);
    else if (key == "model_dim") read_field(value, k, m.model_dim);
    else if (key == "ffn_dim") read_field(value, k, m.ffn_dim);
    else if (key == "num_classes") read_field(value, k, m.num_classes);
    else if (key == "head_kind") {
      std::string s;
      read_field(value, k, s);
      try {
        m.head_kind = head_kind_from_string(s);
      } catch (const ConfigError& e) {
        throw ConfigError(k, e.what());
      }
    } else if (key == "task_mode") {
      std::string s;
      read_field(value, k, s);
      try {
        m.task_mode = task_mode_from_string(s);
      } catch (const ConfigError& e) {
        throw ConfigError(k, e.what());
      }
    } else if (key == "num_tasks") read_field(value, k, m.num_tasks);
    else if (key == "task_dim") read_field(value, k, m.task_dim);
    else if (key == "use_asac") read_field(value, k, m.use_asac);
    else if (key == "controller") m.controller = controller_config_from_json(value, m.controller, k);
    else if (key == "dropout_p") read_field(value, k, m.dropout_p);
    else if (key == "attention_dropout_p") read_field(value, k, m.attention_dropout_p);
    else throw ConfigError(k, "unknown key");
  }
  return m;
}

Tensor patchify_batch(const Tensor& images, std::size_t p) {
  if (images.rank() != 4) throw ContractError("patchify: expected [batch x channels x H x W], got " + shape_str(images.shape()));
  const std::size_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw ContractError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                        " is not divisible by patch size " + std::to_string(p));
  }
  const std::size_t gh = h / p, gw = w / p;
  Tensor t = reshape(images, {b, c, gh, p, gw, p});
  t = permute(t, {0, 2, 4, 1, 3, 5});  // [b, gh, gw, c, p, p]
  return reshape(t, {b, gh * gw, c * p * p});
}

Tensor patchify(const Tensor& image, std::size_t p) {
  if (image.rank() != 3) throw ContractError("patchify: expected [channels x H x W], got " + shape_str(image.shape()));
  Tensor batched = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
  Tensor out = patchify_batch(batched, p);
  return reshape(out, {out.dim(1), out.dim(2)});
}

namespace {

Tensor normal_init(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

AsacModel::AsacModel(const ModelConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(init_seed);
  const std::size_t d = config_.model_dim;
  const std::size_t n = config_.seq_len();

  patch_proj_ = Linear(store_, "embed.patch", config_.patch_width(), d, rng);
  cls_token_ = store_.add("embed.cls", normal_init({1, d}, 0.02, rng));
  pos_embedding_ = store_.add("embed.position", normal_init({n, d}, 0.02, rng));
  if (config_.task_in_input()) {
    task_input_ = store_.add("embed.task", normal_init({config_.num_tasks, d}, 0.02, rng));
  }
  if (config_.task_in_decoder()) {
    task_decoder_ = store_.add("embed.decoder_task", normal_init({config_.num_tasks, config_.task_dim}, 1.0, rng));
  }

  attention::AttentionConfig ac;
  ac.model_dim = d;
  ac.num_heads = config_.num_heads;
  ac.dropout_p = config_.attention_dropout_p;
  ac.use_asac = config_.use_asac;
  if (config_.use_asac) ac.controller = config_.resolved_controller();

  blocks_.reserve(config_.num_layers);
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::string prefix = "layers." + std::to_string(l);
    LayerNorm ln1(store_, prefix + ".ln1", d);
    attention::MultiHeadAttention attn(ac, n, store_, prefix + ".attention", rng);
    LayerNorm ln2(store_, prefix + ".ln2", d);
    Linear ff1(store_, prefix + ".ffn.0", d, config_.ffn_dim, rng);
    Linear ff2(store_, prefix + ".ffn.1", config_.ffn_dim, d, rng);
    blocks_.push_back(Block{std::move(ln1), std::move(attn), std::move(ln2), std::move(ff1), std::move(ff2)});
  }
  final_ln_ = LayerNorm(store_, "final_ln", d);
  head_ = Linear(store_, "head", d, config_.output_width(), rng);
}

void AsacModel::check_task_ids(std::span<const std::size_t> task_ids, std::size_t batch) const {
  if (config_.task_mode == TaskMode::none) return;
  if (task_ids.size() != batch) {
    throw ContractError("model: expected " + std::to_string(batch) + " task ids, got " +
                        std::to_string(task_ids.size()));
  }
  for (auto t : task_ids) {
    if (t >= config_.num_tasks) {
      throw ContractError("model: task id " + std::to_string(t) + " out of range for " +
                          std::to_string(config_.num_tasks) + " tasks");
    }
  }
}

Tensor AsacModel::embed(const Tensor& images, std::span<const std::size_t> task_ids, const ForwardContext& ctx) const {
  if (images.rank() != 4 || images.dim(1) != config_.channels || images.dim(2) != config_.image_size ||
      images.dim(3) != config_.image_size) {
    throw ContractError("model: images " + shape_str(images.shape()) + " do not match configured [batch x " +
                        std::to_string(config_.channels) + " x " + std::to_string(config_.image_size) + " x " +
                        std::to_string(config_.image_size) + "]");
  }
  const std::size_t b = images.dim(0);
  const std::size_t d = config_.model_dim;
  check_task_ids(task_ids, b);

  Tensor patches = patch_proj_(patchify_batch(images, config_.patch_size));  // [b, P, d]
  std::vector<Tensor> parts{expand(cls_token_, b), patches};
  if (config_.task_in_input()) parts.push_back(reshape(embedding(task_input_, task_ids), {b, 1, d}));
  Tensor x = add_broadcast(concat(parts, 1), pos_embedding_);
  if (ctx.train) x = dropout(x, config_.dropout_p, true, *ctx.rng);
  return x;
}

ForwardResult AsacModel::forward(const Tensor& images, std::span<const std::size_t> task_ids,
                                 const ForwardContext& ctx) const {
  if (ctx.train && ctx.rng == nullptr) throw ContractError("model: training forward needs a random stream");
  Tensor x = embed(images, task_ids, ctx);
  const std::size_t b = x.dim(0);

  std::optional<Tensor> decoder_task;
  if (config_.task_in_decoder()) decoder_task = embedding(task_decoder_, task_ids);

  ForwardResult result;
  for (const auto& block : blocks_) {
    auto att = block.attn.forward(block.ln1(x), ctx, decoder_task);
    Tensor a = ctx.train ? dropout(att.out, config_.dropout_p, true, *ctx.rng) : att.out;
    x = add(x, a);
    Tensor f = block.ff2(gelu(block.ff1(block.ln2(x))));
    if (ctx.train) f = dropout(f, config_.dropout_p, true, *ctx.rng);
    x = add(x, f);
    if (config_.use_asac) {
      result.layers.push_back(LayerTrace{att.scores, att.reconstruction, std::move(att.controller)});
    }
  }
  x = final_ln_(x);
  Tensor cls = reshape(slice(x, 1, 0, 1), {b, config_.model_dim});
  result.logits = head_(cls);
  return result;
}

void AsacModel::update_codebooks(const ForwardResult& result, std::mt19937_64& rng) {
  if (!config_.use_asac) return;
  if (result.layers.size() != blocks_.size()) throw ContractError("update_codebooks: trace/layer count mismatch");
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& trace = result.layers[l];
    if (!trace.controller) throw ContractError("update_codebooks: layer without controller trace");
    blocks_[l].attn.controller().ema_update(*trace.controller, rng);
  }
}

namespace {
constexpr char kMagic[8] = {'A', 'S', 'A', 'C', 'C', 'K', 'P', 'T'};
}

std::string serialize_checkpoint(const AsacModel& model) {
  io::ByteWriter w;
  w.put_bytes(std::string(kMagic, 8));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(to_json(model.config()).dump());
  for (const auto& e : model.parameters().entries()) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
    w.put_bytes(e.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) w.put<std::uint64_t>(d);
    for (double v : e.tensor.data()) w.put<double>(v);
  }
  return w.take();
}

AsacModel deserialize_checkpoint(const std::string& bytes) {
  io::ByteReader r(bytes);
  if (r.get_bytes(8) != std::string(kMagic, 8)) throw io::FormatError("not an ASAC checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw io::FormatError("unsupported checkpoint version " + std::to_string(version));
  json j;
  try {
    j = json::parse(r.get_string());
  } catch (const json::exception& e) {
    throw io::FormatError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  AsacModel model(model_config_from_json(j), 0);
  std::size_t loaded = 0;
  while (!r.done()) {
    const auto name_len = r.get<std::uint32_t>();
    const std::string name = r.get_bytes(name_len);
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (!model.parameters().contains(name)) throw io::FormatError("checkpoint has unknown parameter " + name);
    Tensor& t = model.parameters().get(name);
    if (t.shape() != shape) {
      throw io::FormatError("parameter " + name + " has shape " + shape_str(shape) + ", model expects " +
                            shape_str(t.shape()));
    }
    auto data = t.mutable_data();
    for (auto& v : data) v = r.get<double>();
    ++loaded;
  }
  if (loaded != model.parameters().entries().size()) throw io::FormatError("checkpoint is missing parameters");
  return model;
}

void save_checkpoint(const AsacModel& model, const std::string& path) {
  io::write_file(path, serialize_checkpoint(model));
}

AsacModel load_checkpoint(const std::string& path) { return deserialize_checkpoint(io::read_file(path)); }

void copy_parameters(const AsacModel& src, AsacModel& dst) {
  const auto& a = src.parameters().entries();
  auto& b = dst.parameters().entries();
  if (a.size() != b.size()) throw ContractError("copy_parameters: parameter sets differ");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].tensor.shape() != b[i].tensor.shape()) {
      throw ContractError("copy_parameters: mismatch at " + a[i].name);
    }
    auto out = b[i].tensor.mutable_data();
    std::copy(a[i].tensor.data().begin(), a[i].tensor.data().end(), out.begin());
  }
}

}  // namespace asac::model
