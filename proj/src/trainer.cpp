#include "asac/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <numeric>
#include <mutex>
#include <sstream>
#include <thread>

namespace asac::train {

using model::AsacModel;
using model::ConfigError;
using model::HeadKind;
using nlohmann::json;

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::train: return "train";
    case Mode::eval: return "eval";
    case Mode::attack: return "attack";
    case Mode::transfer: return "transfer";
    case Mode::fewshot: return "fewshot";
    case Mode::efficiency: return "efficiency";
  }
  return "?";
}

Mode mode_from_string(const std::string& s) {
  for (Mode m : {Mode::train, Mode::eval, Mode::attack, Mode::transfer, Mode::fewshot, Mode::efficiency})
    if (to_string(m) == s) return m;
  throw ConfigError("mode", "unknown mode '" + s + "'");
}

std::string to_string(AttackKind kind) { return kind == AttackKind::fgsm ? "fgsm" : "pgd"; }

// ---------------------------------------------------------------------------
// Configuration

json to_json(const DatasetSpec& d) {
  return json{{"kind", d.kind},         {"n_train", d.n_train},   {"n_test", d.n_test},
              {"image_size", d.image_size}, {"seed", d.seed},     {"vertices", d.vertices},
              {"noise_frac", d.noise_frac}};
}

json to_json(const RunConfig& c) {
  return json{{"model", model::to_json(c.model)},
              {"dataset", to_json(c.dataset)},
              {"target", to_json(c.target)},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"eval_batch_size", c.eval_batch_size},
              {"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"lambda", c.lambda},
              {"seed", c.seed},
              {"mode", to_string(c.mode)},
              {"epsilons", c.epsilons},
              {"pgd_steps", c.pgd_steps},
              {"pgd_alpha_ratio", c.pgd_alpha_ratio},
              {"fewshot_fractions", c.fewshot_fractions},
              {"efficiency_fractions", c.efficiency_fractions},
              {"pretrain_epochs", c.pretrain_epochs},
              {"finetune_epochs", c.finetune_epochs},
              {"early_stopping_patience", c.early_stopping_patience},
              {"record_wall_time", c.record_wall_time}};
}

namespace {

void expect(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key, "expected " + what);
}

std::size_t get_size(const json& v, const std::string& key) {
  expect(v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0), key, "a non-negative integer");
  return v.get<std::size_t>();
}

double get_double(const json& v, const std::string& key) {
  expect(v.is_number(), key, "a number");
  return v.get<double>();
}

std::vector<double> get_doubles(const json& v, const std::string& key) {
  expect(v.is_array(), key, "an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(get_double(v[i], key + "[" + std::to_string(i) + "]"));
  return out;
}

DatasetSpec dataset_from_json(const json& j, DatasetSpec d, const std::string& path) {
  expect(j.is_object(), path, "an object");
  for (const auto& [key, v] : j.items()) {
    const std::string k = path + "." + key;
    if (key == "kind") {
      expect(v.is_string(), k, "a string");
      d.kind = v.get<std::string>();
      static const char* kinds[] = {"triangles", "multitask_triangles", "polygons", "triangles_ood", "polygons_ood"};
      if (std::none_of(std::begin(kinds), std::end(kinds), [&](const char* s) { return d.kind == s; }))
        throw ConfigError(k, "unknown dataset kind '" + d.kind + "'");
    } else if (key == "n_train") d.n_train = get_size(v, k);
    else if (key == "n_test") d.n_test = get_size(v, k);
    else if (key == "image_size") d.image_size = get_size(v, k);
    else if (key == "seed") d.seed = get_size(v, k);
    else if (key == "noise_frac") d.noise_frac = get_double(v, k);
    else if (key == "vertices") {
      expect(v.is_array(), k, "an array of integers");
      d.vertices.clear();
      for (std::size_t i = 0; i < v.size(); ++i) d.vertices.push_back(get_size(v[i], k + "[" + std::to_string(i) + "]"));
    } else throw ConfigError(k, "unknown key");
  }
  return d;
}

}  // namespace

RunConfig run_config_from_json(const json& j, RunConfig c) {
  expect(j.is_object(), "", "a JSON object at the top level");
  for (const auto& [key, v] : j.items()) {
    const std::string& k = key;
    if (key == "model") c.model = model::model_config_from_json(v, c.model, "model");
    else if (key == "dataset") c.dataset = dataset_from_json(v, c.dataset, "dataset");
    else if (key == "target") c.target = dataset_from_json(v, c.target, "target");
    else if (key == "epochs") c.epochs = get_size(v, k);
    else if (key == "batch_size") c.batch_size = get_size(v, k);
    else if (key == "eval_batch_size") c.eval_batch_size = get_size(v, k);
    else if (key == "learning_rate") c.learning_rate = get_double(v, k);
    else if (key == "weight_decay") c.weight_decay = get_double(v, k);
    else if (key == "lambda") c.lambda = get_double(v, k);
    else if (key == "seed") c.seed = get_size(v, k);
    else if (key == "mode") {
      expect(v.is_string(), k, "a string");
      c.mode = mode_from_string(v.get<std::string>());
    } else if (key == "epsilons") c.epsilons = get_doubles(v, k);
    else if (key == "pgd_steps") c.pgd_steps = get_size(v, k);
    else if (key == "pgd_alpha_ratio") c.pgd_alpha_ratio = get_double(v, k);
    else if (key == "fewshot_fractions") c.fewshot_fractions = get_doubles(v, k);
    else if (key == "efficiency_fractions") c.efficiency_fractions = get_doubles(v, k);
    else if (key == "pretrain_epochs") c.pretrain_epochs = get_size(v, k);
    else if (key == "finetune_epochs") c.finetune_epochs = get_size(v, k);
    else if (key == "early_stopping_patience") c.early_stopping_patience = get_size(v, k);
    else if (key == "record_wall_time") {
      expect(v.is_boolean(), k, "a boolean");
      c.record_wall_time = v.get<bool>();
    } else throw ConfigError(k, "unknown key");
  }
  if (c.batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (c.eval_batch_size == 0) throw ConfigError("eval_batch_size", "must be positive");
  if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate", "must be positive");
  if (c.weight_decay < 0.0) throw ConfigError("weight_decay", "must be non-negative");
  if (c.lambda < 0.0) throw ConfigError("lambda", "must be non-negative");
  if (c.pgd_steps == 0) throw ConfigError("pgd_steps", "must be at least 1");
  if (!(c.pgd_alpha_ratio > 0.0)) throw ConfigError("pgd_alpha_ratio", "must be positive");
  for (double e : c.epsilons)
    if (e < 0.0) throw ConfigError("epsilons", "must be non-negative");
  return c;
}

std::string config_hash(const RunConfig& config) {
  const std::string s = to_json(config).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

data::Split build_datasets(const DatasetSpec& spec) {
  const std::uint64_t train_seed = data::sample_seed(spec.seed, 0, 20);
  const std::uint64_t test_seed = data::sample_seed(spec.seed, 1, 20);
  data::Split split;
  if (spec.kind == "triangles") {
    split.train = data::triangles(train_seed, spec.n_train, spec.image_size);
    split.test = data::triangles(test_seed, spec.n_test, spec.image_size);
  } else if (spec.kind == "multitask_triangles") {
    split.train = data::multitask_triangles(train_seed, spec.n_train, spec.image_size);
    split.test = data::multitask_triangles(test_seed, spec.n_test, spec.image_size);
  } else if (spec.kind == "polygons") {
    split.train = data::polygons(train_seed, spec.n_train, spec.image_size, spec.vertices, spec.noise_frac);
    split.test = data::polygons(test_seed, spec.n_test, spec.image_size, spec.vertices, spec.noise_frac);
  } else if (spec.kind == "triangles_ood" || spec.kind == "polygons_ood") {
    split = data::gen_ood_split(data::ood_kind_from_string(spec.kind), spec.seed, spec.n_train, spec.n_test,
                                spec.image_size);
  } else {
    throw ConfigError("dataset.kind", "unknown dataset kind '" + spec.kind + "'");
  }
  return split;
}

model::ModelConfig adapt_model_to(const model::ModelConfig& base, const data::Dataset& dataset) {
  model::ModelConfig m = base;
  m.image_size = dataset.image_size;
  m.channels = dataset.channels;
  m.head_kind = dataset.schema.head_kind;
  m.num_classes = dataset.schema.head_kind == HeadKind::binary ? 2 : dataset.schema.num_classes;
  if (m.task_mode != model::TaskMode::none) m.num_tasks = std::max(m.num_tasks, dataset.schema.num_tasks);
  return m;
}

// ---------------------------------------------------------------------------
// Optimizer

AdamW::AdamW(double learning_rate, double weight_decay, double beta1, double beta2, double eps)
    : lr_(learning_rate), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(ParameterStore& store) {
  auto& entries = store.entries();
  if (m_.empty()) {
    m_.resize(entries.size());
    v_.resize(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (!entries[i].trainable) continue;
      m_[i].assign(entries[i].tensor.numel(), 0.0);
      v_[i].assign(entries[i].tensor.numel(), 0.0);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    if (!e.trainable) continue;
    auto p = e.tensor.mutable_data();
    auto g = e.tensor.grad();
    const bool has_grad = e.tensor.has_grad();
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = has_grad ? g[k] : 0.0;
      m_[i][k] = b1_ * m_[i][k] + (1.0 - b1_) * gk;
      v_[i][k] = b2_ * v_[i][k] + (1.0 - b2_) * gk * gk;
      p[k] -= lr_ * wd_ * p[k];
      p[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------
// Losses and metrics

Metrics classification_metrics(HeadKind kind, std::span<const double> logits, std::size_t width,
                               std::span<const int> labels) {
  if (width == 0 || logits.size() % width != 0) throw ContractError("metrics: logits are not a whole number of rows");
  const std::size_t n = logits.size() / width;
  Metrics m;
  m.count = n;
  if (n == 0) return m;

  auto prf = [](double tp, double fp, double fn, double& p, double& r, double& f) {
    p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    f = p + r > 0 ? 2.0 * p * r / (p + r) : 0.0;
  };

  if (kind == HeadKind::multiclass) {
    if (labels.size() != n) throw ContractError("metrics: label count mismatch");
    const std::size_t classes = width;
    std::vector<double> tp(classes, 0), fp(classes, 0), fn(classes, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = logits.data() + i * width;
      const auto pred = static_cast<std::size_t>(std::max_element(row, row + width) - row);
      const auto truth = static_cast<std::size_t>(labels[i]);
      if (pred == truth) {
        ++correct;
        tp[pred] += 1;
      } else {
        fp[pred] += 1;
        fn[truth] += 1;
      }
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    for (std::size_t c = 0; c < classes; ++c) {
      double p, r, f;
      prf(tp[c], fp[c], fn[c], p, r, f);
      m.precision += p / classes;
      m.recall += r / classes;
      m.f1 += f / classes;
    }
    return m;
  }

  if (labels.size() != logits.size()) throw ContractError("metrics: label count mismatch");
  if (kind == HeadKind::binary) {
    // Macro over the two classes.
    double tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const int pred = logits[i] > 0.0 ? 1 : 0;  // sigmoid(z) > 0.5
      if (pred == 1 && labels[i] == 1) ++tp;
      else if (pred == 1) ++fp;
      else if (labels[i] == 1) ++fn;
      else ++tn;
    }
    m.accuracy = (tp + tn) / static_cast<double>(n);
    double p1, r1, f1, p0, r0, f0;
    prf(tp, fp, fn, p1, r1, f1);
    prf(tn, fn, fp, p0, r0, f0);
    m.precision = (p0 + p1) / 2.0;
    m.recall = (r0 + r1) / 2.0;
    m.f1 = (f0 + f1) / 2.0;
    return m;
  }

  // Multilabel: accuracy over all label entries, macro over labels of the positive class.
  std::size_t correct = 0;
  for (std::size_t l = 0; l < width; ++l) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const int pred = logits[i * width + l] > 0.0 ? 1 : 0;
      const int truth = labels[i * width + l];
      if (pred == truth) ++correct;
      if (pred == 1 && truth == 1) ++tp;
      else if (pred == 1) ++fp;
      else if (truth == 1) ++fn;
    }
    double p, r, f;
    prf(tp, fp, fn, p, r, f);
    m.precision += p / width;
    m.recall += r / width;
    m.f1 += f / width;
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(n * width);
  return m;
}

Tensor task_loss(const AsacModel& model, const Tensor& logits, std::span<const int> labels) {
  if (model.config().head_kind == HeadKind::multiclass) return loss::ce_multiclass(logits, labels);
  return loss::bce_binary(logits, labels);
}

StepLosses compute_losses(const AsacModel& model, const model::ForwardResult& forward, std::span<const int> labels,
                          double lambda) {
  StepLosses s;
  s.task = task_loss(model, forward.logits, labels);
  if (!forward.layers.empty()) {
    std::vector<std::pair<Tensor, Tensor>> pairs;
    Tensor vq_sum;
    for (const auto& layer : forward.layers) {
      pairs.emplace_back(layer.scores, layer.reconstruction);
      const auto& c = *layer.controller;
      Tensor v = vq::vq_loss(c.z_e, c.quantized.codes, model.config().controller.commitment_cost);
      vq_sum = vq_sum.defined() ? add(vq_sum, v) : v;
    }
    s.recon = loss::recon_loss(pairs);
    s.vq = scale(vq_sum, 1.0 / static_cast<double>(forward.layers.size()));
  }
  const double task = s.task.item();
  const double recon = s.recon.defined() ? s.recon.item() : 0.0;
  const double vqv = s.vq.defined() ? s.vq.item() : 0.0;
  if (!std::isfinite(task)) throw NumericalError("task_loss", "non-finite task_loss encountered");
  if (!std::isfinite(recon)) throw NumericalError("recon_loss", "non-finite recon_loss encountered");
  if (!std::isfinite(vqv)) throw NumericalError("vq_loss", "non-finite vq_loss encountered");
  s.total = loss::total_loss(s.task, s.recon, s.vq, lambda);
  s.breakdown = loss::total_loss(task, recon, vqv, lambda);
  if (!std::isfinite(s.breakdown.total)) throw NumericalError("total_loss", "non-finite total_loss encountered");
  return s;
}

namespace {

// Sample-weighted running mean of loss components.
struct LossAccumulator {
  double task = 0, recon = 0, vq = 0, total = 0;
  std::size_t count = 0;

  void add(const loss::LossBreakdown& b, std::size_t n) {
    task += b.task * n;
    recon += b.recon * n;
    vq += b.vq * n;
    total += b.total * n;
    count += n;
  }
  loss::LossBreakdown mean(double lambda) const {
    const double c = count ? static_cast<double>(count) : 1.0;
    return loss::LossBreakdown{task / c, recon / c, vq / c, total / c, lambda};
  }
};

std::vector<std::vector<std::size_t>> batches_of(std::vector<std::size_t> order, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  return out;
}

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

void check_compatible(const AsacModel& model, const data::Dataset& ds) {
  const auto& c = model.config();
  if (ds.image_size != c.image_size || ds.channels != c.channels) {
    throw ContractError("dataset images (" + std::to_string(ds.image_size) + " px, " + std::to_string(ds.channels) +
                        " ch) do not match the model");
  }
  if (ds.schema.head_kind != c.head_kind) throw ContractError("dataset head kind does not match the model");
  if (ds.schema.label_arity() != (c.head_kind == HeadKind::multilabel ? c.output_width() : 1)) {
    throw ContractError("dataset label arity does not match the model head");
  }
}

}  // namespace

namespace {
std::atomic<std::size_t> g_eval_threads{1};
}

void set_eval_threads(std::size_t n) { g_eval_threads = std::max<std::size_t>(n, 1); }
std::size_t eval_threads() { return g_eval_threads; }

Metrics evaluate(const AsacModel& model, const data::Dataset& dataset, std::size_t batch_size, double lambda) {
  check_compatible(model, dataset);
  const auto batches = batches_of(iota_n(dataset.size()), batch_size);
  struct Slot {
    loss::LossBreakdown loss;
    std::size_t count = 0;
    std::vector<double> logits;
    std::vector<int> labels;
  };
  std::vector<Slot> slots(batches.size());
  auto run = [&](std::size_t b) {
    NoGradGuard no_grad;
    const auto batch = data::make_batch(dataset, batches[b]);
    const auto fwd = model.forward(batch.images, batch.task_ids, ForwardContext{false, nullptr});
    slots[b].loss = compute_losses(model, fwd, batch.labels, lambda).breakdown;
    slots[b].count = batch.size();
    slots[b].logits.assign(fwd.logits.data().begin(), fwd.logits.data().end());
    slots[b].labels = batch.labels;
  };

  // Batches are independent in eval mode; results are reduced in batch order
  // so the thread count never changes the numbers.
  const std::size_t threads = std::min(eval_threads(), batches.size());
  if (threads <= 1) {
    for (std::size_t b = 0; b < batches.size(); ++b) run(b);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t b; (b = next++) < batches.size();) {
          try {
            run(b);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }

  LossAccumulator acc;
  std::vector<double> logits;
  std::vector<int> labels;
  for (const auto& s : slots) {
    acc.add(s.loss, s.count);
    logits.insert(logits.end(), s.logits.begin(), s.logits.end());
    labels.insert(labels.end(), s.labels.begin(), s.labels.end());
  }
  Metrics m = classification_metrics(model.config().head_kind, logits, model.config().output_width(), labels);
  m.loss = acc.mean(lambda);
  return m;
}

// ---------------------------------------------------------------------------
// Adversarial attacks

namespace {

std::vector<double> input_gradient(const AsacModel& model, const data::SampleBatch& batch, const Tensor& images) {
  Tensor x = Tensor::from(images.shape(), std::vector<double>(images.data().begin(), images.data().end()), true);
  const ForwardContext ctx{false, nullptr};
  const auto fwd = model.forward(x, batch.task_ids, ctx);
  task_loss(model, fwd.logits, batch.labels).backward();
  std::vector<double> g = x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                       : std::vector<double>(x.numel(), 0.0);
  // Attacks must leave the model's gradient buffers as they found them.
  const_cast<AsacModel&>(model).parameters().zero_grad();
  return g;
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

Tensor fgsm_attack(const AsacModel& model, const data::SampleBatch& batch, double epsilon) {
  if (epsilon < 0.0) throw ContractError("fgsm_attack: epsilon must be non-negative");
  const auto g = input_gradient(model, batch, batch.images);
  auto x0 = batch.images.data();
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x0[i] + epsilon * sign(g[i]), 0.0, 1.0);
  return Tensor::from(batch.images.shape(), std::move(out));
}

Tensor pgd_attack(const AsacModel& model, const data::SampleBatch& batch, double epsilon, std::size_t steps,
                  double alpha) {
  if (epsilon < 0.0) throw ContractError("pgd_attack: epsilon must be non-negative");
  if (steps == 0 || alpha < 0.0 || (alpha == 0.0 && epsilon > 0.0))
    throw ContractError("pgd_attack: need steps >= 1 and alpha > 0");
  auto x0 = batch.images.data();
  Tensor x = batch.images;
  for (std::size_t s = 0; s < steps; ++s) {
    const auto g = input_gradient(model, batch, x);
    auto cur = x.data();
    std::vector<double> next(cur.size());
    for (std::size_t i = 0; i < next.size(); ++i) {
      const double stepped = std::clamp(cur[i] + alpha * sign(g[i]), 0.0, 1.0);
      next[i] = std::clamp(stepped, x0[i] - epsilon, x0[i] + epsilon);
    }
    x = Tensor::from(batch.images.shape(), std::move(next));
  }
  return x;
}

double batch_task_loss(const AsacModel& model, const data::SampleBatch& batch, const Tensor& images) {
  NoGradGuard no_grad;
  const auto fwd = model.forward(images, batch.task_ids, ForwardContext{false, nullptr});
  return task_loss(model, fwd.logits, batch.labels).item();
}

Metrics attack_evaluate(const AsacModel& model, const data::Dataset& dataset, AttackKind kind, double epsilon,
                        std::size_t pgd_steps, double pgd_alpha, std::size_t batch_size, double lambda) {
  check_compatible(model, dataset);
  LossAccumulator acc;
  std::vector<double> logits;
  std::vector<int> labels;
  for (const auto& idx : batches_of(iota_n(dataset.size()), batch_size)) {
    const auto batch = data::make_batch(dataset, idx);
    const Tensor adv = kind == AttackKind::fgsm ? fgsm_attack(model, batch, epsilon)
                                                : pgd_attack(model, batch, epsilon, pgd_steps, pgd_alpha);
    NoGradGuard no_grad;
    const auto fwd = model.forward(adv, batch.task_ids, ForwardContext{false, nullptr});
    acc.add(compute_losses(model, fwd, batch.labels, lambda).breakdown, batch.size());
    logits.insert(logits.end(), fwd.logits.data().begin(), fwd.logits.data().end());
    labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
  }
  Metrics m = classification_metrics(model.config().head_kind, logits, model.config().output_width(), labels);
  m.loss = acc.mean(lambda);
  return m;
}

// ---------------------------------------------------------------------------
// Records

const MetricsRow& RunRecord::last(const std::string& split) const {
  for (auto it = rows.rbegin(); it != rows.rend(); ++it)
    if (it->split == split) return *it;
  throw ContractError("run record has no rows for split '" + split + "'");
}

std::string metrics_csv_header() {
  return "run_id,mode,split,epoch,task_loss,recon_loss,vq_loss,total_loss,accuracy,precision,recall,f1,epsilon,"
         "fraction,wall_ms\n";
}

std::string to_csv(const std::vector<MetricsRow>& rows, bool header) {
  std::ostringstream os;
  if (header) os << metrics_csv_header();
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    os << r.run_id << ',' << r.mode << ',' << r.split << ',' << r.epoch << ',' << num(m.loss.task) << ','
       << num(m.loss.recon) << ',' << num(m.loss.vq) << ',' << num(m.loss.total) << ',' << num(m.accuracy) << ','
       << num(m.precision) << ',' << num(m.recall) << ',' << num(m.f1) << ',' << num(r.epsilon) << ','
       << num(r.fraction) << ',' << num(r.wall_ms) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Training

TrainOutcome train(const RunConfig& cfg, const data::Dataset& train_set, const data::Dataset& test_set,
                   std::size_t epochs, const AsacModel* initial, const std::string& mode, double fraction) {
  const model::ModelConfig mc = initial ? initial->config() : adapt_model_to(cfg.model, train_set);
  AsacModel model(mc, data::sample_seed(cfg.seed, 0, 100));
  if (initial) model::copy_parameters(*initial, model);
  check_compatible(model, train_set);
  check_compatible(model, test_set);

  std::mt19937_64 rng(data::sample_seed(cfg.seed, 1, 100));
  AdamW optimizer(cfg.learning_rate, cfg.weight_decay);
  RunRecord record;
  record.run_id = config_hash(cfg);
  record.seed = cfg.seed;

  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  auto elapsed_ms = [&] {
    if (!cfg.record_wall_time) return 0.0;
    return std::chrono::duration<double, std::milli>(clock::now() - start).count();
  };

  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    std::vector<std::size_t> order = iota_n(train_set.size());
    std::shuffle(order.begin(), order.end(), rng);
    LossAccumulator acc;
    std::vector<double> logits;
    std::vector<int> labels;
    for (const auto& idx : batches_of(order, cfg.batch_size)) {
      const auto batch = data::make_batch(train_set, idx);
      const ForwardContext ctx{true, &rng};
      const auto fwd = model.forward(batch.images, batch.task_ids, ctx);
      auto losses = compute_losses(model, fwd, batch.labels, cfg.lambda);
      model.parameters().zero_grad();
      losses.total.backward();
      optimizer.step(model.parameters());
      model.update_codebooks(fwd, rng);
      acc.add(losses.breakdown, batch.size());
      logits.insert(logits.end(), fwd.logits.data().begin(), fwd.logits.data().end());
      labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
    }
    model.parameters().zero_grad();
    Metrics train_metrics = classification_metrics(mc.head_kind, logits, mc.output_width(), labels);
    train_metrics.loss = acc.mean(cfg.lambda);
    record.rows.push_back({record.run_id, mode, "train", epoch, train_metrics, 0.0, fraction, elapsed_ms()});
    const Metrics test_metrics = evaluate(model, test_set, cfg.eval_batch_size, cfg.lambda);
    record.rows.push_back({record.run_id, mode, "test", epoch, test_metrics, 0.0, fraction, elapsed_ms()});

    if (cfg.early_stopping_patience > 0) {
      if (test_metrics.loss.total < best_loss) {
        best_loss = test_metrics.loss.total;
        stale = 0;
      } else if (++stale >= cfg.early_stopping_patience) {
        break;
      }
    }
  }
  return TrainOutcome{std::move(model), std::move(record)};
}

namespace {

void relabel(std::vector<MetricsRow>& rows, const std::string& prefix) {
  for (auto& r : rows) r.split = prefix + r.split;
}

data::Dataset subset(const data::Dataset& ds, const std::vector<std::size_t>& indices) {
  data::Dataset out = ds;
  out.samples.clear();
  for (auto i : indices) out.samples.push_back(ds.samples[i]);
  return out;
}

}  // namespace

TrainOutcome protocol_transfer(const RunConfig& cfg) {
  const auto source = build_datasets(cfg.dataset);
  const auto target = build_datasets(cfg.target);
  auto pre = train(cfg, source.train, source.test, cfg.pretrain_epochs, nullptr, "transfer");
  RunRecord record = pre.record;
  relabel(record.rows, "source_");

  const Metrics src0 = evaluate(pre.model, source.test, cfg.eval_batch_size, cfg.lambda);
  const Metrics tgt0 = evaluate(pre.model, target.test, cfg.eval_batch_size, cfg.lambda);
  record.rows.push_back({record.run_id, "transfer", "finetune_source_test", 0, src0, 0.0, 1.0, 0.0});
  record.rows.push_back({record.run_id, "transfer", "target_test", 0, tgt0, 0.0, 1.0, 0.0});

  auto fine = train(cfg, target.train, target.test, cfg.finetune_epochs, &pre.model, "transfer");
  relabel(fine.record.rows, "target_");
  record.rows.insert(record.rows.end(), fine.record.rows.begin(), fine.record.rows.end());
  return TrainOutcome{std::move(fine.model), std::move(record)};
}

RunRecord protocol_fewshot(const RunConfig& cfg) {
  const auto source = build_datasets(cfg.dataset);
  const auto target = build_datasets(cfg.target);
  auto pre = train(cfg, source.train, source.test, cfg.pretrain_epochs, nullptr, "fewshot");
  RunRecord record = pre.record;
  relabel(record.rows, "source_");
  for (double f : cfg.fewshot_fractions) {
    const auto idx = data::stratified_subset(target.train, f, cfg.seed);
    auto fine = train(cfg, subset(target.train, idx), target.test, cfg.finetune_epochs, &pre.model, "fewshot", f);
    relabel(fine.record.rows, "target_");
    record.rows.insert(record.rows.end(), fine.record.rows.begin(), fine.record.rows.end());
  }
  return record;
}

RunRecord protocol_efficiency(const RunConfig& cfg) {
  const auto split = build_datasets(cfg.dataset);
  RunRecord record;
  record.run_id = config_hash(cfg);
  record.seed = cfg.seed;
  for (double f : cfg.efficiency_fractions) {
    const auto idx = data::stratified_subset(split.train, f, cfg.seed);
    auto run = train(cfg, subset(split.train, idx), split.test, cfg.epochs, nullptr, "efficiency", f);
    record.rows.insert(record.rows.end(), run.record.rows.begin(), run.record.rows.end());
  }
  return record;
}

}  // namespace asac::train
