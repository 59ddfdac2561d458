#include "asac/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace asac::analysis {

using model::AsacModel;
using nlohmann::json;

std::uint64_t UsageHistogram::total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

namespace {

std::vector<std::size_t> samples_for_task(const data::Dataset& dataset, std::size_t task_id) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset.schema.num_tasks <= 1 || dataset.samples[i].task_id == task_id) out.push_back(i);
  }
  return out;
}

// Calls fn(layer, indices) for every eval batch.
template <typename Fn>
void for_each_layer_indices(const AsacModel& model, const data::Dataset& dataset, std::size_t task_id,
                            std::size_t batch_size, Fn fn) {
  if (!model.config().use_asac) throw ContractError("codebook_usage: model has no codebook");
  if (batch_size == 0) throw ContractError("codebook_usage: batch_size must be positive");
  const auto chosen = samples_for_task(dataset, task_id);
  NoGradGuard no_grad;
  const ForwardContext ctx{false, nullptr};
  for (std::size_t start = 0; start < chosen.size(); start += batch_size) {
    const std::span<const std::size_t> idx(chosen.data() + start, std::min(batch_size, chosen.size() - start));
    auto batch = data::make_batch(dataset, idx);
    // Single-task datasets carry no ids; a task-conditioned model still needs one.
    if (batch.task_ids.empty() && model.config().task_mode != model::TaskMode::none)
      batch.task_ids.assign(batch.size(), task_id);
    const auto fwd = model.forward(batch.images, batch.task_ids, ctx);
    for (std::size_t l = 0; l < fwd.layers.size(); ++l) fn(l, fwd.layers[l].controller->quantized.indices);
  }
}

}  // namespace

std::vector<UsageHistogram> codebook_usage(const AsacModel& model, const data::Dataset& dataset, std::size_t task_id,
                                           std::size_t batch_size) {
  const std::size_t size = model.config().resolved_controller().codebook_size;
  std::vector<UsageHistogram> hs(model.num_layers());
  for (std::size_t l = 0; l < hs.size(); ++l) hs[l] = UsageHistogram{l, task_id, std::vector<std::uint64_t>(size, 0)};
  for_each_layer_indices(model, dataset, task_id, batch_size, [&](std::size_t l, const std::vector<std::size_t>& idx) {
    for (auto k : idx) ++hs[l].counts[k];
  });
  return hs;
}

std::vector<std::vector<std::size_t>> code_indices(const AsacModel& model, const data::Dataset& dataset,
                                                   std::size_t task_id, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out(model.num_layers());
  for_each_layer_indices(model, dataset, task_id, batch_size, [&](std::size_t l, const std::vector<std::size_t>& idx) {
    out[l].insert(out[l].end(), idx.begin(), idx.end());
  });
  return out;
}

KsMethod ks_method_from_string(const std::string& s) {
  if (s == "auto" || s == "automatic") return KsMethod::automatic;
  if (s == "exact") return KsMethod::exact;
  if (s == "asymptotic") return KsMethod::asymptotic;
  throw ContractError("unknown KS method '" + s + "'");
}

double ks_statistic(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ContractError("ks: samples must be non-empty");
  std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  const double na = static_cast<double>(x.size()), nb = static_cast<double>(y.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < x.size() && j < y.size()) {
    const double v = std::min(x[i], y[j]);
    while (i < x.size() && x[i] == v) ++i;
    while (j < y.size() && y[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return d;
}

double kolmogorov_q(double lambda) {
  if (lambda <= 0.0) return 1.0;
  double q;
  if (lambda < 1.18) {
    // Jacobi theta form; the alternating series converges slowly here.
    const double pi2 = std::numbers::pi * std::numbers::pi;
    double s = 0.0;
    for (int k = 1; k < 100; ++k) {
      const double t = std::exp(-(2 * k - 1) * (2 * k - 1) * pi2 / (8.0 * lambda * lambda));
      s += t;
      if (t < 1e-10) break;
    }
    q = 1.0 - std::sqrt(2.0 * std::numbers::pi) / lambda * s;
  } else {
    double s = 0.0;
    for (int k = 1; k < 100; ++k) {
      const double t = std::exp(-2.0 * k * k * lambda * lambda);
      s += (k % 2 ? 1.0 : -1.0) * t;
      if (t < 1e-10) break;
    }
    q = 2.0 * s;
  }
  return std::clamp(q, 0.0, 1.0);
}

double ks_asymptotic_p(double d, std::size_t na, std::size_t nb) {
  const double ne = static_cast<double>(na) * static_cast<double>(nb) / static_cast<double>(na + nb);
  const double r = std::sqrt(ne);
  return kolmogorov_q((r + 0.12 + 0.11 / r) * d);
}

double ks_exact_p(std::span<const double> a, std::span<const double> b, double d) {
  if (a.empty() || b.empty()) throw ContractError("ks: samples must be non-empty");
  const std::size_t na = a.size(), nb = b.size(), n = na + nb;
  if (d <= 0.0) return 1.0;
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  std::sort(pooled.begin(), pooled.end());
  // checkpoint[t]: ECDFs are compared after t pooled values.
  std::vector<char> checkpoint(n + 1, 0);
  for (std::size_t t = 1; t <= n; ++t) checkpoint[t] = t == n || pooled[t - 1] != pooled[t];

  const double tol = 1e-12;
  auto reaches = [&](std::size_t i, std::size_t j) {
    return std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) >= d - tol;
  };
  // Lattice paths (i from a, j from b) that never reach the gap d at a checkpoint.
  std::vector<double> ok(nb + 1, 0.0), all(nb + 1, 0.0);
  ok[0] = all[0] = 1.0;
  for (std::size_t j = 1; j <= nb; ++j) {
    all[j] = all[j - 1];
    ok[j] = checkpoint[j] && reaches(0, j) ? 0.0 : ok[j - 1];
  }
  for (std::size_t i = 1; i <= na; ++i) {
    ok[0] = checkpoint[i] && reaches(i, 0) ? 0.0 : ok[0];
    for (std::size_t j = 1; j <= nb; ++j) {
      all[j] += all[j - 1];
      ok[j] += ok[j - 1];
      if (checkpoint[i + j] && reaches(i, j)) ok[j] = 0.0;
    }
  }
  return std::clamp(1.0 - ok[nb] / all[nb], 0.0, 1.0);
}

KsResult ks_two_sample(std::span<const double> a, std::span<const double> b, KsMethod method) {
  KsResult r;
  r.d = ks_statistic(a, b);
  if (method == KsMethod::automatic) method = a.size() * b.size() <= kExactKsLimit ? KsMethod::exact : KsMethod::asymptotic;
  r.p = method == KsMethod::exact ? ks_exact_p(a, b, r.d) : ks_asymptotic_p(r.d, a.size(), b.size());
  return r;
}

SampleMode sample_mode_from_string(const std::string& s) {
  if (s == "counts") return SampleMode::counts;
  if (s == "codes") return SampleMode::codes;
  throw ContractError("unknown KS sample mode '" + s + "'");
}

std::vector<double> ks_sample(const UsageHistogram& h, SampleMode mode) {
  std::vector<double> out;
  if (mode == SampleMode::counts) {
    out.assign(h.counts.begin(), h.counts.end());
    return out;
  }
  out.reserve(h.total());
  for (std::size_t k = 0; k < h.counts.size(); ++k) out.insert(out.end(), h.counts[k], static_cast<double>(k));
  return out;
}

std::vector<std::vector<double>> pairwise_ks(const std::vector<UsageHistogram>& per_task, SampleMode mode,
                                             KsMethod method) {
  const std::size_t t = per_task.size();
  if (t < 2) throw ContractError("pairwise_ks: need at least two histograms");
  std::vector<std::vector<double>> samples;
  for (const auto& h : per_task) samples.push_back(ks_sample(h, mode));
  std::vector<std::vector<double>> m(t, std::vector<double>(t, 1.0));
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) {
      m[i][j] = m[j][i] = ks_two_sample(samples[i], samples[j], method).p;
    }
  }
  return m;
}

json to_json(const UsageHistogram& h) { return json{{"layer", h.layer}, {"task", h.task}, {"counts", h.counts}}; }

json to_json(const std::vector<UsageHistogram>& hs) {
  json arr = json::array();
  for (const auto& h : hs) arr.push_back(to_json(h));
  return arr;
}

UsageHistogram usage_from_json(const json& j) {
  return UsageHistogram{j.at("layer").get<std::size_t>(), j.at("task").get<std::size_t>(),
                        j.at("counts").get<std::vector<std::uint64_t>>()};
}

std::vector<UsageHistogram> usages_from_json(const json& j) {
  std::vector<UsageHistogram> out;
  for (const auto& e : j) out.push_back(usage_from_json(e));
  return out;
}

json matrix_to_json(const std::vector<std::vector<double>>& matrix) { return json{{"matrix", matrix}}; }

}  // namespace asac::analysis
