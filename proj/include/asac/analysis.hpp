#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asac/datasets.hpp"
#include "asac/vit_model.hpp"

namespace asac::analysis {

/// Code counts of one controller for one task.
struct UsageHistogram {
  std::size_t layer = 0;
  std::size_t task = 0;
  std::vector<std::uint64_t> counts;  // [codebook_size]

  std::uint64_t total() const;
};

/// Eval-mode pass tallying quantizer indices per layer. On a multi-task dataset
/// only samples of `task_id` are used; otherwise every sample is, tagged with `task_id`.
/// Throws ContractError ("no codebook") for baseline models.
std::vector<UsageHistogram> codebook_usage(const model::AsacModel& model, const data::Dataset& dataset,
                                           std::size_t task_id, std::size_t batch_size = 64);

/// Raw per-layer index streams in processing order (sample, head, row, chunk).
std::vector<std::vector<std::size_t>> code_indices(const model::AsacModel& model, const data::Dataset& dataset,
                                                   std::size_t task_id, std::size_t batch_size = 64);

struct KsResult {
  double d = 0.0;
  double p = 1.0;
};

enum class KsMethod { automatic, exact, asymptotic };
KsMethod ks_method_from_string(const std::string& s);

/// Largest n_a * n_b for which `automatic` uses exact enumeration.
inline constexpr std::size_t kExactKsLimit = 10000;

/// sup |ECDF_a - ECDF_b|.
double ks_statistic(std::span<const double> a, std::span<const double> b);
/// Q(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2), in [0, 1].
double kolmogorov_q(double lambda);
/// Asymptotic p with the (sqrt(ne) + 0.12 + 0.11/sqrt(ne)) scaling.
double ks_asymptotic_p(double d, std::size_t na, std::size_t nb);
/// P(D' >= d) over all relabellings of the pooled sample (ties handled exactly).
double ks_exact_p(std::span<const double> a, std::span<const double> b, double d);

KsResult ks_two_sample(std::span<const double> a, std::span<const double> b, KsMethod method = KsMethod::automatic);

/// How histograms become KS samples.
enum class SampleMode {
  counts,  // each histogram's per-code count vector is the sample
  codes,   // code indices, one per quantized chunk
};
SampleMode sample_mode_from_string(const std::string& s);
std::vector<double> ks_sample(const UsageHistogram& h, SampleMode mode);

/// Symmetric T x T matrix of p-values with unit diagonal. Needs at least two histograms.
std::vector<std::vector<double>> pairwise_ks(const std::vector<UsageHistogram>& per_task, SampleMode mode,
                                             KsMethod method = KsMethod::automatic);

nlohmann::json to_json(const UsageHistogram& h);
nlohmann::json to_json(const std::vector<UsageHistogram>& hs);
UsageHistogram usage_from_json(const nlohmann::json& j);
std::vector<UsageHistogram> usages_from_json(const nlohmann::json& j);
nlohmann::json matrix_to_json(const std::vector<std::vector<double>>& matrix);

}  // namespace asac::analysis
