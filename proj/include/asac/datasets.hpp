#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "asac/tensor.hpp"
#include "asac/vit_model.hpp"

namespace asac::data {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ClusterShape { circle, triangle, square };
std::string to_string(ClusterShape shape);

struct Point {
  double x = 0.0;  // column, pixels
  double y = 0.0;  // row, pixels; 0 is the top edge
};

struct ShapeMeta {
  std::vector<Point> vertex_centroids;
  ClusterShape cluster_shape = ClusterShape::circle;
  double cluster_size = 2.0;  // radius in pixels
  bool filled = true;
  bool negative = false;
  double noise_frac = 0.0;
  std::size_t image_size = 0;
};

/// How one dot cluster is drawn.
struct ClusterStyle {
  ClusterShape shape = ClusterShape::circle;
  double radius = 2.0;
  bool filled = true;
};

/// Single-channel-or-more image, row-major [channels x height x width], values in [0, 1].
struct Image {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
  double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
};

struct Sample {
  Image image;
  std::vector<int> label;  // one entry for binary/multiclass, one per label for multilabel
  std::size_t task_id = 0;
  std::optional<ShapeMeta> meta;
};

struct TaskSchema {
  model::HeadKind head_kind = model::HeadKind::binary;
  std::size_t num_classes = 2;
  std::size_t num_tasks = 1;
  std::size_t label_arity() const { return head_kind == model::HeadKind::multilabel ? num_classes : 1; }
};

struct Dataset {
  std::string name;
  TaskSchema schema;
  std::size_t channels = 1;
  std::size_t image_size = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
};

struct SampleBatch {
  Tensor images;                        // [batch x channels x H x W]
  std::vector<int> labels;              // [batch x label_arity], row-major
  std::size_t label_arity = 1;
  std::vector<std::size_t> task_ids;    // empty when the schema has a single task
  std::vector<ShapeMeta> meta;          // empty when samples carry none

  std::size_t size() const { return images.dim(0); }
};

SampleBatch make_batch(const Dataset& dataset, std::span<const std::size_t> indices);
SampleBatch make_batch(const Dataset& dataset);

/// splitmix64-based per-sample seed; batches are order independent.
std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t stream = 0);

/// Three dot clusters on black. Positives are equilateral (side ratio <= 1.02);
/// negatives have max/min side ratio > 1.15.
Sample gen_triangle(std::uint64_t seed, std::uint64_t index, std::size_t size, bool positive,
                    const ClusterStyle& style = {});

/// Dot-cluster polygon. Regular: vertices equally spaced on a circle. Irregular:
/// perturbed angles with some side ratio > 1.15. noise_frac of background pixels
/// receive gray values; negative inverts the image.
Sample gen_polygon(std::uint64_t seed, std::uint64_t index, std::size_t size, std::size_t vertices,
                   double noise_frac, bool regular, bool negative);

/// Task 0: equilateral flag. Task 1: at least two centroids in the upper half.
int triangle_task_label(const ShapeMeta& meta, std::size_t task_id);

double max_side_ratio(const std::vector<Point>& vertices);

/// Balanced Triangles split: even indices positive.
Dataset triangles(std::uint64_t seed, std::size_t count, std::size_t size = 64, const ClusterStyle& style = {});
/// Same images, two binary tasks; task id alternates in pairs so both labels stay balanced for task 0.
Dataset multitask_triangles(std::uint64_t seed, std::size_t count, std::size_t size = 64);
/// Balanced Polygons split; vertex counts cycle through `vertex_choices`, half the images inverted.
Dataset polygons(std::uint64_t seed, std::size_t count, std::size_t size, std::span<const std::size_t> vertex_choices,
                 double noise_frac);

enum class OodKind { triangles_ood, polygons_ood };
OodKind ood_kind_from_string(const std::string& s);
struct Split {
  Dataset train;
  Dataset test;
};
/// triangles_ood: canonical train, test with varied cluster shape/size/fill.
/// polygons_ood: train {3,4,8} vertices at 5% noise, test {5,6,7} at 25%.
Split gen_ood_split(OodKind kind, std::uint64_t seed, std::size_t n_train, std::size_t n_test, std::size_t size = 64);

/// Fraction of non-foreground pixels holding noise values (strictly between 0 and 1).
double measured_noise_fraction(const Image& image);

enum class Corruption { gaussian, salt_pepper, blur };
Corruption corruption_from_string(const std::string& s);
Image corrupt(const Image& image, Corruption kind, int severity, std::uint64_t seed);

/// Per-class prefix of a seeded shuffle; prefixes are nested across fractions.
/// Returned indices are sorted. Throws ContractError if any class gets no sample.
std::vector<std::size_t> stratified_subset(const Dataset& dataset, double fraction, std::uint64_t seed);

/// "ASDS", u32 version, u64 length + JSON header, u8 pixels (round(255 x)),
/// i32 labels, u32 task ids.
inline constexpr std::uint32_t kDatasetVersion = 1;
std::string serialize_dataset(const Dataset& dataset);
Dataset deserialize_dataset(const std::string& bytes);
void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace asac::data
