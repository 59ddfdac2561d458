#include "asac/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>

#include <nlohmann/json.hpp>

#include "asac/binary_io.hpp"

namespace asac::data {

namespace {

constexpr int kMaxAttempts = 1000;
constexpr double kEquilateralTolerance = 1.02;
constexpr double kIrregularMargin = 1.15;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double distance(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

Image blank(std::size_t size, double value = 0.0) {
  Image img;
  img.channels = 1;
  img.height = img.width = size;
  img.pixels.assign(size * size, value);
  return img;
}

bool inside_cluster(double dx, double dy, const ClusterStyle& style, double r) {
  switch (style.shape) {
    case ClusterShape::circle: return std::hypot(dx, dy) <= r;
    case ClusterShape::square: return std::max(std::abs(dx), std::abs(dy)) <= r;
    case ClusterShape::triangle: {
      // Upward triangle inscribed in the circle of radius r.
      const double s3 = std::sqrt(3.0);
      if (dy > r / 2.0) return false;
      return dy >= -r + s3 * std::abs(dx) - 1e-12 && std::abs(dx) <= s3 * r / 2.0;
    }
  }
  return false;
}

void draw_cluster(Image& img, const Point& c, const ClusterStyle& style, double value) {
  const double r = style.radius;
  const int x0 = static_cast<int>(std::floor(c.x - r - 1)), x1 = static_cast<int>(std::ceil(c.x + r + 1));
  const int y0 = static_cast<int>(std::floor(c.y - r - 1)), y1 = static_cast<int>(std::ceil(c.y + r + 1));
  for (int y = std::max(y0, 0); y <= std::min(y1, static_cast<int>(img.height) - 1); ++y) {
    for (int x = std::max(x0, 0); x <= std::min(x1, static_cast<int>(img.width) - 1); ++x) {
      const double dx = x + 0.5 - c.x, dy = y + 0.5 - c.y;
      bool on = inside_cluster(dx, dy, style, r);
      if (on && !style.filled && r > 1.0) on = !inside_cluster(dx, dy, style, r - 1.0);
      if (on) img.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = value;
    }
  }
}

bool fits(const std::vector<Point>& pts, std::size_t size, double margin) {
  const double hi = static_cast<double>(size) - margin;
  return std::all_of(pts.begin(), pts.end(),
                     [&](const Point& p) { return p.x >= margin && p.x <= hi && p.y >= margin && p.y <= hi; });
}

std::vector<double> side_lengths(const std::vector<Point>& v) {
  std::vector<double> sides(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) sides[i] = distance(v[i], v[(i + 1) % v.size()]);
  return sides;
}

double min_pairwise(const std::vector<Point>& v) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = i + 1; j < v.size(); ++j) m = std::min(m, distance(v[i], v[j]));
  return m;
}

std::vector<Point> ring(const Point& c, double radius, const std::vector<double>& angles) {
  std::vector<Point> pts;
  pts.reserve(angles.size());
  for (double a : angles) pts.push_back({c.x + radius * std::cos(a), c.y + radius * std::sin(a)});
  return pts;
}

}  // namespace

std::string to_string(ClusterShape shape) {
  switch (shape) {
    case ClusterShape::circle: return "circle";
    case ClusterShape::triangle: return "triangle";
    case ClusterShape::square: return "square";
  }
  return "?";
}

std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t stream) {
  return splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ index);
}

double max_side_ratio(const std::vector<Point>& vertices) {
  const auto sides = side_lengths(vertices);
  const auto [lo, hi] = std::minmax_element(sides.begin(), sides.end());
  return *hi / *lo;
}

Sample gen_triangle(std::uint64_t seed, std::uint64_t index, std::size_t size, bool positive,
                    const ClusterStyle& style) {
  if (size < 16) throw ContractError("gen_triangle: size must be at least 16");
  std::mt19937_64 rng(sample_seed(seed, index, 1));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double s = static_cast<double>(size);
  const double margin = style.radius + 1.0;
  const double min_side = std::max(4.0 * style.radius + 2.0, 0.25 * s);
  const double max_side = 0.8 * s;

  std::vector<Point> pts;
  int attempt = 0;
  for (; attempt < kMaxAttempts; ++attempt) {
    if (positive) {
      const double side = min_side + (max_side - min_side) * u01(rng);
      const double rot = 2.0 * std::numbers::pi * u01(rng);
      const Point c{margin + (s - 2 * margin) * u01(rng), margin + (s - 2 * margin) * u01(rng)};
      pts = ring(c, side / std::sqrt(3.0), {rot, rot + 2.0 * std::numbers::pi / 3.0, rot + 4.0 * std::numbers::pi / 3.0});
      if (fits(pts, size, margin)) break;
    } else {
      pts.clear();
      for (int k = 0; k < 3; ++k) pts.push_back({margin + (s - 2 * margin) * u01(rng), margin + (s - 2 * margin) * u01(rng)});
      if (min_pairwise(pts) >= min_side && max_side_ratio(pts) > kIrregularMargin) break;
    }
  }
  if (attempt == kMaxAttempts) throw GenerationError("gen_triangle: could not place clusters in a " + std::to_string(size) + " px image");

  Sample sample;
  sample.image = blank(size);
  for (const auto& p : pts) draw_cluster(sample.image, p, style, 1.0);
  ShapeMeta meta;
  meta.vertex_centroids = pts;
  meta.cluster_shape = style.shape;
  meta.cluster_size = style.radius;
  meta.filled = style.filled;
  meta.image_size = size;
  sample.label = {positive ? 1 : 0};
  sample.meta = std::move(meta);
  return sample;
}

Sample gen_polygon(std::uint64_t seed, std::uint64_t index, std::size_t size, std::size_t vertices,
                   double noise_frac, bool regular, bool negative) {
  if (vertices < 3 || vertices > 15) throw ContractError("gen_polygon: vertices must lie in [3, 15]");
  if (!(noise_frac >= 0.0 && noise_frac <= 1.0)) throw ContractError("gen_polygon: noise_frac must lie in [0, 1]");
  if (size < 16) throw ContractError("gen_polygon: size must be at least 16");
  std::mt19937_64 rng(sample_seed(seed, index, 2));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const ClusterStyle style;
  const double s = static_cast<double>(size);
  const double margin = style.radius + 1.0;
  const double min_gap = 2.0 * style.radius + 3.0;
  const double step = 2.0 * std::numbers::pi / static_cast<double>(vertices);

  std::vector<Point> pts;
  int attempt = 0;
  for (; attempt < kMaxAttempts; ++attempt) {
    const double radius = s * (0.2 + 0.22 * u01(rng));
    const double rot = step * u01(rng);
    const Point c{margin + (s - 2 * margin) * u01(rng), margin + (s - 2 * margin) * u01(rng)};
    std::vector<double> angles(vertices);
    for (std::size_t k = 0; k < vertices; ++k) {
      angles[k] = rot + step * static_cast<double>(k);
      if (!regular) angles[k] += (u01(rng) - 0.5) * 0.9 * step;
    }
    pts = ring(c, radius, angles);
    if (!fits(pts, size, margin) || min_pairwise(pts) < min_gap) continue;
    if (!regular && max_side_ratio(pts) <= kIrregularMargin) continue;
    break;
  }
  if (attempt == kMaxAttempts) throw GenerationError("gen_polygon: could not place " + std::to_string(vertices) + " clusters");

  Sample sample;
  Image img = blank(size);
  for (const auto& p : pts) draw_cluster(img, p, style, 1.0);

  std::vector<std::size_t> background;
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    if (img.pixels[i] == 0.0) background.push_back(i);
  const auto noisy = static_cast<std::size_t>(std::llround(noise_frac * static_cast<double>(background.size())));
  std::uniform_real_distribution<double> gray(0.25, 0.75);
  for (std::size_t k = 0; k < noisy; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, background.size() - 1);
    std::swap(background[k], background[pick(rng)]);
    img.pixels[background[k]] = gray(rng);
  }
  if (negative)
    for (auto& v : img.pixels) v = 1.0 - v;

  ShapeMeta meta;
  meta.vertex_centroids = pts;
  meta.cluster_shape = style.shape;
  meta.cluster_size = style.radius;
  meta.filled = style.filled;
  meta.negative = negative;
  meta.noise_frac = noise_frac;
  meta.image_size = size;
  sample.image = std::move(img);
  sample.label = {regular ? 1 : 0};
  sample.meta = std::move(meta);
  return sample;
}

int triangle_task_label(const ShapeMeta& meta, std::size_t task_id) {
  if (meta.vertex_centroids.size() != 3) throw ContractError("triangle_task_label: expected three centroids");
  switch (task_id) {
    case 0: return max_side_ratio(meta.vertex_centroids) <= kEquilateralTolerance ? 1 : 0;
    case 1: {
      const double mid = static_cast<double>(meta.image_size) / 2.0;
      const auto upper = std::count_if(meta.vertex_centroids.begin(), meta.vertex_centroids.end(),
                                       [mid](const Point& p) { return p.y < mid; });
      return upper >= 2 ? 1 : 0;
    }
    default: throw ContractError("triangle_task_label: task id must be 0 or 1, got " + std::to_string(task_id));
  }
}

Dataset triangles(std::uint64_t seed, std::size_t count, std::size_t size, const ClusterStyle& style) {
  Dataset ds;
  ds.name = "triangles";
  ds.image_size = size;
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) ds.samples.push_back(gen_triangle(seed, i, size, i % 2 == 0, style));
  return ds;
}

Dataset multitask_triangles(std::uint64_t seed, std::size_t count, std::size_t size) {
  Dataset ds;
  ds.name = "triangles_multitask";
  ds.image_size = size;
  ds.schema.num_tasks = 2;
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Sample s = gen_triangle(seed, i, size, i % 2 == 0);
    s.task_id = (i / 2) % 2;
    s.label = {triangle_task_label(*s.meta, s.task_id)};
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Dataset polygons(std::uint64_t seed, std::size_t count, std::size_t size, std::span<const std::size_t> vertex_choices,
                 double noise_frac) {
  if (vertex_choices.empty()) throw ContractError("polygons: no vertex counts given");
  Dataset ds;
  ds.name = "polygons";
  ds.image_size = size;
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t h = sample_seed(seed, i, 3);
    const std::size_t vertices = vertex_choices[h % vertex_choices.size()];
    const bool negative = ((h >> 32) & 1U) != 0;
    ds.samples.push_back(gen_polygon(seed, i, size, vertices, noise_frac, i % 2 == 0, negative));
  }
  return ds;
}

OodKind ood_kind_from_string(const std::string& s) {
  if (s == "triangles_ood") return OodKind::triangles_ood;
  if (s == "polygons_ood") return OodKind::polygons_ood;
  throw ContractError("unknown OOD kind '" + s + "'");
}

Split gen_ood_split(OodKind kind, std::uint64_t seed, std::size_t n_train, std::size_t n_test, std::size_t size) {
  const std::uint64_t train_seed = sample_seed(seed, 0, 10);
  const std::uint64_t test_seed = sample_seed(seed, 1, 10);
  Split split;
  if (kind == OodKind::polygons_ood) {
    const std::size_t train_vertices[] = {3, 4, 8};
    const std::size_t test_vertices[] = {5, 6, 7};
    split.train = polygons(train_seed, n_train, size, train_vertices, 0.05);
    split.test = polygons(test_seed, n_test, size, test_vertices, 0.25);
    split.train.name = "polygons_ood_train";
    split.test.name = "polygons_ood_test";
    return split;
  }
  split.train = triangles(train_seed, n_train, size);
  split.train.name = "triangles_ood_train";
  Dataset& test = split.test;
  test.name = "triangles_ood_test";
  test.image_size = size;
  const ClusterShape shapes[] = {ClusterShape::circle, ClusterShape::triangle, ClusterShape::square};
  for (std::size_t i = 0; i < n_test; ++i) {
    const std::uint64_t h = sample_seed(test_seed, i, 4);
    ClusterStyle style;
    style.shape = shapes[(i / 2) % 3];
    style.radius = 1.0 + static_cast<double>(h % 4);
    style.filled = ((h >> 8) & 1U) != 0;
    test.samples.push_back(gen_triangle(test_seed, i, size, i % 2 == 0, style));
  }
  return split;
}

double measured_noise_fraction(const Image& image) {
  std::size_t noisy = 0, background = 0;
  std::size_t ones = 0, zeros = 0;
  for (double v : image.pixels) {
    if (v == 0.0) ++zeros;
    else if (v == 1.0) ++ones;
  }
  // The background is whichever extreme dominates.
  const double bg = zeros >= ones ? 0.0 : 1.0;
  for (double v : image.pixels) {
    if (v == bg) ++background;
    else if (v > 0.0 && v < 1.0) ++noisy;
  }
  return static_cast<double>(noisy) / static_cast<double>(noisy + background);
}

Corruption corruption_from_string(const std::string& s) {
  if (s == "gaussian") return Corruption::gaussian;
  if (s == "salt_pepper") return Corruption::salt_pepper;
  if (s == "blur") return Corruption::blur;
  throw ContractError("unknown corruption '" + s + "'");
}

Image corrupt(const Image& image, Corruption kind, int severity, std::uint64_t seed) {
  if (severity < 1 || severity > 5) throw ContractError("corrupt: severity must lie in 1..5");
  const auto level = static_cast<std::size_t>(severity - 1);
  std::mt19937_64 rng(sample_seed(seed, static_cast<std::uint64_t>(severity), 5));
  Image out = image;
  switch (kind) {
    case Corruption::gaussian: {
      constexpr double sigma[] = {0.04, 0.08, 0.12, 0.16, 0.20};
      // Same unit draws for every severity so damage grows monotonically.
      std::mt19937_64 unit_rng(sample_seed(seed, 0, 5));
      std::normal_distribution<double> n01(0.0, 1.0);
      for (auto& v : out.pixels) v = std::clamp(v + sigma[level] * n01(unit_rng), 0.0, 1.0);
      break;
    }
    case Corruption::salt_pepper: {
      constexpr double fraction[] = {0.01, 0.02, 0.04, 0.08, 0.16};
      std::vector<std::size_t> order(out.pixels.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      const auto flips = static_cast<std::size_t>(std::llround(fraction[level] * static_cast<double>(order.size())));
      for (std::size_t k = 0; k < flips; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, order.size() - 1);
        std::swap(order[k], order[pick(rng)]);
        double& v = out.pixels[order[k]];
        v = v < 0.5 ? 1.0 : 0.0;
      }
      break;
    }
    case Corruption::blur: {
      constexpr int width[] = {1, 3, 3, 5, 5};
      constexpr int passes[] = {1, 1, 2, 2, 3};
      const int half = width[level] / 2;
      const auto h = static_cast<int>(out.height), w = static_cast<int>(out.width);
      for (int pass = 0; pass < passes[level]; ++pass) {
        Image next = out;
        for (std::size_t c = 0; c < out.channels; ++c)
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
              double acc = 0.0;
              for (int dy = -half; dy <= half; ++dy)
                for (int dx = -half; dx <= half; ++dx) {
                  const int yy = std::clamp(y + dy, 0, h - 1), xx = std::clamp(x + dx, 0, w - 1);
                  acc += out.at(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                }
              next.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
                  std::clamp(acc / static_cast<double>(width[level] * width[level]), 0.0, 1.0);
            }
        out = std::move(next);
      }
      break;
    }
  }
  return out;
}

SampleBatch make_batch(const Dataset& dataset, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("make_batch: empty index list");
  const std::size_t arity = dataset.schema.label_arity();
  const std::size_t c = dataset.channels, s = dataset.image_size;
  const std::size_t per = c * s * s;
  std::vector<double> pixels(indices.size() * per);
  SampleBatch batch;
  batch.label_arity = arity;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Sample& sm = dataset.samples.at(indices[k]);
    if (sm.image.pixels.size() != per) throw ContractError("make_batch: sample image size mismatch");
    if (sm.label.size() != arity) throw ContractError("make_batch: label arity does not match the task schema");
    std::copy(sm.image.pixels.begin(), sm.image.pixels.end(), pixels.begin() + k * per);
    batch.labels.insert(batch.labels.end(), sm.label.begin(), sm.label.end());
    if (dataset.schema.num_tasks > 1) batch.task_ids.push_back(sm.task_id);
    if (sm.meta) batch.meta.push_back(*sm.meta);
  }
  batch.images = Tensor::from({indices.size(), c, s, s}, std::move(pixels));
  return batch;
}

SampleBatch make_batch(const Dataset& dataset) {
  std::vector<std::size_t> all(dataset.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return make_batch(dataset, all);
}

std::vector<std::size_t> stratified_subset(const Dataset& dataset, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractError("stratified_subset: fraction must lie in (0, 1]");
  // Stratify on (task, first label entry).
  std::map<std::pair<std::size_t, int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset.samples[i];
    groups[{s.task_id, s.label.empty() ? 0 : s.label.front()}].push_back(i);
  }
  std::vector<std::size_t> out;
  for (auto& [key, members] : groups) {
    std::mt19937_64 rng(sample_seed(seed, key.first * 1000003ULL + static_cast<std::uint64_t>(key.second), 6));
    std::shuffle(members.begin(), members.end(), rng);
    const auto take = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(members.size()) + 1e-9));
    if (take == 0) {
      throw ContractError("stratified_subset: fraction " + std::to_string(fraction) +
                          " leaves no sample for class " + std::to_string(key.second) + " of task " +
                          std::to_string(key.first));
    }
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace {
constexpr char kDatasetMagic[4] = {'A', 'S', 'D', 'S'};
}

std::string serialize_dataset(const Dataset& ds) {
  const std::size_t arity = ds.schema.label_arity();
  nlohmann::json header{{"name", ds.name},
                        {"count", ds.size()},
                        {"channels", ds.channels},
                        {"image_size", ds.image_size},
                        {"head_kind", model::to_string(ds.schema.head_kind)},
                        {"num_classes", ds.schema.num_classes},
                        {"num_tasks", ds.schema.num_tasks},
                        {"label_arity", arity}};
  io::ByteWriter w;
  w.put_bytes(std::string(kDatasetMagic, 4));
  w.put<std::uint32_t>(kDatasetVersion);
  w.put_string(header.dump());
  std::string pixels;
  for (const auto& s : ds.samples) {
    for (double v : s.image.pixels) pixels.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
  w.put_bytes(pixels);
  for (const auto& s : ds.samples)
    for (int l : s.label) w.put<std::int32_t>(l);
  for (const auto& s : ds.samples) w.put<std::uint32_t>(static_cast<std::uint32_t>(s.task_id));
  return w.take();
}

Dataset deserialize_dataset(const std::string& bytes) {
  io::ByteReader r(bytes);
  if (r.get_bytes(4) != std::string(kDatasetMagic, 4)) throw io::FormatError("not an ASDS dataset (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kDatasetVersion) throw io::FormatError("unsupported dataset version " + std::to_string(version));
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(r.get_string());
  } catch (const nlohmann::json::exception& e) {
    throw io::FormatError(std::string("dataset header is not valid JSON: ") + e.what());
  }
  Dataset ds;
  ds.name = h.at("name").get<std::string>();
  ds.channels = h.at("channels").get<std::size_t>();
  ds.image_size = h.at("image_size").get<std::size_t>();
  ds.schema.head_kind = model::head_kind_from_string(h.at("head_kind").get<std::string>());
  ds.schema.num_classes = h.at("num_classes").get<std::size_t>();
  ds.schema.num_tasks = h.at("num_tasks").get<std::size_t>();
  const auto count = h.at("count").get<std::size_t>();
  const auto arity = h.at("label_arity").get<std::size_t>();
  if (arity != ds.schema.label_arity()) throw io::FormatError("label arity disagrees with the task schema");
  const std::size_t per = ds.channels * ds.image_size * ds.image_size;
  const std::string pixels = r.get_bytes(count * per);
  ds.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    Image& img = ds.samples[i].image;
    img.channels = ds.channels;
    img.height = img.width = ds.image_size;
    img.pixels.resize(per);
    for (std::size_t k = 0; k < per; ++k)
      img.pixels[k] = static_cast<double>(static_cast<std::uint8_t>(pixels[i * per + k])) / 255.0;
  }
  for (auto& s : ds.samples) {
    s.label.resize(arity);
    for (auto& l : s.label) l = r.get<std::int32_t>();
  }
  for (auto& s : ds.samples) s.task_id = r.get<std::uint32_t>();
  if (!r.done()) throw io::FormatError("trailing bytes after dataset payload");
  return ds;
}

void save_dataset(const Dataset& dataset, const std::string& path) { io::write_file(path, serialize_dataset(dataset)); }

Dataset load_dataset(const std::string& path) { return deserialize_dataset(io::read_file(path)); }

}  // namespace asac::data
