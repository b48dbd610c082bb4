#include "usage/synthdata/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "usage/backbones/backbones.hpp"
#include "usage/error.hpp"
#include "usage/io/png.hpp"
#include "usage/numerics/rng.hpp"

namespace usage::synth {

void SceneSpec::validate() const {
  if (num_classes == 0 || num_classes > kShapeKinds) throw ConfigError("num_classes", "must lie in 1..3");
  if (image_size != 32) throw ConfigError("image_size", "only 32 is supported");
  if (shapes_min > shapes_max) throw ConfigError("shapes_min", "must not exceed shapes_max");
  if (shapes_max > num_classes) throw ConfigError("shapes_max", "at most one shape per class");
  if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0)) {
    throw ConfigError("scale_min", "need 0 < scale_min <= scale_max <= 1");
  }
  if (!(hue_jitter >= 0.0 && hue_jitter <= 0.5)) throw ConfigError("hue_jitter", "must lie in [0, 0.5]");
  if (!(intensity_jitter >= 0.0 && intensity_jitter < 1.0)) throw ConfigError("intensity_jitter", "must lie in [0, 1)");
  if (!(texture_amplitude >= 0.0 && texture_amplitude <= 1.0)) throw ConfigError("texture_amplitude", "must lie in [0, 1]");
}

nlohmann::ordered_json SceneSpec::to_json() const {
  return {{"num_classes", num_classes},   {"image_size", image_size},
          {"shapes_min", shapes_min},     {"shapes_max", shapes_max},
          {"scale_min", scale_min},       {"scale_max", scale_max},
          {"hue_jitter", hue_jitter},     {"intensity_jitter", intensity_jitter},
          {"texture_amplitude", texture_amplitude}, {"overlap_allowed", overlap_allowed}};
}

SceneSpec SceneSpec::from_json(const nlohmann::json& j) {
  SceneSpec s;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "num_classes") s.num_classes = v.get<std::size_t>();
      else if (key == "image_size") s.image_size = v.get<std::size_t>();
      else if (key == "shapes_min") s.shapes_min = v.get<std::size_t>();
      else if (key == "shapes_max") s.shapes_max = v.get<std::size_t>();
      else if (key == "scale_min") s.scale_min = v.get<double>();
      else if (key == "scale_max") s.scale_max = v.get<double>();
      else if (key == "hue_jitter") s.hue_jitter = v.get<double>();
      else if (key == "intensity_jitter") s.intensity_jitter = v.get<double>();
      else if (key == "texture_amplitude") s.texture_amplitude = v.get<double>();
      else if (key == "overlap_allowed") s.overlap_allowed = v.get<bool>();
      else throw ConfigError(key, "unknown scene key");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(key, std::string("bad value: ") + e.what());
    }
  }
  s.validate();
  return s;
}

std::string SceneSpec::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json().dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

constexpr std::size_t kSize = 32;

using Rgb = std::array<double, 3>;

Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double k[3] = {5.0, 3.0, 1.0};
  Rgb out;
  for (int c = 0; c < 3; ++c) {
    const double kk = std::fmod(k[c] + h * 6.0, 6.0);
    out[c] = v - v * s * std::max(0.0, std::min({kk, 4.0 - kk, 1.0}));
  }
  return out;
}

// Base hues: disk red, triangle green, bar blue.
constexpr double kClassHue[kShapeKinds] = {0.0, 1.0 / 3.0, 2.0 / 3.0};

struct Shape2D {
  std::size_t cls = 0;
  double cx = 0, cy = 0, size = 0;
  bool vertical = false;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy, r = size / 2.0;
    switch (cls) {
      case 1: return dx * dx + dy * dy <= r * r;
      case 2: {
        // Upward triangle inside the size x size box.
        const double t = (dy + r) / size;  // 0 at apex, 1 at base
        return t >= 0.0 && t <= 1.0 && std::abs(dx) <= r * t;
      }
      default: {
        const double half_long = r, half_short = size / 4.0;
        return vertical ? std::abs(dx) <= half_short && std::abs(dy) <= half_long
                        : std::abs(dx) <= half_long && std::abs(dy) <= half_short;
      }
    }
  }
};

std::vector<double> smooth_noise(Rng& rng) {
  // 5x5 control grid, bilinear upsampled to 32x32.
  constexpr std::size_t g = 5;
  double grid[g][g];
  for (auto& row : grid) {
    for (double& v : row) v = rng.uniform();
  }
  std::vector<double> out(kSize * kSize);
  for (std::size_t y = 0; y < kSize; ++y) {
    for (std::size_t x = 0; x < kSize; ++x) {
      const double fy = (static_cast<double>(y) + 0.5) / kSize * (g - 1);
      const double fx = (static_cast<double>(x) + 0.5) / kSize * (g - 1);
      const std::size_t y0 = std::min<std::size_t>(static_cast<std::size_t>(fy), g - 2);
      const std::size_t x0 = std::min<std::size_t>(static_cast<std::size_t>(fx), g - 2);
      const double ty = fy - static_cast<double>(y0), tx = fx - static_cast<double>(x0);
      out[y * kSize + x] = (1 - ty) * ((1 - tx) * grid[y0][x0] + tx * grid[y0][x0 + 1]) +
                           ty * ((1 - tx) * grid[y0 + 1][x0] + tx * grid[y0 + 1][x0 + 1]);
    }
  }
  return out;
}

}  // namespace

seed::SeedLabelMap downsample_mask(const seed::SeedLabelMap& mask, std::size_t grid) {
  if (grid == 0 || mask.height % grid != 0 || mask.width % grid != 0) {
    throw ShapeError("downsample_mask: grid must divide the mask size");
  }
  const std::size_t by = mask.height / grid, bx = mask.width / grid;
  seed::SeedLabelMap out{grid, grid, std::vector<int>(grid * grid, 0)};
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      std::vector<int> votes;
      for (std::size_t y = 0; y < by; ++y) {
        for (std::size_t x = 0; x < bx; ++x) {
          const int l = mask.labels[(gy * by + y) * mask.width + gx * bx + x];
          if (l < 0) throw ValueError("downsample_mask: negative label");
          if (static_cast<std::size_t>(l) >= votes.size()) votes.resize(static_cast<std::size_t>(l) + 1, 0);
          ++votes[static_cast<std::size_t>(l)];
        }
      }
      // max_element returns the first maximum: background, then lower ids.
      out.labels[gy * grid + gx] = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    }
  }
  return out;
}

Sample generate_sample(std::uint64_t seed, std::uint64_t index, const SceneSpec& spec) {
  spec.validate();
  Rng rng = Rng::keyed({seed, index, 0x73636e65ULL});
  Sample s;
  s.seed = seed;
  s.index = index;
  s.gt_mask = seed::SeedLabelMap{kSize, kSize, std::vector<int>(kSize * kSize, 0)};
  s.labels = Tensor(Shape{spec.num_classes}, 0.0);

  // Background: per-image base color modulated by smooth noise per channel.
  const Rgb base = hsv(rng.uniform(), rng.uniform(0.1, 0.5), rng.uniform(0.35, 0.75));
  s.image = Tensor(Shape{3, kSize, kSize});
  for (std::size_t c = 0; c < 3; ++c) {
    const std::vector<double> noise = smooth_noise(rng);
    for (std::size_t i = 0; i < kSize * kSize; ++i) {
      s.image[c * kSize * kSize + i] = std::clamp(base[c] + spec.texture_amplitude * (noise[i] - 0.5), 0.0, 1.0);
    }
  }

  // Distinct classes, count uniform in [shapes_min, shapes_max].
  const std::size_t n = spec.shapes_min + rng.below(spec.shapes_max - spec.shapes_min + 1);
  std::vector<std::size_t> classes(spec.num_classes);
  for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = c + 1;
  for (std::size_t i = classes.size(); i > 1; --i) std::swap(classes[i - 1], classes[rng.below(i)]);
  classes.resize(n);

  for (std::size_t cls : classes) {
    Shape2D shape;
    bool placed = false;
    for (int pass = 0; pass < 2 && !placed; ++pass) {
      const double hi = pass == 0 ? spec.scale_max : spec.scale_min;
      for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
        shape.cls = cls;
        shape.size = rng.uniform(spec.scale_min, hi) * kSize;
        shape.vertical = rng.bernoulli(0.5);
        const double r = shape.size / 2.0;
        shape.cx = rng.uniform(r, kSize - r);
        shape.cy = rng.uniform(r, kSize - r);
        bool clash = false, any = false;
        for (std::size_t y = 0; y < kSize && !clash; ++y) {
          for (std::size_t x = 0; x < kSize; ++x) {
            if (!shape.contains(x + 0.5, y + 0.5)) continue;
            any = true;
            if (!spec.overlap_allowed && s.gt_mask.labels[y * kSize + x] != 0) {
              clash = true;
              break;
            }
          }
        }
        placed = any && !clash;
      }
    }
    if (!placed) {
      s.warnings.push_back("class " + std::to_string(cls) + " could not be placed");
      continue;
    }
    const double hue = kClassHue[cls - 1] + rng.uniform(-spec.hue_jitter, spec.hue_jitter);
    const double value = std::clamp(0.85 + rng.uniform(-spec.intensity_jitter, spec.intensity_jitter), 0.0, 1.0);
    const Rgb color = hsv(hue, rng.uniform(0.6, 0.9), value);
    for (std::size_t y = 0; y < kSize; ++y) {
      for (std::size_t x = 0; x < kSize; ++x) {
        if (!shape.contains(x + 0.5, y + 0.5)) continue;
        s.gt_mask.labels[y * kSize + x] = static_cast<int>(cls);
        for (std::size_t c = 0; c < 3; ++c) {
          double& px = s.image[(c * kSize + y) * kSize + x];
          px = std::clamp(color[c] + 0.1 * (px - base[c]), 0.0, 1.0);
        }
      }
    }
  }
  for (int l : s.gt_mask.labels) {
    if (l > 0) s.labels[static_cast<std::size_t>(l - 1)] = 1.0;
  }
  s.downsampled = downsample_mask(s.gt_mask, backbone::kGridSize);
  return s;
}

std::string to_string(Split s) { return s == Split::eval ? "eval" : "train"; }

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "eval") return Split::eval;
  throw ValueError("unknown split '" + name + "' (expected train or eval)");
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(spec.num_classes, 0);
  for (const Sample& s : samples) {
    for (std::size_t c = 0; c < counts.size(); ++c) counts[c] += s.labels[c] == 1.0;
  }
  return counts;
}

nlohmann::ordered_json Dataset::manifest() const {
  std::size_t warnings = 0;
  for (const Sample& s : samples) warnings += s.warnings.size();
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["split"] = to_string(split);
  j["index_offset"] = split == Split::eval ? kEvalIndexOffset : 0;
  j["count"] = samples.size();
  j["spec"] = spec.to_json();
  j["spec_hash"] = spec.hash();
  j["class_counts"] = class_counts();
  std::vector<double> freq;
  for (std::size_t c : class_counts()) freq.push_back(samples.empty() ? 0.0 : static_cast<double>(c) / samples.size());
  j["class_frequencies"] = freq;
  j["warnings"] = warnings;
  return j;
}

Dataset generate_dataset(std::uint64_t seed, std::size_t count, const SceneSpec& spec, Split split) {
  if (count == 0) throw ValueError("generate_dataset: count must be positive");
  Dataset d{seed, split, spec, {}};
  const std::uint64_t offset = split == Split::eval ? kEvalIndexOffset : 0;
  d.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) d.samples.push_back(generate_sample(seed, offset + i, spec));
  return d;
}

Dataset dataset_from_manifest(const nlohmann::json& m) {
  const SceneSpec spec = SceneSpec::from_json(m.at("spec"));
  const Dataset d = generate_dataset(m.at("seed").get<std::uint64_t>(), m.at("count").get<std::size_t>(), spec,
                                     split_from_string(m.at("split").get<std::string>()));
  if (m.contains("spec_hash") && m.at("spec_hash").get<std::string>() != spec.hash()) {
    throw Error("manifest spec_hash does not match its spec");
  }
  return d;
}

namespace {

Tensor mask_tensor(const seed::SeedLabelMap& m) {
  Tensor t(Shape{m.height, m.width});
  for (std::size_t i = 0; i < m.labels.size(); ++i) t[i] = m.labels[i];
  return t;
}

seed::SeedLabelMap mask_from(const Tensor& t) {
  seed::SeedLabelMap m{t.dim(0), t.dim(1), std::vector<int>(t.size())};
  for (std::size_t i = 0; i < t.size(); ++i) m.labels[i] = static_cast<int>(t[i]);
  return m;
}

io::RgbImage to_rgb(const Tensor& image) {
  io::RgbImage out(kSize, kSize);
  for (std::size_t y = 0; y < kSize; ++y) {
    for (std::size_t x = 0; x < kSize; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        out.at(x, y)[c] = static_cast<std::uint8_t>(std::lround(255.0 * image[(c * kSize + y) * kSize + x]));
      }
    }
  }
  return out;
}

}  // namespace

void save_dataset(const Dataset& data, const std::string& dir, std::size_t png_count) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  fs::remove_all(fs::path(dir) / "png");
  std::vector<backbone::NamedTensor> records;
  for (const Sample& s : data.samples) {
    const std::string p = "sample" + std::to_string(s.index - (data.split == Split::eval ? kEvalIndexOffset : 0));
    records.push_back({p + ".image", s.image});
    records.push_back({p + ".labels", s.labels});
    records.push_back({p + ".mask", mask_tensor(s.gt_mask)});
    records.push_back({p + ".grid", mask_tensor(s.downsampled)});
  }
  backbone::write_container((fs::path(dir) / "samples.bin").string(), records);
  std::ofstream((fs::path(dir) / "manifest.json").string()) << data.manifest().dump(2) << "\n";
  if (png_count > 0) {
    fs::create_directories(fs::path(dir) / "png");
    for (std::size_t i = 0; i < std::min(png_count, data.samples.size()); ++i) {
      io::write_png((fs::path(dir) / "png" / ("sample" + std::to_string(i) + ".png")).string(),
                    to_rgb(data.samples[i].image));
    }
  }
}

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream is((fs::path(dir) / "manifest.json").string());
  if (!is) throw Error("no manifest.json in '" + dir + "'");
  nlohmann::json m;
  try {
    is >> m;
  } catch (const nlohmann::json::exception& e) {
    throw Error("'" + dir + "/manifest.json': " + e.what());
  }
  Dataset d;
  d.seed = m.at("seed").get<std::uint64_t>();
  d.split = split_from_string(m.at("split").get<std::string>());
  d.spec = SceneSpec::from_json(m.at("spec"));
  const std::size_t count = m.at("count").get<std::size_t>();
  const std::uint64_t offset = d.split == Split::eval ? kEvalIndexOffset : 0;
  const auto records = backbone::read_container((fs::path(dir) / "samples.bin").string());
  if (records.size() != 4 * count) throw Error("'" + dir + "/samples.bin' does not match the manifest count");
  for (std::size_t i = 0; i < count; ++i) {
    Sample s;
    s.seed = d.seed;
    s.index = offset + i;
    s.image = records[4 * i].value;
    s.labels = records[4 * i + 1].value;
    s.gt_mask = mask_from(records[4 * i + 2].value);
    s.downsampled = mask_from(records[4 * i + 3].value);
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace usage::synth
