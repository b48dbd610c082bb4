#include "usage/backbones/backbones.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "usage/error.hpp"
#include "usage/numerics/rng.hpp"

namespace usage::backbone {

using ad::Var;

std::string to_string(Kind k) { return k == Kind::conv ? "conv" : "transformer"; }

Kind kind_from_string(const std::string& name) {
  if (name == "conv" || name == "cnn") return Kind::conv;
  if (name == "transformer" || name == "vit") return Kind::transformer;
  throw ValueError("unknown backbone '" + name + "' (expected conv or transformer)");
}

void BackboneConfig::validate() const {
  if (feature_dim == 0) throw ConfigError("feature_dim", "must be positive");
  if (kind == Kind::conv) {
    if (depth < 2) throw ConfigError("depth", "conv backbone needs depth >= 2 (two strided convolutions)");
    if (feature_dim < 2 || feature_dim % 2 != 0) throw ConfigError("feature_dim", "conv backbone needs an even feature_dim");
    return;
  }
  if (depth == 0) throw ConfigError("depth", "must be positive");
  if (patch_size == 0 || kImageSize % patch_size != 0 || kImageSize / patch_size != kGridSize) {
    throw ConfigError("patch_size", "must tile the 32x32 image into an 8x8 grid");
  }
  if (heads == 0 || feature_dim % heads != 0) throw ConfigError("heads", "must divide feature_dim");
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio", "must be positive");
}

namespace {

std::string block(const char* prefix, std::size_t i, const char* leaf) {
  return std::string(prefix) + ".block" + std::to_string(i) + "." + leaf;
}

Tensor uniform(Rng& rng, Shape shape, double bound) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

std::size_t patch_inputs(const BackboneConfig& c) { return kImageChannels * c.patch_size * c.patch_size; }

}  // namespace

std::size_t parameter_count(const BackboneConfig& c) {
  c.validate();
  const std::size_t d = c.feature_dim;
  if (c.kind == Kind::conv) {
    const std::size_t h = d / 2;
    return (h * kImageChannels * 9 + h) + (d * h * 9 + d) + (c.depth - 2) * (d * d * 9 + d);
  }
  const std::size_t m = c.mlp_ratio * d;
  const std::size_t per_block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
  return patch_inputs(c) * d + d + kGridSize * kGridSize * d + c.depth * per_block + 2 * d;
}

void init_backbone(ParamSet& params, const BackboneConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng = Rng::keyed({seed, 0x6261636bULL});
  const std::size_t d = c.feature_dim;
  if (c.kind == Kind::conv) {
    // He-uniform for ReLU convolutions.
    auto conv = [&](const std::string& name, std::size_t out, std::size_t in) {
      params.set(name + ".w", uniform(rng, {out, in, 3, 3}, std::sqrt(6.0 / static_cast<double>(in * 9))));
      params.set(name + ".b", Tensor(Shape{out}, 0.0));
    };
    conv("conv.stem", d / 2, kImageChannels);
    conv("conv.down", d, d / 2);
    for (std::size_t i = 0; i + 2 < c.depth; ++i) conv("conv.block" + std::to_string(i), d, d);
    return;
  }
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    params.set(name + ".w", uniform(rng, {in, out}, std::sqrt(3.0 / static_cast<double>(in))));
    params.set(name + ".b", Tensor(Shape{out}, 0.0));
  };
  auto norm = [&](const std::string& name) {
    params.set(name + ".g", Tensor(Shape{d}, 1.0));
    params.set(name + ".b", Tensor(Shape{d}, 0.0));
  };
  const std::size_t m = c.mlp_ratio * d;
  linear("vit.patch", patch_inputs(c), d);
  params.set("vit.pos", uniform(rng, {kGridSize * kGridSize, d}, 0.02));
  for (std::size_t i = 0; i < c.depth; ++i) {
    norm(block("vit", i, "ln1"));
    linear(block("vit", i, "attn.qkv"), d, 3 * d);
    linear(block("vit", i, "attn.proj"), d, d);
    norm(block("vit", i, "ln2"));
    linear(block("vit", i, "mlp.fc1"), d, m);
    linear(block("vit", i, "mlp.fc2"), m, d);
  }
  norm("vit.norm");
}

ParamSet init_backbone(const BackboneConfig& config, std::uint64_t seed) {
  ParamSet p;
  init_backbone(p, config, seed);
  return p;
}

namespace {

// Stochastic sites draw from their own stream, numbered in forward order.
class Adjuster {
 public:
  Adjuster(const AdjustmentRates& rates, Mode mode) : rates_(rates), active_(mode == Mode::train) {
    if (!(rates.drop_path >= 0.0 && rates.drop_path <= 1.0) || !(rates.dropout >= 0.0 && rates.dropout < 1.0)) {
      throw ValueError("adjustment rates out of range");
    }
  }

  // Residual x + branch(), with the branch gated by drop-path. A dropped
  // branch is never evaluated.
  template <class F>
  Var residual(Var x, F branch) {
    const std::uint64_t site = next_site();
    const double p = active_ ? rates_.drop_path : 0.0;
    if (p == 0.0) return ad::add(x, branch());
    Rng rng = stream(site);
    if (!rng.bernoulli(1.0 - p)) return x;
    return ad::add(x, ad::scale(branch(), 1.0 / (1.0 - p)));
  }

  Var dropout(Var x) {
    const std::uint64_t site = next_site();
    const double p = active_ ? rates_.dropout : 0.0;
    if (p == 0.0) return x;
    Rng rng = stream(site);
    Tensor mask(x.shape());
    const double keep = 1.0 / (1.0 - p);
    for (double& v : mask.values()) v = rng.bernoulli(1.0 - p) ? keep : 0.0;
    return ad::mul_const(x, mask);
  }

 private:
  std::uint64_t next_site() { return site_++; }
  Rng stream(std::uint64_t site) const { return Rng::keyed({rates_.seed, rates_.step, rates_.sample, site}); }

  AdjustmentRates rates_;
  bool active_;
  std::uint64_t site_ = 0;
};

void check_image(const Tensor& image) {
  if (image.shape() != Shape{kImageChannels, kImageSize, kImageSize}) {
    throw ShapeError("forward_features: expected a [3, 32, 32] image, got " + shape_string(image.shape()));
  }
}

Var conv_forward(const ParamVars& p, const Tensor& image, const BackboneConfig& c, Adjuster& adj) {
  ad::Tape& t = p[std::string("conv.stem.w")].tape();
  Tensor centered = image;
  for (double& v : centered.values()) v -= 0.5;
  auto conv = [&](Var x, const std::string& name, std::size_t stride) {
    return ad::conv2d(x, p[name + ".w"], p[name + ".b"], stride, 1);
  };
  Var x = adj.dropout(ad::relu(conv(t.constant(std::move(centered)), "conv.stem", 2)));
  x = adj.dropout(ad::relu(conv(x, "conv.down", 2)));
  for (std::size_t i = 0; i + 2 < c.depth; ++i) {
    const std::string name = "conv.block" + std::to_string(i);
    x = adj.residual(x, [&] { return adj.dropout(ad::relu(conv(x, name, 1))); });
  }
  return ad::transpose(ad::reshape(x, Shape{c.feature_dim, kGridSize * kGridSize}));
}

Tensor patchify(const Tensor& image, std::size_t ps) {
  const std::size_t grid = kImageSize / ps;
  Tensor out(Shape{grid * grid, kImageChannels * ps * ps});
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      double* row = out.data() + (gy * grid + gx) * out.dim(1);
      for (std::size_t ch = 0; ch < kImageChannels; ++ch) {
        for (std::size_t y = 0; y < ps; ++y) {
          for (std::size_t x = 0; x < ps; ++x) {
            row[(ch * ps + y) * ps + x] = image[(ch * kImageSize + gy * ps + y) * kImageSize + gx * ps + x] - 0.5;
          }
        }
      }
    }
  }
  return out;
}

Var linear(const ParamVars& p, Var x, const std::string& name) {
  return ad::add_rows(ad::matmul(x, p[name + ".w"]), p[name + ".b"]);
}

Var norm(const ParamVars& p, Var x, const std::string& name) {
  return ad::layer_norm_rows(x, p[name + ".g"], p[name + ".b"]);
}

Var attention(const ParamVars& p, Var x, const BackboneConfig& c, std::size_t i) {
  const std::size_t d = c.feature_dim, dh = d / c.heads;
  const Var qkv = linear(p, x, block("vit", i, "attn.qkv"));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Var out;
  for (std::size_t h = 0; h < c.heads; ++h) {
    const Var q = ad::slice_cols(qkv, h * dh, dh);
    const Var k = ad::slice_cols(qkv, d + h * dh, dh);
    const Var v = ad::slice_cols(qkv, 2 * d + h * dh, dh);
    const Var a = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), inv_sqrt));
    const Var head = ad::matmul(a, v);
    out = h == 0 ? head : ad::concat_cols(out, head);
  }
  return linear(p, out, block("vit", i, "attn.proj"));
}

Var transformer_forward(const ParamVars& p, const Tensor& image, const BackboneConfig& c, Adjuster& adj) {
  ad::Tape& t = p[std::string("vit.pos")].tape();
  Var x = ad::add(linear(p, t.constant(patchify(image, c.patch_size)), "vit.patch"), p["vit.pos"]);
  for (std::size_t i = 0; i < c.depth; ++i) {
    x = adj.residual(x, [&] { return adj.dropout(attention(p, norm(p, x, block("vit", i, "ln1")), c, i)); });
    x = adj.residual(x, [&] {
      const Var h = ad::gelu(linear(p, norm(p, x, block("vit", i, "ln2")), block("vit", i, "mlp.fc1")));
      return adj.dropout(linear(p, h, block("vit", i, "mlp.fc2")));
    });
  }
  return norm(p, x, "vit.norm");
}

}  // namespace

Var forward_features(const ParamVars& params, const Tensor& image, const BackboneConfig& config,
                     const AdjustmentRates& rates, Mode mode) {
  config.validate();
  check_image(image);
  Adjuster adj(rates, mode);
  try {
    return config.kind == Kind::conv ? conv_forward(params, image, config, adj)
                                     : transformer_forward(params, image, config, adj);
  } catch (const NonFiniteError& e) {
    throw NonFiniteError(std::string("forward_features (") + to_string(config.kind) + "): " + e.what());
  }
}

FeatureMap extract_features(const ParamSet& params, const Tensor& image, const BackboneConfig& config) {
  ad::Tape t(false);
  const ParamVars vars(t, params, false);
  return FeatureMap(kGridSize, kGridSize, forward_features(vars, image, config, {}, Mode::eval).value());
}

// ---- container -------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

constexpr char kMagic[4] = {'U', 'S', 'G', 'E'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
bool get(std::istream& is, T& v) {
  return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof(T)));
}

}  // namespace

void write_container(const std::string& path, const std::vector<NamedTensor>& records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kContainerVersion);
  for (const NamedTensor& r : records) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    put<std::uint64_t>(os, r.value.rank());
    for (std::size_t d : r.value.shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(r.value.data()), static_cast<std::streamsize>(r.value.size() * sizeof(double)));
  }
  if (!os) throw Error("write to '" + path + "' failed");
}

std::vector<NamedTensor> read_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path + "'");
  char magic[4];
  std::uint32_t version = 0;
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw Error("'" + path + "' is not a USGE container");
  if (!get(is, version) || version != kContainerVersion) {
    throw Error("'" + path + "': unsupported container version " + std::to_string(version));
  }
  std::vector<NamedTensor> out;
  std::uint32_t len = 0;
  while (get(is, len)) {
    auto corrupt = [&path] { return Error("'" + path + "': truncated record"); };
    if (len > (1u << 20)) throw Error("'" + path + "': implausible name length");
    std::string name(len, '\0');
    std::uint64_t rank = 0;
    if (!is.read(name.data(), len) || !get(is, rank) || rank > 8) throw corrupt();
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint64_t v = 0;
      if (!get(is, v)) throw corrupt();
      d = static_cast<std::size_t>(v);
    }
    Tensor t(shape);
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
      throw corrupt();
    }
    out.push_back({std::move(name), std::move(t)});
  }
  return out;
}

void save_params(const std::string& path, const ParamSet& params) {
  std::vector<NamedTensor> records;
  for (const auto& [name, t] : params) records.push_back({name, t});
  write_container(path, records);
}

ParamSet load_params(const std::string& path) {
  ParamSet p;
  for (NamedTensor& r : read_container(path)) p.set(r.name, std::move(r.value));
  return p;
}

}  // namespace usage::backbone
