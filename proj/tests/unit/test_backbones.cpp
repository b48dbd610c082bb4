#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "doctest.h"
#include "usage/backbones/backbones.hpp"
#include "usage/error.hpp"
#include "usage/numerics/gradcheck.hpp"
#include "usage/numerics/rng.hpp"

using namespace usage;
using namespace usage::backbone;

namespace {

Tensor random_image(std::uint64_t seed) {
  Rng rng(seed);
  Tensor img(Shape{3, 32, 32});
  for (double& v : img.values()) v = rng.uniform();
  return img;
}

BackboneConfig config(Kind kind, std::size_t d = 64, std::size_t depth = 4, std::size_t heads = 4) {
  BackboneConfig c;
  c.kind = kind;
  c.feature_dim = d;
  c.depth = depth;
  c.heads = heads;
  return c;
}

Tensor forward(const ParamSet& p, const Tensor& img, const BackboneConfig& c, const AdjustmentRates& r, Mode m) {
  ad::Tape t(false);
  const ParamVars v(t, p, false);
  return forward_features(v, img, c, r, m).value();
}

}  // namespace

TEST_CASE("init is deterministic and seed sensitive") {
  for (Kind k : {Kind::conv, Kind::transformer}) {
    const BackboneConfig c = config(k);
    CHECK(init_backbone(c, 7) == init_backbone(c, 7));
    CHECK_FALSE(init_backbone(c, 7) == init_backbone(c, 8));
  }
}

TEST_CASE("parameter counts match the layer shapes") {
  // transformer D=64, depth 4, MLP width 128, 48-value patches:
  //   patch 48*64+64, pos 64*64, per block 2*64 + (64*192+192) + (64*64+64)
  //   + 2*64 + (64*128+128) + (128*64+64), final norm 2*64
  const std::size_t block = 128 + 12480 + 4160 + 128 + 8320 + 8256;
  const std::size_t vit = 3136 + 4096 + 4 * block + 128;
  CHECK(vit == 141248);
  CHECK(parameter_count(config(Kind::transformer)) == vit);
  CHECK(init_backbone(config(Kind::transformer), 1).total_values() == vit);
  // conv D=64, depth 4: stem 32*3*9+32, down 64*32*9+64, two blocks of 64*64*9+64
  const std::size_t conv = 896 + 18496 + 2 * 36928;
  CHECK(parameter_count(config(Kind::conv)) == conv);
  CHECK(init_backbone(config(Kind::conv), 1).total_values() == conv);
}

TEST_CASE("norms start at unit scale and zero offset") {
  const ParamSet p = init_backbone(config(Kind::transformer), 3);
  for (double v : p.at("vit.block0.ln1.g").values()) CHECK(v == 1.0);
  for (double v : p.at("vit.norm.b").values()) CHECK(v == 0.0);
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(config(Kind::transformer, 64, 4, 5).validate(), ConfigError);
  CHECK_THROWS_AS(config(Kind::conv, 64, 1).validate(), ConfigError);
  BackboneConfig c = config(Kind::transformer);
  c.patch_size = 8;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(forward(init_backbone(config(Kind::conv), 1), Tensor(Shape{3, 16, 16}, 0.0), config(Kind::conv), {},
                          Mode::eval),
                  ShapeError);
}

TEST_CASE("zero rates in train mode equal eval mode bitwise; eval ignores the stream") {
  for (Kind k : {Kind::conv, Kind::transformer}) {
    const BackboneConfig c = config(k);
    const ParamSet p = init_backbone(c, 2);
    const Tensor img = random_image(3);
    const Tensor eval = forward(p, img, c, {}, Mode::eval);
    CHECK(eval.shape() == Shape{64, 64});
    CHECK(bitwise_equal(forward(p, img, c, {0.0, 0.0, 9, 9, 9}, Mode::train), eval));
    CHECK(bitwise_equal(forward(p, img, c, {0.5, 0.3, 4, 5, 6}, Mode::eval), eval));
    CHECK_FALSE(bitwise_equal(forward(p, img, c, {0.5, 0.3, 4, 5, 6}, Mode::train), eval));
    CHECK(bitwise_equal(forward(p, img, c, {0.5, 0.3, 4, 5, 6}, Mode::train),
                        forward(p, img, c, {0.5, 0.3, 4, 5, 6}, Mode::train)));
  }
}

TEST_CASE("drop_path = 1 collapses the transformer to normed patch embeddings") {
  const BackboneConfig c = config(Kind::transformer, 16, 3, 4);
  const ParamSet p = init_backbone(c, 4);
  const Tensor img = random_image(5);
  const Tensor out = forward(p, img, c, {1.0, 0.0, 1, 2, 3}, Mode::train);

  const Tensor& w = p.at("vit.patch.w");
  const Tensor& b = p.at("vit.patch.b");
  const Tensor& pos = p.at("vit.pos");
  const Tensor& g = p.at("vit.norm.g");
  const Tensor& o = p.at("vit.norm.b");
  for (std::size_t gy = 0; gy < 8; ++gy) {
    for (std::size_t gx = 0; gx < 8; ++gx) {
      const std::size_t tok = gy * 8 + gx;
      std::vector<double> e(16);
      for (std::size_t j = 0; j < 16; ++j) {
        double z = b[j] + pos.at(tok, j);
        for (std::size_t ch = 0; ch < 3; ++ch) {
          for (std::size_t y = 0; y < 4; ++y) {
            for (std::size_t x = 0; x < 4; ++x) {
              const double px = img[(ch * 32 + gy * 4 + y) * 32 + gx * 4 + x] - 0.5;
              z += px * w.at((ch * 4 + y) * 4 + x, j);
            }
          }
        }
        e[j] = z;
      }
      double mu = 0.0, var = 0.0;
      for (double v : e) mu += v / 16.0;
      for (double v : e) var += (v - mu) * (v - mu) / 16.0;
      for (std::size_t j = 0; j < 16; ++j) {
        const double ref = g[j] * (e[j] - mu) / std::sqrt(var + 1e-6) + o[j];
        CHECK(std::abs(out.at(tok, j) - ref) < 1e-12);
      }
    }
  }
}

namespace {

// Feature cells reachable from input pixel (y, x) through 3x3 padded
// convolutions with the given strides.
std::set<std::size_t> receptive_cells(std::size_t y, std::size_t x, const std::vector<std::size_t>& strides) {
  std::set<std::pair<long, long>> cells{{static_cast<long>(y), static_cast<long>(x)}};
  long size = 32;
  for (std::size_t s : strides) {
    const long out = (size + 2 - 3) / static_cast<long>(s) + 1;
    std::set<std::pair<long, long>> next;
    for (long oy = 0; oy < out; ++oy) {
      for (long ox = 0; ox < out; ++ox) {
        for (auto [iy, ix] : cells) {
          const long ky = iy - (oy * static_cast<long>(s) - 1), kx = ix - (ox * static_cast<long>(s) - 1);
          if (ky >= 0 && ky < 3 && kx >= 0 && kx < 3) next.insert({oy, ox});
        }
      }
    }
    cells = next;
    size = out;
  }
  std::set<std::size_t> flat;
  for (auto [cy, cx] : cells) flat.insert(static_cast<std::size_t>(cy * 8 + cx));
  return flat;
}

std::set<std::size_t> changed_cells(const Tensor& a, const Tensor& b) {
  std::set<std::size_t> out;
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < a.dim(1); ++j) {
      if (a.at(i, j) != b.at(i, j)) out.insert(i);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("conv receptive field is local; transformer is global") {
  const BackboneConfig cc = config(Kind::conv), vc = config(Kind::transformer);
  const ParamSet cp = init_backbone(cc, 6), vp = init_backbone(vc, 6);
  const Tensor img = random_image(7);

  for (auto [y, x] : std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {13, 20}, {31, 31}, {16, 5}}) {
    Tensor moved = img;
    for (std::size_t ch = 0; ch < 3; ++ch) moved[(ch * 32 + y) * 32 + x] += 0.7;
    const std::set<std::size_t> allowed = receptive_cells(y, x, {2, 2, 1, 1});
    const std::set<std::size_t> changed = changed_cells(forward(cp, img, cc, {}, Mode::eval), forward(cp, moved, cc, {}, Mode::eval));
    CHECK_FALSE(changed.empty());
    for (std::size_t cell : changed) CHECK(allowed.count(cell) == 1);
    CHECK(allowed.size() < 64);
    CHECK(changed_cells(forward(vp, img, vc, {}, Mode::eval), forward(vp, moved, vc, {}, Mode::eval)).size() == 64);
  }

  // Top-left 4x4 patch replaced.
  Tensor patched = img;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 4; ++x) patched[(ch * 32 + y) * 32 + x] = 1.0 - patched[(ch * 32 + y) * 32 + x];
    }
  }
  const std::set<std::size_t> conv_changed =
      changed_cells(forward(cp, img, cc, {}, Mode::eval), forward(cp, patched, cc, {}, Mode::eval));
  std::set<std::size_t> allowed;
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 0; x < 4; ++x) {
      for (std::size_t cell : receptive_cells(y, x, {2, 2, 1, 1})) allowed.insert(cell);
    }
  }
  CHECK_FALSE(conv_changed.empty());
  for (std::size_t cell : conv_changed) CHECK(allowed.count(cell) == 1);
  CHECK(conv_changed.count(63) == 0);
  CHECK(changed_cells(forward(vp, img, vc, {}, Mode::eval), forward(vp, patched, vc, {}, Mode::eval)).size() == 64);
}

TEST_CASE("drop-path inverted scaling preserves the expected output") {
  // One residual block sits directly on the output, so the output is affine in
  // the branch gate and its mean over stochastic forwards equals eval mode.
  const BackboneConfig c = config(Kind::conv, 8, 3);
  const ParamSet p = init_backbone(c, 8);
  const Tensor img = random_image(9);
  const Tensor eval = forward(p, img, c, {}, Mode::eval);
  const int n = 10000;
  Tensor sum(eval.shape(), 0.0), sumsq(eval.shape(), 0.0);
  for (int i = 0; i < n; ++i) {
    const Tensor f = forward(p, img, c, {0.5, 0.0, 11, static_cast<std::uint64_t>(i), 0}, Mode::train);
    for (std::size_t j = 0; j < f.size(); ++j) {
      sum[j] += f[j];
      sumsq[j] += f[j] * f[j];
    }
  }
  int within = 0;
  for (std::size_t j = 0; j < eval.size(); ++j) {
    const double mean = sum[j] / n;
    const double var = std::max(sumsq[j] / n - mean * mean, 0.0) * n / (n - 1);
    const double se = std::sqrt(var / n);
    if (std::abs(mean - eval[j]) <= 3.0 * se + 1e-12) ++within;
  }
  CHECK(within == static_cast<int>(eval.size()));
}

TEST_CASE("reduced backbones pass finite differences in eval mode") {
  for (Kind k : {Kind::conv, Kind::transformer}) {
    const BackboneConfig c = config(k, 8, 2, 2);
    for (std::uint64_t trial = 0; trial < 3; ++trial) {
      const ParamSet p = init_backbone(c, 20 + trial);
      const Tensor img = random_image(30 + trial);
      Rng rng(40 + trial);
      Tensor r(Shape{64, 8});
      for (double& v : r.values()) v = rng.uniform(-1, 1);
      std::vector<std::string> names;
      std::vector<Tensor> inputs;
      for (const auto& [name, t] : p) {
        names.push_back(name);
        inputs.push_back(t);
      }
      ad::DifferentiableFunction f("backbone", [&](ad::Tape&, std::span<const ad::Var> in) {
        ParamVars vars;
        for (std::size_t i = 0; i < names.size(); ++i) vars.bind(names[i], in[i]);
        return ad::sum(ad::mul_const(forward_features(vars, img, c, {}, Mode::eval), r));
      });
      const auto report =
          ad::finite_difference_check(f, inputs, {.epsilon = 1e-6, .tolerance = 1e-3, .max_entries_per_input = 12, .seed = trial});
      INFO(to_string(k) << " max rel " << report.max_rel_error);
      for (const auto& e : report.entries) {
        if (e.failed) MESSAGE(names[e.input] << "[" << e.index << "] analytic " << e.analytic << " numeric " << e.numeric);
      }
      CHECK(report.passed());
      CHECK(report.entries.size() >= 36);
    }
  }
}

TEST_CASE("checkpoint container round trip and layout") {
  const ParamSet p = init_backbone(config(Kind::transformer, 8, 1, 2), 1);
  const std::string path = (std::filesystem::temp_directory_path() / "usage_ckpt_test.bin").string();
  save_params(path, p);
  CHECK(load_params(path) == p);

  std::ifstream is(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  REQUIRE(bytes.size() > 16);
  CHECK(std::memcmp(bytes.data(), "USGE", 4) == 0);
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  // First record: u32 name length, then the name.
  const std::string first = p.begin()->first;
  CHECK(bytes[8] == first.size());
  CHECK(std::string(bytes.begin() + 12, bytes.begin() + 12 + static_cast<long>(first.size())) == first);
  std::size_t expected = 8;
  for (const auto& [name, t] : p) expected += 4 + name.size() + 8 + 8 * t.rank() + 8 * t.size();
  CHECK(bytes.size() == expected);

  {
    std::ofstream trunc(path, std::ios::binary | std::ios::trunc);
    trunc.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size() - 3));
  }
  CHECK_THROWS_AS(load_params(path), Error);
  {
    std::ofstream bad(path, std::ios::binary | std::ios::trunc);
    bad << "NOPE";
  }
  CHECK_THROWS_AS(load_params(path), Error);
  std::filesystem::remove(path);
}
