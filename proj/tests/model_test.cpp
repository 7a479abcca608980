#include "doctest.h"
#include "gradcheck.hpp"
#include "model_fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "d2g/nn/model.hpp"

using namespace d2g;
using namespace d2g::nn;
using d2g::testing::grad_check;
using d2g::testing::max_abs_diff;
using d2g::testing::random_batch;
using d2g::testing::tiny_config;

namespace {

Tensor random_tensor(Shape s, Rng& rng, bool grad = false, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Buffer v(static_cast<std::size_t>(numel(s)));
  for (auto& x : v) x = n(rng);
  return Tensor::from(std::move(s), std::move(v), grad);
}

std::vector<double> dense_linear(const Linear& l, const std::vector<double>& x) {
  const std::int64_t out = l.weight.dim(0), in = l.weight.dim(1);
  std::vector<double> y(static_cast<std::size_t>(out));
  for (std::int64_t o = 0; o < out; ++o) {
    double acc = l.bias.defined() ? l.bias.data()[o] : 0.0;
    for (std::int64_t i = 0; i < in; ++i) acc += l.weight.data()[o * in + i] * x[static_cast<std::size_t>(i)];
    y[static_cast<std::size_t>(o)] = acc;
  }
  return y;
}

double dense_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

std::vector<double> dense_mlp(const TokenMlp& m, std::vector<double> x) {
  for (std::size_t k = 0; k < m.layers.size(); ++k) {
    x = dense_linear(m.layers[k], x);
    if (k + 1 < m.layers.size())
      for (double& v : x) v = dense_gelu(v);
  }
  return x;
}

std::vector<double> dense_layer_norm(const LayerNorm& ln, std::vector<double> x) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0, var = 0.0;
  for (double v : x) mean += v / n;
  for (double v : x) var += (v - mean) * (v - mean) / n;
  for (std::size_t k = 0; k < x.size(); ++k)
    x[k] = (x[k] - mean) / std::sqrt(var + 1e-5) * ln.gamma.data()[k] + ln.beta.data()[k];
  return x;
}

std::vector<double> softmax(std::vector<double> x) {
  const double m = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (double& v : x) z += (v = std::exp(v - m));
  for (double& v : x) v /= z;
  return x;
}

Tensor zeros_like(const Tensor& t) { return Tensor::zeros(t.shape()); }

}  // namespace

TEST_CASE("setconv single observation") {
  SetConv sc(9, 1.0, 1e-8);
  Tensor v = Tensor::zeros({1, 1, 16, 16});
  Tensor m = Tensor::zeros({1, 1, 16, 16});
  v.data()[8 * 16 + 8] = 2.5;
  m.data()[8 * 16 + 8] = 1;
  Tensor out = sc(v, m, Padding::Zero);
  CHECK(out.shape() == Shape{1, 2, 16, 16});
  const auto at = [&](int c, int i, int j) { return double(out.data()[(c * 16 + i) * 16 + j]); };
  const auto normalized = [](double density) { return 2.5 * density / (density + 1e-8); };
  CHECK(at(0, 8, 8) == doctest::Approx(normalized(1.0)).epsilon(1e-12));
  CHECK(at(1, 8, 8) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(at(1, 8, 9) == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
  CHECK(at(1, 10, 11) == doctest::Approx(std::exp(-13.0 / 2.0)).epsilon(1e-12));
  CHECK(at(0, 10, 11) == doctest::Approx(normalized(std::exp(-13.0 / 2.0))).epsilon(1e-12));
  CHECK(at(1, 0, 0) == 0.0);
  CHECK(at(0, 0, 0) == 0.0);
}

TEST_CASE("setconv with an empty context is zero") {
  SetConv sc(9, 1.0, 1e-8);
  Rng rng(1);
  Tensor v = random_tensor({2, 1, 8, 8}, rng);
  Tensor out = sc(v, Tensor::zeros({2, 1, 8, 8}), Padding::Zero);
  for (Scalar x : out.data()) CHECK(x == 0.0);
}

TEST_CASE("setconv matches a brute-force kernel sum") {
  SetConv sc(9, 1.3, 1e-8);
  Rng rng(2);
  const int n = 12;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Buffer mv(n * n), vv(n * n);
  for (int k = 0; k < n * n; ++k) {
    mv[k] = u(rng) < 0.2 ? 1 : 0;
    vv[k] = 5.0 * u(rng);
  }
  Tensor out = sc(Tensor::from({1, 1, n, n}, vv), Tensor::from({1, 1, n, n}, mv), Padding::Zero);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double sig = 0.0, den = 0.0;
      for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
          if (std::abs(a - i) > 4 || std::abs(b - j) > 4 || mv[a * n + b] == 0) continue;
          const double w = std::exp(-double((a - i) * (a - i) + (b - j) * (b - j)) / (2.0 * 1.3 * 1.3));
          sig += w * vv[a * n + b];
          den += w;
        }
      CHECK(out.data()[i * n + j] == doctest::Approx(sig / (den + 1e-8)).epsilon(1e-10));
      CHECK(out.data()[n * n + i * n + j] == doctest::Approx(den).epsilon(1e-10));
    }
}

TEST_CASE("setconv density grows with every added observation") {
  SetConv sc(9, 1.0, 1e-8);
  Rng rng(3);
  std::uniform_int_distribution<int> cell(0, 99);
  Tensor v = random_tensor({1, 1, 10, 10}, rng);
  Tensor m = Tensor::zeros({1, 1, 10, 10});
  Tensor prev = sc(v, m, Padding::Zero);
  for (int step = 0; step < 15; ++step) {
    m.data()[cell(rng)] = 1;
    Tensor next = sc(v, m, Padding::Zero);
    for (int q = 0; q < 100; ++q) CHECK(next.data()[100 + q] >= prev.data()[100 + q]);
    prev = next;
  }
}

TEST_CASE("episodes in a batch are processed independently") {
  const ModelConfig c = tiny_config();
  DropsToGrid model(c, 5);
  Batch a = random_batch(c, 2, 10);
  Batch b = a;
  // Replace every input of episode 1.
  const Batch other = random_batch(c, 2, 11);
  const std::int64_t hw = c.grid_height * c.grid_width;
  for (std::int64_t q = c.timesteps * hw; q < 2 * c.timesteps * hw; ++q) {
    b.station_values = b.station_values.detach();
    b.station_values.data()[q] = other.station_values.data()[q];
    b.station_mask.data()[q] = other.station_mask.data()[q];
  }
  for (std::int64_t q = hw; q < 2 * hw; ++q) b.radar_values.data()[q] = other.radar_values.data()[q];
  Tensor ya = model.forward(a), yb = model.forward(b);
  const std::int64_t per = 3 * hw;
  double same = 0.0, changed = 0.0;
  for (std::int64_t q = 0; q < per; ++q) same = std::max(same, std::abs(double(ya.data()[q] - yb.data()[q])));
  for (std::int64_t q = per; q < 2 * per; ++q) changed = std::max(changed, std::abs(double(ya.data()[q] - yb.data()[q])));
  CHECK(same == 0.0);
  CHECK(changed > 1e-6);
}

TEST_CASE("embedding is pointwise") {
  Rng rng(4);
  PointwiseMlp mlp({2, 8, 8}, rng);
  Tensor x = random_tensor({1, 2, 6, 6}, rng);
  Tensor y0 = mlp(x);
  Tensor x2 = Tensor::from(x.shape(), Buffer(x.data().begin(), x.data().end()));
  x2.data()[3 * 6 + 4] += 1.0;
  Tensor y1 = mlp(x2);
  for (int c = 0; c < 8; ++c)
    for (int q = 0; q < 36; ++q) {
      const double d = std::abs(double(y1.data()[c * 36 + q] - y0.data()[c * 36 + q]));
      if (q == 3 * 6 + 4) continue;
      CHECK(d == 0.0);
    }
}

TEST_CASE("U-Net encoder commutes with circular shifts by multiples of 2^depth") {
  ModelConfig c = tiny_config(16);
  c.depth = 3;
  c.periodic = true;
  Rng rng(6);
  UNetEncoder enc(c, rng);
  Tensor x = random_tensor({1, c.channels, 16, 16}, rng);
  const EncoderOutput a = enc(x, Padding::Circular);
  const EncoderOutput b = enc(d2g::testing::roll(x, 8, 0), Padding::Circular);
  CHECK(a.bottleneck.shape() == Shape{1, c.channels, 2, 2});
  CHECK(max_abs_diff(d2g::testing::roll(a.bottleneck, 1, 0), b.bottleneck) < 1e-12);
  for (std::size_t l = 0; l < a.skips.size(); ++l)
    CHECK(max_abs_diff(d2g::testing::roll(a.skips[l], 8 >> l, 0), b.skips[l]) < 1e-12);
}

TEST_CASE("identical slices give identical features") {
  const ModelConfig c = tiny_config();
  Rng rng(7);
  UNetEncoder enc(c, rng);
  Tensor one = random_tensor({1, c.channels, 16, 16}, rng);
  const EncoderOutput out = enc(concat({one, one, one}, 0), Padding::Zero);
  const std::int64_t per = out.bottleneck.numel() / 3;
  for (std::int64_t q = 0; q < per; ++q) {
    CHECK(out.bottleneck.data()[q] == doctest::Approx(out.bottleneck.data()[per + q]).epsilon(1e-12));
    CHECK(out.bottleneck.data()[q] == doctest::Approx(out.bottleneck.data()[2 * per + q]).epsilon(1e-12));
  }
}

TEST_CASE("the translation-equivariant model runs on any divisible grid") {
  const ModelConfig c = tiny_config(16);
  DropsToGrid model(c, 8);
  ModelConfig big = c;
  big.grid_height = big.grid_width = 32;
  const Tensor y = model.forward(random_batch(big, 1, 9));
  CHECK(y.shape() == Shape{1, 3, 32, 32});
  ModelConfig odd = c;
  odd.grid_height = 18;
  CHECK_THROWS_AS(model.forward(random_batch(odd, 1, 9)), ShapeError);

  ModelConfig std_attn = apply_ablation(c, AblationSpec::parse("no_te"));
  DropsToGrid fixed(std_attn, 8);
  CHECK_THROWS_AS(fixed.forward(random_batch(big, 1, 9)), ShapeError);
}

TEST_CASE("head output of zero maps to pi0 one half") {
  const double raw[3] = {0.0, 0.0, 0.0};
  const HeadParams p = head_transform(OutputKind::Zig, raw, 1);
  CHECK(p.p0 == 0.5);
  CHECK(p.p1 == doctest::Approx(std::log(2.0) + kParamFloor).epsilon(1e-14));
  CHECK(p.p2 == doctest::Approx(std::log(2.0) + kParamFloor).epsilon(1e-14));
  const double big[3] = {80.0, -80.0, -80.0};
  const HeadParams q = head_transform(OutputKind::Zig, big, 1);
  CHECK(q.p0 == kPi0Max);
  CHECK(q.p1 >= kParamFloor);
  CHECK(q.p2 >= kParamFloor);
  const HeadParams g = head_transform(OutputKind::Gaussian, raw, 1);
  CHECK(g.p0 == 0.0);
  CHECK(g.p1 == doctest::Approx(std::log(2.0) + kSigmaFloor).epsilon(1e-14));
}

TEST_CASE("parameter count of the proposed model") {
  const std::int64_t desk = count_parameters(DropsToGrid(desk_model_config(), 0).parameters());
  const std::int64_t paper = count_parameters(DropsToGrid(paper_model_config(), 0).parameters());
  CHECK(desk == 205374);
  CHECK(paper == desk);
  CHECK(paper >= 172800);
  CHECK(paper <= 211200);
  ModelConfig wide = desk_model_config();
  wide.channels = 64;
  CHECK(count_parameters(DropsToGrid(wide, 0).parameters()) > desk);
  const ModelConfig nb = apply_ablation(desk_model_config(), AblationSpec::parse("no_bottleneck"));
  CHECK(count_parameters(PixelMergeCnp(nb, 0).parameters()) < desk);
}

TEST_CASE("parameter names are unique") {
  for (const auto& name : ablation_names()) {
    const auto model = make_model(apply_ablation(desk_model_config(), AblationSpec::parse(name)), 0);
    std::vector<std::string> names;
    for (const auto& p : model->parameters()) names.push_back(p.name);
    std::sort(names.begin(), names.end());
    CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());
  }
}

TEST_CASE("temporal summary with one step attends with weight one") {
  ModelConfig c = tiny_config(16, 1);
  Rng rng(12);
  TemporalSummary ts(c, rng);
  Tensor w;
  Tensor out = ts(random_tensor({2, 1, c.channels, 2, 2}, rng), &w);
  CHECK(out.shape() == Shape{2, c.channels, 2, 2});
  for (Scalar v : w.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("temporal summary of a constant history equals the single-step summary") {
  ModelConfig c3 = tiny_config(16, 3);
  Rng rng(13);
  TemporalSummary t3(c3, rng);
  for (Scalar& v : t3.position.data()) v = 0;
  TemporalSummary t1 = t3;
  t1.position = Tensor::zeros({1, c3.channels});
  Tensor one = random_tensor({1, 1, c3.channels, 2, 2}, rng);
  Tensor w;
  Tensor a = t3(concat({one, one, one}, 1), &w);
  Tensor b = t1(one);
  CHECK(max_abs_diff(a, b) < 1e-12);
  for (Scalar v : w.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("temporal summary matches a dense two-step oracle") {
  ModelConfig c = tiny_config(16, 2);
  Rng rng(14);
  TemporalSummary ts(c, rng);
  for (Scalar& v : ts.norm.gamma.data()) v = 1.0 + 0.1 * std::uniform_real_distribution<double>(-1, 1)(rng);
  Tensor s = random_tensor({1, 2, c.channels, 1, 1}, rng);
  Tensor out = ts(s);
  const int C = c.channels, H = c.heads, d = c.head_dim;
  std::vector<std::vector<double>> k(2), v(2);
  for (int t = 0; t < 2; ++t) {
    std::vector<double> x(C);
    for (int ch = 0; ch < C; ++ch) x[ch] = s.data()[t * C + ch] + ts.position.data()[t * C + ch];
    x = dense_layer_norm(ts.norm, x);
    k[t] = dense_linear(ts.wk, x);
    v[t] = dense_linear(ts.wv, x);
  }
  std::vector<double> o(H * d, 0.0);
  for (int hh = 0; hh < H; ++hh) {
    std::vector<double> logit(2);
    for (int t = 0; t < 2; ++t) {
      double acc = 0.0;
      for (int e = 0; e < d; ++e) acc += ts.query.data()[hh * d + e] * k[t][hh * d + e];
      logit[t] = acc / std::sqrt(double(d));
    }
    const auto a = softmax(logit);
    for (int e = 0; e < d; ++e) o[hh * d + e] = a[0] * v[0][hh * d + e] + a[1] * v[1][hh * d + e];
  }
  std::vector<double> y = dense_linear(ts.wo, o);
  const std::vector<double> f = dense_mlp(ts.ff, dense_layer_norm(ts.ff_norm, y));
  for (int ch = 0; ch < C; ++ch) CHECK(out.data()[ch] == doctest::Approx(y[ch] + f[ch]).epsilon(1e-10));
}

TEST_CASE("temporal summary depends on the order of the hours") {
  ModelConfig c = tiny_config(16, 2);
  Rng rng(15);
  TemporalSummary ts(c, rng);
  Tensor a = random_tensor({1, 1, c.channels, 2, 2}, rng);
  Tensor b = random_tensor({1, 1, c.channels, 2, 2}, rng);
  CHECK(max_abs_diff(ts(concat({a, b}, 1)), ts(concat({b, a}, 1))) > 1e-6);
}

TEST_CASE("translation-equivariant attention matches a dense 2x2 oracle") {
  ModelConfig c = tiny_config();
  Rng rng(16);
  Attention att(c, rng);
  Tensor xq = random_tensor({1, 4, c.channels}, rng);
  Tensor xkv = random_tensor({1, 4, c.channels}, rng);
  Tensor w = att.weights(xq, xkv, 2, 2);
  const int H = c.heads, d = c.head_dim, C = c.channels;
  const auto token = [&](const Tensor& t, int n) {
    return std::vector<double>(t.data().begin() + n * C, t.data().begin() + (n + 1) * C);
  };
  for (int i = 0; i < 4; ++i) {
    const auto q = dense_linear(att.wq, token(xq, i));
    std::vector<std::vector<double>> logits(H, std::vector<double>(4));
    for (int j = 0; j < 4; ++j) {
      const auto k = dense_linear(att.wk, token(xkv, j));
      std::vector<double> feat{double(i / 2 - j / 2) / 2.0, double(i % 2 - j % 2) / 2.0};
      for (int hh = 0; hh < H; ++hh) {
        double acc = 0.0;
        for (int e = 0; e < d; ++e) acc += q[hh * d + e] * k[hh * d + e];
        feat.push_back(acc / std::sqrt(double(d)));
      }
      const auto l = dense_mlp(att.pair, feat);
      for (int hh = 0; hh < H; ++hh) logits[hh][j] = l[hh];
    }
    for (int hh = 0; hh < H; ++hh) {
      const auto a = softmax(logits[hh]);
      for (int j = 0; j < 4; ++j) CHECK(w.data()[(hh * 4 + i) * 4 + j] == doctest::Approx(a[j]).epsilon(1e-10));
    }
  }
}

TEST_CASE("attention rows are distributions") {
  ModelConfig c = tiny_config();
  Rng rng(17);
  for (AttentionKind kind : {AttentionKind::TranslationEquivariant, AttentionKind::Standard}) {
    c.attention = kind;
    Attention att(c, rng);
    Tensor w = att.weights(random_tensor({2, 16, c.channels}, rng), random_tensor({2, 16, c.channels}, rng), 4, 4);
    for (std::int64_t r = 0; r < w.numel() / 16; ++r) {
      double s = 0.0;
      for (int j = 0; j < 16; ++j) {
        CHECK(w.data()[r * 16 + j] >= 0.0);
        s += w.data()[r * 16 + j];
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("attention over constant values returns the projected value") {
  ModelConfig c = tiny_config();
  Rng rng(18);
  Attention att(c, rng);
  Tensor token = random_tensor({1, 1, c.channels}, rng);
  Tensor kv = expand(token, {1, 16, c.channels});
  Tensor out = att(random_tensor({1, 16, c.channels}, rng), kv, 4, 4);
  for (int n = 1; n < 16; ++n)
    for (int ch = 0; ch < c.channels; ++ch)
      CHECK(out.data()[n * c.channels + ch] == doctest::Approx(out.data()[ch]).epsilon(1e-12));
}

TEST_CASE("periodic attention commutes with circular token shifts") {
  ModelConfig c = tiny_config();
  c.periodic = true;
  Rng rng(19);
  Attention att(c, rng);
  Tensor xq = random_tensor({1, c.channels, 4, 4}, rng);
  Tensor xkv = random_tensor({1, c.channels, 4, 4}, rng);
  const Tensor a = from_tokens(att(to_tokens(xq), to_tokens(xkv), 4, 4), 4, 4);
  for (auto [di, dj] : {std::pair{1, 0}, std::pair{0, 3}, std::pair{2, 1}}) {
    const Tensor b =
        from_tokens(att(to_tokens(d2g::testing::roll(xq, di, dj)), to_tokens(d2g::testing::roll(xkv, di, dj)), 4, 4), 4, 4);
    CHECK(max_abs_diff(d2g::testing::roll(a, di, dj), b) < 1e-12);
  }
}

TEST_CASE("displacements are normalized by the grid extent") {
  const auto small = displacements(4, 4, false);
  const auto large = displacements(8, 8, false);
  // Pair (0,0)-(1,3) on 4x4 against (0,0)-(2,6) on 8x8.
  const std::size_t a = static_cast<std::size_t>((0 * 16 + (1 * 4 + 3)) * 2);
  const std::size_t b = static_cast<std::size_t>((0 * 64 + (2 * 8 + 6)) * 2);
  CHECK(small[a] == large[b]);
  CHECK(small[a + 1] == large[b + 1]);
  const auto wrapped = displacements(4, 4, true);
  CHECK(wrapped[a + 1] == doctest::Approx(1.0 / 4.0));
  CHECK(small[a + 1] == doctest::Approx(-3.0 / 4.0));
}

TEST_CASE("forced gates select between zero and the attended radar") {
  ModelConfig c = tiny_config();
  Rng rng(20);
  GatedCrossAttention ca(c, rng);
  Tensor s = random_tensor({1, 16, c.channels}, rng);
  Tensor r = random_tensor({1, 16, c.channels}, rng);
  const auto off = ca(s, r, 4, 4, 0.0);
  for (Scalar v : off.r_corrected.data()) CHECK(v == 0.0);
  const auto on = ca(s, r, 4, 4, 1.0);
  CHECK(max_abs_diff(on.r_corrected, on.r_hat) == 0.0);
  const auto learned = ca(s, r, 4, 4);
  for (Scalar g : learned.gate.data()) {
    CHECK(g > 0.0);
    CHECK(g < 1.0);
  }
}

TEST_CASE("a constant radar field gives a constant attended radar") {
  ModelConfig c = tiny_config();
  Rng rng(21);
  GatedCrossAttention ca(c, rng);
  Tensor token = random_tensor({1, 1, c.channels}, rng);
  const auto out = ca(random_tensor({1, 16, c.channels}, rng), expand(token, {1, 16, c.channels}), 4, 4);
  for (int n = 1; n < 16; ++n)
    for (int ch = 0; ch < c.channels; ++ch)
      CHECK(out.r_hat.data()[n * c.channels + ch] == doctest::Approx(out.r_hat.data()[ch]).epsilon(1e-12));
}

TEST_CASE("no_radar ignores every radar input") {
  for (const char* name : {"no_radar", "no_bottleneck"}) {
    ModelConfig c = apply_ablation(tiny_config(), AblationSpec::parse("no_radar"));
    if (std::string(name) == "no_bottleneck") c.architecture = Architecture::PixelMerge;
    const auto model = make_model(c, 22);
    Batch a = random_batch(c, 1, 23);
    Batch b = a;
    b.radar_values = Tensor::full(a.radar_values.shape(), 7.0);
    Trace trace;
    ForwardOptions o;
    o.trace = &trace;
    const Tensor ya = model->forward(a, o);
    if (c.architecture == Architecture::Fusion)
      for (Scalar v : trace.r.data()) CHECK(v == 0.0);
    CHECK(max_abs_diff(ya, model->forward(b)) == 0.0);
  }
}

TEST_CASE("fusion gradients match finite differences") {
  ModelConfig c = tiny_config();
  Rng rng(24);
  Fusion fusion(c, rng);
  Tensor s = random_tensor({1, 4, c.channels}, rng, true);
  Tensor r = random_tensor({1, 4, c.channels}, rng, true);
  Tensor l = random_tensor({1, 4, c.channels}, rng, true);
  Tensor probe = random_tensor({1, 4, c.channels}, rng);
  std::vector<d2g::testing::Probe> probes;
  for (const Tensor& t : {s, r, l})
    for (std::size_t k = 0; k < 6; ++k) probes.push_back({t, k * 5});
  ParameterList params;
  fusion.collect("fusion", params);
  Rng pick(25);
  for (int k = 0; k < 30; ++k) {
    const auto& p = params[std::uniform_int_distribution<std::size_t>(0, params.size() - 1)(pick)];
    probes.push_back({p.tensor, std::uniform_int_distribution<std::size_t>(0, p.tensor.numel() - 1)(pick)});
  }
  const auto res = grad_check([&] { return sum(mul(fusion(s, r, l, 2, 2), probe)); }, probes, 1e-5, 1e-6, 1e-4);
  CHECK(res.failures == 0);
  for (std::size_t k : res.failed) MESSAGE("probe " << k << " analytic " << res.analytic[k] << " numeric " << res.numeric[k]);
}

TEST_CASE("distribution NLL gradients match finite differences") {
  Rng rng(26);
  for (OutputKind kind : {OutputKind::Zig, OutputKind::Gamma, OutputKind::Gaussian}) {
    const std::int64_t k = raw_channels(kind);
    Tensor raw = random_tensor({2, k, 3, 3}, rng, true);
    std::vector<TargetIndex> targets{{0, 0}, {0, 4}, {1, 2}, {1, 8}, {0, 7}};
    std::vector<double> y{0.0, 1.3, 0.4, 0.0, 6.0};
    const auto res = grad_check([&] { return distribution_nll(raw, kind, targets, y); },
                                d2g::testing::all_entries({raw}), 1e-6, 1e-6, 1e-12);
    CHECK(res.failures == 0);
  }
}

TEST_CASE("distribution NLL is a mean over an unordered target set") {
  Rng rng(27);
  Tensor raw = random_tensor({1, 3, 4, 4}, rng);
  std::vector<TargetIndex> t{{0, 1}, {0, 5}, {0, 9}};
  std::vector<double> y{0.0, 2.0, 0.7};
  const double base = distribution_nll(raw, OutputKind::Zig, t, y).item();
  std::vector<TargetIndex> t2{t[2], t[0], t[1]};
  std::vector<double> y2{y[2], y[0], y[1]};
  CHECK(distribution_nll(raw, OutputKind::Zig, t2, y2).item() == doctest::Approx(base).epsilon(1e-14));
  std::vector<TargetIndex> t3 = t;
  std::vector<double> y3 = y;
  t3.insert(t3.end(), t.begin(), t.end());
  y3.insert(y3.end(), y.begin(), y.end());
  CHECK(distribution_nll(raw, OutputKind::Zig, t3, y3).item() == doctest::Approx(base).epsilon(1e-14));
  double manual = 0.0;
  const Predictive p = to_predictive(raw, OutputKind::Zig, 0);
  for (std::size_t k = 0; k < t.size(); ++k)
    manual -= p.log_likelihood({int(t[k].cell / 4), int(t[k].cell % 4)}, y[k]) / 3.0;
  CHECK(base == doctest::Approx(manual).epsilon(1e-12));
  CHECK_THROWS_AS(distribution_nll(raw, OutputKind::Zig, {}, {}), Error);
}

TEST_CASE("full pipeline gradients match finite differences on a 16x16 grid") {
  ModelConfig c = desk_model_config();
  c.grid_height = c.grid_width = 16;
  DropsToGrid model(c, 28);
  const Batch b = random_batch(c, 1, 29);
  const ParameterList params = model.parameters();
  Rng pick(30);
  std::vector<d2g::testing::Probe> probes;
  while (probes.size() < 60) {
    const auto& p = params[std::uniform_int_distribution<std::size_t>(0, params.size() - 1)(pick)];
    probes.push_back({p.tensor, std::uniform_int_distribution<std::size_t>(0, p.tensor.numel() - 1)(pick)});
  }
  const auto res = grad_check([&] { return distribution_nll(model.forward(b), c.output, b.targets, b.y); }, probes,
                              1e-4, 1e-4, 1e-6);
  CHECK(res.checked >= 50);
  CHECK(res.failures == 0);
  MESSAGE("max relative error " << res.max_rel_error);
  for (std::size_t k : res.failed) {
    std::string name;
    for (const auto& p : params)
      if (p.tensor.node() == probes[k].tensor.node()) name = p.name;
    MESSAGE(name << "[" << probes[k].index << "] analytic " << res.analytic[k] << " numeric " << res.numeric[k]);
  }
}

TEST_CASE("periodic pipeline commutes with circular shifts by multiples of 8") {
  for (const char* name : {"full", "no_bottleneck"}) {
    ModelConfig c = apply_ablation(desk_model_config(), AblationSpec::parse(name));
    c.periodic = true;
    const auto model = make_model(c, 31);
    const Batch b = random_batch(c, 1, 32);
    const Tensor y = model->forward(b);
    for (auto [di, dj] : {std::pair{8, 0}, std::pair{0, 16}, std::pair{24, 8}}) {
      const Tensor ys = model->forward(d2g::testing::roll(b, di, dj));
      CHECK(max_abs_diff(d2g::testing::roll(y, di, dj), ys) <= 1e-5);
    }
  }
}

TEST_CASE("standard attention is not translation equivariant") {
  ModelConfig c = apply_ablation(tiny_config(16), AblationSpec::parse("no_te"));
  c.periodic = true;
  DropsToGrid model(c, 33);
  const Batch b = random_batch(c, 1, 34);
  const Tensor y = model.forward(b);
  CHECK(max_abs_diff(d2g::testing::roll(y, 4, 0), model.forward(d2g::testing::roll(b, 4, 0))) > 1e-6);
}

TEST_CASE("training mode draws dropout and eval mode is deterministic") {
  const ModelConfig c = tiny_config();
  DropsToGrid model(c, 35);
  const Batch b = random_batch(c, 1, 36);
  CHECK(max_abs_diff(model.forward(b), model.forward(b)) == 0.0);
  Rng r1(1), r2(1), r3(2);
  ForwardOptions o1{true, &r1}, o2{true, &r2}, o3{true, &r3};
  const Tensor a = model.forward(b, o1);
  CHECK(max_abs_diff(a, model.forward(b, o2)) == 0.0);
  CHECK(max_abs_diff(a, model.forward(b, o3)) > 0.0);
  ForwardOptions missing{true, nullptr};
  CHECK_THROWS_AS(model.forward(b, missing), Error);
}

TEST_CASE("ablation switches touch only their subsystem") {
  const ModelConfig base = desk_model_config();
  CHECK(apply_ablation(base, AblationSpec::parse("full")) == base);
  const auto differs = [&](const std::string& name) {
    ModelConfig c = apply_ablation(base, AblationSpec::parse(name));
    c.ablation = base.ablation;
    return c;
  };
  ModelConfig e = base;
  e.architecture = Architecture::PixelMerge;
  CHECK(differs("no_bottleneck") == e);
  e = base;
  e.timesteps = 1;
  CHECK(differs("no_stations") == e);
  e = base;
  e.use_radar = false;
  CHECK(differs("no_radar") == e);
  e = base;
  e.attention = AttentionKind::Standard;
  CHECK(differs("no_te") == e);
  e = base;
  e.target_inputs = true;
  CHECK(differs("target_inputs") == e);
  e = base;
  e.output = OutputKind::Gamma;
  CHECK(differs("gamma") == e);
  e = base;
  e.output = OutputKind::Gaussian;
  CHECK(differs("gaussian") == e);
  CHECK_THROWS_AS(AblationSpec::parse("no_sun"), Error);
  CHECK(apply_ablation(base, AblationSpec::parse("gamma")).ablation == "gamma");
}

TEST_CASE("ablated heads and histories have the documented shapes") {
  ModelConfig c = apply_ablation(tiny_config(16, 1), AblationSpec::parse("gaussian"));
  DropsToGrid gauss(c, 37);
  CHECK(gauss.forward(random_batch(c, 1, 38)).shape() == Shape{1, 2, 16, 16});
  const double nll = distribution_nll(gauss.forward(random_batch(c, 1, 38)), OutputKind::Gaussian,
                                      random_batch(c, 1, 38).targets, random_batch(c, 1, 38).y)
                         .item();
  CHECK(std::isfinite(nll));

  ModelConfig ns = apply_ablation(tiny_config(16, 2), AblationSpec::parse("no_stations"));
  DropsToGrid hist(ns, 39);
  CHECK(hist.temporal.position.dim(0) == 1);
  Tensor w;
  hist.temporal(random_tensor({1, 1, ns.channels, 4, 4}, *std::make_unique<Rng>(1)), &w);
  CHECK(w.dim(2) == 1);
}
