#include <doctest.h>

#include <cmath>

#include "garfont/common.hpp"
#include "garfont/nn.hpp"
#include "garfont/rng.hpp"

using namespace garfont;
using namespace garfont::nn;

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
  std::vector<double> v(s.numel());
  for (auto& x : v) x = rng.normal(0, scale);
  return Tensor::from_data(s, std::move(v));
}

}  // namespace

TEST_CASE("attention masks") {
  auto full = AttentionMask::full(4);
  auto causal = AttentionMask::causal(4);
  for (int q = 0; q < 4; ++q)
    for (int k = 0; k < 4; ++k) {
      CHECK(full.allows(q, k));
      CHECK(causal.allows(q, k) == (k <= q));
    }
  auto pc = AttentionMask::prefix_causal(5, 2);
  CHECK(pc.allows(0, 1));   // inside prefix: full
  CHECK(pc.allows(2, 2));   // diagonal
  CHECK(!pc.allows(2, 3));  // future generated position
  CHECK(pc.allows(4, 0));   // prefix always visible
}

TEST_CASE("attention with n=1 returns v") {
  Rng rng(3);
  Tensor q = random_tensor({1, 8}, rng);
  Tensor k = random_tensor({1, 8}, rng);
  Tensor v = random_tensor({1, 8}, rng);
  Tensor out = attention(q, k, v, AttentionMask::full(1));
  for (int i = 0; i < 8; ++i)
    CHECK(out.data()[i] == doctest::Approx(v.data()[i]).epsilon(1e-12));
}

TEST_CASE("attention with identical keys averages values uniformly") {
  Rng rng(5);
  Tensor q = random_tensor({3, 4}, rng);
  // every key row identical -> softmax of equal scores is uniform
  std::vector<double> krow = {0.3, -0.7, 1.1, 0.2};
  std::vector<double> kd;
  for (int r = 0; r < 3; ++r) kd.insert(kd.end(), krow.begin(), krow.end());
  Tensor k = Tensor::from_data({3, 4}, kd);
  Tensor v = random_tensor({3, 4}, rng);
  Tensor out = attention(q, k, v, AttentionMask::full(3));
  for (int c = 0; c < 4; ++c) {
    double mean = (v.data()[c] + v.data()[4 + c] + v.data()[8 + c]) / 3.0;
    for (int r = 0; r < 3; ++r)
      CHECK(out.data()[r * 4 + c] == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("causal attention: future perturbation leaves earlier rows unchanged") {
  Rng rng(7);
  const int n = 6, d = 8;
  Tensor q = random_tensor({n, d}, rng);
  Tensor k = random_tensor({n, d}, rng);
  Tensor v = random_tensor({n, d}, rng);
  Tensor base = attention(q, k, v, AttentionMask::causal(n));

  const int j = 4;  // perturb k and v at position j
  Tensor k2 = Tensor::from_data({n, d}, k.data());
  Tensor v2 = Tensor::from_data({n, d}, v.data());
  for (int c = 0; c < d; ++c) {
    k2.data()[j * d + c] += 3.3;
    v2.data()[j * d + c] -= 1.7;
  }
  Tensor out = attention(q, k2, v2, AttentionMask::causal(n));
  for (int r = 0; r < j; ++r)
    for (int c = 0; c < d; ++c)
      CHECK(std::abs(out.data()[r * d + c] - base.data()[r * d + c]) <= 1e-6);
  // and position j itself does change
  double delta = 0;
  for (int c = 0; c < d; ++c)
    delta += std::abs(out.data()[j * d + c] - base.data()[j * d + c]);
  CHECK(delta > 1e-3);
}

TEST_CASE("attention shape validation") {
  Rng rng(9);
  Tensor q = random_tensor({3, 4}, rng);
  Tensor k = random_tensor({2, 4}, rng);
  Tensor v = random_tensor({3, 4}, rng);
  CHECK_THROWS_AS(attention(q, k, v, AttentionMask::full(3)), ValidationError);
}

TEST_CASE("2d sinusoidal positions") {
  CHECK_THROWS_AS(sinusoidal_pos_2d(2, 2, 6), ConfigError);

  // position zero: sines 0, cosines 1
  auto pe1 = sinusoidal_pos_2d(1, 1, 8);
  for (int i = 0; i < 8; i += 2) {
    CHECK(pe1.values.data()[i] == doctest::Approx(0.0));
    CHECK(pe1.values.data()[i + 1] == doctest::Approx(1.0));
  }

  // all rows pairwise distinct on an 8x8 grid, bounded by 1
  auto pe = sinusoidal_pos_2d(8, 8, 64);
  const auto& v = pe.values.data();
  for (double x : v) CHECK(std::abs(x) <= 1.0);
  double min_pair = 1e30;
  for (int i = 0; i < 64; ++i)
    for (int j = i + 1; j < 64; ++j) {
      double d2 = 0;
      for (int c = 0; c < 64; ++c) {
        const double d = v[i * 64 + c] - v[j * 64 + c];
        d2 += d * d;
      }
      min_pair = std::min(min_pair, std::sqrt(d2));
    }
  CHECK(min_pair > 0.0);
}

TEST_CASE("lora linear") {
  ParamStore ps;
  Rng rng(11);
  LoraLinear lin(ps, "lin", 6, 5, rng);
  Rng drng(13);
  Tensor x = random_tensor({3, 6}, drng);

  Tensor base_out = lin.forward(x);
  lin.attach_lora(ps, "lin", 2, 16.0, rng);

  SUBCASE("zero-initialized up matrix is an exact no-op") {
    Tensor with_lora = lin.forward(x);
    for (int64_t i = 0; i < base_out.numel(); ++i)
      CHECK(with_lora.data()[i] == base_out.data()[i]);  // bit-identical
  }

  SUBCASE("full-rank adapter matches dense recomposition oracle") {
    ParamStore ps2;
    Rng rng2(17);
    LoraLinear l2(ps2, "l2", 4, 3, rng2);
    l2.attach_lora(ps2, "l2", 3, 6.0, rng2);  // r = min(4,3)
    // fill up with nonzero values
    for (auto& v : l2.lora_up.data()) v = rng2.normal(0, 0.3);
    Tensor xin = random_tensor({2, 4}, drng);
    Tensor y = l2.forward(xin);
    // oracle: dense weight = w + scale * down @ up
    Tensor delta = matmul(l2.lora_down, l2.lora_up);
    std::vector<double> wd = l2.w.data();
    for (int64_t i = 0; i < l2.w.numel(); ++i)
      wd[i] += l2.lora_scale * delta.data()[i];
    Tensor dense = add_rowvec(
        matmul(xin, Tensor::from_data(l2.w.shape(), wd)), l2.b);
    for (int64_t i = 0; i < y.numel(); ++i)
      CHECK(std::abs(y.data()[i] - dense.data()[i]) < 1e-6);
  }

  SUBCASE("frozen base receives no gradient") {
    lin.w.set_requires_grad(false);
    lin.b.set_requires_grad(false);
    ps.zero_grad();
    Tensor loss = mean_all(square(lin.forward(x)));
    loss.backward();
    CHECK_FALSE(lin.w.has_grad());
    bool down_has = lin.lora_down.has_grad();
    bool up_has = lin.lora_up.has_grad();
    CHECK(down_has);
    CHECK(up_has);
    double down_mag = 0;
    for (double g : lin.lora_down.grad()) down_mag += std::abs(g);
    // up is zero so down's gradient is zero, but up's gradient is not
    double up_mag = 0;
    for (double g : lin.lora_up.grad()) up_mag += std::abs(g);
    CHECK(up_mag > 0);
    (void)down_mag;
  }
}

TEST_CASE("transformer block causal non-leakage") {
  ParamStore ps;
  Rng rng(19);
  const int n = 5, d = 16;
  TransformerBlock block(ps, "blk", d, 4, 2, rng);
  Rng drng(21);
  Tensor x = random_tensor({n, d}, drng);
  auto mask = AttentionMask::causal(n);
  Tensor base = block.forward(x, mask);

  Tensor x2 = Tensor::from_data({n, d}, x.data());
  for (int c = 0; c < d; ++c) x2.data()[(n - 1) * d + c] += 2.0;
  Tensor out = block.forward(x2, mask);
  for (int r = 0; r < n - 1; ++r)
    for (int c = 0; c < d; ++c)
      CHECK(std::abs(out.data()[r * d + c] - base.data()[r * d + c]) <= 1e-6);
}

TEST_CASE("adam converges on a quadratic") {
  ParamStore ps;
  Rng rng(23);
  Tensor p = ps.create("p", {8}, 1.0, rng);
  AdamConfig cfg;
  cfg.lr = 0.05;
  Adam opt(ps, cfg);
  for (int step = 0; step < 400; ++step) {
    ps.zero_grad();
    Tensor loss = sum_all(square(p));
    loss.backward();
    opt.step();
  }
  for (double v : p.data()) CHECK(std::abs(v) < 1e-3);
}

TEST_CASE("param store hashing and freezing") {
  ParamStore ps;
  Rng rng(29);
  ps.create("a.w", {4, 4}, 0.02, rng);
  ps.create("b.w", {4, 4}, 0.02, rng);
  const std::string h_all = ps.hash_params();
  const std::string h_a = ps.hash_params("a.");
  CHECK(h_all != h_a);
  // mutate b: "a." hash stable, full hash changes
  ps.find("b.w")->data()[0] += 1.0;
  CHECK(ps.hash_params("a.") == h_a);
  CHECK(ps.hash_params() != h_all);

  CHECK(ps.set_trainable("a.", false) == 1);
  CHECK_FALSE(ps.find("a.w")->requires_grad());
  CHECK(ps.find("b.w")->requires_grad());
}

TEST_CASE("rng determinism and substreams") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  CHECK(substream_seed(0, "tok") != substream_seed(0, "gen"));
  CHECK(substream_seed(0, "tok") == substream_seed(0, "tok"));
  CHECK(substream_seed(1, "tok") != substream_seed(0, "tok"));

  Rng c(7);
  c.next_u64();
  c.normal();
  Rng d = Rng::from_state_string(c.state_string());
  for (int i = 0; i < 10; ++i) CHECK(c.next_u64() == d.next_u64());
}
