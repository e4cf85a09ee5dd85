#include <doctest.h>

#include <cmath>

#include "dfternet/bitops.hpp"
#include "dfternet/bitpack.hpp"
#include "dfternet/ops.hpp"
#include "dfternet/quantize.hpp"
#include "dfternet/reference.hpp"
#include "test_util.hpp"

using namespace dfternet;
using testutil::random_ternary;

TEST_CASE("pack_ternary") {
  SUBCASE("bit planes follow the sign/value definition") {
    const DenseTensor t = DenseTensor::from({3}, {0.5f, -0.5f, 0.0f});
    const TernaryTensor p = pack_ternary(t, 1.0);
    CHECK((p.sign_plane[0] & 0b111) == 0b001);
    CHECK((p.value_plane[0] & 0b111) == 0b011);
  }
  SUBCASE("all zeros pack to empty planes") {
    const TernaryTensor p = pack_ternary(DenseTensor({70}), 1.0);
    for (uint64_t w : p.sign_plane) CHECK(w == 0);
    for (uint64_t w : p.value_plane) CHECK(w == 0);
  }
  SUBCASE("off-grid values are rejected, not re-quantized") {
    CHECK_THROWS_AS(pack_ternary(DenseTensor::from({1}, {0.4f}), 1.0), PrecisionError);
    CHECK_THROWS_AS(pack_ternary(DenseTensor::from({1}, {1.0f}), 1.0), PrecisionError);
  }
  SUBCASE("negative zero packs as canonical zero") {
    const TernaryTensor p = pack_ternary(DenseTensor::from({1}, {-0.0f}), 1.0);
    CHECK(p.sign_plane[0] == 0);
    CHECK(p.value_plane[0] == 0);
  }
  SUBCASE("round trip is exact over random ternary tensors") {
    Rng rng(10);
    for (int trial = 0; trial < 1000; ++trial) {
      const int n = 1 + static_cast<int>(rng.below(300));
      const DenseTensor t = random_ternary({n}, rng);
      CHECK(unpack_ternary(pack_ternary(t, 1.0)).data == t.data);
    }
  }
  SUBCASE("two packings of equal contents are byte-identical") {
    Rng rng(11);
    const DenseTensor t = random_ternary({97}, rng);
    const TernaryTensor a = pack_ternary(t, 0.5);
    const TernaryTensor b = pack_ternary(t, 0.5);
    CHECK(a.sign_plane == b.sign_plane);
    CHECK(a.value_plane == b.value_plane);
  }
}

TEST_CASE("dot_packed") {
  SUBCASE("worked example cancels to zero") {
    const TernaryTensor a = pack_ternary(DenseTensor::from({3}, {0.5f, -0.5f, 0.0f}), 1.0);
    const TernaryTensor b = pack_ternary(DenseTensor::from({3}, {0.5f, 0.5f, -0.5f}), 1.0);
    CHECK(dot_packed(a, b) == 0.0);
  }
  SUBCASE("all-zero operand gives zero") {
    const TernaryTensor a = pack_ternary(DenseTensor({65}), 2.0);
    Rng rng(12);
    const TernaryTensor b = pack_ternary(random_ternary({65}, rng), 1.4);
    CHECK(dot_packed(a, b) == 0.0);
  }
  SUBCASE("length mismatch raises a dimension error") {
    const TernaryTensor a = pack_ternary(DenseTensor({3}), 1.0);
    const TernaryTensor b = pack_ternary(DenseTensor({4}), 1.0);
    CHECK_THROWS_AS(dot_packed(a, b), DimensionError);
  }
  SUBCASE("exact agreement with the dense oracle on random pairs") {
    Rng rng(13);
    const double alphas[] = {0.25, 0.5, 1.0, 1.4, 2.0};
    for (int trial = 0; trial < 3000; ++trial) {
      const int64_t n = 1 + static_cast<int64_t>(rng.below(4096));
      const DenseTensor a = random_ternary({static_cast<int>(n)}, rng);
      const DenseTensor b = random_ternary({static_cast<int>(n)}, rng);
      const double aa = alphas[rng.below(5)], ab = alphas[rng.below(5)];
      double dense = 0.0;
      for (int64_t i = 0; i < n; ++i)
        dense += static_cast<double>(a.data[static_cast<size_t>(i)]) *
                 b.data[static_cast<size_t>(i)];
      const TernaryTensor pa = pack_ternary(a, aa), pb = pack_ternary(b, ab);
      const double got = dot_packed(pa, pb);
      CHECK(got == dense * aa * ab);
      CHECK(got == ref::dot_packed(pa, pb));
    }
  }
  SUBCASE("garbage in the sign-plane padding cannot change the result") {
    Rng rng(14);
    const DenseTensor a = random_ternary({70}, rng);
    const DenseTensor b = random_ternary({70}, rng);
    TernaryTensor pa = pack_ternary(a, 1.0);
    const TernaryTensor pb = pack_ternary(b, 1.0);
    const double clean = dot_packed(pa, pb);
    pa.sign_plane[1] |= ~((uint64_t(1) << (70 - 64)) - 1);  // flip all pad sign bits
    CHECK(dot_packed(pa, pb) == clean);
  }
}

TEST_CASE("conv1d_packed") {
  SUBCASE("half-identity kernel with alpha two reproduces the input values") {
    Rng rng(15);
    const DenseTensor in = random_ternary({2, 3, 9}, rng);
    DenseTensor k({3, 3, 1});
    for (int co = 0; co < 3; ++co) k.data[static_cast<size_t>(co * 3 + co)] = 0.5f;
    const DenseTensor out = conv1d_packed(pack_ternary(in, 1.0), pack_ternary(k, 2.0), 1);
    CHECK(out.data == in.data);
  }
  SUBCASE("zero kernel gives zero output") {
    Rng rng(16);
    const DenseTensor in = random_ternary({1, 2, 8}, rng);
    const DenseTensor k({4, 2, 3});
    const DenseTensor out = conv1d_packed(pack_ternary(in, 1.0), pack_ternary(k, 1.0), 1);
    for (float v : out.data) CHECK(v == 0.0f);
  }
  SUBCASE("exact agreement with the dense conv oracle, all strides") {
    Rng rng(17);
    const double alphas[] = {0.25, 0.5, 1.0, 1.4, 2.0};
    for (int trial = 0; trial < 60; ++trial) {
      const int c = 1 + static_cast<int>(rng.below(12));
      const int t = 4 + static_cast<int>(rng.below(60));
      const int kh = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(std::min(t, 11))));
      const int co = 1 + static_cast<int>(rng.below(16));
      const int n = 1 + static_cast<int>(rng.below(4));
      const int stride = 1 + static_cast<int>(rng.below(3));
      const DenseTensor in = random_ternary({n, c, t}, rng);
      const DenseTensor ker = random_ternary({co, c, kh}, rng);
      const double ain = alphas[rng.below(5)], aw = alphas[rng.below(5)];
      const TernaryTensor pin = pack_ternary(in, ain), pker = pack_ternary(ker, aw);
      const DenseTensor dense = conv1d_forward(in, ker, stride);
      const DenseTensor packed = conv1d_packed(pin, pker, stride);
      const DenseTensor serial = ref::conv1d_packed(pin, pker, stride);
      REQUIRE(packed.shape == dense.shape);
      const double scale = 0.25 * ain * aw;
      for (int64_t i = 0; i < packed.numel(); ++i) {
        // dense conv output is an exact multiple of 0.25
        const double balance = static_cast<double>(dense.data[static_cast<size_t>(i)]) / 0.25;
        const float want = static_cast<float>(balance * scale);
        CHECK(packed.data[static_cast<size_t>(i)] == want);
        CHECK(packed.data[static_cast<size_t>(i)] == serial.data[static_cast<size_t>(i)]);
      }
    }
  }
  SUBCASE("shape mismatch raises a dimension error") {
    const TernaryTensor a = pack_ternary(DenseTensor({1, 2, 8}), 1.0);
    const TernaryTensor k = pack_ternary(DenseTensor({4, 3, 3}), 1.0);
    CHECK_THROWS_AS(conv1d_packed(a, k, 1), DimensionError);
  }
}

TEST_CASE("dense_packed") {
  SUBCASE("1x1 case") {
    const TernaryTensor in = pack_ternary(DenseTensor::from({1, 1}, {0.5f}), 1.0);
    const TernaryTensor w = pack_ternary(DenseTensor::from({1, 1}, {0.5f}), 1.0);
    CHECK(dense_packed(in, w).data[0] == 0.25f);
  }
  SUBCASE("orthogonal supports give zero") {
    const TernaryTensor in = pack_ternary(DenseTensor::from({1, 2}, {0.5f, 0.0f}), 1.0);
    const TernaryTensor w = pack_ternary(DenseTensor::from({2, 1}, {0.0f, -0.5f}), 1.0);
    CHECK(dense_packed(in, w).data[0] == 0.0f);
  }
  SUBCASE("random matrices match the dense oracle exactly") {
    Rng rng(18);
    const double alphas[] = {0.25, 0.5, 1.0, 1.4, 2.0};
    for (int trial = 0; trial < 40; ++trial) {
      const int b = 1 + static_cast<int>(rng.below(6));
      const int ni = 1 + static_cast<int>(rng.below(300));
      const int no = 1 + static_cast<int>(rng.below(40));
      const DenseTensor in = random_ternary({b, ni}, rng);
      const DenseTensor w = random_ternary({ni, no}, rng);
      const double ain = alphas[rng.below(5)], aw = alphas[rng.below(5)];
      const DenseTensor dense = dense_forward(in, w, nullptr);
      const TernaryTensor pin = pack_ternary(in, ain), pw = pack_ternary(w, aw);
      const DenseTensor packed = dense_packed(pin, pw);
      const DenseTensor serial = ref::dense_packed(pin, pw);
      const double scale = 0.25 * ain * aw;
      for (int64_t i = 0; i < packed.numel(); ++i) {
        const double balance = static_cast<double>(dense.data[static_cast<size_t>(i)]) / 0.25;
        const float want = static_cast<float>(balance * scale);
        CHECK(packed.data[static_cast<size_t>(i)] == want);
        CHECK(packed.data[static_cast<size_t>(i)] == serial.data[static_cast<size_t>(i)]);
      }
    }
  }
  SUBCASE("bias folds into the same double expression") {
    Rng rng(19);
    const DenseTensor in = random_ternary({2, 33}, rng);
    const DenseTensor w = random_ternary({33, 5}, rng);
    const std::vector<double> bias = {0.1, -0.2, 0.3, 0.0, 1.5};
    const TernaryTensor pin = pack_ternary(in, 1.0), pw = pack_ternary(w, 1.4);
    const DenseTensor dense = dense_forward(in, w, nullptr);
    const DenseTensor withbias = dense_packed(pin, pw, &bias);
    for (int b = 0; b < 2; ++b)
      for (int j = 0; j < 5; ++j) {
        const double balance =
            static_cast<double>(dense.data[static_cast<size_t>(b * 5 + j)]) / 0.25;
        const float want =
            static_cast<float>(balance * (0.25 * 1.0 * 1.4) + bias[static_cast<size_t>(j)]);
        CHECK(withbias.data[static_cast<size_t>(b * 5 + j)] == want);
      }
  }
}

TEST_CASE("quantized batch norm thresholds") {
  SUBCASE("hand evaluations") {
    const QuantBNThresholds thr = QuantBNThresholds::from_bn({1.0f}, {0.0f}, 1.0);
    CHECK(thr.upper[0] == 0.25);
    CHECK(thr.lower[0] == -0.25);
    CHECK(quantize_bn_scalar(0.3, thr, 0) == 0.5);
    CHECK(quantize_bn_scalar(0.0, thr, 0) == 0.0);
    CHECK(quantize_bn_scalar(-0.26, thr, 0) == -0.5);
  }
  SUBCASE("zero gamma is degenerate at precompute time") {
    CHECK_THROWS_AS(QuantBNThresholds::from_bn({0.0f}, {0.1f}, 1.0), DegenerateInputError);
  }
  SUBCASE("threshold form equals the direct composition on random tuples") {
    Rng rng(20);
    for (int trial = 0; trial < 20000; ++trial) {
      float gamma = 0.0f;
      while (std::fabs(gamma) < 0.05f) gamma = static_cast<float>(rng.uniform(-3.0, 3.0));
      const float beta = static_cast<float>(rng.uniform(-2.0, 2.0));
      const double eps = rng.uniform(0.05, 1.0);
      const double xhat = rng.uniform(-4.0, 4.0);
      const QuantBNThresholds thr = QuantBNThresholds::from_bn({gamma}, {beta}, eps);
      const double direct =
          quantize_scalar(static_cast<double>(gamma) * xhat + beta, eps, 2);
      CHECK(quantize_bn_scalar(xhat, thr, 0) == direct);
    }
  }
  SUBCASE("folded raw-space thresholds match normalize-then-quantize") {
    Rng rng(21);
    for (int trial = 0; trial < 20000; ++trial) {
      float gamma = 0.0f;
      while (std::fabs(gamma) < 0.05f) gamma = static_cast<float>(rng.uniform(-2.0, 2.0));
      const float beta = static_cast<float>(rng.uniform(-1.5, 1.5));
      const float mu = static_cast<float>(rng.uniform(-2.0, 2.0));
      const float sigma = static_cast<float>(rng.uniform(0.1, 3.0));
      const double eps = rng.uniform(0.05, 1.0);
      const double x = rng.uniform(-6.0, 6.0);
      const QuantBNThresholds thr =
          QuantBNThresholds::from_bn_folded({gamma}, {beta}, {mu}, {sigma}, eps);
      const double xhat = (x - static_cast<double>(mu)) / static_cast<double>(sigma);
      const double direct =
          quantize_scalar(static_cast<double>(gamma) * xhat + beta, eps, 2);
      CHECK(quantize_bn_scalar(x, thr, 0) == direct);
    }
  }
  SUBCASE("tensor application works along channel dim 1") {
    const QuantBNThresholds thr = QuantBNThresholds::from_bn({1.0f, -1.0f}, {0.0f, 0.0f}, 1.0);
    const DenseTensor x = DenseTensor::from({1, 2, 2}, {0.3f, -0.3f, 0.3f, -0.3f});
    const DenseTensor q = quantize_bn_apply(x, thr);
    CHECK(q.data == std::vector<float>{0.5f, -0.5f, -0.5f, 0.5f});
  }
  SUBCASE("gamma sign is recoverable from the threshold ordering") {
    const QuantBNThresholds pos =
        QuantBNThresholds::from_bn_folded({0.5f}, {0.2f}, {1.0f}, {2.0f}, 0.5);
    CHECK(pos.upper[0] > pos.lower[0]);
    const QuantBNThresholds neg =
        QuantBNThresholds::from_bn_folded({-0.5f}, {0.2f}, {1.0f}, {2.0f}, 0.5);
    CHECK(neg.upper[0] < neg.lower[0]);
  }
}

TEST_CASE("packed storage accounting beats dense 10x for every reference layer") {
  Rng rng(22);
  const Shape layer_shapes[] = {{50, 1, 11}, {40, 50, 10}, {30, 40, 6}, {1890, 1000}};
  for (const Shape& shape : layer_shapes) {
    const DenseTensor t = random_ternary(shape, rng);
    const TernaryTensor p = pack_ternary(t, 1.0);
    const int64_t dense_bytes = t.numel() * 4;
    CHECK(static_cast<double>(dense_bytes) / static_cast<double>(packed_storage_bytes(p)) >= 10.0);
  }
}
