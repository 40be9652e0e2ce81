#include <cmath>
#include <vector>

#include "doctest.h"
#include "sambd/gradcheck.hpp"
#include "sambd/ops.hpp"
#include "sambd/optim.hpp"
#include "support.hpp"

using namespace sambd;
using test_support::as_double;
using test_support::naive_conv;
using test_support::random_tensor;

namespace {

struct ConvCase {
  std::size_t c, h, w, cout, k;
  int stride, dilation, padding;
};

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("conv2d matches direct loops across stride, dilation and padding") {
  const ConvCase cases[] = {{3, 7, 6, 4, 3, 1, 1, 1}, {2, 8, 8, 3, 3, 2, 1, 1}, {4, 9, 9, 2, 3, 1, 2, 2},
                            {3, 6, 5, 5, 1, 1, 1, 0}, {2, 8, 8, 2, 1, 2, 1, 0}, {1, 11, 10, 2, 5, 1, 1, 2},
                            {2, 10, 10, 3, 3, 1, 4, 4}, {3, 5, 5, 2, 3, 2, 1, 0}};
  std::uint64_t seed = 10;
  for (const auto& cc : cases) {
    CAPTURE(cc.k);
    CAPTURE(cc.stride);
    CAPTURE(cc.dilation);
    auto x = random_tensor<double>({2, cc.c, cc.h, cc.w}, ++seed);
    auto k = random_tensor<double>({cc.cout, cc.c, cc.k, cc.k}, ++seed);
    auto b = random_tensor<double>({cc.cout}, ++seed);
    const auto y = nn::conv2d(x, k, b, {cc.stride, cc.dilation, cc.padding});
    const auto bias = as_double(b);
    std::size_t oh, ow;
    const auto ref = naive_conv(as_double(x), 2, cc.c, cc.h, cc.w, as_double(k), cc.cout, cc.k, cc.k, &bias, cc.stride,
                                cc.dilation, cc.padding, false, oh, ow);
    CHECK(y.shape() == Shape{2, cc.cout, oh, ow});
    CHECK(max_abs_diff(as_double(y), ref) < 1e-12);
  }
}

TEST_CASE("depthwise conv matches direct loops") {
  auto x = random_tensor<double>({1, 4, 9, 7}, 1);
  auto k = random_tensor<double>({4, 1, 3, 3}, 2);
  for (auto [stride, dilation] : {std::pair{1, 1}, std::pair{2, 1}, std::pair{1, 2}}) {
    const int pad = nn::same_padding(3, dilation);
    const auto y = nn::depthwise_conv2d(x, k, Tensor<double>{}, {stride, dilation, pad});
    std::size_t oh, ow;
    const auto ref = naive_conv(as_double(x), 1, 4, 9, 7, as_double(k), 4, 3, 3, nullptr, stride, dilation, pad, true, oh, ow);
    CHECK(y.shape() == Shape{1, 4, oh, ow});
    CHECK(max_abs_diff(as_double(y), ref) < 1e-12);
  }
}

TEST_CASE("separable conv equals depthwise followed by pointwise") {
  auto x = random_tensor<double>({1, 3, 8, 8}, 3);
  auto dw = random_tensor<double>({3, 1, 3, 3}, 4);
  auto pw = random_tensor<double>({5, 3, 1, 1}, 5);
  auto b = random_tensor<double>({5}, 6);
  const auto y = nn::separable_conv2d(x, dw, pw, b, {2, 1, 1});
  const auto ref = nn::conv2d(nn::depthwise_conv2d(x, dw, Tensor<double>{}, {2, 1, 1}), pw, b, {});
  CHECK(max_abs_diff(as_double(y), as_double(ref)) == 0.0);
}

TEST_CASE("conv2d rejects channel mismatch and even kernels") {
  auto x = random_tensor<double>({1, 3, 8, 8}, 1);
  CHECK_THROWS_AS(nn::conv2d(x, random_tensor<double>({2, 4, 3, 3}, 2), Tensor<double>{}), std::invalid_argument);
  CHECK_THROWS_AS(nn::conv2d(x, random_tensor<double>({2, 3, 2, 2}, 2), Tensor<double>{}), std::invalid_argument);
  CHECK_THROWS_AS(nn::conv2d(x, random_tensor<double>({2, 3, 3, 3}, 2), Tensor<double>{}, {0, 1, 1}),
                  std::invalid_argument);
}

TEST_CASE("bilinear upsampling uses half-pixel centres") {
  const auto x = Tensor<double>::from_data({1, 1, 1, 2}, {0.0, 2.0});
  const auto y = nn::bilinear_upsample(x, 2);
  REQUIRE(y.shape() == Shape{1, 1, 2, 4});
  const std::vector<double> row{0.0, 0.5, 1.5, 2.0};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(y.data()[i] == doctest::Approx(row[i]).epsilon(1e-15));
    CHECK(y.data()[4 + i] == doctest::Approx(row[i]).epsilon(1e-15));
  }
  const auto c = nn::bilinear_upsample(Tensor<double>::full({1, 2, 3, 3}, 1.25), 4);
  for (double v : c.data()) CHECK(v == 1.25);
  CHECK_THROWS_AS(nn::bilinear_upsample(x, 1), std::invalid_argument);
}

TEST_CASE("softmax over classes is a normalised distribution") {
  const auto logits = random_tensor<double>({3, 4, 5, 5}, 9, -20.0, 20.0);
  const auto p = nn::softmax_over_classes(logits);
  for (std::size_t m = 0; m < 3; ++m)
    for (std::size_t i = 0; i < 25; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < 4; ++c) {
        const double v = p.data()[(m * 4 + c) * 25 + i];
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  const auto flat = nn::softmax_over_classes(Tensor<double>::zeros({1, 3, 2, 2}));
  for (double v : flat.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("activations") {
  const auto x = Tensor<double>::from_data({1, 1, 1, 3}, {-2.0, 0.0, 3.0});
  const auto r = nn::relu(x);
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[2] == 3.0);
  const auto s = nn::sigmoid(x);
  CHECK(s.data()[1] == 0.5);
  CHECK(s.data()[0] == doctest::Approx(1.0 / (1.0 + std::exp(2.0))));
  CHECK(nn::parse_activation("relu") == nn::Activation::relu);
  CHECK_THROWS_AS(nn::parse_activation("tanh"), std::invalid_argument);
}

TEST_CASE("every op's backward matches central differences") {
  nn::GradCheckOptions opt;
  auto x = random_tensor<double>({1, 3, 8, 8}, 21, -1.0, 1.0, true);
  auto k = random_tensor<double>({4, 3, 3, 3}, 22, -1.0, 1.0, true);
  auto b = random_tensor<double>({4}, 23, -1.0, 1.0, true);
  auto dw = random_tensor<double>({3, 1, 3, 3}, 24, -1.0, 1.0, true);
  auto pw = random_tensor<double>({4, 3, 1, 1}, 25, -1.0, 1.0, true);
  auto gamma = random_tensor<double>({4}, 26, 0.5, 1.5, true);
  auto gate = random_tensor<double>({1, 1, 8, 8}, 27, 0.0, 1.0, true);
  auto w = random_tensor<double>({4, 4, 8, 8}, 28);  // fixed projection to a scalar

  auto project = [&](const Tensor<double>& y) {
    const Tensor<double> proj = Tensor<double>::from_data(y.shape(), std::vector<double>(w.data().begin(), w.data().begin() + static_cast<std::ptrdiff_t>(y.size())));
    return nn::sum(nn::mul(y, proj));
  };
  struct Named {
    const char* name;
    std::function<Tensor<double>()> fn;
    std::vector<Tensor<double>> params;
  };
  const std::vector<Named> checks{
      {"conv", [&] { return project(nn::conv2d(x, k, b, {1, 1, 1})); }, {x, k, b}},
      {"conv strided dilated", [&] { return project(nn::conv2d(x, k, b, {2, 2, 2})); }, {x, k, b}},
      {"separable", [&] { return project(nn::separable_conv2d(x, dw, pw, b, {2, 1, 1})); }, {x, dw, pw, b}},
      {"upsample", [&] { return project(nn::bilinear_upsample(nn::conv2d(x, k, b, {2, 1, 1}), 2)); }, {x, k, b}},
      {"channel scale relu", [&] { return project(nn::relu(nn::channel_scale(nn::conv2d(x, k, b, {1, 1, 1}), gamma))); }, {x, k, gamma}},
      {"gate sigmoid", [&] { return project(nn::spatial_gate(nn::conv2d(x, k, b, {1, 1, 1}), nn::sigmoid(gate))); }, {x, gate}},
      {"softmax", [&] { return project(nn::softmax_over_classes(nn::conv2d(x, k, b, {1, 1, 1}))); }, {x, k}},
      {"concat pool broadcast",
       [&] {
         auto y = nn::conv2d(x, k, b, {2, 1, 1});
         auto g = nn::broadcast_spatial(nn::global_avg_pool(y), 4, 4);
         return project(nn::concat<double>({y, nn::scale(g, 0.5)}, 1));
       },
       {x, k, b}},
      {"reshape add", [&] { auto y = nn::conv2d(x, k, b, {1, 1, 1}); return project(nn::reshape(nn::add(y, y), {2, 2, 8, 8})); }, {x, k, b}},
  };
  for (auto c : checks) {
    CAPTURE(c.name);
    const auto r = nn::grad_check(c.fn, c.params, opt);
    CHECK(r.coordinates_checked > 0);
    CHECK(r.max_relative_error < 1e-6);
  }
}

TEST_CASE("backward accumulates into leaves and requires a scalar") {
  auto a = Tensor<double>::from_data({2}, {1.0, 2.0}, true);
  auto loss = nn::sum(nn::mul(a, a));
  backward(loss);
  CHECK(a.grad()[0] == 2.0);
  CHECK(a.grad()[1] == 4.0);
  backward(nn::sum(a));
  CHECK(a.grad()[0] == 3.0);
  a.zero_grad();
  CHECK(a.grad()[0] == 0.0);
  CHECK(a.grad()[1] == 0.0);
  CHECK_THROWS_AS(backward(nn::mul(a, a)), std::invalid_argument);
}

TEST_CASE("no-grad mode records no graph") {
  auto a = Tensor<double>::from_data({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  const auto y = nn::mul(a, a);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("sgd with momentum follows the heavy-ball recurrence") {
  auto w = Tensor<double>::from_data({1}, {1.0}, true);
  nn::OptimState state{{}, 0.1, 0.9};
  std::vector<Tensor<double>> params{w};
  for (int step = 0; step < 2; ++step) {
    w.zero_grad();
    backward(nn::sum(w));  // gradient 1
    nn::sgd_momentum_step<double>(params, state);
  }
  // v1 = 1, w1 = 0.9; v2 = 1.9, w2 = 0.71
  CHECK(state.velocity[0][0] == doctest::Approx(1.9).epsilon(1e-15));
  CHECK(w.data()[0] == doctest::Approx(0.71).epsilon(1e-14));
  state.lr = 0.0;
  CHECK_THROWS_AS(nn::sgd_momentum_step<double>(params, state), std::invalid_argument);
}

TEST_CASE("ops are bit-reproducible") {
  auto x = random_tensor<float>({1, 3, 16, 16}, 5);
  auto k = random_tensor<float>({8, 3, 3, 3}, 6);
  const auto a = nn::bilinear_upsample(nn::conv2d(x, k, Tensor<float>{}, {2, 1, 1}), 2);
  const auto b = nn::bilinear_upsample(nn::conv2d(x, k, Tensor<float>{}, {2, 1, 1}), 2);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("mac counter tallies conv work") {
  auto x = Tensor<float>::zeros({1, 3, 8, 8});
  auto k = Tensor<float>::zeros({4, 3, 3, 3});
  nn::MacCounter counter;
  nn::conv2d(x, k, Tensor<float>{}, {1, 1, 1});
  CHECK(counter.total() == 4ull * 64 * 27);
}
