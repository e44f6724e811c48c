// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "doctest.h"
#include "vilbert/gradcheck.hpp"
#include "vilbert/tensor.hpp"

using namespace vilbert;

namespace {

// independent triple-loop product, kept deliberately dumb
std::vector<real> naive_matmul(const std::vector<real>& a,
                               const std::vector<real>& b, int64_t m,
                               int64_t k, int64_t n) {
  std::vector<real> c(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      real s = 0;
      for (int64_t kk = 0; kk < k; ++kk) {
        s += a[static_cast<size_t>(i * k + kk)] *
             b[static_cast<size_t>(kk * n + j)];
      }
      c[static_cast<size_t>(i * n + j)] = s;
    }
  }
  return c;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("matmul identity") {
  Rng rng(7);
  Tensor a = Tensor::randn({3, 3}, rng);
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.mutable_data()[static_cast<size_t>(i * 3 + i)] = 1.0;
  Tensor c = matmul(a, eye);
  for (int64_t i = 0; i < 9; ++i) CHECK(c.at(i) == a.at(i));
}

TEST_CASE("matmul hand-computed 2x2 and naive oracle") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  Tensor c = matmul(a, b);
  CHECK(c.at(0, 0) == doctest::Approx(19).epsilon(1e-12));
  CHECK(c.at(0, 1) == doctest::Approx(22).epsilon(1e-12));
  CHECK(c.at(1, 0) == doctest::Approx(43).epsilon(1e-12));
  CHECK(c.at(1, 1) == doctest::Approx(50).epsilon(1e-12));

  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const int64_t m = 1 + rng.uniform_int(5), k = 1 + rng.uniform_int(5),
                  n = 1 + rng.uniform_int(5);
    Tensor x = Tensor::randn({m, k}, rng);
    Tensor y = Tensor::randn({k, n}, rng);
    Tensor z = matmul(x, y);
    const auto want =
        naive_matmul({x.data().begin(), x.data().end()},
                     {y.data().begin(), y.data().end()}, m, k, n);
    for (int64_t i = 0; i < m * n; ++i) {
      CHECK(z.at(i) == doctest::Approx(want[static_cast<size_t>(i)])
                           .epsilon(1e-12));
    }
  }
}

TEST_CASE("matmul zero case and shape errors") {
  Rng rng(3);
  Tensor z = matmul(Tensor::zeros({2, 3}), Tensor::randn({3, 4}, rng));
  for (int64_t i = 0; i < z.numel(); ++i) CHECK(z.at(i) == 0.0);

  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x4]") != std::string::npos);
  }
}

TEST_CASE("softmax analytic cases") {
  Tensor s = softmax(Tensor::from_data({2}, {0, 0}), 0);
  CHECK(s.at(0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.at(1) == doctest::Approx(0.5).epsilon(1e-12));

  Tensor t = softmax(Tensor::from_data({2}, {0.0, std::log(3.0)}), 0);
  CHECK(t.at(0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(t.at(1) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax shift invariance and row sums") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const int64_t m = 1 + rng.uniform_int(4), n = 1 + rng.uniform_int(6);
    Tensor x = Tensor::randn({m, n}, rng, 3.0);
    const real c = rng.uniform(-50.0, 50.0);
    std::vector<real> shifted(x.data().begin(), x.data().end());
    for (auto& v : shifted) v += c;
    Tensor y1 = softmax(x, 1);
    Tensor y2 = softmax(Tensor::from_data({m, n}, std::move(shifted)), 1);
    for (int64_t i = 0; i < m * n; ++i) {
      CHECK(y1.at(i) == doctest::Approx(y2.at(i)).epsilon(1e-12));
    }
    for (int64_t r = 0; r < m; ++r) {
      real sum = 0;
      for (int64_t j = 0; j < n; ++j) sum += y1.at(r, j);
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("layer_norm analytic cases") {
  Tensor gamma = Tensor::full({3}, 1.0);
  Tensor beta = Tensor::zeros({3});
  Tensor y = layer_norm(Tensor::from_data({1, 3}, {1, 2, 3}), gamma, beta);
  real mean = (y.at(0) + y.at(1) + y.at(2)) / 3.0;
  real var = 0;
  for (int64_t i = 0; i < 3; ++i) var += (y.at(i) - mean) * (y.at(i) - mean);
  var /= 3.0;
  CHECK(std::abs(mean) < 1e-9);
  CHECK(var == doctest::Approx(1.0).epsilon(1e-5));  // eps-damped

  Tensor beta2 = Tensor::from_data({3}, {7, 8, 9});
  Tensor yc = layer_norm(Tensor::from_data({1, 3}, {5, 5, 5}), gamma, beta2);
  for (int64_t i = 0; i < 3; ++i) {
    CHECK(yc.at(i) == doctest::Approx(beta2.at(i)).epsilon(1e-12));
  }

  Tensor zero_gamma = Tensor::zeros({3});
  Rng rng(2);
  Tensor yg = layer_norm(Tensor::randn({2, 3}, rng), zero_gamma, beta2);
  for (int64_t r = 0; r < 2; ++r) {
    for (int64_t j = 0; j < 3; ++j) {
      CHECK(yg.at(r, j) == beta2.at(j));
    }
  }
}

TEST_CASE("gelu asymptotes") {
  Tensor y = gelu(Tensor::from_data({3}, {0.0, 10.0, -10.0}));
  CHECK(y.at(0) == 0.0);
  CHECK(y.at(1) == doctest::Approx(10.0).epsilon(1e-7));
  CHECK(std::abs(y.at(2)) < 1e-6);
}

TEST_CASE("embedding lookup gather and scatter-add") {
  Tensor table = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  const std::vector<int64_t> first{0};
  Tensor row0 = embedding_lookup(table, first);
  CHECK(row0.at(0, 0) == 1.0);
  CHECK(row0.at(0, 1) == 2.0);

  // repeated id accumulates twice on that row
  table.zero_grad();
  {
    Graph g;
    GraphScope scope(g);
    const std::vector<int64_t> ids{1, 1};
    Tensor out = embedding_lookup(table, ids);
    g.backward(sum_all(out));
  }
  auto grad = table.grad();
  CHECK(grad[0] == 0.0);
  CHECK(grad[2] == 2.0);
  CHECK(grad[3] == 2.0);
  CHECK(grad[4] == 0.0);

  const std::vector<int64_t> empty{};
  Tensor none = embedding_lookup(table, empty);
  CHECK(none.shape() == Shape{0, 2});

  try {
    const std::vector<int64_t> bad{7};
    embedding_lookup(table, bad);
    FAIL("expected IndexError");
  } catch (const IndexError& e) {
    CHECK(std::string(e.what()).find("7") != std::string::npos);
  }
}

TEST_CASE("backward basics") {
  Rng rng(13);
  Tensor x = Tensor::randn({1, 4}, rng, 1.0, true);

  x.zero_grad();
  {
    Graph g;
    GraphScope scope(g);
    g.backward(sum_all(x));
  }
  for (real v : x.grad()) CHECK(v == 1.0);

  x.zero_grad();
  {
    Graph g;
    GraphScope scope(g);
    Tensor loss = matmul(x, transpose(x));  // x xT = sum of squares
    g.backward(loss);
  }
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(x.grad()[static_cast<size_t>(i)] ==
          doctest::Approx(2.0 * x.at(i)).epsilon(1e-12));
  }

  Graph g;
  GraphScope scope(g);
  Tensor wide = add(x, x);
  CHECK_THROWS_AS(g.backward(wide), ContractError);
}

TEST_CASE("composite loss matches finite differences") {
  Rng rng(17);
  Tensor x = Tensor::randn({3, 4}, rng, 1.0, true);
  Tensor w = Tensor::randn({4, 2}, rng, 1.0, true);
  std::vector<Tensor> leaves{x, w};
  const real err = gradcheck_max_err(
      [&]() {
        return mean_all(gelu(matmul(layer_norm(x, Tensor::full({4}, 1.0),
                                               Tensor::zeros({4})),
                                    w)));
      },
      leaves);
  CHECK(err < 1e-4);
}

TEST_CASE("elementwise identities") {
  Rng rng(23);
  Tensor x = Tensor::randn({3, 5}, rng);
  Tensor ones = Tensor::full({3, 5}, 1.0);
  Tensor m = mul(x, ones);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(m.at(i) == x.at(i));

  Rng drop_rng(1);
  Tensor d = dropout(x, 0.0, drop_rng);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(d.at(i) == x.at(i));

  Tensor a = Tensor::randn({2, 4}, rng);
  Tensor b = Tensor::randn({3, 4}, rng);
  Tensor cat = concat_rows(a, b);
  Tensor back_a = slice_rows(cat, 0, 2);
  Tensor back_b = slice_rows(cat, 2, 5);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(back_a.at(i) == a.at(i));
  for (int64_t i = 0; i < b.numel(); ++i) CHECK(back_b.at(i) == b.at(i));
}

TEST_CASE("identical seeds give bit-identical forwards") {
  auto run = []() {
    Rng rng(99);
    Tensor x = Tensor::randn({4, 6}, rng);
    Rng drop(42);
    Tensor y = dropout(gelu(x), 0.3, drop);
    return std::vector<real>(y.data().begin(), y.data().end());
  };
  CHECK(run() == run());
}

TEST_CASE("finite checks flag non-finite outputs") {
  set_finite_checks(true);
  Tensor big = Tensor::from_data({1}, {1e308});
  CHECK_THROWS_AS(scale(big, 1e10), NumericError);
  set_finite_checks(false);
  CHECK_NOTHROW(scale(big, 1e10));
}

TEST_CASE("gradient suite: every primitive within 1e-4") {
  set_finite_checks(true);
  const auto reports = gradcheck_ops(1234);
  set_finite_checks(false);
  CHECK(reports.size() >= 20);
  for (const auto& r : reports) {
    INFO(r.name, " max_err=", r.max_err);
    CHECK(r.pass);
  }
}

}  // TEST_SUITE
