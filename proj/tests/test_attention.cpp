// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "doctest.h"
#include "vilbert/attention.hpp"
#include "vilbert/gradcheck.hpp"

using namespace vilbert;

namespace {

BlockParams tied_params(const AttentionConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  return init_block_params(cfg, rng);
}

void set_identity(Tensor t) {
  auto vals = t.mutable_data();
  const int64_t n = t.shape()[0];
  for (auto& v : vals) v = 0.0;
  for (int64_t i = 0; i < n; ++i) vals[static_cast<size_t>(i * n + i)] = 1.0;
}

}  // namespace

TEST_SUITE("attention") {

TEST_CASE("single key: every query row sees the single value vector") {
  const AttentionConfig cfg{6, 2, 3, 8, 6};
  BlockParams p = tied_params(cfg, 1);
  set_identity(p.w_o);  // expose the concatenated head outputs directly
  Rng rng(2);
  Tensor hq = Tensor::randn({4, 6}, rng);
  Tensor hkv = Tensor::randn({1, 6}, rng);
  Tensor out = multi_head_attention(hq, hkv, cfg, p, all_visible(1));
  Tensor value = matmul(hkv, p.w_v);
  for (int64_t i = 0; i < out.rows(); ++i) {
    for (int64_t j = 0; j < 6; ++j) {
      CHECK(out.at(i, j) == doctest::Approx(value.at(0, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("identical value rows: output is that value for every query") {
  const AttentionConfig cfg{6, 2, 3, 8, 6};
  BlockParams p = tied_params(cfg, 3);
  Rng rng(4);
  Tensor hq = Tensor::randn({3, 6}, rng);
  std::vector<real> row(6);
  for (auto& v : row) v = rng.normal();
  std::vector<real> kv;
  for (int i = 0; i < 5; ++i) kv.insert(kv.end(), row.begin(), row.end());
  Tensor hkv = Tensor::from_data({5, 6}, std::move(kv));
  Tensor out = multi_head_attention(hq, hkv, cfg, p, all_visible(5));
  for (int64_t i = 1; i < out.rows(); ++i) {
    for (int64_t j = 0; j < 6; ++j) {
      CHECK(out.at(i, j) == doctest::Approx(out.at(0, j)).epsilon(1e-9));
    }
  }
}

TEST_CASE("masking: exact zeros and re-softmax over the unmasked subset") {
  const AttentionConfig cfg{6, 2, 3, 8, 6};
  BlockParams p = tied_params(cfg, 5);
  Rng rng(6);
  Tensor hq = Tensor::randn({3, 6}, rng);
  Tensor hkv = Tensor::randn({5, 6}, rng);
  KeyMask mask = all_visible(5);
  mask[1] = 0;
  mask[4] = 0;

  std::vector<Tensor> weights;
  multi_head_attention(hq, hkv, cfg, p, mask, &weights);
  REQUIRE(weights.size() == 2);

  // oracle: recompute the scores per head and softmax over unmasked keys only
  Tensor q = matmul(hq, p.w_q);
  Tensor k = matmul(hkv, p.w_k);
  for (int64_t h = 0; h < cfg.num_heads; ++h) {
    Tensor qh = slice_cols(q, h * cfg.head_dim, (h + 1) * cfg.head_dim);
    Tensor kh = slice_cols(k, h * cfg.head_dim, (h + 1) * cfg.head_dim);
    Tensor scores = scale(matmul(qh, transpose(kh)),
                          1.0 / std::sqrt(static_cast<real>(cfg.head_dim)));
    const Tensor& got = weights[static_cast<size_t>(h)];
    for (int64_t i = 0; i < 3; ++i) {
      real denom = 0;
      real maxv = -1e300;
      for (int64_t j = 0; j < 5; ++j) {
        if (mask[static_cast<size_t>(j)]) maxv = std::max(maxv, scores.at(i, j));
      }
      for (int64_t j = 0; j < 5; ++j) {
        if (mask[static_cast<size_t>(j)]) denom += std::exp(scores.at(i, j) - maxv);
      }
      real sum = 0;
      for (int64_t j = 0; j < 5; ++j) {
        if (mask[static_cast<size_t>(j)]) {
          const real want = std::exp(scores.at(i, j) - maxv) / denom;
          CHECK(got.at(i, j) == doctest::Approx(want).epsilon(1e-9));
        } else {
          CHECK(got.at(i, j) == 0.0);  // exactly zero
        }
        sum += got.at(i, j);
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("fully masked key set is a contract error") {
  const AttentionConfig cfg{6, 2, 3, 8, 6};
  BlockParams p = tied_params(cfg, 7);
  Rng rng(8);
  Tensor h = Tensor::randn({2, 6}, rng);
  KeyMask mask(2, 0);
  CHECK_THROWS_AS(multi_head_attention(h, h, cfg, p, mask), ContractError);
}

TEST_CASE("transformer block preserves shape") {
  const AttentionConfig cfg{6, 2, 3, 8, 6};
  BlockParams p = tied_params(cfg, 9);
  Rng rng(10);
  for (int64_t t : {1, 3, 7}) {
    Tensor h = Tensor::randn({t, 6}, rng);
    Tensor out = transformer_block(h, cfg, p, all_visible(t));
    CHECK(out.shape() == h.shape());
  }
}

TEST_CASE("zero-weight block reduces to LN(LN(H))") {
  const AttentionConfig cfg{6, 2, 3, 8, 6};
  BlockParams p = tied_params(cfg, 11);
  for (Tensor t : {p.w_q, p.w_k, p.w_v, p.w_o, p.ffn_w1, p.ffn_b1, p.ffn_w2,
                   p.ffn_b2}) {
    for (auto& v : t.mutable_data()) v = 0.0;
  }
  Rng rng(12);
  Tensor h = Tensor::randn({4, 6}, rng);
  Tensor out = transformer_block(h, cfg, p, all_visible(4));
  Tensor gamma = Tensor::full({6}, 1.0);
  Tensor beta = Tensor::zeros({6});
  Tensor want = layer_norm(layer_norm(h, gamma, beta), gamma, beta);
  for (int64_t i = 0; i < out.numel(); ++i) {
    CHECK(out.at(i) == doctest::Approx(want.at(i)).epsilon(1e-12));
  }
}

TEST_CASE("co-attention with tied identical streams reduces to self-attention") {
  const AttentionConfig cfg{6, 2, 3, 8, 6};
  BlockParams p = tied_params(cfg, 13);
  Rng rng(14);
  Tensor h = Tensor::randn({4, 6}, rng);
  const KeyMask mask = all_visible(4);
  auto [ov, ow] = co_attention_block(h, h, cfg, cfg, p, p, mask, mask, true);
  Tensor self_out = transformer_block(h, cfg, p, mask);
  for (int64_t i = 0; i < ov.numel(); ++i) {
    CHECK(std::abs(ov.at(i) - ow.at(i)) < 1e-6);
    CHECK(std::abs(ov.at(i) - self_out.at(i)) < 1e-6);
  }
}

TEST_CASE("co-attention weights over the other stream are row-stochastic") {
  const AttentionConfig cfg_v{6, 2, 3, 8, 4};
  const AttentionConfig cfg_w{4, 2, 2, 6, 6};
  Rng rng(15);
  BlockParams pv = init_block_params(cfg_v, rng);
  BlockParams pw = init_block_params(cfg_w, rng);
  Tensor hv = Tensor::randn({5, 6}, rng);
  Tensor hw = Tensor::randn({3, 4}, rng);
  std::vector<Tensor> attn_v, attn_w;
  co_attention_block(hv, hw, cfg_v, cfg_w, pv, pw, all_visible(5),
                     all_visible(3), true, &attn_v, &attn_w);
  for (const auto& w : attn_v) {
    CHECK(w.shape() == Shape{5, 3});  // visual queries over text keys
    for (int64_t i = 0; i < w.rows(); ++i) {
      real sum = 0;
      for (int64_t j = 0; j < w.cols(); ++j) sum += w.at(i, j);
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
  for (const auto& w : attn_w) CHECK(w.shape() == Shape{3, 5});
}

TEST_CASE("attention is blind to consistent key permutations") {
  const AttentionConfig cfg{6, 2, 3, 8, 6};
  BlockParams p = tied_params(cfg, 16);
  Rng rng(17);
  Tensor hq = Tensor::randn({3, 6}, rng);
  Tensor hkv = Tensor::randn({5, 6}, rng);
  KeyMask mask = all_visible(5);
  mask[2] = 0;
  Tensor out = multi_head_attention(hq, hkv, cfg, p, mask);

  const std::vector<int64_t> perm{3, 0, 4, 1, 2};
  std::vector<real> kv_perm(5 * 6);
  KeyMask mask_perm(5);
  for (int64_t i = 0; i < 5; ++i) {
    mask_perm[static_cast<size_t>(i)] = mask[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    for (int64_t j = 0; j < 6; ++j) {
      kv_perm[static_cast<size_t>(i * 6 + j)] =
          hkv.at(perm[static_cast<size_t>(i)], j);
    }
  }
  Tensor out2 = multi_head_attention(
      hq, Tensor::from_data({5, 6}, std::move(kv_perm)), cfg, p, mask_perm);
  for (int64_t i = 0; i < out.numel(); ++i) {
    CHECK(out2.at(i) == doctest::Approx(out.at(i)).epsilon(1e-12));
  }
}

TEST_CASE("block gradient suite") {
  set_finite_checks(true);
  const auto reports = gradcheck_blocks(77);
  set_finite_checks(false);
  CHECK(reports.size() == 4);
  for (const auto& r : reports) {
    INFO(r.name, " max_err=", r.max_err);
    CHECK(r.pass);
  }
}

}  // TEST_SUITE
