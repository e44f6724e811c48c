// SPDX-License-Identifier: Apache-2.0
#include "vilbert/gradcheck.hpp"

#include <cmath>

#include "vilbert/attention.hpp"
#include "vilbert/model.hpp"
#include "vilbert/pretrain.hpp"

namespace vilbert {

namespace {

real rel_err(real a, real b) {
  return std::abs(a - b) / std::max({0.01, std::abs(a), std::abs(b)});
}

real max_err_impl(const std::function<Tensor()>& loss_fn,
                  std::span<Tensor> leaves, real step,
                  const std::vector<std::pair<size_t, size_t>>* probes) {
  for (auto& l : leaves) l.zero_grad();
  {
    Graph g;
    GraphScope scope(g);
    const Tensor loss = loss_fn();
    g.backward(loss);
  }
  std::vector<std::vector<real>> ad;
  ad.reserve(leaves.size());
  for (const auto& l : leaves) {
    if (l.has_grad()) {
      ad.emplace_back(l.grad().begin(), l.grad().end());
    } else {
      ad.emplace_back(static_cast<size_t>(l.numel()), 0.0);
    }
  }

  real max_err = 0;
  auto probe = [&](size_t li, size_t i) {
    auto vals = leaves[li].mutable_data();
    const real orig = vals[i];
    vals[i] = orig + step;
    const real lp = loss_fn().item();
    vals[i] = orig - step;
    const real lm = loss_fn().item();
    vals[i] = orig;
    const real fd = (lp - lm) / (2 * step);
    max_err = std::max(max_err, rel_err(ad[li][i], fd));
  };
  if (probes != nullptr) {
    for (const auto& [li, i] : *probes) probe(li, i);
  } else {
    for (size_t li = 0; li < leaves.size(); ++li) {
      for (size_t i = 0; i < static_cast<size_t>(leaves[li].numel()); ++i) {
        probe(li, i);
      }
    }
  }
  return max_err;
}

Tensor wsum(const Tensor& t, const Tensor& w) { return sum_all(mul(t, w)); }

Tensor rand_const(Shape shape, Rng& rng) {
  return Tensor::randn(std::move(shape), rng);
}

Tensor rand_leaf(Shape shape, Rng& rng) {
  return Tensor::randn(std::move(shape), rng, 1.0, true);
}

int64_t dim(Rng& rng) { return 1 + rng.uniform_int(5); }

}  // namespace

real gradcheck_max_err(const std::function<Tensor()>& loss_fn,
                       std::span<Tensor> leaves, real step) {
  return max_err_impl(loss_fn, leaves, step, nullptr);
}

std::vector<GradCheckReport> gradcheck_ops(uint64_t seed, real tol) {
  std::vector<GradCheckReport> reports;
  Rng master = Rng::stream(seed, fnv1a64("gradcheck-ops"));

  auto run = [&](const std::string& name,
                 const std::function<real(Rng&)>& one_shape) {
    real worst = 0;
    for (int s = 0; s < 5; ++s) {
      Rng rng = master.stream(static_cast<uint64_t>(s));
      worst = std::max(worst, one_shape(rng));
    }
    reports.push_back({name, worst, worst < tol});
  };

  run("matmul", [](Rng& rng) {
    const int64_t m = dim(rng), k = dim(rng), n = dim(rng);
    Tensor a = rand_leaf({m, k}, rng), b = rand_leaf({k, n}, rng);
    Tensor w = rand_const({m, n}, rng);
    std::vector<Tensor> leaves{a, b};
    return gradcheck_max_err([&]() { return wsum(matmul(a, b), w); }, leaves);
  });

  run("add", [](Rng& rng) {
    const int64_t m = dim(rng), n = dim(rng);
    Tensor a = rand_leaf({m, n}, rng), b = rand_leaf({m, n}, rng);
    Tensor w = rand_const({m, n}, rng);
    std::vector<Tensor> leaves{a, b};
    return gradcheck_max_err([&]() { return wsum(add(a, b), w); }, leaves);
  });

  run("add_rowvec", [](Rng& rng) {
    const int64_t m = dim(rng), n = dim(rng);
    Tensor a = rand_leaf({m, n}, rng), b = rand_leaf({n}, rng);
    Tensor w = rand_const({m, n}, rng);
    std::vector<Tensor> leaves{a, b};
    return gradcheck_max_err([&]() { return wsum(add(a, b), w); }, leaves);
  });

  run("sub", [](Rng& rng) {
    const int64_t m = dim(rng), n = dim(rng);
    Tensor a = rand_leaf({m, n}, rng), b = rand_leaf({m, n}, rng);
    Tensor w = rand_const({m, n}, rng);
    std::vector<Tensor> leaves{a, b};
    return gradcheck_max_err([&]() { return wsum(sub(a, b), w); }, leaves);
  });

  run("mul", [](Rng& rng) {
    const int64_t m = dim(rng), n = dim(rng);
    Tensor a = rand_leaf({m, n}, rng), b = rand_leaf({m, n}, rng);
    Tensor w = rand_const({m, n}, rng);
    std::vector<Tensor> leaves{a, b};
    return gradcheck_max_err([&]() { return wsum(mul(a, b), w); }, leaves);
  });

  run("scale", [](Rng& rng) {
    const int64_t m = dim(rng), n = dim(rng);
    Tensor a = rand_leaf({m, n}, rng);
    const real c = rng.uniform(-2.0, 2.0);
    Tensor w = rand_const({m, n}, rng);
    std::vector<Tensor> leaves{a};
    return gradcheck_max_err([&]() { return wsum(scale(a, c), w); }, leaves);
  });

  run("softmax", [](Rng& rng) {
    const int64_t m = dim(rng), n = dim(rng);
    const int64_t axis = rng.uniform_int(2);
    Tensor a = rand_leaf({m, n}, rng);
    Tensor w = rand_const({m, n}, rng);
    std::vector<Tensor> leaves{a};
    return gradcheck_max_err([&]() { return wsum(softmax(a, axis), w); },
                             leaves);
  });

  run("log_softmax", [](Rng& rng) {
    const int64_t m = dim(rng), n = dim(rng);
    Tensor a = rand_leaf({m, n}, rng);
    Tensor w = rand_const({m, n}, rng);
    std::vector<Tensor> leaves{a};
    return gradcheck_max_err([&]() { return wsum(log_softmax(a), w); },
                             leaves);
  });

  run("layer_norm", [](Rng& rng) {
    const int64_t m = dim(rng), n = 2 + rng.uniform_int(4);
    Tensor x = rand_leaf({m, n}, rng);
    Tensor gamma = rand_leaf({n}, rng);
    Tensor beta = rand_leaf({n}, rng);
    Tensor w = rand_const({m, n}, rng);
    std::vector<Tensor> leaves{x, gamma, beta};
    return gradcheck_max_err(
        [&]() { return wsum(layer_norm(x, gamma, beta), w); }, leaves);
  });

  run("gelu", [](Rng& rng) {
    const int64_t m = dim(rng), n = dim(rng);
    Tensor a = rand_leaf({m, n}, rng);
    Tensor w = rand_const({m, n}, rng);
    std::vector<Tensor> leaves{a};
    return gradcheck_max_err([&]() { return wsum(gelu(a), w); }, leaves);
  });

  run("tanh", [](Rng& rng) {
    const int64_t m = dim(rng), n = dim(rng);
    Tensor a = rand_leaf({m, n}, rng);
    Tensor w = rand_const({m, n}, rng);
    std::vector<Tensor> leaves{a};
    return gradcheck_max_err([&]() { return wsum(tanh(a), w); }, leaves);
  });

  run("embedding_lookup", [](Rng& rng) {
    const int64_t v = 3 + rng.uniform_int(4), d = dim(rng);
    Tensor table = rand_leaf({v, d}, rng);
    std::vector<int64_t> ids{rng.uniform_int(v), rng.uniform_int(v)};
    ids.push_back(ids[0]);  // force a repeated row (scatter-add accumulation)
    Tensor w = rand_const({static_cast<int64_t>(ids.size()), d}, rng);
    std::vector<Tensor> leaves{table};
    return gradcheck_max_err(
        [&]() { return wsum(embedding_lookup(table, ids), w); }, leaves);
  });

  run("concat_rows", [](Rng& rng) {
    const int64_t m1 = dim(rng), m2 = dim(rng), n = dim(rng);
    Tensor a = rand_leaf({m1, n}, rng), b = rand_leaf({m2, n}, rng);
    Tensor w = rand_const({m1 + m2, n}, rng);
    std::vector<Tensor> leaves{a, b};
    return gradcheck_max_err([&]() { return wsum(concat_rows(a, b), w); },
                             leaves);
  });

  run("concat_cols", [](Rng& rng) {
    const int64_t m = dim(rng), n1 = dim(rng), n2 = dim(rng), n3 = dim(rng);
    Tensor a = rand_leaf({m, n1}, rng), b = rand_leaf({m, n2}, rng),
           c = rand_leaf({m, n3}, rng);
    Tensor w = rand_const({m, n1 + n2 + n3}, rng);
    std::vector<Tensor> leaves{a, b, c};
    return gradcheck_max_err(
        [&]() { return wsum(concat_cols({a, b, c}), w); }, leaves);
  });

  run("slice_rows", [](Rng& rng) {
    const int64_t m = 2 + rng.uniform_int(4), n = dim(rng);
    const int64_t begin = rng.uniform_int(m - 1);
    const int64_t end = begin + 1 + rng.uniform_int(m - begin - 1 + 1);
    Tensor a = rand_leaf({m, n}, rng);
    Tensor w = rand_const({end - begin, n}, rng);
    std::vector<Tensor> leaves{a};
    return gradcheck_max_err(
        [&]() { return wsum(slice_rows(a, begin, end), w); }, leaves);
  });

  run("slice_cols", [](Rng& rng) {
    const int64_t m = dim(rng), n = 2 + rng.uniform_int(4);
    const int64_t begin = rng.uniform_int(n - 1);
    const int64_t end = begin + 1 + rng.uniform_int(n - begin - 1 + 1);
    Tensor a = rand_leaf({m, n}, rng);
    Tensor w = rand_const({m, end - begin}, rng);
    std::vector<Tensor> leaves{a};
    return gradcheck_max_err(
        [&]() { return wsum(slice_cols(a, begin, end), w); }, leaves);
  });

  run("transpose", [](Rng& rng) {
    const int64_t m = dim(rng), n = dim(rng);
    Tensor a = rand_leaf({m, n}, rng);
    Tensor w = rand_const({n, m}, rng);
    std::vector<Tensor> leaves{a};
    return gradcheck_max_err([&]() { return wsum(transpose(a), w); }, leaves);
  });

  run("sum_all", [](Rng& rng) {
    Tensor a = rand_leaf({dim(rng), dim(rng)}, rng);
    std::vector<Tensor> leaves{a};
    return gradcheck_max_err([&]() { return sum_all(a); }, leaves);
  });

  run("mean_all", [](Rng& rng) {
    Tensor a = rand_leaf({dim(rng), dim(rng)}, rng);
    std::vector<Tensor> leaves{a};
    return gradcheck_max_err([&]() { return mean_all(a); }, leaves);
  });

  run("dropout", [](Rng& rng) {
    const int64_t m = dim(rng), n = dim(rng);
    Tensor a = rand_leaf({m, n}, rng);
    Tensor w = rand_const({m, n}, rng);
    const uint64_t mask_seed = rng.next_u64();
    std::vector<Tensor> leaves{a};
    return gradcheck_max_err(
        [&]() {
          Rng mask_rng(mask_seed);  // identical mask on every re-evaluation
          return wsum(dropout(a, 0.3, mask_rng), w);
        },
        leaves);
  });

  run("nll_loss", [](Rng& rng) {
    const int64_t m = dim(rng), v = 2 + rng.uniform_int(4);
    Tensor logits = rand_leaf({m, v}, rng);
    std::vector<int64_t> targets;
    for (int64_t i = 0; i < m; ++i) targets.push_back(rng.uniform_int(v));
    std::vector<Tensor> leaves{logits};
    return gradcheck_max_err(
        [&]() { return nll_loss(log_softmax(logits), targets); }, leaves);
  });

  run("soft_nll", [](Rng& rng) {
    const int64_t m = dim(rng), c = 2 + rng.uniform_int(4);
    Tensor logits = rand_leaf({m, c}, rng);
    std::vector<real> t(static_cast<size_t>(m * c));
    for (int64_t r = 0; r < m; ++r) {
      real sum = 0;
      for (int64_t j = 0; j < c; ++j) {
        t[static_cast<size_t>(r * c + j)] = rng.uniform(0.05, 1.0);
        sum += t[static_cast<size_t>(r * c + j)];
      }
      for (int64_t j = 0; j < c; ++j) t[static_cast<size_t>(r * c + j)] /= sum;
    }
    Tensor targets = Tensor::from_data({m, c}, std::move(t));
    std::vector<Tensor> leaves{logits};
    return gradcheck_max_err(
        [&]() { return soft_nll(log_softmax(logits), targets); }, leaves);
  });

  run("bce_with_logits", [](Rng& rng) {
    const int64_t m = dim(rng), n = dim(rng);
    Tensor z = rand_leaf({m, n}, rng);
    std::vector<real> t(static_cast<size_t>(m * n));
    for (auto& x : t) x = rng.uniform();
    Tensor targets = Tensor::from_data({m, n}, std::move(t));
    std::vector<Tensor> leaves{z};
    return gradcheck_max_err([&]() { return bce_with_logits(z, targets); },
                             leaves);
  });

  return reports;
}

namespace {

std::vector<Tensor> block_leaves(const BlockParams& p) {
  return {p.w_q,    p.w_k,    p.w_v,    p.w_o,      p.ffn_w1,  p.ffn_b1,
          p.ffn_w2, p.ffn_b2, p.ln1_gamma, p.ln1_beta, p.ln2_gamma,
          p.ln2_beta};
}

}  // namespace

std::vector<GradCheckReport> gradcheck_blocks(uint64_t seed, real tol) {
  std::vector<GradCheckReport> reports;
  Rng master = Rng::stream(seed, fnv1a64("gradcheck-blocks"));

  auto run = [&](const std::string& name,
                 const std::function<real(Rng&)>& one_shape) {
    real worst = 0;
    for (int s = 0; s < 5; ++s) {
      Rng rng = master.stream(static_cast<uint64_t>(s));
      worst = std::max(worst, one_shape(rng));
    }
    reports.push_back({name, worst, worst < tol});
  };

  run("multi_head_attention", [](Rng& rng) {
    const int64_t tq = 2 + rng.uniform_int(3), tk = 2 + rng.uniform_int(3);
    const AttentionConfig cfg{6, 2, 3, 8, 6};
    BlockParams p = init_block_params(cfg, rng);
    Tensor hq = rand_leaf({tq, 6}, rng), hkv = rand_leaf({tk, 6}, rng);
    KeyMask mask = all_visible(tk);
    if (tk > 1) mask[static_cast<size_t>(rng.uniform_int(tk))] = 0;
    Tensor w = rand_const({tq, 6}, rng);
    std::vector<Tensor> leaves = block_leaves(p);
    leaves.push_back(hq);
    leaves.push_back(hkv);
    return gradcheck_max_err(
        [&]() {
          return wsum(multi_head_attention(hq, hkv, cfg, p, mask), w);
        },
        leaves);
  });

  run("multi_head_attention_cross", [](Rng& rng) {
    const int64_t tq = 2 + rng.uniform_int(3), tk = 2 + rng.uniform_int(3);
    const AttentionConfig cfg{6, 2, 3, 8, 4};  // keys/values are 4-wide
    BlockParams p = init_block_params(cfg, rng);
    Tensor hq = rand_leaf({tq, 6}, rng), hkv = rand_leaf({tk, 4}, rng);
    const KeyMask mask = all_visible(tk);
    Tensor w = rand_const({tq, 6}, rng);
    std::vector<Tensor> leaves = block_leaves(p);
    leaves.push_back(hq);
    leaves.push_back(hkv);
    return gradcheck_max_err(
        [&]() {
          return wsum(multi_head_attention(hq, hkv, cfg, p, mask), w);
        },
        leaves);
  });

  run("transformer_block", [](Rng& rng) {
    const int64_t t = 2 + rng.uniform_int(3);
    const AttentionConfig cfg{6, 2, 3, 8, 6};
    BlockParams p = init_block_params(cfg, rng);
    Tensor h = rand_leaf({t, 6}, rng);
    const KeyMask mask = all_visible(t);
    Tensor w = rand_const({t, 6}, rng);
    std::vector<Tensor> leaves = block_leaves(p);
    leaves.push_back(h);
    return gradcheck_max_err(
        [&]() { return wsum(transformer_block(h, cfg, p, mask), w); }, leaves);
  });

  run("co_attention_block", [](Rng& rng) {
    const int64_t tv = 2 + rng.uniform_int(3), tw = 2 + rng.uniform_int(3);
    const AttentionConfig cfg_v{6, 2, 3, 8, 4};
    const AttentionConfig cfg_w{4, 2, 2, 6, 6};
    BlockParams pv = init_block_params(cfg_v, rng);
    BlockParams pw = init_block_params(cfg_w, rng);
    Tensor hv = rand_leaf({tv, 6}, rng), hw = rand_leaf({tw, 4}, rng);
    const KeyMask mask_v = all_visible(tv), mask_w = all_visible(tw);
    Tensor wv = rand_const({tv, 6}, rng), ww = rand_const({tw, 4}, rng);
    std::vector<Tensor> leaves = block_leaves(pv);
    for (auto& t2 : block_leaves(pw)) leaves.push_back(t2);
    leaves.push_back(hv);
    leaves.push_back(hw);
    return gradcheck_max_err(
        [&]() {
          auto [ov, ow] = co_attention_block(hv, hw, cfg_v, cfg_w, pv, pw,
                                             mask_v, mask_w, true);
          return add(wsum(ov, wv), wsum(ow, ww));
        },
        leaves);
  });

  return reports;
}

std::vector<GradCheckReport> gradcheck_model(uint64_t seed, real tol,
                                             int64_t probes) {
  Rng rng = Rng::stream(seed, fnv1a64("gradcheck-model"));

  ModelConfig cfg;
  cfg.text_vocab_size = 16;
  cfg.max_text_len = 8;
  cfg.text_dim = 8;
  cfg.text_heads = 2;
  cfg.text_pre_fusion_layers = 1;
  cfg.num_co_blocks = 1;
  cfg.visual_dim = 6;
  cfg.visual_heads = 2;
  cfg.visual_feature_dim = 5;
  cfg.num_region_classes = 3;
  cfg.pooled_dim = 6;

  ParamMap params;
  VilbertModel model(cfg, seed, params);
  PretrainHeads heads(cfg, seed, params);

  const TextInput text = TextInput::from_ids({tokens::kCls, 5, 6, 7, tokens::kSep});
  ImageInput image;
  image.feature_dim = cfg.visual_feature_dim;
  image.num_classes = cfg.num_region_classes;
  image.boxes = {{0.1, 0.1, 0.5, 0.6}, {0.4, 0.3, 0.9, 0.8}};
  for (int i = 0; i < 2 * 5; ++i) image.features.push_back(rng.normal());
  image.detector_dist = {0.6, 0.3, 0.1, 0.2, 0.5, 0.3};
  image.rebuild_spatial5();

  PretrainItem pos;
  pos.text = text;
  pos.text.token_ids[2] = tokens::kMask;
  pos.image = image;
  pos.plan.text.push_back({2, TextMaskAction::mask_token, 6});
  MaskingPlan::RegionEntry re;
  re.index = 0;
  re.zeroed = false;
  re.target_dist = {0.6, 0.3, 0.1};
  pos.plan.regions.push_back(re);
  pos.aligned = true;

  PretrainItem neg;
  neg.text = TextInput::from_ids({tokens::kCls, 9, 10, tokens::kSep});
  neg.image = image;
  neg.aligned = false;

  std::vector<PretrainItem> batch{pos, neg};

  std::vector<Tensor> leaves;
  for (const auto& [name, t] : params.items()) leaves.push_back(t);

  std::vector<std::pair<size_t, size_t>> probe_list;
  for (int64_t p = 0; p < probes; ++p) {
    const size_t li = static_cast<size_t>(
        rng.uniform_int(static_cast<int64_t>(leaves.size())));
    const size_t i =
        static_cast<size_t>(rng.uniform_int(leaves[li].numel()));
    probe_list.emplace_back(li, i);
  }

  const real err = max_err_impl(
      [&]() { return pretrain_loss(batch, model, heads, false).total; },
      leaves, 1e-5, &probe_list);
  return {{"model", err, err < tol}};
}

}  // namespace vilbert
