#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "prognet/losses.hpp"
#include "prognet/model.hpp"

using namespace prognet;

namespace {

ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.image_h = cfg.image_w = 8;
  cfg.image_channels = 1;
  cfg.cnn_channels = {8};
  cfg.cnn_blocks_per_stage = 1;
  cfg.token_width = 8;
  cfg.context_width = 8;
  cfg.depth_diagnosis = 1;
  cfg.depth_prognosis = 1;
  cfg.heads = 1;
  cfg.ffn_width = 16;
  cfg.horizons = 2;
  cfg.n_classes = 5;
  cfg.dropout = 0.0;
  return cfg;
}

Tensor random_images(int b, const ModelConfig& cfg, Rng& rng) {
  Tensor x(Shape{b, cfg.image_channels, cfg.image_h, cfg.image_w});
  for (auto& v : x.data()) v = static_cast<real_t>(rng.uniform(-1, 1));
  return x;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = micro_config();
  CHECK_NOTHROW(cfg.validate());
  SUBCASE("token width must match cnn plan") {
    cfg.token_width = 16;
    CHECK_THROWS(cfg.validate());
  }
  SUBCASE("head divisibility") {
    cfg.heads = 3;
    CHECK_THROWS(cfg.validate());
  }
  SUBCASE("image divisibility") {
    cfg.image_h = cfg.image_w = 9;
    CHECK_THROWS(cfg.validate());
  }
  SUBCASE("too many horizons for the sequence") {
    cfg.horizons = 64;  // 8x8 image, downsample 2 -> 17 tokens
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("enlarge the image"),
                         std::invalid_argument);
  }
  SUBCASE("negative depth") {
    cfg.depth_prognosis = -1;
    CHECK_THROWS(cfg.validate());
  }
}

TEST_CASE("superpixel extraction shapes") {
  ModelConfig cfg = micro_config();
  PrognosisModel model(cfg, 7);
  Rng rng(3);
  Tensor x = random_images(2, cfg, rng);
  ForwardOptions opt;
  Tensor tokens = model.extract_superpixels(x, opt);
  CHECK(tokens.shape() == Shape{2, 16, 8});  // 8/2=4 -> 16 tokens of width 8

  Tensor bad(Shape{2, 1, 7, 7});
  CHECK_THROWS(model.extract_superpixels(bad, opt));
}

TEST_CASE("zero-depth encoder is input plus embeddings") {
  ModelConfig cfg = micro_config();
  cfg.depth_diagnosis = 0;
  PrognosisModel model(cfg, 7);
  Rng rng(5);
  const int n = cfg.tokens(), d = cfg.token_width;
  Tensor seq(Shape{2, n, d});
  for (auto& v : seq.data()) v = static_cast<real_t>(rng.normal());
  ForwardOptions opt;
  Tensor out = model.encode(model.diag_encoder, seq, opt, nullptr);
  REQUIRE(out.shape() == Shape{2, n + 1, d});
  const auto& cls = model.diag_encoder.cls;
  const auto& pos = model.diag_encoder.pos;
  for (int b = 0; b < 2; ++b)
    for (int t = 0; t < n + 1; ++t)
      for (int j = 0; j < d; ++j) {
        const real_t input = t == 0 ? cls.at(j) : seq.at((b * n + t - 1) * d + j);
        CHECK(out.at((b * (n + 1) + t) * d + j) == input + pos.at(t * d + j));
      }
}

TEST_CASE("single layer matches a straightline reference on a 2-token example") {
  ModelConfig cfg = micro_config();
  cfg.depth_diagnosis = 1;
  PrognosisModel model(cfg, 21);
  const int d = cfg.token_width;
  Rng rng(9);
  Tensor seq(Shape{1, 1, d});  // one token; CLS makes it a 2-token sequence
  for (auto& v : seq.data()) v = static_cast<real_t>(rng.normal());

  // model under test: shrink the positional table to the 2-token case
  Encoder enc;
  enc.cls = model.diag_encoder.cls;
  enc.pos = Tensor::from_data({2, d}, std::vector<real_t>(
                                          model.diag_encoder.pos.data().begin(),
                                          model.diag_encoder.pos.data().begin() + 2 * d));
  enc.blocks = model.diag_encoder.blocks;
  ForwardOptions opt;
  Tensor out = model.encode(enc, seq, opt, nullptr);

  // independent reference: plain double loops over the displayed update rule
  const auto& blk = enc.blocks[0];
  const int t_len = 2;
  std::vector<double> h(static_cast<size_t>(t_len) * d);
  for (int t = 0; t < t_len; ++t)
    for (int j = 0; j < d; ++j)
      h[static_cast<size_t>(t * d + j)] =
          (t == 0 ? enc.cls.at(j) : seq.at(j)) + enc.pos.at(t * d + j);

  auto ln = [&](const std::vector<double>& x, const NormLayer& nl) {
    std::vector<double> y(x.size());
    for (int t = 0; t < t_len; ++t) {
      double mu = 0, var = 0;
      for (int j = 0; j < d; ++j) mu += x[static_cast<size_t>(t * d + j)];
      mu /= d;
      for (int j = 0; j < d; ++j) {
        const double dd = x[static_cast<size_t>(t * d + j)] - mu;
        var += dd * dd;
      }
      var /= d;
      for (int j = 0; j < d; ++j)
        y[static_cast<size_t>(t * d + j)] = (x[static_cast<size_t>(t * d + j)] - mu) /
                                                std::sqrt(var + 1e-5) * nl.gain.at(j) +
                                            nl.bias.at(j);
    }
    return y;
  };
  auto linear = [&](const std::vector<double>& x, const LinearLayer& l, int in, int out_w) {
    std::vector<double> y(static_cast<size_t>(t_len) * out_w);
    for (int t = 0; t < t_len; ++t)
      for (int o = 0; o < out_w; ++o) {
        double acc = l.b.at(o);
        for (int j = 0; j < in; ++j)
          acc += x[static_cast<size_t>(t * in + j)] * static_cast<double>(l.w.at(j * out_w + o));
        y[static_cast<size_t>(t * out_w + o)] = acc;
      }
    return y;
  };

  auto a = ln(h, blk.ln1);
  auto q = linear(a, blk.wq, d, d), k = linear(a, blk.wk, d, d), v = linear(a, blk.wv, d, d);
  std::vector<double> attn_out(static_cast<size_t>(t_len) * d);
  for (int t = 0; t < t_len; ++t) {
    double scores[2];
    for (int u = 0; u < t_len; ++u) {
      double s = 0;
      for (int j = 0; j < d; ++j)
        s += q[static_cast<size_t>(t * d + j)] * k[static_cast<size_t>(u * d + j)];
      scores[u] = s / std::sqrt(static_cast<double>(d));
    }
    const double m = std::max(scores[0], scores[1]);
    const double e0 = std::exp(scores[0] - m), e1 = std::exp(scores[1] - m);
    const double w0 = e0 / (e0 + e1), w1 = e1 / (e0 + e1);
    for (int j = 0; j < d; ++j)
      attn_out[static_cast<size_t>(t * d + j)] =
          w0 * v[static_cast<size_t>(j)] + w1 * v[static_cast<size_t>(d + j)];
  }
  auto msa = linear(attn_out, blk.wo, d, d);
  std::vector<double> z(h.size());
  for (size_t i = 0; i < h.size(); ++i) z[i] = h[i] + msa[i];
  auto m2 = ln(z, blk.ln2);
  auto f1 = linear(m2, blk.fc1, d, cfg.ffn_width);
  for (auto& x : f1) x = x * 0.5 * std::erfc(-x / std::sqrt(2.0));
  auto f2 = linear(f1, blk.fc2, cfg.ffn_width, d);
  for (size_t i = 0; i < z.size(); ++i) z[i] += f2[i];

  for (size_t i = 0; i < z.size(); ++i)
    CHECK(std::abs(static_cast<double>(out.at(static_cast<int64_t>(i))) - z[i]) < 1e-10);
}

TEST_CASE("permutation equivariance with zero positional embeddings") {
  ModelConfig cfg = micro_config();
  cfg.depth_diagnosis = 1;
  PrognosisModel model(cfg, 33);
  for (auto& v : model.diag_encoder.pos.data()) v = 0;
  const int n = cfg.tokens(), d = cfg.token_width;
  Rng rng(13);
  Tensor seq(Shape{1, n, d});
  for (auto& v : seq.data()) v = static_cast<real_t>(rng.normal());

  std::vector<int> perm(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = (i * 5 + 3) % n;
  Tensor permuted(Shape{1, n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      permuted.at(i * d + j) = seq.at(perm[static_cast<size_t>(i)] * d + j);

  ForwardOptions opt;
  Tensor out_a = model.encode(model.diag_encoder, seq, opt, nullptr);
  Tensor out_b = model.encode(model.diag_encoder, permuted, opt, nullptr);

  // CLS output identical, non-CLS outputs permute with the inputs
  for (int j = 0; j < d; ++j)
    CHECK(static_cast<double>(out_a.at(j)) ==
          doctest::Approx(static_cast<double>(out_b.at(j))).epsilon(1e-12));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      CHECK(static_cast<double>(out_b.at((1 + i) * d + j)) ==
            doctest::Approx(static_cast<double>(out_a.at((1 + perm[static_cast<size_t>(i)]) * d + j)))
                .epsilon(1e-9));
}

TEST_CASE("fresh diagnosis head gives uniform softmax") {
  ModelConfig cfg = micro_config();
  PrognosisModel model(cfg, 1);
  Rng rng(2);
  Tensor x = random_images(2, cfg, rng);
  ForwardOptions opt;
  PrognosisOutput out = model.forward(x, nullptr, opt);
  // output head weights start at zero, so logits are zero and softmax uniform
  for (int64_t i = 0; i < out.diag_logits.numel(); ++i) CHECK(out.diag_logits.at(i) == 0.0);
  Tensor probs = softmax(out.diag_logits, -1);
  for (int64_t i = 0; i < probs.numel(); ++i)
    CHECK(static_cast<double>(probs.at(i)) == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("diagnosis gradient reaches non-CLS tokens only through attention") {
  ModelConfig cfg = micro_config();
  Rng rng(4);
  for (int depth : {0, 1}) {
    cfg.depth_diagnosis = depth;
    PrognosisModel model(cfg, 11);
    // nonzero head so the loss depends on the CLS state
    for (auto& v : model.diag_head.w.data()) v = static_cast<real_t>(rng.normal() * 0.1);
    const int n = cfg.tokens(), d = cfg.token_width;
    Tensor seq(Shape{1, n, d}, 0, true);
    for (auto& v : seq.data()) v = static_cast<real_t>(rng.normal());
    Tape tape;
    TapeScope scope(tape);
    ForwardOptions opt;
    Tensor states = model.encode(model.diag_encoder, seq, opt, nullptr);
    Tensor loss = mean(model.diagnose(states));
    std::vector<Tensor> leaves{seq};
    tape.backward(loss, std::span<const Tensor>(leaves.data(), leaves.size()));
    double norm = 0;
    for (auto g : seq.grad()) norm += std::abs(static_cast<double>(g));
    if (depth == 0)
      CHECK(norm == 0.0);  // no mixing: CLS readout never touches the tokens
    else
      CHECK(norm > 1e-8);
  }
}

TEST_CASE("context fusion") {
  ModelConfig cfg = micro_config();
  PrognosisModel model(cfg, 17);
  Rng rng(6);
  const int n1 = cfg.tokens() + 1, c = cfg.token_width, c0 = cfg.context_width;
  Tensor states(Shape{2, n1, c});
  for (auto& v : states.data()) v = static_cast<real_t>(rng.normal());
  Tensor probs = Tensor::from_data({2, 5}, {0.2, 0.2, 0.2, 0.2, 0.2, 0.7, 0.1, 0.1, 0.05, 0.05});

  Tensor fused = model.fuse_context(probs, nullptr, states);
  CHECK(fused.shape() == Shape{2, n1, c + c0});

  // identical context token replicated at every position
  for (int b = 0; b < 2; ++b)
    for (int t = 1; t < n1; ++t)
      for (int j = 0; j < c0; ++j)
        CHECK(fused.at((b * n1 + t) * (c + c0) + c + j) ==
              fused.at((b * n1 + 0) * (c + c0) + c + j));

  // context depends on diag_probs only: perturbing the states leaves it unchanged
  Tensor states2 = states;
  Tensor bumped(Shape{2, n1, c});
  for (int64_t i = 0; i < states.numel(); ++i) bumped.at(i) = states.at(i) + real_t(0.25);
  Tensor fused2 = model.fuse_context(probs, nullptr, bumped);
  for (int b = 0; b < 2; ++b)
    for (int j = 0; j < c0; ++j)
      CHECK(fused2.at((b * n1) * (c + c0) + c + j) == fused.at((b * n1) * (c + c0) + c + j));

  CHECK_THROWS(model.fuse_context(probs, &states, states));  // clinical with use_clinical=false
}

TEST_CASE("horizon heads have disjoint parameters") {
  ModelConfig cfg = micro_config();
  PrognosisModel model(cfg, 19);
  Rng rng(8);
  Tensor x = random_images(2, cfg, rng);
  ForwardOptions opt;
  PrognosisOutput base = model.forward(x, nullptr, opt);

  // large shift of head 1's output bias must leave horizon 0 logits untouched
  for (auto& v : model.heads[1].fc2.b.data()) v += real_t(3.5);
  PrognosisOutput mod = model.forward(x, nullptr, opt);
  const int w = cfg.horizon_logit_width();
  for (int b = 0; b < 2; ++b)
    for (int j = 0; j < w; ++j) {
      CHECK(mod.horizon_logits.at((b * cfg.horizons + 0) * w + j) ==
            base.horizon_logits.at((b * cfg.horizons + 0) * w + j));
      CHECK(mod.horizon_logits.at((b * cfg.horizons + 1) * w + j) !=
            base.horizon_logits.at((b * cfg.horizons + 1) * w + j));
    }
}

TEST_CASE("forward shape contract over random configs") {
  Rng rng(99);
  for (int trial = 0; trial < 6; ++trial) {
    ModelConfig cfg;
    cfg.image_h = cfg.image_w = 8 * (1 + static_cast<int>(rng.uniform_int(2)));
    cfg.image_channels = 1;
    const int c = 4 * (1 + static_cast<int>(rng.uniform_int(3)));
    cfg.cnn_channels = {c};
    cfg.token_width = c;
    cfg.context_width = 4;
    cfg.heads = (c + 4) % 8 == 0 ? 2 : 1;
    if (c % cfg.heads) cfg.heads = 1;
    cfg.depth_diagnosis = static_cast<int>(rng.uniform_int(3));
    cfg.depth_prognosis = static_cast<int>(rng.uniform_int(3));
    cfg.ffn_width = 8;
    cfg.horizons = 1 + static_cast<int>(rng.uniform_int(4));
    cfg.n_classes = 3 + static_cast<int>(rng.uniform_int(7));
    cfg.dropout = 0;
    cfg.validate();
    PrognosisModel model(cfg, 1234 + static_cast<uint64_t>(trial));
    Tensor x = random_images(2, cfg, rng);
    ForwardOptions opt;
    PrognosisOutput out = model.forward(x, nullptr, opt);
    CHECK(out.diag_logits.shape() == Shape{2, cfg.n_classes});
    CHECK(out.horizon_logits.shape() == Shape{2, cfg.horizons, cfg.n_classes + 2});
  }
}

TEST_CASE("clinical data never leaks into the diagnosis branch") {
  ModelConfig cfg = micro_config();
  cfg.use_clinical = true;
  cfg.clinical_dim = 3;
  PrognosisModel model(cfg, 23);
  Rng rng(12);
  Tensor x = random_images(2, cfg, rng);
  Tensor clin_a = Tensor::from_data({2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  Tensor clin_b = Tensor::from_data({2, 3}, {-5.0, 2.0, 7.0, 0.0, -1.0, 3.0});
  ForwardOptions opt;
  PrognosisOutput a = model.forward(x, &clin_a, opt);
  PrognosisOutput b = model.forward(x, &clin_b, opt);
  for (int64_t i = 0; i < a.diag_logits.numel(); ++i)
    CHECK(a.diag_logits.at(i) == b.diag_logits.at(i));
  // but the horizon branch does consume it
  double diff = 0;
  for (int64_t i = 0; i < a.horizon_logits.numel(); ++i)
    diff += std::abs(static_cast<double>(a.horizon_logits.at(i) - b.horizon_logits.at(i)));
  CHECK(diff > 1e-9);

  CHECK_THROWS(model.forward(x, nullptr, opt));  // use_clinical without data
}

TEST_CASE("eval forward is deterministic") {
  ModelConfig cfg = micro_config();
  cfg.dropout = 0.3;  // must be ignored outside training
  PrognosisModel model(cfg, 29);
  Rng rng(14);
  Tensor x = random_images(3, cfg, rng);
  ForwardOptions opt;
  PrognosisOutput a = model.forward(x, nullptr, opt);
  PrognosisOutput b = model.forward(x, nullptr, opt);
  for (int64_t i = 0; i < a.horizon_logits.numel(); ++i)
    CHECK(a.horizon_logits.at(i) == b.horizon_logits.at(i));
}

TEST_CASE("attention recording and export") {
  ModelConfig cfg = micro_config();
  cfg.depth_prognosis = 2;
  PrognosisModel model(cfg, 31);
  Rng rng(15);
  Tensor x = random_images(2, cfg, rng);
  ForwardOptions opt;
  opt.record_attention = true;
  PrognosisOutput out = model.forward(x, nullptr, opt);
  const auto maps = export_attention(out);
  REQUIRE(maps.size() == 2);  // one per prognosis layer
  const int t = cfg.tokens() + 1;
  for (const auto& m : maps) {
    REQUIRE(m.shape() == Shape{2, cfg.heads, t, t});
    for (int64_t row = 0; row < m.numel() / t; ++row) {
      double s = 0;
      for (int j = 0; j < t; ++j) s += static_cast<double>(m.at(row * t + j));
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }

  ForwardOptions plain;
  PrognosisOutput no_rec = model.forward(x, nullptr, plain);
  CHECK_THROWS(export_attention(no_rec));
}

TEST_CASE("full micro-model gradient check") {
  ModelConfig cfg = micro_config();
  PrognosisModel model(cfg, 41);
  Rng rng(16);
  Tensor x = random_images(2, cfg, rng);
  LabelMask labels;
  labels.batch = 2;
  labels.horizons = cfg.horizons;
  labels.baseline = {1, 4};
  labels.stages = {2, 3, kMissingLabel, 0};
  labels.progression = {1, kMissingLabel, 0, 1};

  auto f = [&] {
    ForwardOptions opt;
    PrognosisOutput out = model.forward(x, nullptr, opt);
    return total_loss(out, labels, LossWeights{1, 1, 1}, cfg.n_classes).value;
  };
  CHECK(prognet::testing::gradcheck(model.parameter_tensors(), f) < 1e-4);
}
