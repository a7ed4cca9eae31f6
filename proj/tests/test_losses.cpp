#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "prognet/losses.hpp"
#include "prognet/model.hpp"

using namespace prognet;

namespace {

Tensor random_logits(Shape shape, Rng& rng, bool requires_grad = false) {
  Tensor t(shape, 0, requires_grad);
  for (auto& v : t.data()) v = static_cast<real_t>(rng.normal() * 2.0);
  return t;
}

// straightline softmax cross entropy, independent of the ops path
double plain_ce(const Tensor& logits, int64_t row, int64_t n_cls, int target) {
  double m = -1e300, z = 0;
  for (int64_t j = 0; j < n_cls; ++j) m = std::max(m, static_cast<double>(logits.at(row * n_cls + j)));
  for (int64_t j = 0; j < n_cls; ++j) z += std::exp(static_cast<double>(logits.at(row * n_cls + j)) - m);
  return std::log(z) + m - static_cast<double>(logits.at(row * n_cls + target));
}

PrognosisOutput fake_output(int batch, int k, int n_cls, Rng& rng, bool requires_grad = false) {
  PrognosisOutput out;
  out.diag_logits = random_logits({batch, n_cls}, rng, requires_grad);
  out.horizon_logits = random_logits({batch, k, n_cls + 2}, rng, requires_grad);
  return out;
}

LabelMask random_mask(int batch, int k, int n_cls, double missing_frac, Rng& rng) {
  LabelMask m;
  m.batch = batch;
  m.horizons = k;
  auto draw = [&](int n_vals) {
    return rng.bernoulli(missing_frac) ? kMissingLabel : static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_vals)));
  };
  for (int b = 0; b < batch; ++b) m.baseline.push_back(draw(n_cls));
  for (int b = 0; b < batch; ++b)
    for (int kk = 0; kk < k; ++kk) m.stages.push_back(draw(n_cls));
  for (int b = 0; b < batch; ++b)
    for (int kk = 0; kk < k; ++kk) m.progression.push_back(draw(2));
  return m;
}

}  // namespace

TEST_CASE("masked_ce basics") {
  Rng rng(1);

  SUBCASE("near-one-hot logits at the labels give near-zero loss") {
    Tensor logits = Tensor::zeros({3, 4});
    std::vector<int> labels{1, 0, 3};
    for (int r = 0; r < 3; ++r) logits.at(r * 4 + labels[static_cast<size_t>(r)]) = 40.0;
    auto l = masked_ce(logits, labels);
    CHECK(l.count == 3);
    CHECK(static_cast<double>(l.value.value()) < 1e-12);
  }

  SUBCASE("one missing of two: normalizer is one") {
    Tensor logits = random_logits({2, 5}, rng);
    auto l = masked_ce(logits, {kMissingLabel, 2});
    CHECK(l.count == 1);
    CHECK(std::abs(static_cast<double>(l.value.value()) - plain_ce(logits, 1, 5, 2)) < 1e-15);
  }

  SUBCASE("perturbing a missing row is invisible, bit for bit") {
    Tensor logits = random_logits({4, 5}, rng);
    std::vector<int> labels{0, kMissingLabel, 3, kMissingLabel};
    const double before = static_cast<double>(masked_ce(logits, labels).value.value());
    logits.at(1 * 5 + 2) += 123.0;
    logits.at(3 * 5 + 0) -= 55.0;
    const double after = static_cast<double>(masked_ce(logits, labels).value.value());
    CHECK(before == after);
  }

  SUBCASE("empty mask is a defined zero with a marker") {
    Tensor logits = random_logits({2, 5}, rng);
    auto l = masked_ce(logits, {kMissingLabel, kMissingLabel});
    CHECK(l.count == 0);
    CHECK(l.value.value() == 0.0);
  }

  SUBCASE("full observation reduces to the plain mean") {
    Tensor logits = random_logits({6, 5}, rng);
    std::vector<int> labels{0, 1, 2, 3, 4, 2};
    auto l = masked_ce(logits, labels);
    double ref = 0;
    for (int r = 0; r < 6; ++r) ref += plain_ce(logits, r, 5, labels[static_cast<size_t>(r)]);
    ref /= 6;
    CHECK(std::abs(static_cast<double>(l.value.value()) - ref) < 1e-12);
  }

  SUBCASE("duplicating every labeled sample leaves the mean unchanged") {
    Tensor logits = random_logits({3, 4}, rng);
    std::vector<int> labels{2, kMissingLabel, 1};
    Tensor doubled = Tensor::zeros({6, 4});
    for (int r = 0; r < 3; ++r)
      for (int j = 0; j < 4; ++j) {
        doubled.at(r * 4 + j) = logits.at(r * 4 + j);
        doubled.at((r + 3) * 4 + j) = logits.at(r * 4 + j);
      }
    std::vector<int> labels2{2, kMissingLabel, 1, 2, kMissingLabel, 1};
    const double a = static_cast<double>(masked_ce(logits, labels).value.value());
    const double b = static_cast<double>(masked_ce(doubled, labels2).value.value());
    CHECK(std::abs(a - b) < 1e-12);
  }
}

TEST_CASE("total_loss expansion and weighting") {
  Rng rng(7);
  const int n_cls = 5;

  SUBCASE("K=1, all present, unit weights: plain sum of the three terms") {
    PrognosisOutput out = fake_output(3, 1, n_cls, rng);
    LabelMask m = random_mask(3, 1, n_cls, 0.0, rng);
    TotalLoss t = total_loss(out, m, LossWeights{1, 1, 1}, n_cls);
    const double expect = static_cast<double>(t.diag.value.value()) +
                          static_cast<double>(t.prognosis[0].value.value()) +
                          static_cast<double>(t.progression[0].value.value());
    CHECK(std::abs(static_cast<double>(t.value.value()) - expect) < 1e-14);
  }

  SUBCASE("value matches a straightline reference of the weighted formula") {
    const int batch = 8, k_count = 3;
    for (int trial = 0; trial < 10; ++trial) {
      PrognosisOutput out = fake_output(batch, k_count, n_cls, rng);
      LabelMask m = random_mask(batch, k_count, n_cls, 0.3, rng);
      const LossWeights w{0.7, 1.3, 0.4};
      TotalLoss t = total_loss(out, m, w, n_cls);

      auto masked_mean_ref = [&](auto get_logit, const std::vector<int>& labels, int n) {
        double acc = 0;
        long cnt = 0;
        for (size_t i = 0; i < labels.size(); ++i) {
          if (labels[i] < 0) continue;
          double mx = -1e300, z = 0;
          for (int j = 0; j < n; ++j) mx = std::max(mx, get_logit(i, j));
          for (int j = 0; j < n; ++j) z += std::exp(get_logit(i, j) - mx);
          acc += std::log(z) + mx - get_logit(i, labels[i]);
          ++cnt;
        }
        return cnt ? acc / static_cast<double>(cnt) : 0.0;
      };
      double ref = w.w1 * masked_mean_ref(
                              [&](size_t i, int j) {
                                return static_cast<double>(out.diag_logits.at(
                                    static_cast<int64_t>(i) * n_cls + j));
                              },
                              m.baseline, n_cls);
      for (int kk = 0; kk < k_count; ++kk) {
        std::vector<int> st, pr;
        for (int b = 0; b < batch; ++b) {
          st.push_back(m.stage_at(b, kk));
          pr.push_back(m.progression_at(b, kk));
        }
        ref += w.w2 / k_count *
               masked_mean_ref(
                   [&](size_t i, int j) {
                     return static_cast<double>(out.horizon_logits.at(
                         (static_cast<int64_t>(i) * k_count + kk) * (n_cls + 2) + j));
                   },
                   st, n_cls);
        ref += w.w3 / k_count *
               masked_mean_ref(
                   [&](size_t i, int j) {
                     return static_cast<double>(out.horizon_logits.at(
                         (static_cast<int64_t>(i) * k_count + kk) * (n_cls + 2) + n_cls + j));
                   },
                   pr, 2);
      }
      CHECK(std::abs(static_cast<double>(t.value.value()) - ref) < 1e-12);
    }
  }

  SUBCASE("linear in the weights") {
    PrognosisOutput out = fake_output(4, 2, n_cls, rng);
    LabelMask m = random_mask(4, 2, n_cls, 0.2, rng);
    const double a = static_cast<double>(total_loss(out, m, {1, 0, 0}, n_cls).value.value());
    const double b = static_cast<double>(total_loss(out, m, {0, 1, 0}, n_cls).value.value());
    const double c = static_cast<double>(total_loss(out, m, {0, 0, 1}, n_cls).value.value());
    const double combo =
        static_cast<double>(total_loss(out, m, {0.3, 1.7, 0.9}, n_cls).value.value());
    CHECK(std::abs(combo - (0.3 * a + 1.7 * b + 0.9 * c)) < 1e-12);
  }

  SUBCASE("diag-only weights give exactly zero horizon gradients") {
    PrognosisOutput out = fake_output(4, 2, n_cls, rng);
    out.diag_logits.set_requires_grad(true);
    out.horizon_logits.set_requires_grad(true);
    LabelMask m = random_mask(4, 2, n_cls, 0.0, rng);
    Tape tape;
    TapeScope scope(tape);
    TotalLoss t = total_loss(out, m, LossWeights{1, 0, 0}, n_cls);
    std::vector<Tensor> leaves{out.diag_logits, out.horizon_logits};
    tape.backward(t.value, std::span<const Tensor>(leaves.data(), leaves.size()));
    for (auto g : out.horizon_logits.grad()) CHECK(g == 0.0);
    double sum = 0;
    for (auto g : out.diag_logits.grad()) sum += std::abs(static_cast<double>(g));
    CHECK(sum > 0);
  }

  SUBCASE("horizon mismatch is rejected") {
    PrognosisOutput out = fake_output(4, 2, n_cls, rng);
    LabelMask m = random_mask(4, 3, n_cls, 0.0, rng);
    CHECK_THROWS(total_loss(out, m, LossWeights{}, n_cls));
  }
}

TEST_CASE("mask invariance of the full objective") {
  Rng rng(23);
  const int n_cls = 5, batch = 6, k_count = 3;
  for (int trial = 0; trial < 20; ++trial) {
    PrognosisOutput out = fake_output(batch, k_count, n_cls, rng, /*requires_grad=*/true);
    LabelMask m = random_mask(batch, k_count, n_cls, 0.4, rng);

    auto run = [&] {
      Tape tape;
      TapeScope scope(tape);
      TotalLoss t = total_loss(out, m, LossWeights{1, 1, 1}, n_cls);
      std::vector<Tensor> leaves{out.diag_logits, out.horizon_logits};
      tape.backward(t.value, std::span<const Tensor>(leaves.data(), leaves.size()));
      std::pair<double, std::vector<real_t>> r{static_cast<double>(t.value.value()),
                                               out.diag_logits.grad()};
      auto hg = out.horizon_logits.grad();
      r.second.insert(r.second.end(), hg.begin(), hg.end());
      return r;
    };
    auto before = run();

    // hammer every logit whose label is missing
    for (int b = 0; b < batch; ++b) {
      if (m.baseline[static_cast<size_t>(b)] < 0)
        for (int j = 0; j < n_cls; ++j) out.diag_logits.at(b * n_cls + j) += real_t(17.5);
      for (int kk = 0; kk < k_count; ++kk) {
        if (m.stage_at(b, kk) < 0)
          for (int j = 0; j < n_cls; ++j)
            out.horizon_logits.at((b * k_count + kk) * (n_cls + 2) + j) -= real_t(9.25);
        if (m.progression_at(b, kk) < 0)
          for (int j = 0; j < 2; ++j)
            out.horizon_logits.at((b * k_count + kk) * (n_cls + 2) + n_cls + j) += real_t(31.0);
      }
    }
    auto after = run();
    CHECK(before.first == after.first);
    REQUIRE(before.second.size() == after.second.size());
    bool identical = true;
    for (size_t i = 0; i < before.second.size(); ++i)
      identical = identical && before.second[i] == after.second[i];
    CHECK(identical);
  }
}

TEST_CASE("uncertainty-weighted task combination") {
  SUBCASE("all sigma at one reduces to the plain CE sum") {
    std::vector<Tensor> ces{Tensor::scalar(0.7), Tensor::scalar(1.3), Tensor::scalar(0.2)};
    MtlParams p = MtlParams::make(3);
    Tensor l = mtl_loss(ces, p);
    CHECK(static_cast<double>(l.value()) == 0.7 + 1.3 + 0.2);
  }

  SUBCASE("single task, phi=0.5, sigma=0.5") {
    // CE = ln 2, 1/sigma^2 = 4, log sigma = -ln 2 -> 3 ln 2
    std::vector<Tensor> ces{Tensor::scalar(static_cast<real_t>(std::log(2.0)))};
    MtlParams p = MtlParams::make(1);
    p.log_sigma[0].at(0) = static_cast<real_t>(std::log(0.5));
    Tensor l = mtl_loss(ces, p);
    CHECK(static_cast<double>(l.value()) == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-12));
  }

  SUBCASE("perfect task with sigma below one goes negative") {
    std::vector<Tensor> ces{Tensor::scalar(0.0)};  // phi = 1
    MtlParams p = MtlParams::make(1);
    p.log_sigma[0].at(0) = static_cast<real_t>(std::log(0.5));
    Tensor l = mtl_loss(ces, p);
    CHECK(static_cast<double>(l.value()) == doctest::Approx(std::log(0.5)).epsilon(1e-12));
    CHECK(l.value() < 0.0);
  }

  SUBCASE("log sigma gradient vanishes at sigma^2 = 2 CE") {
    // d/ds [ce e^{-2s} + s] = 0  <=>  e^{2s} = 2 ce
    const double ce = 0.8;
    MtlParams p = MtlParams::make(1);
    p.log_sigma[0].at(0) = static_cast<real_t>(0.5 * std::log(2.0 * ce));
    Tape tape;
    TapeScope scope(tape);
    std::vector<Tensor> ces{Tensor::scalar(static_cast<real_t>(ce))};
    Tensor l = mtl_loss(ces, p);
    tape.backward(l);
    CHECK(std::abs(static_cast<double>(p.log_sigma[0].grad()[0])) < 1e-12);
  }

  SUBCASE("gradcheck through the sigma parameters") {
    Rng rng(3);
    MtlParams p = MtlParams::make(2);
    p.log_sigma[0].at(0) = real_t(0.3);
    p.log_sigma[1].at(0) = real_t(-0.4);
    std::vector<Tensor> ces{Tensor::scalar(0.9), Tensor::scalar(0.1)};
    auto f = [&] { return mtl_loss(ces, p); };
    CHECK(prognet::testing::gradcheck(p.tensors(), f) < 1e-4);
  }
}
