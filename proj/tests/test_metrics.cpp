#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "prognet/metrics.hpp"
#include "prognet/rng.hpp"

using namespace prognet;

namespace {

// O(n^2) pairwise Mann-Whitney oracle
double auc_pairwise(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0;
  long pairs = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 1) continue;
    for (size_t j = 0; j < labels.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

// O(n^2) threshold-enumeration AP oracle: recompute precision/recall from
// scratch at every distinct descending score
double ap_bruteforce(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<double> thresholds = scores;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  long n_pos = 0;
  for (int y : labels) n_pos += y == 1;
  double ap = 0, prev_recall = 0;
  for (double t : thresholds) {
    long tp = 0, fp = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      if (scores[i] >= t) {
        if (labels[i] == 1)
          ++tp;
        else
          ++fp;
      }
    }
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

}  // namespace

TEST_CASE("balanced accuracy") {
  CHECK(balanced_accuracy(std::vector<int>{0, 1, 2}, std::vector<int>{0, 1, 2}) == 1.0);
  CHECK(balanced_accuracy(std::vector<int>{0, 1, 1}, std::vector<int>{0, 0, 1}) == 0.75);
  // constant predictor on balanced classes
  CHECK(balanced_accuracy(std::vector<int>{1, 1, 1, 1}, std::vector<int>{0, 1, 2, 3}) == 0.25);
  // missing labels are invisible
  CHECK(balanced_accuracy(std::vector<int>{0, 1, 1, 9}, std::vector<int>{0, 0, 1, -1}) == 0.75);
  CHECK_THROWS(balanced_accuracy(std::vector<int>{1}, std::vector<int>{-1}));

  SUBCASE("invariant to whole-class duplication") {
    Rng rng(5);
    std::vector<int> preds, labels;
    for (int i = 0; i < 30; ++i) {
      labels.push_back(static_cast<int>(rng.uniform_int(3)));
      preds.push_back(static_cast<int>(rng.uniform_int(3)));
    }
    const double base = balanced_accuracy(preds, labels);
    std::vector<int> preds2 = preds, labels2 = labels;
    for (size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == 1) {  // triple class 1
        for (int rep = 0; rep < 2; ++rep) {
          labels2.push_back(labels[i]);
          preds2.push_back(preds[i]);
        }
      }
    CHECK(balanced_accuracy(preds2, labels2) == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("ordinal mse") {
  SUBCASE("one-hot correct distribution scores zero") {
    const std::vector<double> d{0, 0, 1, 0, 0};
    CHECK(mse_ordinal(d, 5, std::vector<int>{2}) == 0.0);
  }
  SUBCASE("uniform over five classes has expectation two") {
    const std::vector<double> d{0.2, 0.2, 0.2, 0.2, 0.2};
    CHECK(mse_ordinal(d, 5, std::vector<int>{2}) == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("split mass example") {
    const std::vector<double> d{0.5, 0.5, 0, 0, 0};
    CHECK(mse_ordinal(d, 5, std::vector<int>{3}) == doctest::Approx(6.25).epsilon(1e-12));
  }
  SUBCASE("argmax variant") {
    const std::vector<double> d{0.4, 0.6, 0, 0, 0};
    CHECK(mse_ordinal(d, 5, std::vector<int>{3}, MseMode::ArgmaxIndex) == 4.0);
  }
  SUBCASE("missing labels are skipped") {
    const std::vector<double> d{1, 0, 0, 0, 0, 0, 0, 0, 0, 1};
    CHECK(mse_ordinal(d, 5, std::vector<int>{0, -1}) == 0.0);
  }
}

TEST_CASE("binary f1") {
  CHECK(f1_binary(std::vector<int>{1, 1, 0}, std::vector<int>{1, 0, 1}) == 0.5);
  CHECK(f1_binary(std::vector<int>{1, 0, 1}, std::vector<int>{1, 0, 1}) == 1.0);
  CHECK(f1_binary(std::vector<int>{0, 0, 0}, std::vector<int>{1, 1, 0}) == 0.0);
  CHECK(f1_binary(std::vector<int>{0, 0}, std::vector<int>{0, 0}) == 0.0);  // P+R = 0
}

TEST_CASE("roc auc") {
  CHECK(roc_auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}) ==
        doctest::Approx(0.75).epsilon(1e-12));
  CHECK(roc_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}) == 1.0);
  CHECK(roc_auc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<int>{0, 1, 0, 1}) == 0.5);
  CHECK_THROWS(roc_auc(std::vector<double>{0.5, 0.6}, std::vector<int>{1, 1}));

  SUBCASE("score negation flips the statistic on tie-free data") {
    Rng rng(3);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) {
      scores.push_back(rng.uniform01());
      labels.push_back(static_cast<int>(rng.uniform_int(2)));
    }
    labels[0] = 0;
    labels[1] = 1;
    std::vector<double> neg = scores;
    for (auto& s : neg) s = -s;
    CHECK(roc_auc(scores, labels) == doctest::Approx(1.0 - roc_auc(neg, labels)).epsilon(1e-12));
  }
}

TEST_CASE("average precision") {
  // descending scores with labels 1,0,1
  CHECK(average_precision(std::vector<double>{0.9, 0.6, 0.3}, std::vector<int>{1, 0, 1}) ==
        doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  CHECK(average_precision(std::vector<double>{0.9, 0.8, 0.1}, std::vector<int>{1, 1, 0}) == 1.0);
  CHECK_THROWS(average_precision(std::vector<double>{0.5}, std::vector<int>{0}));
}

TEST_CASE("ranking metrics match brute-force oracles on random instances") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 4 + static_cast<int>(rng.uniform_int(61));
    std::vector<double> scores;
    std::vector<int> labels;
    bool pos = false, neg = false;
    for (int i = 0; i < n; ++i) {
      // quantized scores generate plenty of ties
      scores.push_back(std::floor(rng.uniform01() * 8) / 8.0);
      labels.push_back(static_cast<int>(rng.uniform_int(2)));
    }
    labels[0] = 1;
    labels[1] = 0;
    (void)pos;
    (void)neg;
    CHECK(std::abs(roc_auc(scores, labels) - auc_pairwise(scores, labels)) < 1e-12);
    CHECK(std::abs(average_precision(scores, labels) - ap_bruteforce(scores, labels)) < 1e-12);
  }
}

TEST_CASE("expected calibration error") {
  SUBCASE("confident and correct is perfectly calibrated") {
    const std::vector<double> conf(10, 1.0);
    const std::vector<int> correct(10, 1);
    CHECK(ece(conf, correct) == 0.0);
  }
  SUBCASE("single-bin gap") {
    const std::vector<double> conf(10, 0.8);
    std::vector<int> correct(10, 0);
    for (int i = 0; i < 6; ++i) correct[static_cast<size_t>(i)] = 1;
    CHECK(ece(conf, correct) == doctest::Approx(0.2).epsilon(1e-12));
  }
  SUBCASE("constructed perfectly calibrated set") {
    std::vector<double> conf;
    std::vector<int> correct;
    for (int bin = 0; bin < 10; ++bin) {
      const double c = bin / 10.0 + 0.05;
      const int hits = static_cast<int>(std::lround(c * 20));
      for (int i = 0; i < 20; ++i) {
        conf.push_back(c);
        correct.push_back(i < hits ? 1 : 0);
      }
    }
    CHECK(ece(conf, correct) < 1e-12);
  }
  CHECK_THROWS(ece(std::vector<double>{}, std::vector<int>{}));
  CHECK_THROWS(ece(std::vector<double>{1.5}, std::vector<int>{1}));
}

TEST_CASE("metrics are invariant to sample order") {
  Rng rng(17);
  const int n = 50;
  std::vector<double> scores, dists;
  std::vector<int> labels, preds, correct;
  for (int i = 0; i < n; ++i) {
    scores.push_back(std::floor(rng.uniform01() * 16) / 16.0);
    labels.push_back(static_cast<int>(rng.uniform_int(2)));
    preds.push_back(static_cast<int>(rng.uniform_int(2)));
  }
  labels[0] = 1;
  labels[1] = 0;
  std::vector<size_t> perm(static_cast<size_t>(n));
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(perm);
  std::vector<double> scores_p(static_cast<size_t>(n));
  std::vector<int> labels_p(static_cast<size_t>(n)), preds_p(static_cast<size_t>(n));
  for (size_t i = 0; i < perm.size(); ++i) {
    scores_p[i] = scores[perm[i]];
    labels_p[i] = labels[perm[i]];
    preds_p[i] = preds[perm[i]];
  }
  CHECK(roc_auc(scores, labels) == doctest::Approx(roc_auc(scores_p, labels_p)).epsilon(1e-13));
  CHECK(average_precision(scores, labels) ==
        doctest::Approx(average_precision(scores_p, labels_p)).epsilon(1e-13));
  CHECK(balanced_accuracy(preds, labels) ==
        doctest::Approx(balanced_accuracy(preds_p, labels_p)).epsilon(1e-13));
  CHECK(f1_binary(preds, labels) == doctest::Approx(f1_binary(preds_p, labels_p)).epsilon(1e-13));
}

TEST_CASE("argmax classes break ties toward the lowest index") {
  const std::vector<double> d{0.4, 0.4, 0.2, 0.1, 0.8, 0.1};
  const auto cls = argmax_classes(d, 3);
  CHECK(cls == std::vector<int>{0, 1});
}
