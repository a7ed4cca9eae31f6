#include "prognet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace prognet {

namespace {

// indices of labeled samples
std::vector<size_t> labeled(std::span<const int> labels) {
  std::vector<size_t> idx;
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= 0) idx.push_back(i);
  return idx;
}

}  // namespace

double balanced_accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size())
    throw std::invalid_argument("balanced_accuracy: size mismatch");
  std::map<int, std::pair<long, long>> per_class;  // label -> (correct, total)
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    auto& [correct, total] = per_class[labels[i]];
    ++total;
    if (preds[i] == labels[i]) ++correct;
  }
  if (per_class.empty()) throw std::invalid_argument("balanced_accuracy: no labeled samples");
  double acc = 0;
  for (const auto& [cls, ct] : per_class)
    acc += static_cast<double>(ct.first) / static_cast<double>(ct.second);
  return acc / static_cast<double>(per_class.size());
}

double plain_accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) throw std::invalid_argument("plain_accuracy: size mismatch");
  long correct = 0, total = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    ++total;
    if (preds[i] == labels[i]) ++correct;
  }
  if (total == 0) throw std::invalid_argument("plain_accuracy: no labeled samples");
  return static_cast<double>(correct) / static_cast<double>(total);
}

double mse_ordinal(std::span<const double> dists, int n_classes, std::span<const int> labels,
                   MseMode mode) {
  if (dists.size() != labels.size() * static_cast<size_t>(n_classes))
    throw std::invalid_argument("mse_ordinal: distribution block does not match label count");
  double acc = 0;
  long total = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    const double* p = dists.data() + i * static_cast<size_t>(n_classes);
    double idx = 0;
    if (mode == MseMode::ExpectedIndex) {
      for (int c = 0; c < n_classes; ++c) idx += c * p[c];
    } else {
      int best = 0;
      for (int c = 1; c < n_classes; ++c)
        if (p[c] > p[best]) best = c;
      idx = best;
    }
    const double d = idx - labels[i];
    acc += d * d;
    ++total;
  }
  if (total == 0) throw std::invalid_argument("mse_ordinal: no labeled samples");
  return acc / static_cast<double>(total);
}

double f1_binary(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) throw std::invalid_argument("f1_binary: size mismatch");
  long tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    if (preds[i] == 1 && labels[i] == 1) ++tp;
    if (preds[i] == 1 && labels[i] == 0) ++fp;
    if (preds[i] == 0 && labels[i] == 1) ++fn;
  }
  const double denom = 2.0 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * tp / denom;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("roc_auc: size mismatch");
  const auto idx = labeled(labels);
  long n_pos = 0, n_neg = 0;
  for (size_t i : idx) (labels[i] == 1 ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("roc_auc: needs both classes, got " + std::to_string(n_pos) +
                                " positives and " + std::to_string(n_neg) + " negatives");
  // rank-sum over sorted scores with midrank ties
  std::vector<size_t> order(idx);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t t = i; t <= j; ++t)
      if (labels[order[t]] == 1) rank_sum_pos += midrank;
    i = j + 1;
  }
  const double u = rank_sum_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("average_precision: size mismatch");
  auto idx = labeled(labels);
  long n_pos = 0;
  for (size_t i : idx) n_pos += labels[i] == 1;
  if (n_pos == 0) throw std::invalid_argument("average_precision: no positive samples");
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  double ap = 0;
  long tp = 0, seen = 0;
  size_t i = 0;
  while (i < idx.size()) {
    // process one distinct score threshold at a time
    size_t j = i;
    long tp_block = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      tp_block += labels[idx[j]] == 1;
      ++j;
    }
    const long prev_tp = tp;
    tp += tp_block;
    seen += static_cast<long>(j - i);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    const double recall_gain = static_cast<double>(tp - prev_tp) / static_cast<double>(n_pos);
    ap += recall_gain * precision;
    i = j;
  }
  return ap;
}

double ece(std::span<const double> confidences, std::span<const int> correct, int n_bins) {
  if (confidences.size() != correct.size()) throw std::invalid_argument("ece: size mismatch");
  if (confidences.empty()) throw std::invalid_argument("ece: empty input");
  if (n_bins < 1) throw std::invalid_argument("ece: need at least one bin");
  for (double c : confidences)
    if (c < 0.0 || c > 1.0)
      throw std::invalid_argument("ece: confidence " + std::to_string(c) + " outside [0,1]");
  std::vector<long> count(static_cast<size_t>(n_bins), 0);
  std::vector<double> conf_sum(static_cast<size_t>(n_bins), 0), acc_sum(static_cast<size_t>(n_bins), 0);
  for (size_t i = 0; i < confidences.size(); ++i) {
    // right-closed bins on (0,1]; exact zero joins the first bin
    int b = static_cast<int>(std::ceil(confidences[i] * n_bins)) - 1;
    b = std::clamp(b, 0, n_bins - 1);
    ++count[static_cast<size_t>(b)];
    conf_sum[static_cast<size_t>(b)] += confidences[i];
    acc_sum[static_cast<size_t>(b)] += correct[i];
  }
  double e = 0;
  const double n = static_cast<double>(confidences.size());
  for (int b = 0; b < n_bins; ++b) {
    if (count[static_cast<size_t>(b)] == 0) continue;
    const double cb = static_cast<double>(count[static_cast<size_t>(b)]);
    e += (cb / n) * std::abs(acc_sum[static_cast<size_t>(b)] / cb - conf_sum[static_cast<size_t>(b)] / cb);
  }
  return e;
}

std::vector<int> argmax_classes(std::span<const double> dists, int n_classes) {
  const size_t rows = dists.size() / static_cast<size_t>(n_classes);
  std::vector<int> out(rows);
  for (size_t r = 0; r < rows; ++r) {
    const double* p = dists.data() + r * static_cast<size_t>(n_classes);
    int best = 0;
    for (int c = 1; c < n_classes; ++c)
      if (p[c] > p[best]) best = c;
    out[r] = best;
  }
  return out;
}

}  // namespace prognet
