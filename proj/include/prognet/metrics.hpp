#pragma once

#include <span>
#include <vector>

namespace prognet {

// Labels may contain -1 (missing); such samples are excluded from every
// metric before anything is computed.

// Unweighted mean of per-class recall over the classes present in labels.
double balanced_accuracy(std::span<const int> preds, std::span<const int> labels);

double plain_accuracy(std::span<const int> preds, std::span<const int> labels);

enum class MseMode { ExpectedIndex, ArgmaxIndex };

// Mean squared error between the label index and either the expected class
// index under the predicted distribution or the argmax index.
double mse_ordinal(std::span<const double> dists, int n_classes, std::span<const int> labels,
                   MseMode mode = MseMode::ExpectedIndex);

// 2PR/(P+R); 0 by convention when P+R == 0.
double f1_binary(std::span<const int> preds, std::span<const int> labels);

// Mann-Whitney statistic: P(score+ > score-) + 0.5 P(tie).
double roc_auc(std::span<const double> scores, std::span<const int> labels);

// Step-wise AP over descending-score thresholds, no interpolation.
double average_precision(std::span<const double> scores, std::span<const int> labels);

// Equal-width right-closed bins on (0,1]; sum_b (n_b/N) |acc_b - conf_b|.
double ece(std::span<const double> confidences, std::span<const int> correct, int n_bins = 10);

// Argmax over the last axis with ties broken toward the lowest class index.
std::vector<int> argmax_classes(std::span<const double> dists, int n_classes);

}  // namespace prognet
