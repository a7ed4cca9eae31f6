#pragma once

#include <vector>

#include "prognet/datapipe.hpp"
#include "prognet/model.hpp"
#include "prognet/tensor.hpp"

namespace prognet {

// Batch labels with missingness; -1 marks a hidden target that must not
// contribute to any loss term.
struct LabelMask {
  int batch = 0;
  int horizons = 0;
  std::vector<int> baseline;     // [B]
  std::vector<int> stages;       // [B*K], row-major over (sample, horizon)
  std::vector<int> progression;  // [B*K]

  static LabelMask from_records(const std::vector<ExamRecord>& records);
  int stage_at(int b, int k) const { return stages[static_cast<size_t>(b * horizons + k)]; }
  int progression_at(int b, int k) const { return progression[static_cast<size_t>(b * horizons + k)]; }
};

struct LossWeights {
  double w1 = 1.0, w2 = 1.0, w3 = 1.0;
};

struct MaskedCe {
  Tensor value;     // scalar; exact constant 0 when count == 0
  long count = 0;   // labeled samples in the normalizer
};

// Mean cross entropy over the labeled rows only (1/sum(I) * sum(I * CE)).
// An all-missing batch is not an error: the term is a defined zero with
// count == 0 so callers can log it.
MaskedCe masked_ce(const Tensor& logits, const std::vector<int>& labels);

struct TotalLoss {
  Tensor value;
  MaskedCe diag;
  std::vector<MaskedCe> prognosis;    // per horizon
  std::vector<MaskedCe> progression;  // per horizon
};

// w1*L0 + (w2/K) sum_k Lk_prognosis + (w3/K) sum_k Lk_progression, with the
// prognosis slice at logit positions [0, n_classes) and the progression slice
// at [n_classes, n_classes+2). Zero-weight groups are skipped entirely so
// their parameters receive exact-zero gradients.
TotalLoss total_loss(const PrognosisOutput& output, const LabelMask& labels,
                     const LossWeights& w, int n_classes);

// Homoscedastic-uncertainty task weighting: one learnable log sigma per task.
struct MtlParams {
  std::vector<Tensor> log_sigma;  // scalars, gradient leaves
  static MtlParams make(int n_tasks);
  std::vector<Tensor> tensors() const { return log_sigma; }
};

// sum_k CE_k / sigma_k^2 + log sigma_k. Reduces to sum_k CE_k when all
// sigma are 1 and goes negative for a perfectly-fit task with sigma < 1.
Tensor mtl_loss(const std::vector<Tensor>& task_ces, const MtlParams& params);

// MTL combination across the 2K+1 masked task terms; tasks with an empty
// mask are skipped (their log sigma receives no gradient).
Tensor mtl_total_loss(const TotalLoss& parts, const MtlParams& params);

}  // namespace prognet
