#include "prognet/losses.hpp"

#include <stdexcept>

namespace prognet {

LabelMask LabelMask::from_records(const std::vector<ExamRecord>& records) {
  LabelMask m;
  m.batch = static_cast<int>(records.size());
  m.horizons = records.empty() ? 0 : static_cast<int>(records[0].progression.size());
  for (const auto& r : records) {
    if (static_cast<int>(r.progression.size()) != m.horizons ||
        static_cast<int>(r.stages.size()) != m.horizons + 1)
      throw std::invalid_argument("label mask: records disagree on horizon count");
    m.baseline.push_back(r.stages[0]);
    for (int k = 1; k <= m.horizons; ++k) m.stages.push_back(r.stages[static_cast<size_t>(k)]);
    for (int k = 0; k < m.horizons; ++k) m.progression.push_back(r.progression[static_cast<size_t>(k)]);
  }
  return m;
}

MaskedCe masked_ce(const Tensor& logits, const std::vector<int>& labels) {
  const int64_t c = logits.dim(logits.ndim() - 1);
  const int64_t rows = logits.numel() / c;
  if (static_cast<int64_t>(labels.size()) != rows)
    throw std::invalid_argument("masked_ce: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(rows) + " rows");
  long count = 0;
  for (int t : labels) count += t >= 0;
  if (count == 0) return {Tensor::scalar(0), 0};
  Tensor per_row = cross_entropy_rows(logits, labels);
  return {scale(sum(per_row), static_cast<real_t>(1.0 / static_cast<double>(count))), count};
}

TotalLoss total_loss(const PrognosisOutput& output, const LabelMask& labels, const LossWeights& w,
                     int n_classes) {
  if (w.w1 < 0 || w.w2 < 0 || w.w3 < 0)
    throw std::invalid_argument("total_loss: weights must be nonnegative");
  if (w.w1 == 0 && w.w2 == 0 && w.w3 == 0)
    throw std::invalid_argument("total_loss: at least one weight must be positive");
  const int k_out = static_cast<int>(output.horizon_logits.dim(1));
  if (k_out != labels.horizons)
    throw std::invalid_argument("total_loss: output has " + std::to_string(k_out) +
                                " horizons, labels have " + std::to_string(labels.horizons));
  if (output.horizon_logits.dim(2) != n_classes + 2)
    throw std::invalid_argument("total_loss: horizon logit width " +
                                std::to_string(output.horizon_logits.dim(2)) +
                                " does not match " + std::to_string(n_classes) + "+2 classes");
  const int k_count = labels.horizons;

  TotalLoss out;
  out.diag = masked_ce(output.diag_logits, labels.baseline);
  for (int k = 0; k < k_count; ++k) {
    Tensor hk = slice(output.horizon_logits, 1, k, 1);
    Tensor prognosis_logits = slice(hk, 2, 0, n_classes);
    Tensor progression_logits = slice(hk, 2, n_classes, 2);
    std::vector<int> stage_labels(static_cast<size_t>(labels.batch));
    std::vector<int> prog_labels(static_cast<size_t>(labels.batch));
    for (int b = 0; b < labels.batch; ++b) {
      stage_labels[static_cast<size_t>(b)] = labels.stage_at(b, k);
      prog_labels[static_cast<size_t>(b)] = labels.progression_at(b, k);
    }
    out.prognosis.push_back(masked_ce(prognosis_logits, stage_labels));
    out.progression.push_back(masked_ce(progression_logits, prog_labels));
  }

  Tensor total = Tensor::scalar(0);
  if (w.w1 > 0 && out.diag.count > 0)
    total = add(total, scale(out.diag.value, static_cast<real_t>(w.w1)));
  if (w.w2 > 0) {
    for (int k = 0; k < k_count; ++k)
      if (out.prognosis[static_cast<size_t>(k)].count > 0)
        total = add(total, scale(out.prognosis[static_cast<size_t>(k)].value,
                                 static_cast<real_t>(w.w2 / k_count)));
  }
  if (w.w3 > 0) {
    for (int k = 0; k < k_count; ++k)
      if (out.progression[static_cast<size_t>(k)].count > 0)
        total = add(total, scale(out.progression[static_cast<size_t>(k)].value,
                                 static_cast<real_t>(w.w3 / k_count)));
  }
  out.value = total;
  return out;
}

MtlParams MtlParams::make(int n_tasks) {
  MtlParams p;
  for (int i = 0; i < n_tasks; ++i) p.log_sigma.push_back(Tensor::zeros({1}, true));
  return p;
}

Tensor mtl_loss(const std::vector<Tensor>& task_ces, const MtlParams& params) {
  if (task_ces.size() != params.log_sigma.size())
    throw std::invalid_argument("mtl_loss: " + std::to_string(task_ces.size()) + " tasks vs " +
                                std::to_string(params.log_sigma.size()) + " sigma params");
  Tensor total = Tensor::scalar(0);
  for (size_t i = 0; i < task_ces.size(); ++i) {
    const Tensor& s = params.log_sigma[i];
    Tensor inv_var = exp_(scale(s, real_t(-2)));  // 1/sigma^2
    total = add(total, add(mul(task_ces[i], inv_var), s));
  }
  return total;
}

Tensor mtl_total_loss(const TotalLoss& parts, const MtlParams& params) {
  const size_t k_count = parts.prognosis.size();
  if (params.log_sigma.size() != 2 * k_count + 1)
    throw std::invalid_argument("mtl_total_loss: want " + std::to_string(2 * k_count + 1) +
                                " sigma params, got " + std::to_string(params.log_sigma.size()));
  std::vector<Tensor> ces;
  std::vector<Tensor> sigmas;
  if (parts.diag.count > 0) {
    ces.push_back(parts.diag.value);
    sigmas.push_back(params.log_sigma[0]);
  }
  for (size_t k = 0; k < k_count; ++k) {
    if (parts.prognosis[k].count > 0) {
      ces.push_back(parts.prognosis[k].value);
      sigmas.push_back(params.log_sigma[1 + k]);
    }
    if (parts.progression[k].count > 0) {
      ces.push_back(parts.progression[k].value);
      sigmas.push_back(params.log_sigma[1 + k_count + k]);
    }
  }
  MtlParams active;
  active.log_sigma = sigmas;
  return mtl_loss(ces, active);
}

}  // namespace prognet
