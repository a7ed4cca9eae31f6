#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "prognet/config.hpp"
#include "prognet/datapipe.hpp"
#include "prognet/losses.hpp"
#include "prognet/metrics.hpp"
#include "prognet/model.hpp"

namespace prognet {

// Worker-thread count for batch assembly and eval sharding; reads the
// PROGNET_WORKERS environment override, defaults to 1.
int worker_threads();

struct BatchTensors {
  Tensor images;
  std::optional<Tensor> clinical;
  LabelMask labels;
};

// Assembles records idx into model-ready tensors. In train mode the plan is
// applied with one rng substream per record, keyed on (seed, epoch, record
// index), so results do not depend on batch boundaries or worker count.
BatchTensors make_batch(const Dataset& ds, const std::vector<size_t>& idx,
                        const ModelConfig& model_cfg, const AugmentationPlan& plan, bool train,
                        uint64_t seed, uint64_t epoch, int workers);

struct Predictions {
  int n = 0, n_classes = 0, horizons = 0;
  std::vector<double> diag_probs;         // [n, n_classes]
  std::vector<double> prognosis_probs;    // [n, K, n_classes]
  std::vector<double> progression_probs;  // [n, K, 2]
  std::vector<int> baseline_labels;       // [n]
  std::vector<int> stage_labels;          // [n, K]
  std::vector<int> progression_labels;    // [n, K]
  // set-level mean cross entropies (over labeled samples)
  double diag_ce = 0;
  std::vector<double> prognosis_ce, progression_ce;
  std::vector<long> prognosis_ce_n, progression_ce_n;
  long diag_ce_n = 0;
};

Predictions predict_dataset(PrognosisModel& model, const Dataset& ds,
                            const std::vector<size_t>& idx, const AugmentationPlan& eval_plan,
                            int batch_size, int workers);

struct EvalRow {
  std::string task;  // diagnosis | prognosis | progression
  int horizon = 0;   // 0 for diagnosis, 1..K otherwise
  std::string metric;
  double value = 0;
  long n = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double stage_ba_mean = 0;  // model-selection score: mean BA over diagnosis + horizons
  double weighted_loss = 0;

  const EvalRow* find(const std::string& task, int horizon, const std::string& metric) const;
  std::string to_table() const;
};

EvalReport compute_metrics(const Predictions& preds, const LossWeights& w);

struct TrainArtifacts {
  std::string checkpoint_path;
  std::string metrics_path;
  int best_epoch = 0;
  double best_score = 0;
  int epochs_run = 0;
};

// Trains on `train`, selects on `valid` by mean stage balanced accuracy with
// early stopping, persists the best checkpoint and a JSONL metrics log under
// out_dir. Deterministic for a fixed config and seed. Aborts on non-finite
// loss, keeping the last good checkpoint on disk.
TrainArtifacts train_model(const RunConfig& cfg, const Dataset& train, const Dataset& valid,
                           const std::string& out_dir, std::ostream* progress);

}  // namespace prognet
