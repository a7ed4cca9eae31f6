#pragma once

#include <string>
#include <vector>

#include "prognet/config.hpp"
#include "prognet/trainer.hpp"

namespace prognet {

struct SimulateArgs {
  double transition_prob = 1.0;
  int n_samples = 1000;
  int n_stages = 9;
  int horizons = 4;
  int image_size = 28;
  double mask_fraction = 0.0;
  int baseline_min = 1;
  int centers = 1;
  uint64_t seed = 1;
  std::string corpus;  // optional pack/npy/npz with base images
  std::string out_dir = "data";
};
// Materializes a simulated dataset (manifest + packed images + oracle table).
int cmd_simulate(const SimulateArgs& args, std::ostream& out);

struct TrainArgs {
  std::string config_path;  // optional; flat key=value file
  std::vector<std::pair<std::string, std::string>> overrides;
  std::string out_dir;  // overrides out.dir when non-empty
};
int cmd_train(const TrainArgs& args, std::ostream& out);

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string split;        // optional center-out:CENTER filter
  std::string out_dir;      // where eval.jsonl / eval.tsv land
  std::string run_label;    // tag carried into the log meta
  std::string attention_dump;  // optional tsv path
  std::string probs_dump;      // optional tsv path
  int batch_size = 32;
};
int cmd_eval(const EvalArgs& args, std::ostream& out);

struct ReportArgs {
  std::vector<std::string> inputs;  // eval.jsonl files
  std::string out_path;             // tidy tsv
};
int cmd_report(const ReportArgs& args, std::ostream& out);

struct IngestArgs {
  // visit-table mode
  std::string visits;  // long-format tsv: knee, center, subject, year, grade, image[, clin...]
  std::vector<double> years{1, 2, 3, 6, 8};
  double align_tolerance = 0.25;
  // archive mode
  std::string npz;     // .npy or .npz of uint8 images
  std::string member;  // npz member name
  std::string out_dir = "ingested";
};
int cmd_ingest(const IngestArgs& args, std::ostream& out);

// Loads the datasets named by a run config and applies its split spec.
struct SplitDatasets {
  Dataset train, valid;
};
SplitDatasets prepare_datasets(const RunConfig& cfg);

RunConfig run_config_from(const TrainArgs& args);

}  // namespace prognet
