#pragma once

#include <optional>
#include <string>
#include <vector>

#include "prognet/adam.hpp"
#include "prognet/losses.hpp"
#include "prognet/model.hpp"

namespace prognet {

// Flat "key = value" text config with dotted section keys and '#' comments.
// Serialization preserves insertion order so round trips are byte-stable.
class FlatConfig {
 public:
  static FlatConfig parse(const std::string& text);
  static FlatConfig parse_file(const std::string& path);
  std::string serialize() const;

  bool has(const std::string& key) const;
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, int64_t value);
  void set(const std::string& key, bool value);

  std::string get_string(const std::string& key) const;
  double get_double(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;

  const std::vector<std::pair<std::string, std::string>>& items() const { return kv_; }

 private:
  const std::string& lookup(const std::string& key) const;
  std::vector<std::pair<std::string, std::string>> kv_;
};

struct SplitSpec {
  enum class Kind { Fixed, KFold, CenterOut };
  Kind kind = Kind::Fixed;
  double val_fraction = 0.2;  // fixed split
  int folds = 3;              // k-fold
  int fold = 0;               // which fold serves as validation
  std::string test_center;    // center-out

  static SplitSpec parse(const std::string& text);
  std::string to_string() const;
};

// Everything a run needs; (config, seed) determines every emitted byte.
struct RunConfig {
  ModelConfig model;
  LossWeights loss;
  bool mtl = false;
  AdamConfig optim;

  std::string data_manifest;  // empty when the synthetic source is used
  // synthetic source
  bool synthetic = false;
  double transition_prob = 1.0;
  int synthetic_samples = 1000;
  int n_stages = 9;
  int baseline_min_stage = 1;
  double mask_fraction = 0.0;

  SplitSpec split;
  std::string augment = "none";  // none | radiograph | scaled
  int epochs = 50;
  int batch_size = 32;
  int patience = 10;
  uint64_t seed = 1;
  std::string out_dir = "run";

  static RunConfig defaults();
  static RunConfig from_flat(const FlatConfig& cfg);
  FlatConfig to_flat() const;

  static ModelConfig model_from_flat(const FlatConfig& cfg);
  static void model_to_flat(const ModelConfig& m, FlatConfig& cfg);
};

}  // namespace prognet
