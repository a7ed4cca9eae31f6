#pragma once

#include <optional>
#include <string>
#include <vector>

#include "prognet/image.hpp"
#include "prognet/rng.hpp"

namespace prognet {

inline constexpr int kMissingLabel = -1;

// Raw per-visit severity tokens. KL0/KL1 are clinically similar and share a
// class; TKR is the terminal fifth class.
enum class RawGrade { KL0, KL1, KL2, KL3, KL4, TKR, Missing };

RawGrade parse_grade(const std::string& token);
int grade_to_class(RawGrade g);  // -1 for Missing

// One exam: baseline image plus labels at K horizons.
struct ExamRecord {
  std::string image_ref;  // "pack@<i>" or a file path
  int image_index = -1;   // resolved index into Dataset::images
  std::string center;
  std::string subject;
  std::vector<double> clinical;
  std::vector<int> stages;       // K+1 entries, index 0 = baseline, -1 = missing
  std::vector<int> progression;  // K entries, derived, -1 = missing
};

struct Dataset {
  int n_classes = 5;
  int horizons = 4;  // K
  std::vector<double> horizon_years;
  double transition_prob = -1.0;  // < 0 when not a simulated chain
  std::vector<ExamRecord> records;
  std::vector<ImageU8> images;

  const ImageU8& image_of(const ExamRecord& r) const { return images[static_cast<size_t>(r.image_index)]; }
  Dataset subset(const std::vector<size_t>& idx) const;
};

struct LabelDerivation {
  std::vector<int> stages;
  std::vector<int> progression;
};

// Maps raw per-visit grades (baseline first, then K follow-ups) to stage
// classes and within-k progression flags. Progression at horizon k is 1 when
// any observed stage in 1..k exceeds baseline, 0 when follow-ups were observed
// but none did, missing when baseline or every follow-up through k is missing.
LabelDerivation derive_labels(const std::vector<std::string>& visit_grades);

// Same progression rule on already-derived stage classes.
std::vector<int> derive_progression(const std::vector<int>& stages);

struct CenterFold {
  std::string test_center;
  std::vector<size_t> train;
  std::vector<size_t> test;
};
std::vector<CenterFold> split_one_center_out(const std::vector<ExamRecord>& records);

struct KFold {
  std::vector<size_t> train;
  std::vector<size_t> valid;
};
// Stratified by baseline stage; records sharing a subject id never straddle
// a fold boundary.
std::vector<KFold> split_kfold(const std::vector<ExamRecord>& records, int k, Rng& rng);

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentationPlan {
  struct Step {
    enum class Kind { CenterCrop, Resize, GaussianNoise, Rotation, RandomCrop, Gamma };
    Kind kind;
    double prob = 1.0;
    int size = 0;          // crops/resize
    double lo = 0, hi = 0; // rotation degrees, gamma range, noise sigma in hi
  };
  std::vector<Step> steps;

  static AugmentationPlan none() { return {}; }
  // The canonical knee-radiograph pipeline (applied in this order):
  // center crop 700, resize 280, gaussian noise p=0.5 sigma 0.3,
  // rotation +-10 deg, random crop 256, gamma [0.5,1.5] p=0.5.
  static AugmentationPlan radiograph();
  // Same plan with pixel sizes scaled by out_size/256 for small images.
  static AugmentationPlan scaled_to(int out_size);
  // Deterministic geometric steps only (crops become center crops).
  AugmentationPlan eval_variant() const;

  static AugmentationPlan parse(const std::string& spec, int image_size);
  std::string name() const { return name_; }

 private:
  std::string name_ = "none";
};

ImageF augment(const ImageF& img, const AugmentationPlan& plan, Rng& rng);

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

// Packed u8 image array: magic "PKIMGU8\n", then u32le count/height/width,
// then count*height*width grayscale bytes.
void write_pack(const std::string& path, const std::vector<ImageU8>& images);
std::vector<ImageU8> read_pack(const std::string& path);

ImageU8 read_pgm(const std::string& path);
void write_pgm(const std::string& path, const ImageU8& img);

struct MissingnessReport {
  std::vector<long> stage_missing;  // per column y0..yK
  std::vector<long> progression_missing;
  long n_records = 0;
  std::string to_string() const;
};

// Manifest: tab-separated, '#'-prefixed key=value meta lines, then a header
// row (image, center, subject, clin*, y0..yK) and one row per exam with "NA"
// marking missing stages.
void write_manifest(const std::string& path, const Dataset& ds, const std::string& pack_name);
Dataset load_manifest(const std::string& path);
MissingnessReport missingness(const Dataset& ds);

}  // namespace prognet
