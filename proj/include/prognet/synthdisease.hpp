#pragma once

#include <Eigen/Dense>

#include <vector>

#include "prognet/datapipe.hpp"
#include "prognet/image.hpp"
#include "prognet/rng.hpp"

namespace prognet {

// Ordinal Markov disease with an absorbing terminal stage. Stage m renders as
// a rotation of the base image by m*pi/4 radians.
struct DiseaseChain {
  int n_stages = 9;
  Eigen::MatrixXd transition;  // row-stochastic, transition(last,last) == 1

  void validate() const;
};

// Advance-one-stage-with-probability-p chain: T[m,m+1] = p, T[m,m] = 1-p for
// non-terminal m, terminal stage absorbing.
DiseaseChain make_chain(double p_advance, int n_stages = 9);

std::vector<int> sample_trajectory(const DiseaseChain& chain, int m0, int k, Rng& rng);

// Rotation by stage*pi/4 about the center. Multiples of pi/2 use exact index
// rotation; odd stages use bilinear resampling with zero fill.
ImageU8 render_stage(const ImageU8& base, int stage);

struct BayesOracle {
  int horizon = 0;
  std::vector<int> best_stage;      // argmax of the k-step row per start stage
  std::vector<double> best_prob;    // its probability
  Eigen::MatrixXd k_step;           // transition^k

  // Expected top-1 accuracy under a baseline stage distribution.
  double accuracy(const std::vector<double>& baseline_dist) const;
};

BayesOracle bayes_oracle(const DiseaseChain& chain, int horizon);

// Anisotropic synthetic grayscale image (oriented wedge, ramp and texture);
// rotations by multiples of pi/4 stay mutually distinguishable.
ImageU8 procedural_image(int size, Rng& rng);

struct SyntheticSpec {
  int n_samples = 1000;
  int horizons = 4;            // K
  int image_size = 28;
  double mask_fraction = 0.0;  // fraction of horizon stage labels hidden
  // Baseline stages are drawn uniformly from [baseline_min, n_stages-1]. The
  // default skips stage 0: stage 8 rotates by 2*pi and would be pixel-wise
  // identical to stage 0, which makes the two indistinguishable at baseline.
  int baseline_min = 1;
  uint64_t seed = 1;
  int n_centers = 1;
};

std::vector<double> baseline_distribution(const SyntheticSpec& spec, int n_stages);

// Samples baseline stages and trajectories from the chain and renders rotated
// baseline images from procedurally generated base images (or from a provided
// corpus when non-empty).
Dataset build_dataset(const std::vector<ImageU8>& corpus, const DiseaseChain& chain,
                      const SyntheticSpec& spec);

}  // namespace prognet
