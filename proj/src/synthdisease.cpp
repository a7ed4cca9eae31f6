#include "prognet/synthdisease.hpp"

#include <cmath>
#include <stdexcept>

namespace prognet {

void DiseaseChain::validate() const {
  if (n_stages < 2 || transition.rows() != n_stages || transition.cols() != n_stages)
    throw std::invalid_argument("chain: transition matrix must be n_stages x n_stages");
  for (int r = 0; r < n_stages; ++r) {
    double sum = 0;
    for (int c = 0; c < n_stages; ++c) {
      if (transition(r, c) < 0) throw std::invalid_argument("chain: negative transition entry");
      sum += transition(r, c);
    }
    if (std::abs(sum - 1.0) > 1e-12)
      throw std::invalid_argument("chain: row " + std::to_string(r) + " sums to " +
                                  std::to_string(sum));
  }
  if (transition(n_stages - 1, n_stages - 1) != 1.0)
    throw std::invalid_argument("chain: terminal stage must be absorbing");
}

DiseaseChain make_chain(double p_advance, int n_stages) {
  if (!(p_advance > 0.0 && p_advance <= 1.0))
    throw std::invalid_argument("make_chain: p must be in (0,1], got " + std::to_string(p_advance));
  DiseaseChain chain;
  chain.n_stages = n_stages;
  chain.transition = Eigen::MatrixXd::Zero(n_stages, n_stages);
  for (int m = 0; m < n_stages - 1; ++m) {
    chain.transition(m, m + 1) = p_advance;
    chain.transition(m, m) = 1.0 - p_advance;
  }
  chain.transition(n_stages - 1, n_stages - 1) = 1.0;
  chain.validate();
  return chain;
}

std::vector<int> sample_trajectory(const DiseaseChain& chain, int m0, int k, Rng& rng) {
  if (m0 < 0 || m0 >= chain.n_stages)
    throw std::invalid_argument("sample_trajectory: invalid start stage " + std::to_string(m0));
  std::vector<int> out;
  out.reserve(static_cast<size_t>(k));
  int cur = m0;
  std::vector<double> row(static_cast<size_t>(chain.n_stages));
  for (int step = 0; step < k; ++step) {
    for (int c = 0; c < chain.n_stages; ++c) row[static_cast<size_t>(c)] = chain.transition(cur, c);
    cur = rng.discrete(row);
    out.push_back(cur);
  }
  return out;
}

ImageU8 render_stage(const ImageU8& base, int stage) {
  if (base.h != base.w)
    throw std::invalid_argument("render_stage: image must be square, got " +
                                std::to_string(base.h) + "x" + std::to_string(base.w));
  const int deg45 = stage * 45;
  if (deg45 % 90 == 0) return rotate_quarters(base, deg45 / 90);
  return to_u8(rotate_bilinear(to_float(base), stage * M_PI / 4.0));
}

double BayesOracle::accuracy(const std::vector<double>& baseline_dist) const {
  if (baseline_dist.size() != best_prob.size())
    throw std::invalid_argument("oracle: baseline distribution over " +
                                std::to_string(baseline_dist.size()) + " stages, chain has " +
                                std::to_string(best_prob.size()));
  double acc = 0;
  for (size_t m = 0; m < best_prob.size(); ++m) acc += baseline_dist[m] * best_prob[m];
  return acc;
}

BayesOracle bayes_oracle(const DiseaseChain& chain, int horizon) {
  if (horizon < 1) throw std::invalid_argument("bayes_oracle: horizon must be >= 1");
  BayesOracle o;
  o.horizon = horizon;
  o.k_step = Eigen::MatrixXd::Identity(chain.n_stages, chain.n_stages);
  for (int i = 0; i < horizon; ++i) o.k_step = o.k_step * chain.transition;
  o.best_stage.resize(static_cast<size_t>(chain.n_stages));
  o.best_prob.resize(static_cast<size_t>(chain.n_stages));
  for (int m = 0; m < chain.n_stages; ++m) {
    int best = 0;
    for (int c = 1; c < chain.n_stages; ++c)
      if (o.k_step(m, c) > o.k_step(m, best)) best = c;
    o.best_stage[static_cast<size_t>(m)] = best;
    o.best_prob[static_cast<size_t>(m)] = o.k_step(m, best);
  }
  return o;
}

ImageU8 procedural_image(int size, Rng& rng) {
  ImageF img{size, size, std::vector<double>(static_cast<size_t>(size) * size, 0.0)};
  const double c = (size - 1) / 2.0;

  // wedge pointing +x, brighter toward the tip, width tapering with distance
  const double wedge_gain = rng.uniform(0.55, 0.9);
  const double half_angle = rng.uniform(0.22, 0.4);
  // off-axis blob breaks the remaining mirror symmetry
  const double blob_r = rng.uniform(0.14, 0.2) * size;
  const double blob_y = c - rng.uniform(0.2, 0.32) * size;
  const double blob_x = c + rng.uniform(-0.08, 0.08) * size;
  const double blob_gain = rng.uniform(0.5, 0.85);
  const double ramp_gain = rng.uniform(0.1, 0.25);

  for (int r = 0; r < size; ++r)
    for (int cc = 0; cc < size; ++cc) {
      const double dx = cc - c, dy = r - c;
      const double dist = std::sqrt(dx * dx + dy * dy);
      double v = 0.0;
      if (dx > 0 && dist > 1e-9) {
        const double ang = std::atan2(std::abs(dy), dx);
        if (ang < half_angle && dist < 0.48 * size)
          v += wedge_gain * (0.35 + 0.65 * dist / (0.48 * size));
      }
      const double bd = std::hypot(cc - blob_x, r - blob_y);
      if (bd < blob_r) v += blob_gain * (1.0 - bd / blob_r);
      v += ramp_gain * (r / static_cast<double>(size - 1));
      img.at(r, cc) = std::min(1.0, v);
    }
  // light per-image texture
  for (auto& v : img.px) v = std::clamp(v + 0.04 * rng.normal(), 0.0, 1.0);
  return to_u8(img);
}

std::vector<double> baseline_distribution(const SyntheticSpec& spec, int n_stages) {
  if (spec.baseline_min < 0 || spec.baseline_min >= n_stages)
    throw std::invalid_argument("baseline_min out of range");
  std::vector<double> dist(static_cast<size_t>(n_stages), 0.0);
  const int support = n_stages - spec.baseline_min;
  for (int m = spec.baseline_min; m < n_stages; ++m)
    dist[static_cast<size_t>(m)] = 1.0 / support;
  return dist;
}

Dataset build_dataset(const std::vector<ImageU8>& corpus, const DiseaseChain& chain,
                      const SyntheticSpec& spec) {
  chain.validate();
  Dataset ds;
  ds.n_classes = chain.n_stages;
  ds.horizons = spec.horizons;
  for (int j = 1; j <= spec.horizons; ++j) ds.horizon_years.push_back(j);
  ds.transition_prob =
      chain.n_stages >= 2 ? chain.transition(0, std::min(1, chain.n_stages - 1)) : -1.0;

  const int support = chain.n_stages - spec.baseline_min;
  ds.records.reserve(static_cast<size_t>(spec.n_samples));
  ds.images.reserve(static_cast<size_t>(spec.n_samples));
  for (int i = 0; i < spec.n_samples; ++i) {
    Rng rng = Rng::substream(spec.seed, 0xd15ea5e, static_cast<uint64_t>(i));
    ImageU8 base = corpus.empty()
                       ? procedural_image(spec.image_size, rng)
                       : corpus[rng.uniform_int(corpus.size())];
    const int m0 = spec.baseline_min + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(support)));
    const auto traj = sample_trajectory(chain, m0, spec.horizons, rng);

    ExamRecord r;
    r.center = "c" + std::to_string(spec.n_centers > 1
                                        ? static_cast<int>(rng.uniform_int(static_cast<uint64_t>(spec.n_centers)))
                                        : 0);
    r.subject = "s" + std::to_string(i);
    r.stages.push_back(m0);
    for (int s : traj) r.stages.push_back(s);
    for (int k = 1; k <= spec.horizons; ++k)
      if (spec.mask_fraction > 0 && rng.bernoulli(spec.mask_fraction))
        r.stages[static_cast<size_t>(k)] = kMissingLabel;
    r.progression = derive_progression(r.stages);
    r.image_index = static_cast<int>(ds.images.size());
    r.image_ref = "pack@" + std::to_string(r.image_index);
    ds.images.push_back(render_stage(base, m0));
    ds.records.push_back(std::move(r));
  }
  return ds;
}

}  // namespace prognet
