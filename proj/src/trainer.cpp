#include "prognet/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "prognet/checkpoint.hpp"

namespace prognet {

namespace {

using json = nlohmann::ordered_json;

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  const int t_count = std::min(workers, n);
  for (int t = 0; t < t_count; ++t)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (auto& th : pool) th.join();
}

double ce_of_row(const double* probs, int n, int label) {
  (void)n;
  return -std::log(std::max(probs[label], 1e-300));
}

}  // namespace

int worker_threads() {
  if (const char* env = std::getenv("PROGNET_WORKERS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  return 1;
}

BatchTensors make_batch(const Dataset& ds, const std::vector<size_t>& idx,
                        const ModelConfig& model_cfg, const AugmentationPlan& plan, bool train,
                        uint64_t seed, uint64_t epoch, int workers) {
  const int b = static_cast<int>(idx.size());
  const int h = model_cfg.image_h, w = model_cfg.image_w;
  BatchTensors out{Tensor::zeros({b, model_cfg.image_channels, h, w}), std::nullopt, {}};
  const size_t n_clin = ds.records.empty() ? 0 : ds.records[idx.empty() ? 0 : idx[0]].clinical.size();
  if (model_cfg.use_clinical) {
    if (static_cast<int>(n_clin) != model_cfg.clinical_dim)
      throw std::invalid_argument("make_batch: records carry " + std::to_string(n_clin) +
                                  " clinical values, model wants " +
                                  std::to_string(model_cfg.clinical_dim));
    out.clinical = Tensor::zeros({b, model_cfg.clinical_dim});
  }

  parallel_for(b, workers, [&](int i) {
    const ExamRecord& r = ds.records[idx[static_cast<size_t>(i)]];
    ImageF img = to_float(ds.image_of(r));
    if (!plan.steps.empty()) {
      Rng aug_rng = Rng::substream(seed, 0xa06 ^ epoch, idx[static_cast<size_t>(i)]);
      img = augment(img, plan, aug_rng);
    }
    if (img.h != h || img.w != w)
      throw std::invalid_argument("make_batch: image is " + std::to_string(img.h) + "x" +
                                  std::to_string(img.w) + " after augmentation, model wants " +
                                  std::to_string(h) + "x" + std::to_string(w));
    real_t* dst = out.images.data().data() + static_cast<int64_t>(i) * h * w;
    for (size_t p = 0; p < img.px.size(); ++p)
      dst[p] = static_cast<real_t>(img.px[p] * 2.0 - 1.0);
    if (out.clinical)
      for (int j = 0; j < model_cfg.clinical_dim; ++j)
        out.clinical->at(static_cast<int64_t>(i) * model_cfg.clinical_dim + j) =
            static_cast<real_t>(r.clinical[static_cast<size_t>(j)]);
  });

  std::vector<ExamRecord> recs;
  recs.reserve(idx.size());
  for (size_t i : idx) recs.push_back(ds.records[i]);
  out.labels = LabelMask::from_records(recs);
  return out;
}

Predictions predict_dataset(PrognosisModel& model, const Dataset& ds,
                            const std::vector<size_t>& idx, const AugmentationPlan& eval_plan,
                            int batch_size, int workers) {
  const ModelConfig& cfg = model.config();
  const int n = static_cast<int>(idx.size());
  const int ncls = cfg.n_classes, k_count = cfg.horizons;
  if (ds.n_classes != ncls)
    throw std::invalid_argument("predict: dataset has " + std::to_string(ds.n_classes) +
                                " classes, model expects " + std::to_string(ncls));
  if (ds.horizons != k_count)
    throw std::invalid_argument("predict: dataset has " + std::to_string(ds.horizons) +
                                " horizons, model expects " + std::to_string(k_count));

  Predictions out;
  out.n = n;
  out.n_classes = ncls;
  out.horizons = k_count;
  out.diag_probs.assign(static_cast<size_t>(n) * ncls, 0);
  out.prognosis_probs.assign(static_cast<size_t>(n) * k_count * ncls, 0);
  out.progression_probs.assign(static_cast<size_t>(n) * k_count * 2, 0);
  out.baseline_labels.assign(static_cast<size_t>(n), kMissingLabel);
  out.stage_labels.assign(static_cast<size_t>(n) * k_count, kMissingLabel);
  out.progression_labels.assign(static_cast<size_t>(n) * k_count, kMissingLabel);
  out.prognosis_ce.assign(static_cast<size_t>(k_count), 0);
  out.progression_ce.assign(static_cast<size_t>(k_count), 0);
  out.prognosis_ce_n.assign(static_cast<size_t>(k_count), 0);
  out.progression_ce_n.assign(static_cast<size_t>(k_count), 0);

  for (int start = 0; start < n; start += batch_size) {
    const int b = std::min(batch_size, n - start);
    std::vector<size_t> chunk(idx.begin() + start, idx.begin() + start + b);
    BatchTensors batch = make_batch(ds, chunk, cfg, eval_plan, /*train=*/false, 0, 0, workers);
    ForwardOptions opt;  // eval mode
    PrognosisOutput y = model.forward(batch.images, batch.clinical ? &*batch.clinical : nullptr, opt);
    Tensor diag = softmax(y.diag_logits, -1);
    Tensor prog = softmax(slice(y.horizon_logits, 2, 0, ncls), -1);
    Tensor prgn = softmax(slice(y.horizon_logits, 2, ncls, 2), -1);
    for (int i = 0; i < b; ++i) {
      const int gi = start + i;
      for (int c = 0; c < ncls; ++c)
        out.diag_probs[static_cast<size_t>(gi) * ncls + c] =
            static_cast<double>(diag.at(static_cast<int64_t>(i) * ncls + c));
      for (int k = 0; k < k_count; ++k) {
        for (int c = 0; c < ncls; ++c)
          out.prognosis_probs[(static_cast<size_t>(gi) * k_count + k) * ncls + c] =
              static_cast<double>(prog.at((static_cast<int64_t>(i) * k_count + k) * ncls + c));
        for (int c = 0; c < 2; ++c)
          out.progression_probs[(static_cast<size_t>(gi) * k_count + k) * 2 + c] =
              static_cast<double>(prgn.at((static_cast<int64_t>(i) * k_count + k) * 2 + c));
        out.stage_labels[static_cast<size_t>(gi) * k_count + k] = batch.labels.stage_at(i, k);
        out.progression_labels[static_cast<size_t>(gi) * k_count + k] =
            batch.labels.progression_at(i, k);
      }
      out.baseline_labels[static_cast<size_t>(gi)] = batch.labels.baseline[static_cast<size_t>(i)];
    }
  }

  // set-level cross entropies over labeled samples
  for (int i = 0; i < n; ++i) {
    const int y0 = out.baseline_labels[static_cast<size_t>(i)];
    if (y0 >= 0) {
      out.diag_ce += ce_of_row(out.diag_probs.data() + static_cast<size_t>(i) * ncls, ncls, y0);
      ++out.diag_ce_n;
    }
    for (int k = 0; k < k_count; ++k) {
      const int yk = out.stage_labels[static_cast<size_t>(i) * k_count + k];
      if (yk >= 0) {
        out.prognosis_ce[static_cast<size_t>(k)] += ce_of_row(
            out.prognosis_probs.data() + (static_cast<size_t>(i) * k_count + k) * ncls, ncls, yk);
        ++out.prognosis_ce_n[static_cast<size_t>(k)];
      }
      const int pk = out.progression_labels[static_cast<size_t>(i) * k_count + k];
      if (pk >= 0) {
        out.progression_ce[static_cast<size_t>(k)] += ce_of_row(
            out.progression_probs.data() + (static_cast<size_t>(i) * k_count + k) * 2, 2, pk);
        ++out.progression_ce_n[static_cast<size_t>(k)];
      }
    }
  }
  if (out.diag_ce_n > 0) out.diag_ce /= static_cast<double>(out.diag_ce_n);
  for (int k = 0; k < k_count; ++k) {
    if (out.prognosis_ce_n[static_cast<size_t>(k)] > 0)
      out.prognosis_ce[static_cast<size_t>(k)] /= static_cast<double>(out.prognosis_ce_n[static_cast<size_t>(k)]);
    if (out.progression_ce_n[static_cast<size_t>(k)] > 0)
      out.progression_ce[static_cast<size_t>(k)] /= static_cast<double>(out.progression_ce_n[static_cast<size_t>(k)]);
  }
  return out;
}

const EvalRow* EvalReport::find(const std::string& task, int horizon,
                                const std::string& metric) const {
  for (const auto& r : rows)
    if (r.task == task && r.horizon == horizon && r.metric == metric) return &r;
  return nullptr;
}

std::string EvalReport::to_table() const {
  std::ostringstream os;
  os << "task\thorizon\tmetric\tvalue\tn\n";
  for (const auto& r : rows) {
    os << r.task << "\t" << r.horizon << "\t" << r.metric << "\t";
    if (std::isnan(r.value))
      os << "NA";
    else
      os << r.value;
    os << "\t" << r.n << "\n";
  }
  return os.str();
}

namespace {

// metrics over one stage task (diagnosis or a prognosis horizon)
void stage_rows(EvalReport& rep, const std::string& task, int horizon,
                std::span<const double> dists, int ncls, std::span<const int> labels, double ce,
                long ce_n) {
  const auto preds = argmax_classes(dists, ncls);
  long labeled = 0;
  for (int y : labels) labeled += y >= 0;
  auto push = [&](const std::string& metric, double v) {
    rep.rows.push_back({task, horizon, metric, v, labeled});
  };
  if (labeled == 0) {
    push("n_labeled", 0);
    return;
  }
  push("ba", balanced_accuracy(preds, labels));
  push("acc", plain_accuracy(preds, labels));
  push("mse", mse_ordinal(dists, ncls, labels, MseMode::ExpectedIndex));
  push("mse_argmax", mse_ordinal(dists, ncls, labels, MseMode::ArgmaxIndex));
  std::vector<double> conf;
  std::vector<int> correct;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    conf.push_back(dists[i * static_cast<size_t>(ncls) + static_cast<size_t>(preds[i])]);
    correct.push_back(preds[i] == labels[i] ? 1 : 0);
  }
  push("ece", ece(conf, correct));
  rep.rows.push_back({task, horizon, "ce", ce, ce_n});
}

}  // namespace

EvalReport compute_metrics(const Predictions& p, const LossWeights& w) {
  EvalReport rep;
  const int ncls = p.n_classes, k_count = p.horizons;
  stage_rows(rep, "diagnosis", 0,
             std::span<const double>(p.diag_probs.data(), p.diag_probs.size()), ncls,
             p.baseline_labels, p.diag_ce, p.diag_ce_n);
  double ba_sum = 0;
  int ba_terms = 0;
  if (const auto* r = rep.find("diagnosis", 0, "ba")) {
    ba_sum += r->value;
    ++ba_terms;
  }
  for (int k = 0; k < k_count; ++k) {
    std::vector<double> dists(static_cast<size_t>(p.n) * ncls);
    std::vector<int> labels(static_cast<size_t>(p.n));
    for (int i = 0; i < p.n; ++i) {
      for (int c = 0; c < ncls; ++c)
        dists[static_cast<size_t>(i) * ncls + c] =
            p.prognosis_probs[(static_cast<size_t>(i) * k_count + k) * ncls + c];
      labels[static_cast<size_t>(i)] = p.stage_labels[static_cast<size_t>(i) * k_count + k];
    }
    stage_rows(rep, "prognosis", k + 1, dists, ncls, labels,
               p.prognosis_ce[static_cast<size_t>(k)], p.prognosis_ce_n[static_cast<size_t>(k)]);
    if (const auto* r = rep.find("prognosis", k + 1, "ba")) {
      ba_sum += r->value;
      ++ba_terms;
    }
  }
  for (int k = 0; k < k_count; ++k) {
    std::vector<double> scores(static_cast<size_t>(p.n));
    std::vector<int> preds(static_cast<size_t>(p.n)), labels(static_cast<size_t>(p.n));
    long labeled = 0;
    for (int i = 0; i < p.n; ++i) {
      const double p1 = p.progression_probs[(static_cast<size_t>(i) * k_count + k) * 2 + 1];
      scores[static_cast<size_t>(i)] = p1;
      preds[static_cast<size_t>(i)] = p1 > 0.5 ? 1 : 0;
      labels[static_cast<size_t>(i)] = p.progression_labels[static_cast<size_t>(i) * k_count + k];
      labeled += labels[static_cast<size_t>(i)] >= 0;
    }
    auto push = [&](const std::string& metric, double v) {
      rep.rows.push_back({"progression", k + 1, metric, v, labeled});
    };
    if (labeled == 0) {
      push("n_labeled", 0);
      continue;
    }
    push("ba", balanced_accuracy(preds, labels));
    push("acc", plain_accuracy(preds, labels));
    push("f1", f1_binary(preds, labels));
    try {
      push("auc", roc_auc(scores, labels));
    } catch (const std::invalid_argument&) {
      push("auc", std::nan(""));
    }
    try {
      push("ap", average_precision(scores, labels));
    } catch (const std::invalid_argument&) {
      push("ap", std::nan(""));
    }
    rep.rows.push_back({"progression", k + 1, "ce", p.progression_ce[static_cast<size_t>(k)],
                        p.progression_ce_n[static_cast<size_t>(k)]});
  }
  rep.stage_ba_mean = ba_terms > 0 ? ba_sum / ba_terms : 0.0;

  double loss = w.w1 * p.diag_ce;
  for (int k = 0; k < k_count; ++k) {
    loss += w.w2 / k_count * p.prognosis_ce[static_cast<size_t>(k)];
    loss += w.w3 / k_count * p.progression_ce[static_cast<size_t>(k)];
  }
  rep.weighted_loss = loss;
  return rep;
}

namespace {

json eval_row_json(int epoch, const std::string& split, const EvalReport& rep) {
  json j;
  j["epoch"] = epoch;
  j["split"] = split;
  j["loss"] = rep.weighted_loss;
  j["score"] = rep.stage_ba_mean;
  for (const auto& r : rep.rows) {
    if (r.metric != "ba" && r.metric != "acc" && r.metric != "ce") continue;
    const std::string key = r.task + std::to_string(r.horizon) + "_" + r.metric;
    if (std::isnan(r.value))
      j[key] = nullptr;
    else
      j[key] = r.value;
  }
  return j;
}

}  // namespace

TrainArtifacts train_model(const RunConfig& cfg, const Dataset& train, const Dataset& valid,
                           const std::string& out_dir, std::ostream* progress) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::string metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();
  const std::string ckpt_path = (fs::path(out_dir) / "best.ckpt").string();
  std::ofstream log(metrics_path);
  if (!log) throw std::runtime_error("cannot write metrics log: " + metrics_path);

  const int workers = worker_threads();
  PrognosisModel model(cfg.model, cfg.seed);
  std::vector<Tensor> opt_params = model.parameter_tensors();
  std::vector<NamedTensor> named = model.parameters();
  MtlParams mtl_params;
  if (cfg.mtl) {
    mtl_params = MtlParams::make(2 * cfg.model.horizons + 1);
    for (size_t i = 0; i < mtl_params.log_sigma.size(); ++i) {
      opt_params.push_back(mtl_params.log_sigma[i]);
      named.push_back({"mtl.log_sigma" + std::to_string(i), mtl_params.log_sigma[i]});
    }
  }
  AdamState adam(cfg.optim);
  adam.init(opt_params);

  AugmentationPlan train_plan = AugmentationPlan::parse(cfg.augment, cfg.model.image_h);
  AugmentationPlan eval_plan = train_plan.eval_variant();

  Rng shuffle_rng = Rng::substream(cfg.seed, 0x5f1e);
  Rng dropout_rng = Rng::substream(cfg.seed, 0xd201);

  std::vector<size_t> train_idx(train.records.size());
  std::iota(train_idx.begin(), train_idx.end(), size_t{0});
  std::vector<size_t> valid_idx(valid.records.size());
  std::iota(valid_idx.begin(), valid_idx.end(), size_t{0});

  const std::string config_echo = cfg.to_flat().serialize();
  auto save = [&](int epoch) {
    Checkpoint ck;
    ck.config_text = config_echo;
    ck.epoch = epoch;
    auto st = shuffle_rng.save_state();
    auto dt = dropout_rng.save_state();
    ck.rng_state = st;
    ck.rng_state.insert(ck.rng_state.end(), dt.begin(), dt.end());
    ck.params = named;
    ck.has_optimizer = true;
    ck.adam_cfg = adam.cfg;
    ck.adam_step = adam.step_count;
    ck.adam_m = adam.m;
    ck.adam_v = adam.v;
    save_checkpoint(ckpt_path, ck);
  };

  TrainArtifacts art;
  art.checkpoint_path = ckpt_path;
  art.metrics_path = metrics_path;

  auto evaluate_split = [&](const Dataset& ds, const std::vector<size_t>& idx) {
    Predictions p = predict_dataset(model, ds, idx, eval_plan, cfg.batch_size, workers);
    return compute_metrics(p, cfg.loss);
  };

  EvalReport init_rep = evaluate_split(valid, valid_idx);
  log << eval_row_json(0, "valid", init_rep).dump() << "\n";
  double best_score = init_rep.stage_ba_mean;
  int best_epoch = 0;
  save(0);

  int since_best = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(train_idx);
    double running_loss = 0;
    long batches = 0, skipped_terms = 0;
    for (size_t start = 0; start < train_idx.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(train_idx.size(), start + static_cast<size_t>(cfg.batch_size));
      std::vector<size_t> chunk(train_idx.begin() + static_cast<std::ptrdiff_t>(start),
                                train_idx.begin() + static_cast<std::ptrdiff_t>(end));
      BatchTensors batch = make_batch(train, chunk, cfg.model, train_plan, /*train=*/true,
                                      cfg.seed, static_cast<uint64_t>(epoch), workers);
      Tape tape;
      TapeScope scope(tape);
      ForwardOptions opt;
      opt.train = true;
      opt.rng = &dropout_rng;
      PrognosisOutput out =
          model.forward(batch.images, batch.clinical ? &*batch.clinical : nullptr, opt);
      TotalLoss parts = total_loss(out, batch.labels, cfg.loss, cfg.model.n_classes);
      Tensor loss = cfg.mtl ? mtl_total_loss(parts, mtl_params) : parts.value;
      const double loss_v = static_cast<double>(loss.value());
      if (!std::isfinite(loss_v)) {
        log << json{{"epoch", epoch}, {"split", "train"}, {"event", "non_finite_loss"}}.dump()
            << "\n";
        throw std::runtime_error("training aborted: non-finite loss at epoch " +
                                 std::to_string(epoch) + " (best checkpoint from epoch " +
                                 std::to_string(best_epoch) + " retained at " + ckpt_path + ")");
      }
      if (parts.diag.count == 0) ++skipped_terms;
      for (const auto& t : parts.prognosis) skipped_terms += t.count == 0;
      for (const auto& t : parts.progression) skipped_terms += t.count == 0;
      tape.backward(loss, std::span<const Tensor>(opt_params.data(), opt_params.size()));
      adam.step(opt_params);
      running_loss += loss_v;
      ++batches;
    }
    const double train_loss = batches ? running_loss / static_cast<double>(batches) : 0.0;
    json train_row{{"epoch", epoch}, {"split", "train"}, {"loss", train_loss}};
    if (skipped_terms > 0) train_row["empty_mask_terms"] = skipped_terms;
    log << train_row.dump() << "\n";

    EvalReport rep = evaluate_split(valid, valid_idx);
    log << eval_row_json(epoch, "valid", rep).dump() << "\n";
    art.epochs_run = epoch;

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (progress)
      *progress << "epoch " << epoch << " train_loss " << train_loss << " val_score "
                << rep.stage_ba_mean << " (" << secs << "s)\n";

    if (rep.stage_ba_mean > best_score) {
      best_score = rep.stage_ba_mean;
      best_epoch = epoch;
      since_best = 0;
      save(epoch);
    } else {
      ++since_best;
      if (since_best >= cfg.patience) {
        if (progress) *progress << "early stop at epoch " << epoch << "\n";
        break;
      }
    }
  }
  log.flush();
  art.best_epoch = best_epoch;
  art.best_score = best_score;
  return art;
}

}  // namespace prognet
