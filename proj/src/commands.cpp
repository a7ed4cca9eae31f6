#include "prognet/commands.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "prognet/checkpoint.hpp"
#include "prognet/npyio.hpp"
#include "prognet/synthdisease.hpp"

namespace prognet {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::vector<ImageU8> load_corpus(const std::string& path) {
  if (path.empty()) return {};
  if (path.size() > 4 && path.substr(path.size() - 4) == ".npy") return read_npy_images(path);
  if (path.size() > 4 && path.substr(path.size() - 4) == ".npz") return read_npz_images(path);
  return read_pack(path);
}

}  // namespace

int cmd_simulate(const SimulateArgs& args, std::ostream& out) {
  fs::create_directories(args.out_dir);
  DiseaseChain chain = make_chain(args.transition_prob, args.n_stages);
  SyntheticSpec spec;
  spec.n_samples = args.n_samples;
  spec.horizons = args.horizons;
  spec.image_size = args.image_size;
  spec.mask_fraction = args.mask_fraction;
  spec.baseline_min = args.baseline_min;
  spec.seed = args.seed;
  spec.n_centers = args.centers;
  const auto corpus = load_corpus(args.corpus);
  Dataset ds = build_dataset(corpus, chain, spec);

  write_pack((fs::path(args.out_dir) / "images.u8").string(), ds.images);
  write_manifest((fs::path(args.out_dir) / "manifest.tsv").string(), ds, "images.u8");

  const auto dist = baseline_distribution(spec, chain.n_stages);
  std::ofstream oracle_file(fs::path(args.out_dir) / "oracle.tsv");
  oracle_file << "horizon\toracle_acc\n";
  for (int k = 1; k <= args.horizons; ++k) {
    const auto oracle = bayes_oracle(chain, k);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", oracle.accuracy(dist));
    oracle_file << k << "\t" << buf << "\n";
  }

  out << "wrote " << ds.records.size() << " exams to " << args.out_dir << "\n";
  out << "labels: " << missingness(ds).to_string() << "\n";
  return 0;
}

RunConfig run_config_from(const TrainArgs& args) {
  FlatConfig flat = args.config_path.empty() ? RunConfig::defaults().to_flat()
                                             : FlatConfig::parse_file(args.config_path);
  for (const auto& [k, v] : args.overrides) flat.set(k, v);
  RunConfig cfg = RunConfig::from_flat(flat);
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  return cfg;
}

SplitDatasets prepare_datasets(const RunConfig& cfg) {
  Dataset full;
  if (!cfg.data_manifest.empty()) {
    full = load_manifest(cfg.data_manifest);
  } else if (cfg.synthetic) {
    DiseaseChain chain = make_chain(cfg.transition_prob, cfg.n_stages);
    SyntheticSpec spec;
    spec.n_samples = cfg.synthetic_samples;
    spec.horizons = cfg.model.horizons;
    spec.image_size = cfg.model.image_h;
    spec.mask_fraction = cfg.mask_fraction;
    spec.baseline_min = cfg.baseline_min_stage;
    spec.seed = cfg.seed;
    full = build_dataset({}, chain, spec);
  } else {
    throw std::invalid_argument("no data source: set data.manifest or data.synthetic=true");
  }
  if (full.n_classes != cfg.model.n_classes)
    throw std::invalid_argument("dataset has " + std::to_string(full.n_classes) +
                                " classes but model.n_classes is " +
                                std::to_string(cfg.model.n_classes));
  if (full.horizons != cfg.model.horizons)
    throw std::invalid_argument("dataset has " + std::to_string(full.horizons) +
                                " horizons but model.horizons is " +
                                std::to_string(cfg.model.horizons));

  std::vector<size_t> pool(full.records.size());
  std::iota(pool.begin(), pool.end(), size_t{0});

  if (cfg.split.kind == SplitSpec::Kind::CenterOut) {
    if (cfg.split.test_center.empty())
      throw std::invalid_argument("center-out split needs a test center (center-out:NAME)");
    const auto folds = split_one_center_out(full.records);
    const CenterFold* fold = nullptr;
    for (const auto& f : folds)
      if (f.test_center == cfg.split.test_center) fold = &f;
    if (!fold) throw std::invalid_argument("no records from center '" + cfg.split.test_center + "'");
    pool = fold->train;  // held-out center never enters train or valid
  }

  SplitDatasets out;
  if (cfg.split.kind == SplitSpec::Kind::KFold || cfg.split.kind == SplitSpec::Kind::CenterOut) {
    Rng rng = Rng::substream(cfg.seed, 0xf01d);
    Dataset pool_ds = full.subset(pool);
    const auto folds = split_kfold(pool_ds.records, cfg.split.folds, rng);
    if (cfg.split.fold < 0 || cfg.split.fold >= static_cast<int>(folds.size()))
      throw std::invalid_argument("fold index " + std::to_string(cfg.split.fold) +
                                  " out of range for " + std::to_string(folds.size()) + " folds");
    out.train = pool_ds.subset(folds[static_cast<size_t>(cfg.split.fold)].train);
    out.valid = pool_ds.subset(folds[static_cast<size_t>(cfg.split.fold)].valid);
  } else {
    Rng rng = Rng::substream(cfg.seed, 0xf01d);
    rng.shuffle(pool);
    const size_t n_val = std::max<size_t>(1, static_cast<size_t>(std::llround(
                                                 cfg.split.val_fraction *
                                                 static_cast<double>(pool.size()))));
    std::vector<size_t> val_idx(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<size_t> train_idx(pool.begin() + static_cast<std::ptrdiff_t>(n_val), pool.end());
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    out.train = full.subset(train_idx);
    out.valid = full.subset(val_idx);
  }
  if (out.train.records.empty() || out.valid.records.empty())
    throw std::invalid_argument("split produced an empty train or validation set");
  return out;
}

int cmd_train(const TrainArgs& args, std::ostream& out) {
  RunConfig cfg = run_config_from(args);
  cfg.model.validate();
  fs::create_directories(cfg.out_dir);
  {
    std::ofstream echo(fs::path(cfg.out_dir) / "config.cfg");
    echo << cfg.to_flat().serialize();
  }
  SplitDatasets data = prepare_datasets(cfg);
  out << "train " << data.train.records.size() << " / valid " << data.valid.records.size()
      << " exams\n";
  out << "train labels: " << missingness(data.train).to_string() << "\n";
  TrainArtifacts art = train_model(cfg, data.train, data.valid, cfg.out_dir, &out);
  out << "best epoch " << art.best_epoch << " score " << art.best_score << "\n";
  out << "checkpoint " << art.checkpoint_path << "\n";
  return 0;
}

int cmd_eval(const EvalArgs& args, std::ostream& out) {
  Checkpoint ckpt = load_checkpoint(args.checkpoint);
  FlatConfig flat = FlatConfig::parse(ckpt.config_text);
  RunConfig cfg = RunConfig::from_flat(flat);
  PrognosisModel model(cfg.model, cfg.seed);
  model.load_parameters(ckpt.params);

  Dataset ds = load_manifest(args.manifest);
  std::vector<size_t> idx(ds.records.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  if (!args.split.empty()) {
    SplitSpec split = SplitSpec::parse(args.split);
    if (split.kind != SplitSpec::Kind::CenterOut)
      throw std::invalid_argument("eval --split supports only center-out:CENTER");
    idx.clear();
    for (size_t i = 0; i < ds.records.size(); ++i)
      if (ds.records[i].center == split.test_center) idx.push_back(i);
    if (idx.empty())
      throw std::invalid_argument("no records from center '" + split.test_center + "'");
  }

  AugmentationPlan eval_plan =
      AugmentationPlan::parse(cfg.augment, cfg.model.image_h).eval_variant();
  const int workers = worker_threads();
  Predictions preds = predict_dataset(model, ds, idx, eval_plan, args.batch_size, workers);
  EvalReport rep = compute_metrics(preds, cfg.loss);

  const std::string out_dir = args.out_dir.empty() ? "." : args.out_dir;
  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "eval.jsonl");
  json meta;
  meta["kind"] = "meta";
  meta["run"] = args.run_label.empty() ? fs::path(args.checkpoint).stem().string() : args.run_label;
  meta["checkpoint"] = args.checkpoint;
  meta["manifest"] = args.manifest;
  meta["n_classes"] = ds.n_classes;
  meta["horizons"] = ds.horizons;
  meta["n_samples"] = idx.size();
  if (ds.transition_prob >= 0) meta["transition_prob"] = ds.transition_prob;
  log << meta.dump() << "\n";
  for (const auto& r : rep.rows) {
    json row;
    row["kind"] = "metric";
    row["task"] = r.task;
    row["horizon"] = r.horizon;
    row["metric"] = r.metric;
    if (std::isnan(r.value))
      row["value"] = nullptr;
    else
      row["value"] = r.value;
    row["n"] = r.n;
    log << row.dump() << "\n";
  }
  {
    std::ofstream tsv(fs::path(out_dir) / "eval.tsv");
    tsv << rep.to_table();
  }
  out << rep.to_table();

  if (!args.probs_dump.empty()) {
    std::ofstream ps(args.probs_dump);
    ps << "sample\ttask\thorizon\tclass\tprob\n";
    for (int i = 0; i < preds.n; ++i) {
      for (int c = 0; c < preds.n_classes; ++c)
        ps << i << "\tdiagnosis\t0\t" << c << "\t"
           << preds.diag_probs[static_cast<size_t>(i) * preds.n_classes + c] << "\n";
      for (int k = 0; k < preds.horizons; ++k)
        for (int c = 0; c < preds.n_classes; ++c)
          ps << i << "\tprognosis\t" << k + 1 << "\t" << c << "\t"
             << preds.prognosis_probs[(static_cast<size_t>(i) * preds.horizons + k) *
                                          preds.n_classes +
                                      c]
             << "\n";
    }
  }
  if (!args.attention_dump.empty()) {
    // last-layer maps of the prognosis transformer for the first batch
    const int b = std::min<int>(args.batch_size, static_cast<int>(idx.size()));
    std::vector<size_t> chunk(idx.begin(), idx.begin() + b);
    BatchTensors batch = make_batch(ds, chunk, cfg.model, eval_plan, false, 0, 0, workers);
    ForwardOptions opt;
    opt.record_attention = true;
    PrognosisOutput y = model.forward(batch.images, batch.clinical ? &*batch.clinical : nullptr, opt);
    const auto maps = export_attention(y);
    std::ofstream as(args.attention_dump);
    as << "sample\tlayer\thead\trow\tcol\tweight\n";
    for (size_t l = 0; l < maps.size(); ++l) {
      const Tensor& m = maps[l];  // [B, heads, T, T]
      const int64_t heads = m.dim(1), t = m.dim(2);
      if (l + 1 < maps.size()) continue;  // keep the dump small: last layer only
      for (int64_t bi = 0; bi < m.dim(0); ++bi)
        for (int64_t h = 0; h < heads; ++h)
          for (int64_t r = 0; r < t; ++r)
            for (int64_t c = 0; c < t; ++c)
              as << bi << "\t" << l << "\t" << h << "\t" << r << "\t" << c << "\t"
                 << static_cast<double>(m.at(((bi * heads + h) * t + r) * t + c)) << "\n";
    }
  }
  return 0;
}

int cmd_report(const ReportArgs& args, std::ostream& out) {
  if (args.inputs.empty()) throw std::invalid_argument("report: no input logs given");
  struct Key {
    std::string run;
    double p;
    std::string task;
    int horizon;
    std::string metric;
    bool operator<(const Key& o) const {
      return std::tie(run, p, task, horizon, metric) <
             std::tie(o.run, o.p, o.task, o.horizon, o.metric);
    }
  };
  std::map<Key, std::vector<double>> groups;
  int horizons = -1;
  for (const auto& path : args.inputs) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open eval log: " + path);
    std::string run = fs::path(path).stem().string();
    double p = std::nan("");
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      json j = json::parse(line);
      if (j["kind"] == "meta") {
        run = j.value("run", run);
        if (j.contains("transition_prob")) p = j["transition_prob"].get<double>();
        const int h = j.value("horizons", -1);
        if (horizons >= 0 && h >= 0 && h != horizons)
          throw std::runtime_error("report: inconsistent horizon counts across logs (" +
                                   std::to_string(horizons) + " vs " + std::to_string(h) + ")");
        if (h >= 0) horizons = h;
      } else if (j["kind"] == "metric" && !j["value"].is_null()) {
        groups[{run, p, j["task"].get<std::string>(), j["horizon"].get<int>(),
                j["metric"].get<std::string>()}]
            .push_back(j["value"].get<double>());
      }
    }
  }
  std::ostringstream table;
  table << "run\tp\ttask\thorizon\tmetric\tmean\tstd\tn_runs\n";
  for (const auto& [key, values] : groups) {
    double mean = 0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0;
    for (double v : values) var += (v - mean) * (v - mean);
    const double stddev = values.size() > 1 ? std::sqrt(var / (static_cast<double>(values.size()) - 1)) : 0.0;
    table << key.run << "\t";
    if (std::isnan(key.p))
      table << "NA";
    else
      table << key.p;
    table << "\t" << key.task << "\t" << key.horizon << "\t" << key.metric << "\t" << mean << "\t"
          << stddev << "\t" << values.size() << "\n";
  }
  if (!args.out_path.empty()) {
    std::ofstream os(args.out_path);
    os << table.str();
  }
  out << table.str();
  return 0;
}

namespace {

struct VisitRow {
  std::string knee, center, subject, image;
  double year = 0;
  std::string grade;
  std::vector<double> clinical;
};

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == '\t') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

int cmd_ingest(const IngestArgs& args, std::ostream& out) {
  fs::create_directories(args.out_dir);
  if (!args.npz.empty()) {
    const auto images = args.npz.size() > 4 && args.npz.substr(args.npz.size() - 4) == ".npy"
                            ? read_npy_images(args.npz)
                            : read_npz_images(args.npz, args.member);
    const std::string pack_path = (fs::path(args.out_dir) / "corpus.u8").string();
    write_pack(pack_path, images);
    out << "wrote " << images.size() << " images (" << (images.empty() ? 0 : images[0].h) << "x"
        << (images.empty() ? 0 : images[0].w) << ") to " << pack_path << "\n";
    return 0;
  }
  if (args.visits.empty())
    throw std::invalid_argument("ingest: give --visits TABLE or --npz ARCHIVE");

  std::ifstream is(args.visits);
  if (!is) throw std::runtime_error("cannot open visit table: " + args.visits);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("empty visit table: " + args.visits);
  const auto header = split_tabs(line);
  auto col = [&](const std::string& name) {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw std::runtime_error("visit table missing column '" + name + "'");
  };
  const int c_knee = col("knee"), c_center = col("center"), c_subject = col("subject"),
            c_year = col("year"), c_grade = col("grade"), c_image = col("image");
  std::vector<int> c_clin;
  for (size_t i = 0; i < header.size(); ++i)
    if (header[i].rfind("clin", 0) == 0) c_clin.push_back(static_cast<int>(i));

  std::map<std::string, std::vector<VisitRow>> by_knee;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cols = split_tabs(line);
    if (cols.size() != header.size())
      throw std::runtime_error("visit row with " + std::to_string(cols.size()) +
                               " columns, header has " + std::to_string(header.size()));
    VisitRow r;
    r.knee = cols[static_cast<size_t>(c_knee)];
    r.center = cols[static_cast<size_t>(c_center)];
    r.subject = cols[static_cast<size_t>(c_subject)];
    r.year = std::stod(cols[static_cast<size_t>(c_year)]);
    r.grade = cols[static_cast<size_t>(c_grade)];
    r.image = cols[static_cast<size_t>(c_image)];
    for (int ci : c_clin) r.clinical.push_back(std::stod(cols[static_cast<size_t>(ci)]));
    by_knee[r.knee].push_back(std::move(r));
  }

  Dataset ds;
  ds.n_classes = 5;
  ds.horizons = static_cast<int>(args.years.size());
  ds.horizon_years = args.years;
  long excluded_tkr = 0, skipped_no_baseline = 0;
  for (auto& [knee, visits] : by_knee) {
    const VisitRow* baseline = nullptr;
    for (const auto& v : visits)
      if (std::abs(v.year) <= args.align_tolerance &&
          (!baseline || std::abs(v.year) < std::abs(baseline->year)))
        baseline = &v;
    if (!baseline) {
      ++skipped_no_baseline;
      continue;
    }
    std::vector<std::string> grades{baseline->grade};
    for (double target : args.years) {
      const VisitRow* best = nullptr;
      for (const auto& v : visits)
        if (std::abs(v.year - target) <= args.align_tolerance &&
            (!best || std::abs(v.year - target) < std::abs(best->year - target)))
          best = &v;
      grades.push_back(best ? best->grade : "NA");
    }
    const LabelDerivation labels = derive_labels(grades);
    if (labels.stages[0] == grade_to_class(RawGrade::TKR)) {
      ++excluded_tkr;  // knees already replaced at baseline carry no prognosis signal
      continue;
    }
    ExamRecord r;
    r.image_ref = baseline->image;
    r.center = baseline->center;
    r.subject = baseline->subject;
    r.clinical = baseline->clinical;
    r.stages = labels.stages;
    r.progression = labels.progression;
    ds.records.push_back(std::move(r));
  }

  const std::string manifest_path = (fs::path(args.out_dir) / "manifest.tsv").string();
  write_manifest(manifest_path, ds, "");
  out << "wrote " << ds.records.size() << " exams to " << manifest_path << "\n";
  if (excluded_tkr) out << "excluded " << excluded_tkr << " knees with TKR at baseline\n";
  if (skipped_no_baseline) out << "skipped " << skipped_no_baseline << " knees without a baseline visit\n";
  out << "labels: " << missingness(ds).to_string() << "\n";
  return 0;
}

}  // namespace prognet
