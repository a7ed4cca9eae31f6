#include <doctest.h>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "prognet/commands.hpp"
#include "prognet/checkpoint.hpp"
#include "prognet/synthdisease.hpp"

using namespace prognet;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TrainArgs micro_train_args(const fs::path& out, double lr = 1e-3, int epochs = 2,
                           uint64_t seed = 5) {
  TrainArgs ta;
  ta.out_dir = out.string();
  ta.overrides = {
      {"model.image_size", "16"},      {"model.cnn_channels", "8,16"},
      {"model.token_width", "16"},     {"model.context_width", "8"},
      {"model.depth_diagnosis", "1"},  {"model.depth_prognosis", "1"},
      {"model.heads", "2"},            {"model.ffn_width", "32"},
      {"model.horizons", "2"},         {"model.n_classes", "9"},
      {"model.dropout", "0"},          {"data.synthetic", "true"},
      {"data.transition_prob", "1"},   {"data.synthetic_samples", "64"},
      {"split.spec", "fixed:0.25"},    {"train.epochs", std::to_string(epochs)},
      {"train.batch_size", "16"},      {"train.seed", std::to_string(seed)},
      {"optim.lr", std::to_string(lr)},
  };
  return ta;
}

}  // namespace

TEST_CASE("simulate writes a loadable, deterministic dataset") {
  const auto dir_a = fresh_dir("prognet_sim_a");
  const auto dir_b = fresh_dir("prognet_sim_b");
  SimulateArgs args;
  args.transition_prob = 0.75;
  args.n_samples = 400;
  args.image_size = 16;
  args.seed = 9;
  args.out_dir = dir_a.string();
  std::ostringstream sink;
  REQUIRE(cmd_simulate(args, sink) == 0);
  args.out_dir = dir_b.string();
  REQUIRE(cmd_simulate(args, sink) == 0);

  CHECK(slurp((dir_a / "manifest.tsv").string()) == slurp((dir_b / "manifest.tsv").string()));
  CHECK(slurp((dir_a / "images.u8").string()) == slurp((dir_b / "images.u8").string()));

  const Dataset ds = load_manifest((dir_a / "manifest.tsv").string());
  REQUIRE(ds.records.size() == 400);
  CHECK(ds.transition_prob == 0.75);
  CHECK(ds.n_classes == 9);

  // emitted one-step advance rate tracks the transition probability
  long advanced = 0, eligible = 0;
  for (const auto& r : ds.records) {
    if (r.stages[0] >= 8) continue;
    ++eligible;
    advanced += r.stages[1] == r.stages[0] + 1;
  }
  CHECK(std::abs(static_cast<double>(advanced) / static_cast<double>(eligible) - 0.75) < 0.07);

  // oracle table parses and is consistent with the chain
  std::ifstream of(dir_a / "oracle.tsv");
  std::string header, line;
  std::getline(of, header);
  std::getline(of, line);
  const double oracle1 = std::stod(line.substr(line.find('\t') + 1));
  CHECK(oracle1 == doctest::Approx((7 * 0.75 + 1) / 8).epsilon(1e-12));

  SUBCASE("mask fraction reaches the manifest") {
    const auto dir_m = fresh_dir("prognet_sim_m");
    SimulateArgs masked = args;
    masked.out_dir = dir_m.string();
    masked.n_samples = 1500;
    masked.mask_fraction = 0.3;
    REQUIRE(cmd_simulate(masked, sink) == 0);
    const Dataset mds = load_manifest((dir_m / "manifest.tsv").string());
    const auto rep = missingness(mds);
    long missing = 0;
    for (size_t k = 1; k < rep.stage_missing.size(); ++k) missing += rep.stage_missing[k];
    const double frac = static_cast<double>(missing) / (1500.0 * 4);
    CHECK(std::abs(frac - 0.3) < 0.03);
    fs::remove_all(dir_m);
  }
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("micro training run overfits the deterministic chain") {
  const auto out = fresh_dir("prognet_train_micro");
  std::ostringstream sink;
  REQUIRE(cmd_train(micro_train_args(out), sink) == 0);

  // parse the metrics log: train loss must strictly decrease over 2 epochs
  std::ifstream log(out / "metrics.jsonl");
  REQUIRE(log.good());
  std::vector<double> train_losses;
  std::string line;
  while (std::getline(log, line)) {
    json j = json::parse(line);
    if (j["split"] == "train" && j.contains("loss")) train_losses.push_back(j["loss"].get<double>());
  }
  REQUIRE(train_losses.size() == 2);
  CHECK(train_losses[1] < train_losses[0]);
  CHECK(fs::exists(out / "best.ckpt"));
  CHECK(fs::exists(out / "config.cfg"));
  fs::remove_all(out);
}

TEST_CASE("zero-epoch run leaves an initialization checkpoint and one eval row") {
  const auto out = fresh_dir("prognet_train_zero");
  std::ostringstream sink;
  REQUIRE(cmd_train(micro_train_args(out, 1e-3, 0), sink) == 0);
  std::ifstream log(out / "metrics.jsonl");
  int rows = 0;
  std::string line;
  while (std::getline(log, line)) ++rows;
  CHECK(rows == 1);
  const Checkpoint ck = load_checkpoint((out / "best.ckpt").string());
  CHECK(ck.epoch == 0);
  fs::remove_all(out);
}

TEST_CASE("identical config and seed give byte-identical artifacts") {
  const auto out_a = fresh_dir("prognet_repro_a");
  const auto out_b = fresh_dir("prognet_repro_b");
  std::ostringstream sink;
  REQUIRE(cmd_train(micro_train_args(out_a), sink) == 0);
  REQUIRE(cmd_train(micro_train_args(out_b), sink) == 0);
  CHECK(slurp((out_a / "best.ckpt").string()) == slurp((out_b / "best.ckpt").string()));
  CHECK(slurp((out_a / "metrics.jsonl").string()) == slurp((out_b / "metrics.jsonl").string()));
  fs::remove_all(out_a);
  fs::remove_all(out_b);
}

TEST_CASE("library-level eval reproduces the logged validation row") {
  const auto out = fresh_dir("prognet_eval_consistency");
  std::ostringstream sink;
  TrainArgs ta = micro_train_args(out, 1e-3, 2, 11);
  REQUIRE(cmd_train(ta, sink) == 0);

  const Checkpoint ck = load_checkpoint((out / "best.ckpt").string());
  const RunConfig cfg = RunConfig::from_flat(FlatConfig::parse(ck.config_text));
  PrognosisModel model(cfg.model, cfg.seed);
  model.load_parameters(ck.params);
  SplitDatasets data = prepare_datasets(cfg);
  std::vector<size_t> idx(data.valid.records.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  Predictions preds = predict_dataset(model, data.valid, idx, AugmentationPlan::none(),
                                      cfg.batch_size, 1);
  EvalReport rep = compute_metrics(preds, cfg.loss);

  // find the logged row for the checkpoint's epoch
  std::ifstream log(out / "metrics.jsonl");
  std::string line;
  double logged_score = -1, logged_loss = -1;
  while (std::getline(log, line)) {
    json j = json::parse(line);
    if (j["split"] == "valid" && j["epoch"].get<int>() == ck.epoch) {
      logged_score = j["score"].get<double>();
      logged_loss = j["loss"].get<double>();
    }
  }
  REQUIRE(logged_score >= 0);
  CHECK(std::abs(rep.stage_ba_mean - logged_score) < 1e-9);
  CHECK(std::abs(rep.weighted_loss - logged_loss) < 1e-9);
  fs::remove_all(out);
}

TEST_CASE("eval command consumes a manifest and honors split filters") {
  const auto data_dir = fresh_dir("prognet_evalcmd_data");
  const auto run_dir = fresh_dir("prognet_evalcmd_run");
  std::ostringstream sink;

  SimulateArgs sim;
  sim.transition_prob = 1.0;
  sim.n_samples = 120;
  sim.image_size = 16;
  sim.horizons = 2;
  sim.centers = 3;
  sim.seed = 31;
  sim.out_dir = data_dir.string();
  REQUIRE(cmd_simulate(sim, sink) == 0);

  TrainArgs ta = micro_train_args(run_dir, 1e-3, 1, 3);
  REQUIRE(cmd_train(ta, sink) == 0);

  EvalArgs ev;
  ev.checkpoint = (run_dir / "best.ckpt").string();
  ev.manifest = (data_dir / "manifest.tsv").string();
  ev.out_dir = (run_dir / "eval_all").string();
  ev.probs_dump = (run_dir / "probs.tsv").string();
  ev.attention_dump = (run_dir / "attn.tsv").string();
  std::ostringstream table;
  REQUIRE(cmd_eval(ev, table) == 0);
  CHECK(table.str().find("prognosis") != std::string::npos);
  CHECK(fs::exists(run_dir / "eval_all" / "eval.jsonl"));
  CHECK(fs::exists(run_dir / "probs.tsv"));
  CHECK(fs::exists(run_dir / "attn.tsv"));

  // K prognosis rows and K progression rows in the metric log
  std::ifstream log(run_dir / "eval_all" / "eval.jsonl");
  std::string line;
  std::set<int> prognosis_h, progression_h;
  while (std::getline(log, line)) {
    json j = json::parse(line);
    if (j["kind"] != "metric") continue;
    if (j["task"] == "prognosis" && j["metric"] == "ba") prognosis_h.insert(j["horizon"].get<int>());
    if (j["task"] == "progression" && j["metric"] == "ba")
      progression_h.insert(j["horizon"].get<int>());
  }
  CHECK(prognosis_h == std::set<int>{1, 2});
  CHECK(progression_h == std::set<int>{1, 2});

  // attention rows are stochastic matrices
  {
    std::ifstream attn(run_dir / "attn.tsv");
    std::string header;
    std::getline(attn, header);
    std::map<std::tuple<int, int, int, int>, double> row_sums;
    int sample, layer, head, row, col;
    double weight;
    while (attn >> sample >> layer >> head >> row >> col >> weight)
      row_sums[{sample, layer, head, row}] += weight;
    REQUIRE(!row_sums.empty());
    for (const auto& [k, s] : row_sums) CHECK(std::abs(s - 1.0) < 1e-9);
  }

  // restricting to one center shrinks the sample count
  EvalArgs ev_c = ev;
  ev_c.split = "center-out:c0";
  ev_c.out_dir = (run_dir / "eval_c0").string();
  ev_c.probs_dump.clear();
  ev_c.attention_dump.clear();
  std::ostringstream table2;
  REQUIRE(cmd_eval(ev_c, table2) == 0);
  std::ifstream log2(run_dir / "eval_c0" / "eval.jsonl");
  std::getline(log2, line);
  json meta = json::parse(line);
  CHECK(meta["n_samples"].get<int>() < 120);

  CHECK_THROWS(cmd_eval([&] {
    EvalArgs bad = ev;
    bad.split = "center-out:nowhere";
    return bad;
  }(), sink));

  fs::remove_all(data_dir);
  fs::remove_all(run_dir);
}

TEST_CASE("report merges eval logs into a tidy table") {
  const auto dir = fresh_dir("prognet_report");
  auto write_log = [&](const std::string& name, double p, double ba1, double ba2) {
    std::ofstream os(dir / name);
    json meta{{"kind", "meta"}, {"run", "sweep"}, {"transition_prob", p}, {"horizons", 2}};
    os << meta.dump() << "\n";
    os << json{{"kind", "metric"}, {"task", "prognosis"}, {"horizon", 1},
               {"metric", "ba"},   {"value", ba1},        {"n", 100}}
              .dump()
       << "\n";
    os << json{{"kind", "metric"}, {"task", "prognosis"}, {"horizon", 2},
               {"metric", "ba"},   {"value", ba2},        {"n", 100}}
              .dump()
       << "\n";
  };
  write_log("a.jsonl", 0.9, 0.8, 0.7);
  write_log("b.jsonl", 0.9, 0.6, 0.5);
  write_log("c.jsonl", 1.0, 1.0, 1.0);

  ReportArgs ra;
  ra.inputs = {(dir / "a.jsonl").string(), (dir / "b.jsonl").string(), (dir / "c.jsonl").string()};
  ra.out_path = (dir / "tidy.tsv").string();
  std::ostringstream table;
  REQUIRE(cmd_report(ra, table) == 0);
  const std::string tidy = slurp(ra.out_path);
  // folds with the same p aggregate: mean of 0.8 and 0.6 is 0.7
  CHECK(tidy.find("sweep\t0.9\tprognosis\t1\tba\t0.7\t") != std::string::npos);
  // single-run group has zero std
  CHECK(tidy.find("sweep\t1\tprognosis\t1\tba\t1\t0\t1") != std::string::npos);

  SUBCASE("inconsistent horizon counts across logs are rejected") {
    std::ofstream os(dir / "bad.jsonl");
    os << json{{"kind", "meta"}, {"run", "sweep"}, {"horizons", 5}}.dump() << "\n";
    os.close();
    ReportArgs bad;
    bad.inputs = ra.inputs;
    bad.inputs.push_back((dir / "bad.jsonl").string());
    std::ostringstream sink2;
    CHECK_THROWS(cmd_report(bad, sink2));
  }
  fs::remove_all(dir);
}

TEST_CASE("visit-table ingest derives labels and excludes baseline TKR") {
  const auto dir = fresh_dir("prognet_ingest");
  {
    std::ofstream os(dir / "visits.tsv");
    os << "knee\tcenter\tsubject\tyear\tgrade\timage\tclin0\n";
    // knee A: progresses KL2 -> KL3 at year 3 (15-month visit aligns to year 1)
    os << "A\tc0\ts0\t0\tKL2\timg_a.pgm\t61.5\n";
    os << "A\tc0\ts0\t1.25\tKL2\t\t61.5\n";
    os << "A\tc0\ts0\t3\tKL3\t\t61.5\n";
    // knee B: TKR at baseline, excluded
    os << "B\tc1\ts1\t0\tTKR\timg_b.pgm\t70.0\n";
    os << "B\tc1\ts1\t1\tTKR\t\t70.0\n";
    // knee C: no baseline visit, skipped
    os << "C\tc0\ts2\t2\tKL1\timg_c.pgm\t55.0\n";
  }
  IngestArgs ia;
  ia.visits = (dir / "visits.tsv").string();
  ia.years = {1, 2, 3};
  ia.out_dir = (dir / "out").string();
  std::ostringstream report;
  REQUIRE(cmd_ingest(ia, report) == 0);
  CHECK(report.str().find("excluded 1 knees with TKR at baseline") != std::string::npos);
  CHECK(report.str().find("skipped 1 knees without a baseline visit") != std::string::npos);

  std::ifstream mf(dir / "out" / "manifest.tsv");
  std::string line, row;
  while (std::getline(mf, line))
    if (!line.empty() && line[0] != '#' && line.rfind("image\t", 0) != 0) row = line;
  // knee A: baseline class 1, y1 observed via the 15-month visit, y2 missing, y3 class 2
  CHECK(row == "img_a.pgm\tc0\ts0\t61.5\t1\t1\tNA\t2");
  fs::remove_all(dir);
}

TEST_CASE("npz ingest converts archives to the pack format") {
  const auto dir = fresh_dir("prognet_ingest_npz");
  // tiny raw npy on disk
  std::string header = "{'descr': '|u1', 'fortran_order': False, 'shape': (2, 4, 4), }";
  while ((10 + header.size() + 1) % 16 != 0) header.push_back(' ');
  header.push_back('\n');
  std::string npy = "\x93NUMPY";
  npy.push_back(1);
  npy.push_back(0);
  npy.push_back(static_cast<char>(header.size() & 0xff));
  npy.push_back(static_cast<char>(header.size() >> 8));
  npy += header;
  for (int i = 0; i < 32; ++i) npy.push_back(static_cast<char>(i));
  {
    std::ofstream os(dir / "imgs.npy", std::ios::binary);
    os.write(npy.data(), static_cast<std::streamsize>(npy.size()));
  }
  IngestArgs ia;
  ia.npz = (dir / "imgs.npy").string();
  ia.out_dir = (dir / "out").string();
  std::ostringstream sink;
  REQUIRE(cmd_ingest(ia, sink) == 0);
  const auto imgs = read_pack((dir / "out" / "corpus.u8").string());
  REQUIRE(imgs.size() == 2);
  CHECK(imgs[1].px[15] == 31);
  fs::remove_all(dir);
}
