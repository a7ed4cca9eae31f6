#include <CLI11.hpp>

#include <iostream>

#include "prognet/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"prognet: multi-horizon disease prognosis from a baseline image"};
  app.require_subcommand(1);

  prognet::SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "generate a simulated rotation-disease dataset");
  simulate->add_option("--transition-prob", sim.transition_prob, "stage advance probability (0,1]");
  simulate->add_option("-n,--samples", sim.n_samples, "number of exams");
  simulate->add_option("--stages", sim.n_stages, "number of disease stages");
  simulate->add_option("--horizons", sim.horizons, "follow-up horizons K");
  simulate->add_option("--image-size", sim.image_size, "square image size");
  simulate->add_option("--mask-fraction", sim.mask_fraction, "fraction of horizon labels hidden");
  simulate->add_option("--baseline-min", sim.baseline_min, "lowest baseline stage sampled");
  simulate->add_option("--centers", sim.centers, "number of synthetic acquisition centers");
  simulate->add_option("--seed", sim.seed, "rng seed");
  simulate->add_option("--corpus", sim.corpus, "base images (pack/.npy/.npz); procedural if omitted");
  simulate->add_option("--out", sim.out_dir, "output directory")->required();

  prognet::TrainArgs tr;
  std::vector<std::string> set_overrides;
  std::string tr_seed, tr_data, tr_split, tr_epochs, tr_horizons, tr_mask, tr_tprob;
  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", tr.config_path, "flat key=value config file");
  train->add_option("--out", tr.out_dir, "output directory");
  train->add_option("--seed", tr_seed, "override train.seed");
  train->add_option("--data", tr_data, "override data.manifest");
  train->add_option("--split", tr_split, "override split.spec (fixed:F | kfold:K:J | center-out:C:K:J)");
  train->add_option("--epochs", tr_epochs, "override train.epochs");
  train->add_option("--horizons", tr_horizons, "override model.horizons");
  train->add_option("--mask-fraction", tr_mask, "override data.mask_fraction");
  train->add_option("--transition-prob", tr_tprob, "override data.transition_prob");
  train->add_option("--set", set_overrides, "extra key=value overrides")->take_all();

  prognet::EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  eval->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  eval->add_option("--data", ev.manifest, "dataset manifest")->required();
  eval->add_option("--split", ev.split, "center-out:CENTER to restrict to one center");
  eval->add_option("--out", ev.out_dir, "output directory for eval.jsonl / eval.tsv");
  eval->add_option("--run", ev.run_label, "run label recorded in the log");
  eval->add_option("--attention-dump", ev.attention_dump, "dump last-layer attention maps (tsv)");
  eval->add_option("--dump-probs", ev.probs_dump, "dump per-sample softmax trajectories (tsv)");
  eval->add_option("--batch-size", ev.batch_size, "evaluation batch size");

  prognet::ReportArgs rep;
  auto* report = app.add_subcommand("report", "merge eval logs into a tidy table");
  report->add_option("inputs", rep.inputs, "eval.jsonl files")->required();
  report->add_option("--out", rep.out_path, "output tsv path");

  prognet::IngestArgs ing;
  std::string years_csv;
  auto* ingest = app.add_subcommand("ingest", "convert visit tables or image archives");
  ingest->add_option("--visits", ing.visits, "long-format visit table (tsv)");
  ingest->add_option("--years", years_csv, "comma-separated horizon years (default 1,2,3,6,8)");
  ingest->add_option("--align-tolerance", ing.align_tolerance, "visit-to-horizon tolerance in years");
  ingest->add_option("--npz", ing.npz, "uint8 .npy/.npz image archive to convert");
  ingest->add_option("--member", ing.member, "npz member name");
  ingest->add_option("--out", ing.out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*simulate) return prognet::cmd_simulate(sim, std::cout);
    if (*train) {
      auto add = [&](const std::string& key, const std::string& value) {
        if (!value.empty()) tr.overrides.emplace_back(key, value);
      };
      add("train.seed", tr_seed);
      add("data.manifest", tr_data);
      add("split.spec", tr_split);
      add("train.epochs", tr_epochs);
      add("model.horizons", tr_horizons);
      add("data.mask_fraction", tr_mask);
      add("data.transition_prob", tr_tprob);
      for (const auto& kv : set_overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
          throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
        tr.overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
      }
      return prognet::cmd_train(tr, std::cout);
    }
    if (*eval) return prognet::cmd_eval(ev, std::cout);
    if (*report) return prognet::cmd_report(rep, std::cout);
    if (*ingest) {
      if (!years_csv.empty()) {
        ing.years.clear();
        std::stringstream ss(years_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) ing.years.push_back(std::stod(tok));
      }
      return prognet::cmd_ingest(ing, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
