// Command-line front end: data generation, training, evaluation, decoding,
// curve export and the strategy suite.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aanet.hpp"

using namespace aanet;
namespace fs = std::filesystem;

namespace {

ExperimentConfig load_or_default(const std::string& path, std::uint64_t seed) {
  ExperimentConfig base = default_suite_config(seed);
  return path.empty() ? base : load_config(path, base);
}

void print_report(const ExperimentReport& r) {
  std::cout << std::left << std::setw(6) << to_string(r.strategy) << std::right << std::fixed << std::setprecision(4);
  for (const auto& l : r.results) std::cout << "  " << l.language << (l.target ? "*" : "") << '=' << l.ter;
  if (r.complete) std::cout << "  target_mean=" << r.mean_target_ter();
  std::cout << std::setprecision(1) << "  (" << r.seconds << " s)\n";
}

Decoder parse_decoder(const std::string& s) {
  if (s == "greedy") return Decoder::Greedy;
  if (s == "beam") return Decoder::Beam;
  throw Error("unknown decoder '" + s + "'");
}

FeatureSequence read_input(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".wav") {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    return log_mel(read_wav(is));
  }
  return load_fbnk(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Language-adaptive acoustic models on synthetic micro-languages"};
  app.require_subcommand(1);

  std::string config_path, out_dir, model_path, data_path, input_path, language;
  std::uint64_t seed = 1;
  std::string decoder = "beam";
  std::size_t beam = kDefaultBeamWidth;

  auto* gen = app.add_subcommand("gen-data", "generate every configured language and write train/test splits");
  gen->add_option("-c,--config", config_path, "experiment config (default: built-in suite)");
  gen->add_option("--seed", seed, "suite seed when no config is given");
  gen->add_option("-o,--out", out_dir, "output directory")->required();

  auto* train = app.add_subcommand("train", "run one strategy from a config");
  train->add_option("-c,--config", config_path, "experiment config")->required();
  std::string strategy, output_override;
  train->add_option("-s,--strategy", strategy, "override the configured strategy (FS, BN, CL, ML, CLML)");
  train->add_option("-o,--out", output_override, "override output_dir");

  auto* suite = app.add_subcommand("suite", "run all strategies on shared data");
  suite->add_option("-c,--config", config_path, "experiment config (default: built-in suite)");
  suite->add_option("--seed", seed, "suite seed when no config is given");
  suite->add_option("-o,--out", output_override, "override output_dir");

  auto* sweep = app.add_subcommand("sweep", "one run per activation placement");
  std::vector<std::string> placements;
  sweep->add_option("-c,--config", config_path, "experiment config")->required();
  sweep->add_option("-p,--placements", placements, "placements such as 2GRU,1DNN")->required()->delimiter(';');
  sweep->add_option("-o,--out", output_override, "override output_dir");

  auto* eval = app.add_subcommand("eval", "TER and mean CTC loss of a checkpoint on a dataset");
  eval->add_option("-m,--model", model_path, "checkpoint")->required();
  eval->add_option("-d,--data", data_path, "dataset file")->required();
  eval->add_option("-l,--language", language, "language head (default: the dataset's language)");
  eval->add_option("--decoder", decoder, "greedy or beam");
  eval->add_option("--beam", beam, "beam width");

  auto* decode = app.add_subcommand("decode", "decode one .wav or .fbnk file");
  decode->add_option("-m,--model", model_path, "checkpoint")->required();
  decode->add_option("-i,--input", input_path, "input .wav or .fbnk")->required();
  decode->add_option("-l,--language", language, "language head")->required();
  decode->add_option("--decoder", decoder, "greedy or beam");
  decode->add_option("--beam", beam, "beam width");

  auto* curves = app.add_subcommand("export-curves", "write activation curves as TSV");
  std::size_t layer = 0, points = 601;
  double lo = -3.0, hi = 3.0;
  std::vector<std::string> languages;
  curves->add_option("-m,--model", model_path, "checkpoint")->required();
  curves->add_option("--layer", layer, "adaptive layer index")->required();
  curves->add_option("-l,--languages", languages, "languages (default: all registered)")->delimiter(',');
  curves->add_option("--lo", lo, "lower end of the input range");
  curves->add_option("--hi", hi, "upper end of the input range");
  curves->add_option("--points", points, "number of evenly spaced inputs");
  curves->add_option("-o,--out", out_dir, "output directory")->required();

  auto* feats = app.add_subcommand("features", "log-mel features of a .wav file");
  feats->add_option("-i,--input", input_path, "input .wav")->required();
  feats->add_option("-o,--out", out_dir, "output .fbnk path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const ExperimentConfig cfg = load_or_default(config_path, seed);
      cfg.validate();
      fs::create_directories(out_dir);
      for (const auto& spec : cfg.all_languages()) {
        const DatasetSplit s =
            split_dataset(generate_micro_language(spec, cfg.utterances, cfg.data_seed, cfg.synthetic_audio), cfg.data_seed);
        save_dataset((fs::path(out_dir) / (spec.name + ".train.ds")).string(), s.train);
        save_dataset((fs::path(out_dir) / (spec.name + ".test.ds")).string(), s.test);
        std::cout << spec.name << ": " << s.train.size() << " train, " << s.test.size() << " test\n";
      }
    } else if (*train) {
      ExperimentConfig cfg = load_config(config_path);
      if (!strategy.empty()) cfg.training.strategy = parse_strategy(strategy);
      if (!output_override.empty()) cfg.output_dir = output_override;
      print_report(run_experiment(cfg));
      std::cout << "summary: " << (fs::path(cfg.output_dir) / "summary.txt").string() << '\n';
    } else if (*suite) {
      ExperimentConfig cfg = load_or_default(config_path, seed);
      if (!output_override.empty()) cfg.output_dir = output_override;
      for (const auto& r : run_suite(cfg)) print_report(r);
    } else if (*sweep) {
      ExperimentConfig cfg = load_config(config_path);
      if (!output_override.empty()) cfg.output_dir = output_override;
      std::vector<PlacementSpec> specs;
      for (const auto& p : placements) specs.push_back(PlacementSpec::parse(p));
      const auto reports = run_placement_sweep(cfg, specs);
      for (std::size_t i = 0; i < reports.size(); ++i) {
        std::cout << specs[i].str() << "  ";
        print_report(reports[i]);
      }
    } else if (*eval) {
      const CRDModel m = load_checkpoint(model_path);
      const Dataset d = load_dataset(data_path);
      const std::string lang = language.empty() ? d.language.name : language;
      const EvalResult r = evaluate(m, d, lang, parse_decoder(decoder), beam);
      std::cout << std::setprecision(6) << "utterances=" << d.size() << " ter=" << r.ter
                << " mean_ctc_loss=" << r.mean_ctc_loss << '\n';
    } else if (*decode) {
      const CRDModel m = load_checkpoint(model_path);
      const Matrix lp = model_forward(m, read_input(input_path), language);
      const auto tokens = parse_decoder(decoder) == Decoder::Greedy ? greedy_decode(lp) : beam_search_decode(lp, beam);
      for (std::size_t i = 0; i < tokens.size(); ++i) std::cout << (i ? " " : "") << tokens[i];
      std::cout << '\n';
    } else if (*curves) {
      const CRDModel m = load_checkpoint(model_path);
      if (languages.empty())
        for (const auto& l : m.languages) languages.push_back(l.name);
      export_activation_curves(m, layer, languages, lo, hi, points, out_dir);
      std::cout << "wrote " << languages.size() + 1 << " curves to " << out_dir << '\n';
    } else if (*feats) {
      save_fbnk(out_dir, read_input(input_path));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
