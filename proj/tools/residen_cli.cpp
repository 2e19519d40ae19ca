#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "residen/commands.hpp"

using namespace residen;

namespace {

void print_summary(const MetricsReport& r) {
  if (r.expression) {
    std::printf("samples %zu  expression accuracy %.6f\n", r.samples, r.expression->accuracy);
    return;
  }
  std::printf("%-8s %10s %10s %10s %10s %12s\n", "au", "accuracy", "precision", "recall", "f1", "final_score");
  for (const auto& m : r.per_au)
    std::printf("%-8s %10.6f %10.6f %10.6f %10.6f %12.6f\n", m.au.c_str(), m.accuracy, m.precision, m.recall, m.f1,
                m.final_score);
  std::printf("%-8s %10.6f %10.6f %10.6f %10.6f %12.6f\n", "mean", r.mean_accuracy, r.mean_precision, r.mean_recall,
              r.mean_f1, r.mean_final_score);
  if (r.cell_accuracy) std::printf("cell accuracy %.6f\n", *r.cell_accuracy);
  for (const auto& d : r.dropped_aus) std::printf("dropped %s\n", d.c_str());
  std::printf("samples %zu  threshold %g  checkpoint %s\n", r.samples, r.threshold, r.checkpoint_id.c_str());
}

void add_eval_flags(CLI::App* cmd, std::string& checkpoint, std::string& manifest, std::string& out,
                    EvalOptions& opts, std::string& aus, std::string& split) {
  cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  cmd->add_option("--manifest", manifest, "manifest CSV")->required();
  cmd->add_option("--out", out, "report path; .json and .csv are written");
  cmd->add_option("--threshold", opts.threshold, "probability threshold for a positive AU")->capture_default_str();
  cmd->add_option("--aus,--dataset", aus, "manifest AU list: disfa, emotionet or ids such as 1,2,4");
  cmd->add_option("--split", split, "evaluate one split only (train, val, test)");
  cmd->add_flag("--cell-accuracy", opts.cell_accuracy, "also report accuracy over all sample/AU cells");
}

void finish_eval_options(EvalOptions& opts, const std::string& out, const std::string& aus, const std::string& split) {
  opts.out = out;
  if (!aus.empty()) opts.manifest_aus = AuClassList::parse(aus);
  if (!split.empty()) opts.split = parse_split(split);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"residen: facial action unit detection with densely connected residual networks"};
  app.require_subcommand(1);

  std::string config, manifest, checkpoint, out, aus, split, sample, mode = "pattern", method = "cam";
  std::optional<std::uint64_t> seed;
  bool joint = false;
  EvalOptions eval_opts;

  auto* train = app.add_subcommand("train", "train a model from a JSON config");
  train->add_option("--config", config, "run config JSON")->required();
  train->add_option("--manifest", manifest, "override data.manifest");
  train->add_option("--out", out, "override output.checkpoint_dir");
  train->add_option("--seed", seed, "override training.seed");
  train->add_flag("--joint-finetune", joint, "update the expression branch with the AU head");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest with the same AU list");
  add_eval_flags(eval, checkpoint, manifest, out, eval_opts, aus, split);

  auto* cross = app.add_subcommand("cross-eval", "evaluate on a manifest from another dataset");
  add_eval_flags(cross, checkpoint, manifest, out, eval_opts, aus, split);

  std::optional<std::size_t> width;
  auto* extract = app.add_subcommand("extract-features", "dump expression features to a feature cache");
  extract->add_option("--checkpoint", checkpoint, "expression checkpoint")->required();
  extract->add_option("--manifest", manifest, "manifest CSV")->required();
  extract->add_option("--out", out, "feature cache path")->required();
  extract->add_option("--expect-width", width, "fail unless the feature width equals this");

  app.add_subcommand("gradcheck", "finite-difference check of every op at f64");

  SynthSpec synth_spec;
  std::string synth_aus = "disfa";
  auto* synth = app.add_subcommand("synth", "generate a synthetic labelled face corpus");
  synth->add_option("--n", synth_spec.n, "number of images")->capture_default_str();
  synth->add_option("--seed", seed, "generator seed");
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--aus", synth_aus, "AU list")->capture_default_str();
  synth->add_option("--mode", mode, "pattern (AUs drive emotion) or latent (emotion drives AUs)")
      ->check(CLI::IsMember({"pattern", "latent"}))
      ->capture_default_str();
  synth->add_option("--val-fraction", synth_spec.val_fraction)->capture_default_str();
  synth->add_option("--image-size", synth_spec.image_size)->capture_default_str();
  synth->add_option("--subjects", synth_spec.subjects)->capture_default_str();

  int au = 0;
  auto* sal = app.add_subcommand("saliency", "heatmap of the evidence for one AU on one image");
  sal->add_option("--checkpoint", checkpoint)->required();
  sal->add_option("--manifest", manifest)->required();
  sal->add_option("--id", sample, "sample id")->required();
  sal->add_option("--au", au, "AU id, e.g. 12")->required();
  sal->add_option("--out", out, "PNG path")->required();
  sal->add_option("--method", method)->check(CLI::IsMember({"cam", "gradient"}))->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      TrainOverrides o;
      if (!manifest.empty()) o.manifest = manifest;
      if (!out.empty()) o.checkpoint_dir = out;
      o.seed = seed;
      o.joint_finetune = joint;
      auto r = cmd_train(config, o, &std::cout);
      std::printf("trained %zu epochs; best epoch %zu; checkpoints in %s\n", r.log.size(), r.best_epoch,
                  r.checkpoint_dir.c_str());
    } else if (*eval || *cross) {
      finish_eval_options(eval_opts, out, aus, split);
      print_summary(*eval ? cmd_eval(checkpoint, manifest, eval_opts) : cmd_cross_eval(checkpoint, manifest, eval_opts));
    } else if (*extract) {
      ExtractOptions o;
      o.expected_width = width;
      auto cache = cmd_extract_features(checkpoint, manifest, out, o);
      std::printf("%zu rows of width %zu written to %s\n", cache.size(), cache.width(), out.c_str());
    } else if (app.got_subcommand("gradcheck")) {
      return cmd_gradcheck(std::cout).passed() ? 0 : 1;
    } else if (*synth) {
      synth_spec.aus = AuClassList::parse(synth_aus);
      synth_spec.mode = mode == "latent" ? SynthMode::Latent : SynthMode::Pattern;
      if (seed) synth_spec.seed = *seed;
      auto m = cmd_synth(synth_spec, out);
      std::printf("%zu images written to %s\n", m.size(), out.c_str());
    } else if (*sal) {
      auto map = cmd_saliency(checkpoint, manifest, sample, au, out,
                              method == "cam" ? SaliencyMethod::Cam : SaliencyMethod::Gradient);
      std::printf("%zux%zu heatmap written to %s\n", map.size, map.size, out.c_str());
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
