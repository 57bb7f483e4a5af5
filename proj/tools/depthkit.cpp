#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "depthkit/cli_commands.hpp"

namespace {

// CLI11 stores into concrete slots; promote to optional only when the flag
// was actually given so config-file values survive.
struct OverrideSlots {
  std::string variant, out_dir;
  int64_t seed = 0, steps = 0;

  static bool given(const CLI::App* cmd, const std::string& name) {
    const CLI::Option* o = cmd->get_option_no_throw(name);
    return o && o->count() > 0;
  }

  depthkit::CliOverrides resolve(const CLI::App* cmd) const {
    depthkit::CliOverrides ov;
    if (given(cmd, "--variant")) ov.variant = variant;
    if (given(cmd, "--out")) ov.out_dir = out_dir;
    if (given(cmd, "--seed")) ov.seed = uint64_t(seed);
    if (given(cmd, "--steps")) ov.steps = steps;
    return ov;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"depthkit: tiny language models whose blocks are depth-update rules"};
  app.require_subcommand(1);

  std::string config_path;
  OverrideSlots slots;

  CLI::App* train = app.add_subcommand("train", "train one model from a config");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--variant", slots.variant, "override the block variant");
  train->add_option("--out", slots.out_dir, "override the output directory");
  train->add_option("--seed", slots.seed, "override the run seed")
      ->check(CLI::NonNegativeNumber);
  train->add_option("--steps", slots.steps, "override the step count")
      ->check(CLI::NonNegativeNumber);

  std::vector<std::string> variants;
  CLI::App* compare =
      app.add_subcommand("compare", "train several variants on identical batches");
  compare->add_option("--config", config_path, "run config JSON")->required();
  compare->add_option("--variants", variants,
                      "variant names (default: all nine)")
      ->delimiter(',');
  compare->add_option("--out", slots.out_dir, "override the output directory");
  compare->add_option("--seed", slots.seed, "override the run seed")
      ->check(CLI::NonNegativeNumber);
  compare->add_option("--steps", slots.steps, "override the step count")
      ->check(CLI::NonNegativeNumber);

  int64_t pc_layers = 0, pc_heads = 0, pc_dim = 0, pc_vocab = 0;
  int64_t pc_context = 1024;
  std::string pc_variant;
  CLI::App* paramcount =
      app.add_subcommand("paramcount", "parameter budget for a model shape");
  paramcount->add_option("layers", pc_layers, "block count")->required();
  paramcount->add_option("heads", pc_heads, "attention heads")->required();
  paramcount->add_option("dim", pc_dim, "model width")->required();
  paramcount->add_option("vocab", pc_vocab, "vocabulary size")->required();
  paramcount->add_option("variant", pc_variant, "block variant name")
      ->required();
  paramcount->add_option("--context", pc_context, "context length");

  depthkit::GradcheckOptions gopt;
  std::string g_ordering, g_lnv_mode;
  int g_k = 0;
  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference audit of the full loss gradient");
  gradcheck->add_option("--variant", gopt.variant,
                        "variant name, or 'all' (default)");
  gradcheck->add_option("--seed", gopt.seed, "model/data seed");
  gradcheck->add_option("--ordering", g_ordering, "ama or mam");
  gradcheck->add_option("--k", g_k, "refinement count")
      ->check(CLI::PositiveNumber);
  gradcheck->add_option("--lnv-mode", g_lnv_mode, "end_only or every_update");
  gradcheck
      ->add_option("--corrupt-grad", gopt.corrupt_grad,
                   "negate this parameter's gradient (fault injection)")
      ->group("");

  depthkit::DatapipeDumpOptions dopt;
  CLI::App* dump = app.add_subcommand(
      "datapipe-dump", "print the deterministic training windows");
  dump->add_option("--corpus", dopt.corpus_path, "corpus file or directory")
      ->required();
  dump->add_option("--separator", dopt.separator, "document separator line");
  dump->add_option("--context", dopt.context, "window length");
  dump->add_option("--batch-size", dopt.batch_sequences, "windows per batch");
  dump->add_option("--batches", dopt.batches, "batches to print");
  dump->add_option("--val-fraction", dopt.val_fraction, "held-out fraction");
  dump->add_option("--seed", dopt.seed, "split/order seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return depthkit::kExitConfig;
  }

  if (*train) {
    return depthkit::cmd_train(config_path, slots.resolve(train), std::cout,
                               std::cerr);
  }
  if (*compare) {
    return depthkit::cmd_compare(config_path, variants, slots.resolve(compare),
                                 std::cout, std::cerr);
  }
  if (*paramcount) {
    return depthkit::cmd_paramcount(pc_layers, pc_heads, pc_dim, pc_vocab,
                                    pc_variant, pc_context, std::cout,
                                    std::cerr);
  }
  if (*gradcheck) {
    if (gradcheck->count("--ordering")) gopt.ordering = g_ordering;
    if (gradcheck->count("--k")) gopt.k = g_k;
    if (gradcheck->count("--lnv-mode")) gopt.lnv_mode = g_lnv_mode;
    return depthkit::cmd_gradcheck(gopt, std::cout, std::cerr);
  }
  if (*dump) {
    return depthkit::cmd_datapipe_dump(dopt, std::cout, std::cerr);
  }
  return depthkit::kExitConfig;
}
