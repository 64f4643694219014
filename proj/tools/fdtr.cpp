// fdtr: dataset generation, foundation pretraining, detector training,
// evaluation, ablation sweeps and visualization.
//
// Settings resolve as: defaults < config file < FDTR_SEED < --set < flags.
// Exit status: 0 success, 1 contract or usage error, 2 I/O error.

#include <filesystem>
#include <iostream>
#include <sstream>
#include <tuple>

#include "CLI11.hpp"

#include "fdtr/commands.hpp"

namespace {

using fdtr::RunConfig;

struct Override {
  std::string section, key, value;
};

// Named flags are recorded as config assignments and applied in order after
// the file, so both paths share one validator.
struct Flags {
  std::vector<Override> list;

  CLI::Option* add(CLI::App& app, const std::string& name, const std::string& section, const std::string& key,
                   const std::string& help) {
    return app.add_option_function<std::string>(
        name, [this, section, key](const std::string& v) { list.push_back({section, key, v}); }, help);
  }
  CLI::Option* flag(CLI::App& app, const std::string& name, const std::string& section, const std::string& key,
                    const std::string& help) {
    return app.add_flag_callback(name, [this, section, key] { list.push_back({section, key, "on"}); }, help);
  }
};

template <class T, class F>
std::vector<T> parse_list(const std::string& s, F parse) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse(item));
  return out;
}

bool parse_on_off(const std::string& s) {
  if (s == "on" || s == "true" || s == "1") return true;
  if (s == "off" || s == "false" || s == "0") return false;
  throw fdtr::ContractError("expected on/off, got '" + s + "'");
}

int parse_int(const std::string& s) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw fdtr::ContractError("expected an integer, got '" + s + "'");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frozen foundation-model feature enhancers for a DETR-style detector"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  std::string config_path;
  std::vector<std::string> assignments;
  Flags flags;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "INI config file ([section] key=value)");
    sub->add_option("--set", assignments, "Override: section.key=value (repeatable)");
    flags.add(*sub, "--seed", "run", "seed", "Random seed (FDTR_SEED overrides the file)");
    flags.add(*sub, "--workers", "run", "workers", "Threads for generation and evaluation");
    flags.add(*sub, "--data", "run", "data_dir", "Dataset directory");
    flags.add(*sub, "--out", "run", "out_dir", "Output directory");
  };
  auto detector_flags = [&](CLI::App* sub) {
    flags.add(*sub, "--foundation", "foundation", "checkpoints", "Foundation checkpoint(s), comma separated");
    flags.add(*sub, "--image-queries", "detector", "image_queries", "Image queries per enhancer: 0, 1 or 1+g^2");
    flags.add(*sub, "--fuse-patches", "detector", "fuse_patches", "Fuse foundation patch tokens: on|off");
    flags.add(*sub, "--strategy", "foundation", "strategy", "crop|mean_patch|masked_class_tokens");
    flags.add(*sub, "--enhancers", "detector", "enhancers", "Number of frozen enhancers");
    flags.add(*sub, "--foundation-size", "foundation", "image_size", "Foundation input size in pixels");
    flags.flag(*sub, "--allow-trainable-foundation", "foundation", "allow_trainable",
               "Train through the foundation model instead of keeping it frozen");
  };

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset split");
  common(gen);
  fdtr::GenOptions gen_opt;
  std::string split = "train";
  flags.add(*gen, "--n", "scene", "n", "Number of images");
  flags.add(*gen, "--canvas", "scene", "canvas", "Image side in pixels");
  gen->add_option("--split", split, "train|val")->check(CLI::IsMember({"train", "val"}));
  gen->add_flag("--force", gen_opt.force, "Replace an existing corpus");

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain and freeze a foundation encoder");
  common(pretrain);
  flags.add(*pretrain, "--foundation-size", "foundation", "image_size", "Foundation input size in pixels");
  flags.add(*pretrain, "--epochs", "pretrain", "epochs", "Proxy-task epochs");
  flags.flag(*pretrain, "--random-frozen", "pretrain", "random_frozen", "Skip training; freeze the random init");
  std::string pretrain_out;
  pretrain->add_option("--checkpoint", pretrain_out, "Output checkpoint (default OUT/foundation.ckpt)");

  auto* train = app.add_subcommand("train", "Train a detector");
  common(train);
  detector_flags(train);
  flags.add(*train, "--val", "run", "val_dir", "Validation dataset directory");
  flags.add(*train, "--epochs", "train", "epochs", "Training epochs");
  flags.add(*train, "--batch", "train", "batch", "Batch size");
  flags.add(*train, "--lr", "train", "lr", "Learning rate");
  flags.add(*train, "--lr-drop", "train", "lr_drop", "Divide the learning rate by 10 after this epoch");
  flags.add(*train, "--max-steps", "train", "max_steps", "Stop after this many steps");

  auto* eval = app.add_subcommand("eval", "Evaluate a detector checkpoint");
  common(eval);
  detector_flags(eval);
  flags.add(*eval, "--checkpoint", "run", "checkpoint", "Detector checkpoint");

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate a grid of configurations");
  common(ablate);
  flags.add(*ablate, "--foundation", "foundation", "checkpoints", "Foundation checkpoint(s), comma separated");
  flags.add(*ablate, "--val", "run", "val_dir", "Validation dataset directory");
  flags.add(*ablate, "--epochs", "train", "epochs", "Training epochs");
  std::string g_iq, g_fuse, g_strategy, g_enh, g_size, g_trainable;
  ablate->add_option("--image-queries", g_iq, "List, e.g. 0,1,5");
  ablate->add_option("--fuse-patches", g_fuse, "List, e.g. off,on");
  ablate->add_option("--strategy", g_strategy, "List of strategies");
  ablate->add_option("--enhancers", g_enh, "List, e.g. 1,2");
  ablate->add_option("--foundation-size", g_size, "List of foundation input sizes");
  ablate->add_option("--trainable", g_trainable, "List, e.g. off,on");

  auto* vis = app.add_subcommand("visualize", "Write feature-norm maps and prediction overlays");
  common(vis);
  detector_flags(vis);
  flags.add(*vis, "--checkpoint", "run", "checkpoint", "Detector checkpoint");
  flags.add(*vis, "--threshold", "eval", "score_threshold", "Overlay score threshold");
  flags.add(*vis, "--level", "eval", "level", "Encoder level for the norm map");
  flags.add(*vis, "--images", "eval", "images", "Number of images");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    RunConfig cfg;
    std::string file = config_path;
    if (file.empty() && (eval->parsed() || vis->parsed())) {
      // A run directory's config echo describes the checkpoint's architecture.
      for (const auto& o : flags.list)
        if (o.key == "checkpoint") {
          const auto sibling = std::filesystem::path(o.value).parent_path() / "config.ini";
          if (std::filesystem::exists(sibling)) file = sibling.string();
        }
    }
    if (!file.empty()) fdtr::merge_config_file(cfg, file);
    fdtr::apply_env_overrides(cfg);
    for (const auto& a : assignments) cfg.set(a);
    for (const auto& o : flags.list) cfg.set(o.section, o.key, o.value);
    cfg.resolve();

    if (gen->parsed()) {
      gen_opt.split = split == "train" ? 0 : 1;
      fdtr::cmd_gen(cfg, gen_opt, std::cout);
    } else if (pretrain->parsed()) {
      fdtr::cmd_pretrain(cfg, fdtr::PretrainCmdOptions{pretrain_out}, std::cout);
    } else if (train->parsed()) {
      fdtr::cmd_train(cfg, std::cout);
    } else if (eval->parsed()) {
      fdtr::cmd_eval(cfg, std::cout);
    } else if (ablate->parsed()) {
      fdtr::AblationGrid grid;
      grid.image_queries = parse_list<int>(g_iq, parse_int);
      grid.fuse_patches = parse_list<bool>(g_fuse, parse_on_off);
      grid.strategies = parse_list<fdtr::QueryStrategy>(g_strategy, fdtr::parse_strategy);
      grid.enhancers = parse_list<int>(g_enh, parse_int);
      grid.foundation_sizes = parse_list<int>(g_size, parse_int);
      grid.trainable = parse_list<bool>(g_trainable, parse_on_off);
      fdtr::cmd_ablate(cfg, grid, std::cout);
    } else if (vis->parsed()) {
      fdtr::cmd_visualize(cfg, std::cout);
    }
  } catch (const fdtr::IoError& e) {
    std::cerr << "fdtr: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "fdtr: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "fdtr: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
