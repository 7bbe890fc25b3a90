#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <string>

#include "hmdrn/commands.hpp"

namespace {

std::string default_data_root() {
  const char* env = std::getenv("HMDRN_DATA_ROOT");
  return env ? env : "data";
}

void add_config(CLI::App* cmd) {
  cmd->set_config("--config", "", "Read options from a TOML/INI file");
  cmd->allow_config_extras(CLI::config_extras_mode::error);
}

void add_model_flags(CLI::App* cmd, hmdrn::TrainConfig& cfg,
                     std::string& backbone, std::string& variant) {
  cmd->add_option("--backbone", backbone, "Feature extractor: conv4|resnet12")
      ->capture_default_str();
  cmd->add_option("--variant", variant,
                  "baseline|r1|r2|mtfem_r1|mtfem_r2|clarm|full")
      ->capture_default_str();
  cmd->add_option("--mtfem-layers", cfg.mtfem.layers, "Encoder layers")
      ->capture_default_str();
  cmd->add_option("--mtfem-heads", cfg.mtfem.heads, "Attention heads")
      ->capture_default_str();
  cmd->add_option("--mtfem-hidden-ratio", cfg.mtfem.hidden_ratio,
                  "MLP hidden width as a multiple of the channel width")
      ->capture_default_str();
  cmd->add_option("--conv4-channels", cfg.conv4.channels,
                  "Conv-4 channel width")
      ->capture_default_str();
  cmd->add_option("--conv4-blocks", cfg.conv4.blocks, "Conv-4 block count")
      ->capture_default_str();
}

void add_train_flags(CLI::App* cmd, hmdrn::TrainConfig& cfg) {
  cmd->add_option("--way", cfg.way,
                  "Training way (0 = backbone default: 30 conv4 / 10 resnet12)")
      ->capture_default_str();
  cmd->add_option("--shot", cfg.shot, "Training shot")->capture_default_str();
  cmd->add_option("--train-queries", cfg.train_queries,
                  "Query images per class in training episodes")
      ->capture_default_str();
  cmd->add_option("--epochs", cfg.epochs, "Training epochs")
      ->capture_default_str();
  cmd->add_option("--episodes-per-epoch", cfg.episodes_per_epoch,
                  "Episodes (optimizer steps) per epoch")
      ->capture_default_str();
  cmd->add_option("--lr", cfg.lr_init, "Initial learning rate")
      ->capture_default_str();
  cmd->add_option("--momentum", cfg.momentum, "Nesterov momentum")
      ->capture_default_str();
  cmd->add_option("--weight-decay", cfg.weight_decay, "Coupled L2 decay")
      ->capture_default_str();
  cmd->add_option("--stage-length", cfg.stage_length,
                  "Cosine warm-restart stage length in epochs")
      ->capture_default_str();
  cmd->add_option("--val-interval", cfg.val_interval,
                  "Validate every N epochs")
      ->capture_default_str();
  cmd->add_option("--val-tasks", cfg.val_tasks, "Validation task count")
      ->capture_default_str();
  cmd->add_option("--val-way", cfg.val_way, "Validation way")
      ->capture_default_str();
  cmd->add_option("--val-shot", cfg.val_shot, "Validation shot")
      ->capture_default_str();
  cmd->add_option("--val-queries", cfg.val_queries,
                  "Validation queries per class")
      ->capture_default_str();
  cmd->add_option("--image-size", cfg.image_size, "Input image side")
      ->capture_default_str();
  cmd->add_option("--seed", cfg.seed, "Run seed")->capture_default_str();
  cmd->add_flag("!--no-augment", cfg.augment.enabled,
                "Disable training augmentation");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical mask-enhanced dual reconstruction network"};
  app.require_subcommand(1);

  // gendata ------------------------------------------------------------
  hmdrn::GendataOptions gen;
  gen.out_dir = default_data_root();
  auto* gendata = app.add_subcommand("gendata", "Generate synthetic dataset");
  add_config(gendata);
  gendata->add_option("--out", gen.out_dir, "Output directory")
      ->capture_default_str();
  gendata->add_option("--train-classes", gen.synth.train_classes)
      ->capture_default_str();
  gendata->add_option("--val-classes", gen.synth.val_classes)
      ->capture_default_str();
  gendata->add_option("--test-classes", gen.synth.test_classes)
      ->capture_default_str();
  gendata->add_option("--images-per-class", gen.synth.images_per_class)
      ->capture_default_str();
  gendata->add_option("--image-size", gen.synth.image_size)
      ->capture_default_str();
  gendata->add_option("--patch-size", gen.synth.patch_size)
      ->capture_default_str();
  gendata->add_option("--bg-noise", gen.synth.bg_noise)
      ->capture_default_str();
  gendata->add_option("--patch-noise", gen.synth.patch_noise)
      ->capture_default_str();
  gendata->add_option("--oracle-tasks", gen.synth.oracle_tasks,
                      "Template-matching oracle task count")
      ->capture_default_str();
  gendata->add_option("--seed", gen.synth.seed)->capture_default_str();

  // train ---------------------------------------------------------------
  hmdrn::TrainOptions tr;
  tr.data_root = default_data_root();
  tr.out_dir = "runs/train";
  std::string tr_backbone = "conv4", tr_variant = "full";
  std::string tr_resume;
  auto* train_cmd = app.add_subcommand("train", "Meta-train a model");
  add_config(train_cmd);
  train_cmd->add_option("--data", tr.data_root, "Dataset root")
      ->capture_default_str();
  train_cmd->add_option("--out", tr.out_dir, "Run output directory")
      ->capture_default_str();
  train_cmd->add_option("--checkpoint", tr.checkpoint_path,
                        "Best-checkpoint path (default <out>/best.ckpt)");
  train_cmd->add_option("--resume", tr_resume, "Checkpoint to resume from");
  add_model_flags(train_cmd, tr.train, tr_backbone, tr_variant);
  add_train_flags(train_cmd, tr.train);

  // eval ----------------------------------------------------------------
  hmdrn::EvalOptions ev;
  ev.data_root = default_data_root();
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_config(eval_cmd);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint path")
      ->required();
  eval_cmd->add_option("--data", ev.data_root, "Dataset root")
      ->capture_default_str();
  eval_cmd->add_option("--split", ev.split, "train|val|test")
      ->capture_default_str();
  eval_cmd->add_option("--tasks", ev.n_tasks, "Task count")
      ->capture_default_str();
  eval_cmd->add_option("--way", ev.way)->capture_default_str();
  eval_cmd->add_option("--shot", ev.shot)->capture_default_str();
  eval_cmd->add_option("--queries", ev.queries)->capture_default_str();
  eval_cmd->add_option("--seed", ev.seed)->capture_default_str();
  eval_cmd->add_option("--image-size", ev.image_size)->capture_default_str();
  eval_cmd->add_option("--record", ev.record_path,
                       "Append the result record to this JSONL file");

  // ablate ----------------------------------------------------------------
  hmdrn::AblateOptions ab;
  ab.data_root = default_data_root();
  ab.out_dir = "runs/ablation";
  std::string ab_backbone = "conv4", ab_variant_unused = "full";
  auto* ablate_cmd =
      app.add_subcommand("ablate", "Train and evaluate all seven variants");
  add_config(ablate_cmd);
  ablate_cmd->add_option("--data", ab.data_root, "Dataset root")
      ->capture_default_str();
  ablate_cmd->add_option("--out", ab.out_dir, "Output directory")
      ->capture_default_str();
  add_model_flags(ablate_cmd, ab.base, ab_backbone, ab_variant_unused);
  add_train_flags(ablate_cmd, ab.base);
  ablate_cmd->add_option("--seeds", ab.seeds, "Seed set shared by all runs")
      ->capture_default_str();
  ablate_cmd->add_option("--eval-tasks", ab.eval_tasks)->capture_default_str();
  ablate_cmd->add_option("--eval-way", ab.eval_way)->capture_default_str();
  ablate_cmd->add_option("--eval-queries", ab.eval_queries)
      ->capture_default_str();
  ablate_cmd->add_option("--eval-shots", ab.eval_shots)
      ->capture_default_str();
  ablate_cmd->add_option("--eval-seed", ab.eval_seed)->capture_default_str();

  // visualize ---------------------------------------------------------------
  hmdrn::VisualizeOptions vis;
  vis.data_root = default_data_root();
  vis.out_dir = "runs/visualize";
  auto* vis_cmd =
      app.add_subcommand("visualize", "Heatmaps and MTFEM mask grids");
  add_config(vis_cmd);
  vis_cmd->add_option("--checkpoint", vis.checkpoint, "Checkpoint path")
      ->required();
  vis_cmd->add_option("--data", vis.data_root,
                      "Dataset root (normalization statistics)")
      ->capture_default_str();
  vis_cmd->add_option("--out", vis.out_dir, "Output directory")
      ->capture_default_str();
  vis_cmd->add_option("--image-size", vis.image_size)->capture_default_str();
  vis_cmd->add_option("images", vis.images, "Input PPM images")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gendata) return hmdrn::cmd_gendata(gen, std::cout, std::cerr);
    if (*train_cmd) {
      tr.train.backbone = hmdrn::backbone_from_id(tr_backbone);
      tr.train.variant = hmdrn::variant_from_id(tr_variant);
      if (!tr_resume.empty()) tr.resume = tr_resume;
      return hmdrn::cmd_train(tr, std::cout, std::cerr);
    }
    if (*eval_cmd) return hmdrn::cmd_eval(ev, std::cout, std::cerr);
    if (*ablate_cmd) {
      ab.base.backbone = hmdrn::backbone_from_id(ab_backbone);
      return hmdrn::cmd_ablate(ab, std::cout, std::cerr);
    }
    if (*vis_cmd) return hmdrn::cmd_visualize(vis, std::cout, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "hmdrn: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
