#pragma once

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hmdrn/checkpoint.hpp"
#include "hmdrn/episodic.hpp"
#include "hmdrn/visualize.hpp"

namespace hmdrn {

// The CLI verbs as library functions; the binary in tools/ only parses flags.
// Every function returns a process exit code and reports errors on `err`.

struct GendataOptions {
  SynthConfig synth;
  fs::path out_dir;
};

inline int cmd_gendata(const GendataOptions& opt, std::ostream& out,
                       std::ostream& err) {
  try {
    auto meta = generate_synthetic(opt.synth, opt.out_dir);
    auto index = load_dataset(opt.out_dir);
    out << "dataset at " << opt.out_dir.string() << "\n"
        << "  train: " << index.train.size() << " classes\n"
        << "  val:   " << index.val.size() << " classes\n"
        << "  test:  " << index.test.size() << " classes\n"
        << "  images per class: " << opt.synth.images_per_class << "\n"
        << "  patch-template oracle accuracy: " << meta.oracle_accuracy
        << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "gendata: " << e.what() << "\n";
    return 1;
  }
}

struct TrainOptions {
  TrainConfig train;
  fs::path data_root;
  fs::path out_dir;
  fs::path checkpoint_path;  // empty -> out_dir/best.ckpt
  std::optional<fs::path> resume;
};

inline int cmd_train(const TrainOptions& opt, std::ostream& out,
                     std::ostream& err) {
  try {
    const auto index = load_dataset(opt.data_root);
    fs::create_directories(opt.out_dir);
    const fs::path ck_path = opt.checkpoint_path.empty()
                                 ? opt.out_dir / "best.ckpt"
                                 : opt.checkpoint_path;
    std::ofstream metrics(opt.out_dir / "metrics.jsonl", std::ios::app);
    if (!metrics)
      throw TrainError("cannot open metrics log under " +
                       opt.out_dir.string());

    std::optional<Model<float>> resumed;
    std::uint32_t first_epoch = 0;
    if (opt.resume) {
      auto ck = load_checkpoint<float>(*opt.resume);
      resumed = model_from_checkpoint(ck);
      first_epoch = ck.epoch + 1;
      out << "resuming from " << opt.resume->string() << " at epoch "
          << first_epoch << "\n";
    }

    Checkpoint<float> best;
    auto result = train<float>(
        opt.train, index, best,
        [&](const nlohmann::json& j) { metrics << j.dump() << "\n"; },
        resumed ? &*resumed : nullptr, first_epoch);
    save_checkpoint(best, ck_path);
    out << "best val accuracy " << result.best_val_accuracy << " at epoch "
        << result.best_epoch << "\n"
        << "checkpoint: " << ck_path.string() << "\n"
        << "metrics: " << (opt.out_dir / "metrics.jsonl").string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "train: " << e.what() << "\n";
    return 1;
  }
}

struct EvalOptions {
  fs::path checkpoint;
  fs::path data_root;
  std::string split = "test";
  std::size_t n_tasks = 10000;
  std::size_t way = 5, shot = 1, queries = 15;
  std::uint64_t seed = 0;
  std::size_t image_size = 84;
  fs::path record_path;  // optional JSONL sink
};

inline int cmd_eval(const EvalOptions& opt, std::ostream& out,
                    std::ostream& err) {
  try {
    auto ck = load_checkpoint<float>(opt.checkpoint);
    auto model = model_from_checkpoint(ck);
    const auto index = load_dataset(opt.data_root);
    const auto stats = compute_channel_stats(index.train);
    auto result =
        evaluate(model, index.split(opt.split), opt.n_tasks, opt.way,
                 opt.shot, opt.queries, opt.seed, stats, opt.image_size);
    nlohmann::json j{{"type", "eval"},
                     {"checkpoint", opt.checkpoint.string()},
                     {"split", opt.split},
                     {"way", opt.way},
                     {"shot", opt.shot},
                     {"queries", opt.queries},
                     {"n_tasks", result.n_tasks},
                     {"seed", opt.seed},
                     {"mean", result.mean_accuracy},
                     {"ci95", result.ci95}};
    out << opt.way << "-way " << opt.shot << "-shot " << opt.split << ": "
        << result.mean_accuracy * 100 << " +/- " << result.ci95 * 100
        << " (" << result.n_tasks << " tasks)\n";
    if (!opt.record_path.empty()) {
      std::ofstream rec(opt.record_path, std::ios::app);
      rec << j.dump() << "\n";
    }
    return 0;
  } catch (const std::exception& e) {
    err << "eval: " << e.what() << "\n";
    return 1;
  }
}

struct AblateOptions {
  TrainConfig base;  // variant/seed fields are overwritten per run
  fs::path data_root;
  fs::path out_dir;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t eval_tasks = 200;
  std::size_t eval_way = 5, eval_queries = 15;
  std::vector<std::size_t> eval_shots{1, 5};
  std::uint64_t eval_seed = 4242;
};

struct AblateCell {
  double mean = 0, ci95 = 0;
  std::vector<double> per_seed;
};

struct AblateRow {
  Variant variant;
  std::vector<AblateCell> by_shot;
};

// Trains and evaluates every variant under the shared budget/seed set.
// Orchestration only: each (variant, seed) run is exactly a cmd_train-style
// train() followed by cmd_eval-style evaluate() calls.
inline std::vector<AblateRow> run_ablation(const AblateOptions& opt,
                                           const DatasetIndex& index,
                                           std::ostream& progress) {
  const auto stats = compute_channel_stats(index.train);
  std::vector<AblateRow> rows;
  for (Variant v : kAllVariants) {
    AblateRow row;
    row.variant = v;
    row.by_shot.resize(opt.eval_shots.size());
    for (std::uint64_t seed : opt.seeds) {
      TrainConfig cfg = opt.base;
      cfg.variant = v;
      cfg.seed = seed;
      Checkpoint<float> best;
      (void)train<float>(cfg, index, best);
      auto model = model_from_checkpoint(best);
      for (std::size_t si = 0; si < opt.eval_shots.size(); ++si) {
        auto r = evaluate(model, index.test, opt.eval_tasks, opt.eval_way,
                          opt.eval_shots[si], opt.eval_queries, opt.eval_seed,
                          stats, cfg.image_size);
        row.by_shot[si].per_seed.push_back(r.mean_accuracy);
      }
      progress << "  " << variant_display(v) << " seed " << seed << " done\n";
    }
    for (auto& cell : row.by_shot) {
      auto s = summarize_accuracies(cell.per_seed.size() > 1
                                        ? cell.per_seed
                                        : std::vector<double>{
                                              cell.per_seed[0],
                                              cell.per_seed[0]});
      cell.mean = s.mean_accuracy;
      cell.ci95 = cell.per_seed.size() > 1 ? s.ci95 : 0.0;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline int cmd_ablate(const AblateOptions& opt, std::ostream& out,
                      std::ostream& err) {
  try {
    const auto index = load_dataset(opt.data_root);
    fs::create_directories(opt.out_dir);
    auto rows = run_ablation(opt, index, out);

    std::ofstream table(opt.out_dir / "ablation.jsonl");
    out << "\nvariant";
    for (std::size_t s : opt.eval_shots) out << "  |  " << s << "-shot";
    out << "\n";
    for (const auto& row : rows) {
      nlohmann::json j{{"type", "ablation_row"},
                       {"variant", variant_id(row.variant)},
                       {"display", variant_display(row.variant)},
                       {"seeds", opt.seeds}};
      out << variant_display(row.variant);
      for (std::size_t si = 0; si < opt.eval_shots.size(); ++si) {
        const auto& cell = row.by_shot[si];
        j[std::to_string(opt.eval_shots[si]) + "shot"] = {
            {"mean", cell.mean},
            {"ci95", cell.ci95},
            {"per_seed", cell.per_seed}};
        out << "  |  " << cell.mean * 100 << " +/- " << cell.ci95 * 100;
      }
      out << "\n";
      table << j.dump() << "\n";
    }
    out << "table: " << (opt.out_dir / "ablation.jsonl").string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "ablate: " << e.what() << "\n";
    return 1;
  }
}

struct VisualizeOptions {
  fs::path checkpoint;
  fs::path data_root;  // for normalization statistics
  std::vector<fs::path> images;
  fs::path out_dir;
  std::size_t image_size = 84;
};

inline int cmd_visualize(const VisualizeOptions& opt, std::ostream& out,
                         std::ostream& err) {
  try {
    auto ck = load_checkpoint<float>(opt.checkpoint);
    auto model = model_from_checkpoint(ck);
    const auto index = load_dataset(opt.data_root);
    const auto stats = compute_channel_stats(index.train);
    fs::create_directories(opt.out_dir);
    for (const auto& path : opt.images) {
      const Image raw = read_ppm(path);
      auto vis = visualize_image(model, raw, stats, opt.image_size);
      const std::string stem = path.stem().string();
      write_ppm(opt.out_dir / (stem + "_heat_high.ppm"), vis.heat_high);
      write_ppm(opt.out_dir / (stem + "_heat_mid.ppm"), vis.heat_mid);
      for (const auto& [tag, img] : vis.masks)
        write_ppm(opt.out_dir / (stem + "_" + tag + ".ppm"), img);
      out << stem << ": wrote " << 2 + vis.masks.size() << " files\n";
    }
    return 0;
  } catch (const std::exception& e) {
    err << "visualize: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace hmdrn
