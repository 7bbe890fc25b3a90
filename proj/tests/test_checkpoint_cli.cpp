#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "hmdrn/commands.hpp"

using namespace hmdrn;

namespace {

fs::path fresh_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("hmdrn_cli_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SynthConfig tiny_synth() {
  SynthConfig cfg;
  cfg.train_classes = 4;
  cfg.val_classes = 3;
  cfg.test_classes = 3;
  cfg.images_per_class = 6;
  cfg.image_size = 16;
  cfg.patch_size = 6;
  cfg.patch_cells = 2;
  cfg.oracle_tasks = 0;
  cfg.seed = 31;
  return cfg;
}

TrainConfig tiny_train(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.variant = Variant::Full;
  cfg.conv4.channels = 8;
  cfg.conv4.blocks = 2;
  cfg.mtfem.layers = 1;
  cfg.mtfem.hidden_ratio = 2;
  cfg.way = 2;
  cfg.shot = 1;
  cfg.train_queries = 2;
  cfg.lr_init = 0.01;
  cfg.epochs = 2;
  cfg.episodes_per_epoch = 2;
  cfg.stage_length = 3;
  cfg.val_interval = 2;
  cfg.val_tasks = 3;
  cfg.val_way = 2;
  cfg.val_shot = 1;
  cfg.val_queries = 2;
  cfg.image_size = 16;
  cfg.seed = seed;
  return cfg;
}

Model<float> tiny_trained_model(const fs::path& data_dir, Checkpoint<float>& ck) {
  auto index = load_dataset(data_dir);
  auto cfg = tiny_train(5);
  (void)train<float>(cfg, index, ck);
  return model_from_checkpoint(ck);
}

}  // namespace

TEST_CASE("checkpoint: byte-identical round trip") {
  Rng rng(1);
  ModelConfig mc;
  mc.variant = Variant::Full;
  mc.conv4.channels = 8;
  mc.conv4.blocks = 2;
  mc.mtfem.layers = 1;
  auto model = Model<float>::init(mc, rng);
  auto ck = make_checkpoint(model, 7, 0.625, 99);
  auto bytes = serialize_checkpoint(ck);
  auto back = deserialize_checkpoint<float>(bytes);
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(back.epoch == 7);
  CHECK(back.val_accuracy == 0.625);
  CHECK(back.seed == 99);
  CHECK(back.params.size() == ck.params.size());
}

TEST_CASE("checkpoint: truncation and corruption are clear errors") {
  Rng rng(2);
  ModelConfig mc;
  mc.variant = Variant::R1;
  mc.conv4.channels = 8;
  mc.conv4.blocks = 2;
  auto model = Model<float>::init(mc, rng);
  auto bytes = serialize_checkpoint(make_checkpoint(model, 0, 0.0, 0));

  auto truncated = bytes;
  truncated.resize(truncated.size() - 17);
  CHECK_THROWS_AS((void)deserialize_checkpoint<float>(truncated),
                  CheckpointError);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS((void)deserialize_checkpoint<float>(bad_magic),
                  CheckpointError);

  // wrong dtype on load
  CHECK_THROWS_AS((void)deserialize_checkpoint<double>(bytes),
                  CheckpointError);

  // flipping the variant makes the manifest disagree with the model
  auto bad_variant = bytes;
  bad_variant[9] = std::uint8_t(Variant::Full);
  auto ck = deserialize_checkpoint<float>(bad_variant);
  CHECK_THROWS_AS((void)model_from_checkpoint(ck), CheckpointError);
}

TEST_CASE("checkpoint: reload preserves model outputs exactly") {
  auto data = fresh_dir("ckpt_data");
  generate_synthetic(tiny_synth(), data);
  Checkpoint<float> ck;
  auto model = tiny_trained_model(data, ck);

  auto dir = fresh_dir("ckpt_io");
  save_checkpoint(ck, dir / "m.ckpt");
  auto reloaded_ck = load_checkpoint<float>(dir / "m.ckpt");
  auto reloaded = model_from_checkpoint(reloaded_ck);

  Rng rng(3);
  EpisodeShape shape{2, 1, 2};
  auto images =
      Tensor<float>::normal(rng, {shape.total(), 3, 16, 16}, 0.f, 1.f);
  auto a = model.classify_episode(images, shape, false);
  auto b = reloaded.classify_episode(images, shape, false);
  CHECK(a.scores.values() == b.scores.values());
  CHECK(a.loss.item() == b.loss.item());
}

TEST_CASE("cmd_gendata: success and unwritable destination") {
  auto dir = fresh_dir("cmd_gen");
  GendataOptions opt;
  opt.synth = tiny_synth();
  opt.out_dir = dir / "ds";
  std::ostringstream out, err;
  CHECK(cmd_gendata(opt, out, err) == 0);
  CHECK(out.str().find("train: 4 classes") != std::string::npos);

  std::ofstream blocker(dir / "file");
  blocker << "x";
  blocker.close();
  GendataOptions bad = opt;
  bad.out_dir = dir / "file" / "nested";
  std::ostringstream out2, err2;
  CHECK(cmd_gendata(bad, out2, err2) != 0);
  CHECK(!err2.str().empty());
}

TEST_CASE("cmd_train: smoke run, record counts, resume") {
  auto data = fresh_dir("cmd_train_data");
  generate_synthetic(tiny_synth(), data);

  TrainOptions opt;
  opt.train = tiny_train(11);
  opt.data_root = data;
  opt.out_dir = fresh_dir("cmd_train_run");
  std::ostringstream out, err;
  REQUIRE(cmd_train(opt, out, err) == 0);
  CHECK(fs::exists(opt.out_dir / "best.ckpt"));

  // 2 epochs + 1 validation (epoch 2 is both interval and last)
  std::ifstream metrics(opt.out_dir / "metrics.jsonl");
  std::string line;
  std::size_t epochs = 0, vals = 0;
  while (std::getline(metrics, line)) {
    auto j = nlohmann::json::parse(line);
    if (j.at("type") == "epoch") ++epochs;
    if (j.at("type") == "val") ++vals;
    CHECK(j.contains("w1"));
    CHECK(j.contains("w2"));
    CHECK(j.contains("tau"));
  }
  CHECK(epochs == 2);
  CHECK(vals == 1);

  TrainOptions resume = opt;
  resume.out_dir = fresh_dir("cmd_train_resume");
  resume.resume = opt.out_dir / "best.ckpt";
  std::ostringstream out2, err2;
  REQUIRE(cmd_train(resume, out2, err2) == 0);
  std::ifstream metrics2(resume.out_dir / "metrics.jsonl");
  std::getline(metrics2, line);
  CHECK(nlohmann::json::parse(line).at("epoch").get<int>() >= 2);
}

TEST_CASE("cmd_eval: result record and failure paths") {
  auto data = fresh_dir("cmd_eval_data");
  generate_synthetic(tiny_synth(), data);
  Checkpoint<float> ck;
  (void)tiny_trained_model(data, ck);
  auto dir = fresh_dir("cmd_eval_run");
  save_checkpoint(ck, dir / "m.ckpt");

  EvalOptions opt;
  opt.checkpoint = dir / "m.ckpt";
  opt.data_root = data;
  opt.n_tasks = 4;
  opt.way = 2;
  opt.shot = 1;
  opt.queries = 2;
  opt.image_size = 16;
  opt.record_path = dir / "eval.jsonl";
  std::ostringstream out, err;
  CHECK(cmd_eval(opt, out, err) == 0);
  CHECK(out.str().find("2-way 1-shot") != std::string::npos);
  std::ifstream rec(dir / "eval.jsonl");
  std::string line;
  REQUIRE(std::getline(rec, line));
  auto j = nlohmann::json::parse(line);
  CHECK(j.at("n_tasks") == 4);
  CHECK(j.at("mean").get<double>() >= 0.0);

  // same seed -> identical printed numbers
  std::ostringstream out_b, err_b;
  CHECK(cmd_eval(opt, out_b, err_b) == 0);
  CHECK(out.str() == out_b.str());

  EvalOptions missing = opt;
  missing.checkpoint = dir / "absent.ckpt";
  std::ostringstream out2, err2;
  CHECK(cmd_eval(missing, out2, err2) != 0);
}

TEST_CASE("cmd_ablate: seven rows matching individual train+eval runs") {
  auto data = fresh_dir("cmd_abl_data");
  generate_synthetic(tiny_synth(), data);
  auto index = load_dataset(data);

  AblateOptions opt;
  opt.base = tiny_train(0);
  opt.base.epochs = 1;
  opt.base.val_tasks = 2;
  opt.data_root = data;
  opt.out_dir = fresh_dir("cmd_abl_out");
  opt.seeds = {21, 22};
  opt.eval_tasks = 4;
  opt.eval_way = 2;
  opt.eval_queries = 2;
  opt.eval_shots = {1};
  opt.eval_seed = 777;

  std::ostringstream out, err;
  REQUIRE(cmd_ablate(opt, out, err) == 0);
  std::ifstream table(opt.out_dir / "ablation.jsonl");
  std::vector<nlohmann::json> rows;
  std::string line;
  while (std::getline(table, line))
    rows.push_back(nlohmann::json::parse(line));
  REQUIRE(rows.size() == 7);
  for (std::size_t i = 0; i < 7; ++i)
    CHECK(rows[i].at("variant") == variant_id(kAllVariants[i]));

  // orchestration contract: one cell equals an individual train+eval
  TrainConfig cfg = opt.base;
  cfg.variant = Variant::R2;
  cfg.seed = 22;
  Checkpoint<float> best;
  (void)train<float>(cfg, index, best);
  auto model = model_from_checkpoint(best);
  auto stats = compute_channel_stats(index.train);
  auto direct = evaluate(model, index.test, opt.eval_tasks, opt.eval_way, 1,
                         opt.eval_queries, opt.eval_seed, stats,
                         cfg.image_size);
  const auto& cell = rows[2].at("1shot");
  CHECK(cell.at("per_seed")[1].get<double>() ==
        doctest::Approx(direct.mean_accuracy).epsilon(1e-12));
}

TEST_CASE("cmd_visualize: heatmap dimensions and mask grids") {
  auto data = fresh_dir("cmd_vis_data");
  generate_synthetic(tiny_synth(), data);
  Checkpoint<float> ck;
  (void)tiny_trained_model(data, ck);
  auto dir = fresh_dir("cmd_vis_out");
  save_checkpoint(ck, dir / "m.ckpt");

  VisualizeOptions opt;
  opt.checkpoint = dir / "m.ckpt";
  opt.data_root = data;
  opt.out_dir = dir / "vis";
  opt.image_size = 16;
  auto index = load_dataset(data);
  opt.images = {index.test[0].images[0]};
  std::ostringstream out, err;
  REQUIRE(cmd_visualize(opt, out, err) == 0);

  const std::string stem = opt.images[0].stem().string();
  auto heat = read_ppm(opt.out_dir / (stem + "_heat_high.ppm"));
  CHECK(heat.width == 16);
  CHECK(heat.height == 16);
  // mtfem layers=1, heads=2, two levels -> 4 mask grids
  std::size_t masks = 0;
  for (auto& e : fs::directory_iterator(opt.out_dir))
    masks += e.path().string().find("_mask_") != std::string::npos;
  CHECK(masks == 4);
  // level-1 grid is 4x4 cells at 8 px per cell
  auto grid = read_ppm(opt.out_dir / (stem + "_mask_l1_layer0_head0.ppm"));
  CHECK(grid.width == 4 * 8);
  CHECK(grid.height == 4 * 8);
}

TEST_CASE("visualize helpers: constant map gives a uniform heatmap") {
  auto map = Tensor<float>::full({8, 3, 3}, 2.0f);
  auto energy = activation_energy(map);
  for (float v : energy) CHECK(v == 0.5f);

  Image base;
  base.width = base.height = 6;
  base.rgb.assign(6 * 6 * 3, 100);
  auto heat = render_heatmap(base, energy, 3, 3);
  for (std::size_t i = 3; i < heat.rgb.size(); ++i)
    CHECK(heat.rgb[i] == heat.rgb[i % 3]);

  std::vector<float> mask{1, 0, 0, 1};
  auto grid = render_mask_grid(mask, 2, 2, 4);
  CHECK(grid.width == 8);
  CHECK(grid.height == 8);
  CHECK(grid.at(0, 0, 0) == 255);
  CHECK(grid.at(7, 0, 0) == 0);
  CHECK(grid.at(7, 7, 0) == 255);
}
