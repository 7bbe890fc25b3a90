#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "hmdrn/data.hpp"

using namespace hmdrn;

namespace {

fs::path fresh_dir(const std::string& tag) {
  fs::path dir = fs::temp_directory_path() / ("hmdrn_data_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

SynthConfig tiny_synth(std::uint64_t seed) {
  SynthConfig cfg;
  cfg.train_classes = 2;
  cfg.val_classes = 2;
  cfg.test_classes = 2;
  cfg.images_per_class = 2;
  cfg.image_size = 32;
  cfg.patch_size = 8;
  cfg.oracle_tasks = 0;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("ppm: round trip and error paths") {
  auto dir = fresh_dir("ppm");
  Image img;
  img.width = 3;
  img.height = 2;
  img.rgb = {0,  10, 20, 30,  40,  50,  60,  70,  80,
             90, 99, 128, 200, 255, 254, 253, 1,   2};
  write_ppm(dir / "a.ppm", img);
  auto back = read_ppm(dir / "a.ppm");
  CHECK(back.width == 3);
  CHECK(back.height == 2);
  CHECK(back.rgb == img.rgb);

  std::ofstream bad(dir / "bad.ppm", std::ios::binary);
  bad << "P6\n3 2\n255\n12";  // truncated payload
  bad.close();
  CHECK_THROWS_AS((void)read_ppm(dir / "bad.ppm"), DataError);
  CHECK_THROWS_AS((void)read_ppm(dir / "missing.ppm"), DataError);
}

TEST_CASE("generate_synthetic: files on disk and loadable index") {
  auto dir = fresh_dir("gen");
  auto meta = generate_synthetic(tiny_synth(7), dir);
  (void)meta;
  std::size_t files = 0;
  for (auto& e : fs::recursive_directory_iterator(dir / "train"))
    files += e.is_regular_file();
  CHECK(files == 4);  // 2 classes x 2 images

  auto index = load_dataset(dir);
  CHECK(index.train.size() == 2);
  CHECK(index.val.size() == 2);
  CHECK(index.test.size() == 2);
  CHECK(index.train[0].images.size() == 2);
}

TEST_CASE("generate_synthetic: same seed gives byte-identical trees") {
  auto a = fresh_dir("gen_a");
  auto b = fresh_dir("gen_b");
  generate_synthetic(tiny_synth(11), a);
  generate_synthetic(tiny_synth(11), b);
  auto index = load_dataset(a);
  for (const auto* split : {&index.train, &index.val, &index.test})
    for (const auto& cls : *split)
      for (const auto& img : cls.images) {
        const auto rel = fs::relative(img, a);
        CHECK(slurp(img) == slurp(b / rel));
      }
  auto c = fresh_dir("gen_c");
  generate_synthetic(tiny_synth(12), c);
  CHECK(slurp(a / "train/class_000/img_0000.ppm") !=
        slurp(c / "train/class_000/img_0000.ppm"));
}

TEST_CASE("generate_synthetic: template-matching oracle separates classes") {
  auto dir = fresh_dir("gen_oracle");
  SynthConfig cfg;
  cfg.train_classes = 2;
  cfg.val_classes = 2;
  cfg.test_classes = 5;
  cfg.images_per_class = 8;
  cfg.oracle_tasks = 20;
  cfg.seed = 3;
  auto meta = generate_synthetic(cfg, dir);
  CHECK(meta.oracle_accuracy > 0.9);
  CHECK(load_oracle_accuracy(dir) == meta.oracle_accuracy);
}

TEST_CASE("load_dataset: split overlap and empty classes are hard errors") {
  auto dir = fresh_dir("overlap");
  Image px;
  px.width = px.height = 1;
  px.rgb = {1, 2, 3};
  for (const char* split : {"train", "val", "test"}) {
    fs::create_directories(dir / split / (std::string("cls_") + split));
    write_ppm(dir / split / (std::string("cls_") + split) / "a.ppm", px);
  }
  fs::create_directories(dir / "test" / "cls_train");
  write_ppm(dir / "test" / "cls_train" / "a.ppm", px);
  CHECK_THROWS_WITH_AS((void)load_dataset(dir),
                       doctest::Contains("cls_train"), DataError);

  auto dir2 = fresh_dir("emptycls");
  for (const char* split : {"train", "val", "test"}) {
    fs::create_directories(dir2 / split / "ok");
    write_ppm(dir2 / split / "ok" / "a.ppm", px);
  }
  // same class name in every split is also an overlap; rename to keep disjoint
  fs::rename(dir2 / "val" / "ok", dir2 / "val" / "ok_val");
  fs::rename(dir2 / "test" / "ok", dir2 / "test" / "ok_test");
  fs::create_directories(dir2 / "train" / "hollow");
  CHECK_THROWS_WITH_AS((void)load_dataset(dir2), doctest::Contains("hollow"),
                       DataError);

  auto dir3 = fresh_dir("nosplit");
  CHECK_THROWS_AS((void)load_dataset(dir3), DataError);
}

TEST_CASE("augment_train: disabled path is resize + normalize") {
  auto dir = fresh_dir("aug");
  generate_synthetic(tiny_synth(21), dir);
  auto index = load_dataset(dir);
  auto stats = compute_channel_stats(index.train);
  auto raw = read_ppm(index.train[0].images[0]);

  AugmentConfig cfg;
  cfg.enabled = false;
  Rng rng(1);
  auto t = augment_train<float>(raw, 32, rng, stats, cfg);
  CHECK(t.shape() == Shape{3, 32, 32});
  // raw image is already 32x32, so values are just normalized pixels
  for (std::size_t c = 0; c < 3; ++c)
    CHECK(t(c, 4, 7) ==
          doctest::Approx((double(raw.at(7, 4, c)) / 255.0 - stats.mean[c]) /
                          stats.stddev[c])
              .epsilon(1e-5));
}

TEST_CASE("augment_train: seeded determinism and declared shape") {
  auto dir = fresh_dir("aug2");
  generate_synthetic(tiny_synth(22), dir);
  auto index = load_dataset(dir);
  auto stats = compute_channel_stats(index.train);
  auto raw = read_ppm(index.train[1].images[0]);

  Rng r1(77), r2(77), r3(78);
  auto a = augment_train<float>(raw, 84, r1, stats);
  auto b = augment_train<float>(raw, 84, r2, stats);
  auto c = augment_train<float>(raw, 84, r3, stats);
  CHECK(a.shape() == Shape{3, 84, 84});
  CHECK(a.values() == b.values());
  CHECK(a.values() != c.values());
  CHECK(a.all_finite());
}

TEST_CASE("preprocess_eval: deterministic, exact shape, near-identity resize") {
  auto dir = fresh_dir("eval");
  generate_synthetic(tiny_synth(23), dir);
  auto index = load_dataset(dir);
  auto stats = compute_channel_stats(index.train);
  auto raw = read_ppm(index.test[0].images[0]);

  auto a = preprocess_eval<float>(raw, 32, stats);
  auto b = preprocess_eval<float>(raw, 32, stats);
  CHECK(a.shape() == Shape{3, 32, 32});
  CHECK(a.values() == b.values());

  // square input of exactly the target size: center crop of the 1.15x resize
  // stays close to plain normalization of the original
  AugmentConfig off;
  off.enabled = false;
  Rng rng(1);
  auto plain = augment_train<float>(raw, 32, rng, stats, off);
  double total = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    total += double(std::abs(a(i) - plain(i)));
  CHECK(total / double(a.size()) < 0.5);  // interpolation-level, not structural
}

TEST_CASE("channel stats: sane ranges on synthetic data") {
  auto dir = fresh_dir("stats");
  generate_synthetic(tiny_synth(24), dir);
  auto index = load_dataset(dir);
  auto stats = compute_channel_stats(index.train);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(stats.mean[c] > 0.2);
    CHECK(stats.mean[c] < 0.8);
    CHECK(stats.stddev[c] > 0.01);
    CHECK(stats.stddev[c] < 0.5);
  }
}
