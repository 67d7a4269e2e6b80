#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "pointlm/checkpoint.hpp"
#include "pointlm/model.hpp"
#include "pointlm/synthetic.hpp"
#include "pointlm/training.hpp"

using namespace pointlm;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model_config(int vocab_size) {
  ModelConfig mc;
  mc.encoder.d_obj = 8;
  mc.encoder.n_layers = 1;
  mc.encoder.n_heads = 2;
  mc.encoder.d_llm = 12;
  mc.encoder.d_point_hidden = 6;
  mc.lm.vocab_size = vocab_size;
  mc.lm.d_model = 12;
  mc.lm.n_layers = 1;
  mc.lm.n_heads = 2;
  mc.lm.max_len = 96;
  return mc;
}

struct TrainFixture {
  SyntheticData data;
  Vocab vocab;
  SceneLM model;

  explicit TrainFixture(uint64_t model_seed = 5) {
    SyntheticConfig sc;
    sc.n_scenes = 6;
    sc.points_per_object = 12;
    sc.seed = 31;
    data = make_synthetic_dataset(sc);
    vocab = make_synthetic_vocab(data);
    std::mt19937_64 rng(model_seed);
    model.init(rng, tiny_model_config(vocab.size()));
  }
};

std::vector<double> snapshot(const ParamStore& store) {
  std::vector<double> out;
  for (const auto& p : store.all())
    out.insert(out.end(), p.t->v.begin(), p.t->v.end());
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string temp_dir(const std::string& tag) {
  const fs::path d = fs::temp_directory_path() / ("plm_train_" + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d.string();
}

StageConfig tiny_stage3(int max_steps, double lambda_max,
                        LossMode mode = LossMode::nll_plus_or) {
  StageConfig cfg = default_stage_config(3);
  cfg.learning_rate = 1e-3;  // tiny model; the production default barely moves it
  cfg.max_steps = max_steps;
  cfg.batch_size = 2;
  cfg.accumulation = 2;
  cfg.lambda_max = lambda_max;
  cfg.loss_mode = mode;
  cfg.seed = 17;
  return cfg;
}

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(2e-3, 0, 200) == doctest::Approx(2e-3));
  CHECK(cosine_lr(2e-3, 200, 200) == doctest::Approx(0.0));
  CHECK(cosine_lr(2e-3, 100, 200) == doctest::Approx(1e-3));
  CHECK(cosine_lr(1.0, 50, 200) ==
        doctest::Approx(0.5 * (1 + std::cos(M_PI * 0.25))));
  CHECK_THROWS_AS(cosine_lr(1.0, 201, 200), NumericError);
  CHECK_THROWS_AS(cosine_lr(1.0, -1, 200), NumericError);
}

TEST_CASE("stage defaults follow the three-stage recipe") {
  const StageConfig s1 = default_stage_config(1);
  CHECK(s1.learning_rate == doctest::Approx(2e-3));
  CHECK(s1.loss_mode == LossMode::nll_only);
  CHECK(s1.lambda_max == 0.0);
  CHECK(s1.trainable ==
        std::set<std::string>{"spatial_transformer", "connector",
                              "special_embeddings"});
  CHECK(s1.weight_decay == doctest::Approx(5e-2));
  CHECK(s1.beta1 == doctest::Approx(0.9));
  CHECK(s1.beta2 == doctest::Approx(0.999));
  CHECK(s1.accumulation == 2);

  const StageConfig s2 = default_stage_config(2);
  CHECK(s2.learning_rate == doctest::Approx(1e-4));
  CHECK(s2.trainable == s1.trainable);

  const StageConfig s3 = default_stage_config(3);
  CHECK(s3.learning_rate == doctest::Approx(5e-6));
  CHECK(s3.loss_mode == LossMode::nll_plus_or);
  CHECK(s3.lambda_max == doctest::Approx(0.3));
  CHECK(s3.trainable.count("lm") == 1);
  CHECK(s3.trainable.count("point_encoder") == 0);

  CHECK_THROWS_AS(default_stage_config(4), DataError);

  StageConfig bad = default_stage_config(1);
  bad.loss_mode = LossMode::nll_plus_or;
  CHECK_THROWS_AS(bad.validate(), DataError);
  bad = default_stage_config(2);
  bad.trainable.insert("lm");
  CHECK_THROWS_AS(bad.validate(), DataError);
}

TEST_CASE("trainable mask zeroes exactly the frozen groups") {
  TrainFixture f;
  for (const auto& p : f.model.store().all())
    for (double& g : p.t->g) g = 1.0;
  apply_trainable_mask(f.model.store(), {"connector", "lm"});
  for (const auto& p : f.model.store().all()) {
    const bool kept = p.group == "connector" || p.group == "lm";
    for (double g : p.t->g) CHECK(g == (kept ? 1.0 : 0.0));
  }
}

TEST_CASE("frozen parameters are bit-identical after training") {
  TrainFixture f;
  std::vector<std::pair<std::string, std::vector<double>>> frozen;
  for (const auto& p : f.model.store().all())
    if (p.group == "point_encoder" || p.group == "lm")
      frozen.emplace_back(p.name, p.t->v);

  StageConfig cfg = default_stage_config(1);
  cfg.max_steps = 4;
  cfg.batch_size = 2;
  cfg.accumulation = 1;
  cfg.learning_rate = 1e-3;
  TrainDataset data{f.data.pairs, {}};
  run_stage(f.model, f.vocab, data, cfg, temp_dir("frozen"));

  bool anything_moved = false;
  for (const auto& p : f.model.store().all())
    if (p.group == "connector")
      anything_moved = anything_moved || p.t->v != f.model.store().get(p.name)->v;
  for (const auto& [name, before] : frozen) {
    const Tensor t = f.model.store().get(name);
    CHECK(t->v == before);
  }
}

TEST_CASE("stage-3 at lambda 0 matches pure SFT bitwise over 50 steps") {
  TrainFixture a(9), b(9);
  REQUIRE(snapshot(a.model.store()) == snapshot(b.model.store()));
  TrainDataset data{{}, a.data.triplets};
  TrainDataset data_b{{}, b.data.triplets};

  run_stage(a.model, a.vocab, data, tiny_stage3(50, 0.0, LossMode::nll_plus_or),
            temp_dir("lam0"));
  run_stage(b.model, b.vocab, data_b, tiny_stage3(50, 0.0, LossMode::nll_only),
            temp_dir("sft"));
  CHECK(snapshot(a.model.store()) == snapshot(b.model.store()));
}

TEST_CASE("same seed, same trajectory; different seed differs") {
  TrainFixture a(9), b(9), c(9);
  TrainDataset da{{}, a.data.triplets}, db{{}, b.data.triplets},
      dc{{}, c.data.triplets};

  const auto ra = run_stage(a.model, a.vocab, da, tiny_stage3(8, 0.3),
                            temp_dir("det_a"));
  const auto rb = run_stage(b.model, b.vocab, db, tiny_stage3(8, 0.3),
                            temp_dir("det_b"));
  CHECK(snapshot(a.model.store()) == snapshot(b.model.store()));
  CHECK(slurp(ra.metrics_path) == slurp(rb.metrics_path));
  CHECK(slurp(ra.state_path) == slurp(rb.state_path));
  CHECK(slurp(ra.params_path) == slurp(rb.params_path));

  StageConfig other = tiny_stage3(8, 0.3);
  other.seed = 18;
  run_stage(c.model, c.vocab, dc, other, temp_dir("det_c"));
  CHECK(snapshot(a.model.store()) != snapshot(c.model.store()));
}

TEST_CASE("accumulation splits reproduce the single-batch update bitwise") {
  TrainFixture a(9), b(9);
  TrainDataset da{{}, a.data.triplets}, db{{}, b.data.triplets};

  StageConfig split = tiny_stage3(6, 0.3);
  split.batch_size = 2;
  split.accumulation = 2;
  StageConfig whole = tiny_stage3(6, 0.3);
  whole.batch_size = 4;
  whole.accumulation = 1;

  run_stage(a.model, a.vocab, da, split, temp_dir("acc_split"));
  run_stage(b.model, b.vocab, db, whole, temp_dir("acc_whole"));
  CHECK(snapshot(a.model.store()) == snapshot(b.model.store()));
}

TEST_CASE("resumed run reproduces the uninterrupted trajectory bitwise") {
  TrainFixture a(9), b(9);
  TrainDataset da{{}, a.data.triplets}, db{{}, b.data.triplets};
  const StageConfig cfg = tiny_stage3(12, 0.3);

  const auto full =
      run_stage(a.model, a.vocab, da, cfg, temp_dir("resume_full"));

  const std::string dir = temp_dir("resume_split");
  const auto half = run_stage(b.model, b.vocab, db, cfg, dir, std::nullopt, 6);
  CHECK(half.final_step == 6);
  const auto rest =
      run_stage(b.model, b.vocab, db, cfg, dir, half.state_path);
  CHECK(rest.final_step == 12);

  CHECK(snapshot(a.model.store()) == snapshot(b.model.store()));
  CHECK(slurp(full.metrics_path) == slurp(rest.metrics_path));
  CHECK(slurp(full.state_path) == slurp(rest.state_path));
}

TEST_CASE("metrics CSV has the pinned header, one row per step, ramped lambda") {
  TrainFixture f;
  TrainDataset data{{}, f.data.triplets};
  const auto res =
      run_stage(f.model, f.vocab, data, tiny_stage3(10, 0.3), temp_dir("csv"));

  std::ifstream in(res.metrics_path);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "step,nll,or_loss,lambda,total,log_odds_ratio,reward_margin");
  int rows = 0;
  double prev_lambda = -1;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(row, cell, ',')) vals.push_back(std::stod(cell));
    REQUIRE(vals.size() == 7);
    CHECK(vals[0] == rows);
    CHECK(vals[3] == doctest::Approx(0.3 * rows / 10.0));  // linear ramp
    CHECK(vals[3] >= prev_lambda);
    CHECK(vals[4] == doctest::Approx(vals[1] + vals[3] * vals[2]));
    prev_lambda = vals[3];
    ++rows;
  }
  CHECK(rows == 10);
}

TEST_CASE("pair batch under a triplet loss mode is rejected") {
  TrainFixture f;
  TrainDataset pairs_only{f.data.pairs, {}};
  std::vector<size_t> order(pairs_only.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  AdamW adam;
  CHECK_THROWS_AS(train_step(f.model, f.vocab, pairs_only, order, 0,
                             tiny_stage3(4, 0.3), adam, 0),
                  DataError);
}

TEST_CASE("non-finite loss raises a numeric error naming the step") {
  TrainFixture f;
  // Poison the LM weights; the forward pass then produces NaN.
  for (const auto& p : f.model.store().all())
    if (p.group == "lm")
      for (double& v : p.t->v) v = std::numeric_limits<double>::quiet_NaN();
  TrainDataset data{{}, f.data.triplets};
  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  AdamW adam;
  CHECK_THROWS_WITH_AS(train_step(f.model, f.vocab, data, order, 0,
                                  tiny_stage3(4, 0.0), adam, 3),
                       "non-finite loss at step 3", NumericError);
}

TEST_CASE("analytic gradients of the full stage-3 loss pass the FD check") {
  TrainFixture f;
  const double err03 = grad_check(f.model, f.vocab, f.data.triplets[0], 0.3,
                                  /*n_samples=*/200, /*seed=*/1);
  CHECK(err03 < 1e-3);
  const double err0 = grad_check(f.model, f.vocab, f.data.triplets[1], 0.0,
                                 /*n_samples=*/120, /*seed=*/2);
  CHECK(err0 < 1e-3);
}

TEST_CASE("checkpoint container round-trips f64 bitwise and f32 to float precision") {
  std::vector<CheckpointEntry> entries;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(-2, 2);
  CheckpointEntry e64{"layers/w", 3, 4, true, {}};
  for (int i = 0; i < 12; ++i) e64.data.push_back(dist(rng));
  CheckpointEntry e32{"layers/b", 1, 5, false, {}};
  for (int i = 0; i < 5; ++i) e32.data.push_back(dist(rng));
  entries = {e64, e32};

  const std::string path = temp_dir("ckpt") + "/mixed.bin";
  save_checkpoint(entries, path);
  const auto back = load_checkpoint(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "layers/w");
  CHECK(back[0].rows == 3);
  CHECK(back[0].cols == 4);
  CHECK(back[0].data == e64.data);  // f64 is exact
  for (int i = 0; i < 5; ++i)
    CHECK(back[1].data[i] == static_cast<double>(static_cast<float>(e32.data[i])));

  CHECK_THROWS_AS(load_checkpoint(path + ".missing"), DataError);
  std::ofstream(path + ".bad") << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(path + ".bad"), DataError);
}

TEST_CASE("parameter export loads into a fresh model of the same shape") {
  TrainFixture a(9), b(10);
  REQUIRE(snapshot(a.model.store()) != snapshot(b.model.store()));
  const std::string path = temp_dir("params") + "/params.bin";
  save_params(a.model.store(), path);
  load_params(b.model.store(), path);
  const auto va = snapshot(a.model.store());
  const auto vb = snapshot(b.model.store());
  REQUIRE(va.size() == vb.size());
  for (size_t i = 0; i < va.size(); ++i)
    CHECK(vb[i] == static_cast<double>(static_cast<float>(va[i])));

  // A shape-incompatible store rejects the file.
  ParamStore other;
  std::mt19937_64 rng(1);
  other.create(a.model.store().all()[0].name, "lm", 1, 1, rng, 1);
  CHECK_THROWS_AS(load_params(other, path), DataError);
}

TEST_CASE("train state restores parameters, moments, and step") {
  TrainFixture a(9), b(10);
  TrainDataset da{{}, a.data.triplets};
  const auto res =
      run_stage(a.model, a.vocab, da, tiny_stage3(5, 0.3), temp_dir("state"));

  AdamW adam;
  const int step = load_train_state(b.model, adam, res.state_path);
  CHECK(step == 5);
  CHECK(adam.t == 5);
  CHECK(snapshot(a.model.store()) == snapshot(b.model.store()));
  CHECK(!adam.m.empty());
  CHECK(adam.m.size() == adam.v.size());
}

TEST_CASE("model bundle scores and generates deterministically") {
  TrainFixture f;
  const TripletExample& ex = f.data.triplets[0];
  Graph g(false);
  const auto tokens = f.model.encode_scene_tokens(g, ex.scene);
  CHECK(tokens.size() == ex.scene.objects.size());
  const TokenSequence pos =
      f.model.assemble(f.vocab, ex.scene, ex.sample.instruction, ex.sample.positive);
  const double lp = f.model.response_logprob(g, pos, tokens)->v[0];
  CHECK(std::isfinite(lp));
  CHECK(lp < 0);
  const std::string out1 =
      f.model.generate(f.vocab, ex.scene, ex.sample.instruction, 6);
  const std::string out2 =
      f.model.generate(f.vocab, ex.scene, ex.sample.instruction, 6);
  CHECK(out1 == out2);
}

TEST_CASE("synthetic corpus is deterministic and well-formed") {
  SyntheticConfig sc;
  sc.n_scenes = 8;
  sc.points_per_object = 10;
  sc.seed = 44;
  const SyntheticData d1 = make_synthetic_dataset(sc);
  const SyntheticData d2 = make_synthetic_dataset(sc);
  REQUIRE(d1.triplets.size() == 16);  // two questions per scene
  CHECK(d1.mock_responses == d2.mock_responses);
  for (size_t i = 0; i < d1.triplets.size(); ++i) {
    const auto& t1 = d1.triplets[i].sample;
    const auto& t2 = d2.triplets[i].sample;
    CHECK(t1.positive == t2.positive);
    CHECK(t1.negative == t2.negative);
    CHECK(t1.positive != t1.negative);
    // Attribute swap: identical up to the color word.
    const auto w1 = Vocab::split(t1.positive);
    const auto w2 = Vocab::split(t1.negative);
    REQUIRE(w1.size() == w2.size());
    int diff = 0;
    for (size_t k = 0; k < w1.size(); ++k) diff += w1[k] != w2[k];
    CHECK(diff == 1);
  }
  for (const auto& s : d1.scenes) {
    CHECK(s.objects.size() >= 3);
    CHECK(s.objects.size() <= 5);
    for (const auto& o : s.objects) CHECK(o.points.size() == 10);
  }
  // The mock map answers exactly the prompts the forge pipeline would ask.
  MockClient client;
  for (const auto& [prompt, answer] : d1.mock_responses) client.set(prompt, answer);
  ForgeReport report;
  std::map<std::string, std::vector<std::string>> scene_objects;
  for (const auto& s : d1.scenes) scene_objects[s.scene_id] = scene_object_labels(s);
  std::vector<PairSample> pairs;
  for (const auto& p : d1.pairs) pairs.push_back(p.sample);
  const auto triplets = forge_hard_negatives(pairs, client, scene_objects, &report);
  REQUIRE(triplets.size() == d1.triplets.size());
  for (size_t i = 0; i < triplets.size(); ++i)
    CHECK(triplets[i].negative == d1.triplets[i].sample.negative);
}
