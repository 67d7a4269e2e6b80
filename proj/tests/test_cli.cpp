#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "pointlm/checkpoint.hpp"
#include "pointlm/dataset.hpp"
#include "pointlm/model.hpp"
#include "pointlm/synthetic.hpp"

using namespace pointlm;
namespace fs = std::filesystem;

namespace {

std::string cli() {
  const char* p = std::getenv("POINTLM_CLI");
  REQUIRE_MESSAGE(p != nullptr, "POINTLM_CLI must point at the binary");
  return p;
}

int run(const std::string& args) {
  const std::string cmd = cli() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in, path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int line_count(const fs::path& path) {
  std::ifstream in(path);
  REQUIRE(in);
  int n = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n;
}

fs::path temp_dir(const std::string& tag) {
  const fs::path d = fs::temp_directory_path() / ("plm_cli_" + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// One synthetic corpus shared by the whole suite.
const fs::path& corpus() {
  static const fs::path dir = [] {
    const fs::path d = temp_dir("corpus");
    REQUIRE(run("make-synthetic --out " + d.string() +
                " --scenes 10 --points 10 --seed 5") == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("make-synthetic writes scenes, datasets, fixture, and manifest") {
  const fs::path d = corpus();
  CHECK(fs::is_directory(d / "scenes"));
  CHECK(line_count(d / "pairs.jsonl") == 20);  // two questions per scene
  CHECK(line_count(d / "triplets.jsonl") == 20);
  CHECK(fs::exists(d / "mock_responses.json"));
  const auto manifest = nlohmann::json::parse(slurp(d / "manifest.json"));
  CHECK(manifest.at("command") == "make-synthetic");
  CHECK(manifest.at("seed") == 5);
  CHECK(manifest.contains("version"));
  CHECK(manifest.contains("started"));

  // Same seed, same bytes.
  const fs::path d2 = temp_dir("corpus2");
  REQUIRE(run("make-synthetic --out " + d2.string() +
              " --scenes 10 --points 10 --seed 5") == 0);
  CHECK(slurp(d / "pairs.jsonl") == slurp(d2 / "pairs.jsonl"));
  CHECK(slurp(d / "triplets.jsonl") == slurp(d2 / "triplets.jsonl"));
}

TEST_CASE("prepare-data resamples every object to the requested count") {
  const fs::path d = corpus();
  const fs::path ann = temp_dir("prep") / "annotations.jsonl";
  {
    std::ofstream out(ann);
    out << R"({"scene_id":"synth0","task":"qa","instruction":"What color is the largest box in the room?","response":"red","situation":"You are standing at the door."})"
        << "\n";
  }
  const fs::path out = temp_dir("prep_out");
  REQUIRE(run("prepare-data --scenes " + (d / "scenes").string() +
              " --annotations " + ann.string() + " --out " + out.string() +
              " --points-per-object 16 --seed 1") == 0);
  for (const auto& e : fs::directory_iterator(out / "scenes")) {
    const Scene s = load_scene_jsonl(e.path().string());
    for (const auto& o : s.objects) CHECK(o.points.size() == 16);
  }
  const auto pairs = load_pairs_jsonl((out / "pairs.jsonl").string());
  REQUIRE(pairs.size() == 1);
  // Situation prefix and the QA format prompt are both attached.
  CHECK(pairs[0].instruction ==
        "You are standing at the door. What color is the largest box in the "
        "room? Answer the question using a single word or phrase.");

  const fs::path low = temp_dir("prep_low");
  REQUIRE(run("prepare-data --scenes " + (d / "scenes").string() +
              " --annotations " + ann.string() + " --out " + low.string() +
              " --low-res --seed 1") == 0);
  const Scene s =
      load_scene_jsonl((low / "scenes" / "synth0.jsonl").string());
  for (const auto& o : s.objects) CHECK(o.points.size() == 1024);

  CHECK(run("prepare-data --scenes " + (d / "scenes").string() +
            " --annotations /nonexistent.jsonl --out " + out.string()) == 2);
}

TEST_CASE("mock hard-negative generation is bit-reproducible") {
  const fs::path d = corpus();
  const fs::path a = temp_dir("hard_a"), b = temp_dir("hard_b");
  const std::string common = "gen-negatives --pairs " +
                             (d / "pairs.jsonl").string() + " --scenes " +
                             (d / "scenes").string() + " --mock " +
                             (d / "mock_responses.json").string() + " --seed 3";
  REQUIRE(run(common + " --out " + a.string()) == 0);
  REQUIRE(run(common + " --out " + b.string()) == 0);
  CHECK(slurp(a / "triplets.jsonl") == slurp(b / "triplets.jsonl"));
  CHECK(slurp(a / "removals.csv") == slurp(b / "removals.csv"));
  CHECK(line_count(a / "triplets.jsonl") == 20);
  CHECK(line_count(a / "removals.csv") == 1);  // header only
}

TEST_CASE("removal log rows match the removed count") {
  const fs::path d = corpus();
  // Poison one mock response with a removal directive.
  auto fixture = nlohmann::json::parse(slurp(d / "mock_responses.json"));
  auto it = fixture.begin();
  *it = "REMOVE THIS SAMPLE: Unreasonable GT";
  const fs::path mock = temp_dir("removal") / "mock.json";
  std::ofstream(mock) << fixture.dump();

  const fs::path out = temp_dir("removal_out");
  REQUIRE(run("gen-negatives --pairs " + (d / "pairs.jsonl").string() +
              " --scenes " + (d / "scenes").string() + " --mock " +
              mock.string() + " --out " + out.string()) == 0);
  // Scenes with identical color sets share a forge prompt, so one poisoned
  // response can knock out several pairs; the log must account for each.
  const int removed = line_count(out / "removals.csv") - 1;
  CHECK(removed >= 1);
  CHECK(line_count(out / "triplets.jsonl") == 20 - removed);
  CHECK(slurp(out / "removals.csv").find("unreasonable_gt") != std::string::npos);
}

TEST_CASE("easy negatives are responses of other instructions") {
  const fs::path d = corpus();
  const fs::path out = temp_dir("easy_out");
  REQUIRE(run("gen-negatives --pairs " + (d / "pairs.jsonl").string() +
              " --easy --out " + out.string() + " --seed 11") == 0);
  const auto pairs = load_pairs_jsonl((d / "pairs.jsonl").string());
  const auto triplets = load_triplets_jsonl((out / "triplets.jsonl").string());
  REQUIRE(triplets.size() == pairs.size());
  for (const auto& t : triplets) {
    bool from_other_instruction = false;
    for (const auto& p : pairs)
      if (p.response == t.negative && p.instruction != t.instruction)
        from_other_instruction = true;
    CHECK(from_other_instruction);
  }
}

TEST_CASE("existence negatives are balanced yes/no per scene") {
  const fs::path d = corpus();
  const fs::path out = temp_dir("exist_out");
  REQUIRE(run("gen-negatives --scenes " + (d / "scenes").string() +
              " --existence --per-scene 2 --out " + out.string() +
              " --seed 13") == 0);
  const auto triplets = load_triplets_jsonl((out / "triplets.jsonl").string());
  REQUIRE(triplets.size() == 20);
  std::map<std::string, int> yes, total;
  for (const auto& t : triplets) {
    CHECK(t.task == TaskType::existence);
    yes[t.scene_id] += t.positive == "yes";
    ++total[t.scene_id];
  }
  for (const auto& [id, n] : total) {
    CHECK(n == 2);
    CHECK(yes[id] == 1);
  }
}

TEST_CASE("train: sft trajectory equals or with lambda 0, byte for byte") {
  const fs::path d = corpus();
  const std::string base = "train --stage 3 --allow-skip --data " +
                           (d / "triplets.jsonl").string() + " --scenes " +
                           (d / "scenes").string() +
                           " --steps 10 --batch 2 --accum 1 --lr 1e-3 --seed 7";
  const fs::path sft = temp_dir("sft"), orz = temp_dir("or_zero"),
                 orf = temp_dir("or_full");
  REQUIRE(run(base + " --loss sft --out " + sft.string()) == 0);
  REQUIRE(run(base + " --loss or --lambda-max 0 --out " + orz.string()) == 0);
  REQUIRE(run(base + " --loss or --lambda-max 0.3 --out " + orf.string()) == 0);
  CHECK(slurp(sft / "params.bin") == slurp(orz / "params.bin"));
  CHECK(slurp(sft / "state.bin") == slurp(orz / "state.bin"));
  CHECK(slurp(sft / "params.bin") != slurp(orf / "params.bin"));
}

TEST_CASE("train exit codes: usage, data, numeric") {
  const fs::path d = corpus();
  const std::string scenes = (d / "scenes").string();
  const std::string triplets = (d / "triplets.jsonl").string();

  CHECK(run("train --stage 4 --data " + triplets + " --scenes " + scenes +
            " --out /tmp/plm_cli_x") == 2);
  // Stage sequencing is enforced without --allow-skip or --init.
  CHECK(run("train --stage 3 --data " + triplets + " --scenes " + scenes +
            " --out /tmp/plm_cli_x --steps 2") == 2);
  CHECK(run("train --stage 3 --allow-skip --loss bogus --data " + triplets +
            " --scenes " + scenes + " --out /tmp/plm_cli_x") == 2);

  // Malformed JSON-lines input -> data error.
  const fs::path bad = temp_dir("bad") / "pairs.jsonl";
  std::ofstream(bad) << "{not json\n";
  CHECK(run("train --stage 1 --data " + bad.string() + " --scenes " + scenes +
            " --out /tmp/plm_cli_x --steps 2") == 3);

  // Dangling scene reference -> data error.
  const fs::path dangling = temp_dir("dangling") / "pairs.jsonl";
  std::ofstream(dangling)
      << R"({"scene_id":"nope","task":"qa","instruction":"q","response":"r"})"
      << "\n";
  CHECK(run("train --stage 1 --data " + dangling.string() + " --scenes " +
            scenes + " --out /tmp/plm_cli_x --steps 2") == 3);

  // NaN parameters poison the loss -> numeric error (exit 4) + crash dump.
  const fs::path s1 = temp_dir("nan_s1");
  REQUIRE(run("train --stage 1 --data " + (d / "pairs.jsonl").string() +
              " --scenes " + scenes + " --out " + s1.string() +
              " --steps 2 --seed 7") == 0);
  const Vocab vocab = Vocab::load((s1 / "vocab.txt").string());
  ModelConfig mc;  // mirror the CLI's default dims
  mc.encoder.d_obj = 16;
  mc.encoder.n_layers = 1;
  mc.encoder.n_heads = 4;
  mc.encoder.d_llm = 16;
  mc.encoder.d_point_hidden = 8;
  mc.lm.vocab_size = vocab.size();
  mc.lm.d_model = 16;
  mc.lm.n_layers = 1;
  mc.lm.n_heads = 2;
  mc.lm.max_len = 128;
  SceneLM model;
  std::mt19937_64 rng(1);
  model.init(rng, mc);
  for (const auto& p : model.store().all())
    for (double& v : p.t->v) v = std::numeric_limits<double>::quiet_NaN();
  const fs::path poison = temp_dir("nan") / "params.bin";
  save_params(model.store(), poison.string());
  const fs::path crash = temp_dir("nan_out");
  CHECK(run("train --stage 2 --data " + (d / "pairs.jsonl").string() +
            " --scenes " + scenes + " --init " + poison.string() + " --vocab " +
            (s1 / "vocab.txt").string() + " --out " + crash.string() +
            " --steps 2") == 4);
  CHECK(fs::exists(crash / "crash_params.bin"));
}

TEST_CASE("evaluate over records reports all six text metrics") {
  const fs::path rec = temp_dir("records") / "records.jsonl";
  {
    std::ofstream out(rec);
    out << R"({"sample_id":"a","prediction":"a red chair","references":["a red chair"]})" << "\n"
        << R"({"sample_id":"b","prediction":"wooden table","references":["wooden"]})" << "\n";
  }
  const fs::path out = temp_dir("records_out");
  REQUIRE(run("evaluate --records " + rec.string() + " --out " + out.string()) == 0);
  const auto report = nlohmann::json::parse(slurp(out / "report.json"));
  const auto& text = report.at("text");
  for (const char* key : {"bleu4", "rouge_l", "meteor_lite", "cider", "em1",
                          "em1_refined", "sentence_similarity"})
    CHECK_MESSAGE(text.contains(key), key);
  CHECK(text.at("em1") == doctest::Approx(0.5));
  CHECK(text.at("em1_refined") == doctest::Approx(1.0));
  CHECK(line_count(out / "per_sample.csv") == 3);

  const fs::path empty = temp_dir("records_empty") / "records.jsonl";
  std::ofstream(empty).close();
  CHECK(run("evaluate --records " + empty.string() + " --out " +
            temp_dir("records_empty_out").string()) == 3);
  CHECK(run("evaluate --out " + temp_dir("records_none").string()) == 2);
}

TEST_CASE("evaluate --pope emits question file and report with POPE fields") {
  const fs::path d = corpus();
  const fs::path s1 = temp_dir("pope_s1");
  REQUIRE(run("train --stage 1 --data " + (d / "pairs.jsonl").string() +
              " --scenes " + (d / "scenes").string() + " --out " + s1.string() +
              " --steps 2 --seed 7") == 0);
  const fs::path out = temp_dir("pope_out");
  REQUIRE(run("evaluate --model " + (s1 / "params.bin").string() + " --vocab " +
              (s1 / "vocab.txt").string() + " --scenes " +
              (d / "scenes").string() + " --pope popular --k 1 --max-new 3 " +
              "--out " + out.string() + " --seed 2") == 0);
  const auto report = nlohmann::json::parse(slurp(out / "report.json"));
  const auto& pope = report.at("pope");
  for (const char* key :
       {"precision", "recall", "f1", "accuracy", "yes_rate", "unparsed"})
    CHECK_MESSAGE(pope.contains(key), key);
  // k=1 per polarity over 10 scenes: header + 20 rows.
  CHECK(line_count(out / "pope_questions.csv") == 21);
  CHECK(run("evaluate --pope random --out " +
            temp_dir("pope_bad").string()) == 2);
}

TEST_CASE("diagnose preserves rows; window=1 is the identity") {
  const fs::path d = corpus();
  const fs::path tr = temp_dir("diag_train");
  REQUIRE(run("train --stage 3 --allow-skip --data " +
              (d / "triplets.jsonl").string() + " --scenes " +
              (d / "scenes").string() + " --out " + tr.string() +
              " --steps 8 --batch 2 --accum 1 --seed 7") == 0);
  const fs::path c1 = tr / "curves_w1.csv", c5 = tr / "curves_w5.csv";
  REQUIRE(run("diagnose --metrics " + (tr / "metrics.csv").string() +
              " --out " + c1.string() + " --window 1") == 0);
  REQUIRE(run("diagnose --metrics " + (tr / "metrics.csv").string() +
              " --out " + c5.string() + " --window 5") == 0);
  CHECK(line_count(c1) == 9);
  CHECK(line_count(c5) == 9);

  // window=1 reproduces the raw columns.
  std::ifstream metrics(tr / "metrics.csv"), curves(c1);
  std::string mline, cline;
  std::getline(metrics, mline);
  std::getline(curves, cline);
  CHECK(cline == "step,log_odds_ratio,reward_margin");
  while (std::getline(metrics, mline) && std::getline(curves, cline)) {
    std::vector<std::string> m, c;
    std::string cell;
    std::istringstream ms(mline), cs(cline);
    while (std::getline(ms, cell, ',')) m.push_back(cell);
    while (std::getline(cs, cell, ',')) c.push_back(cell);
    REQUIRE(m.size() == 7);
    REQUIRE(c.size() == 3);
    CHECK(std::stod(c[1]) == doctest::Approx(std::stod(m[5])));
    CHECK(std::stod(c[2]) == doctest::Approx(std::stod(m[6])));
  }

  std::ofstream(tr / "garbage.csv") << "wrong,header\n1,2\n";
  CHECK(run("diagnose --metrics " + (tr / "garbage.csv").string() + " --out " +
            (tr / "x.csv").string()) == 3);
  CHECK(run("diagnose --metrics " + (tr / "metrics.csv").string() + " --out " +
            (tr / "x.csv").string() + " --window 0") == 2);
}

TEST_CASE("same-seed CLI runs are bit-identical end to end") {
  const fs::path d = corpus();
  auto pipeline = [&](const std::string& tag) {
    const fs::path root = temp_dir("pipe_" + tag);
    const std::string scenes = (d / "scenes").string();
    REQUIRE(run("gen-negatives --pairs " + (d / "pairs.jsonl").string() +
                " --scenes " + scenes + " --mock " +
                (d / "mock_responses.json").string() + " --out " +
                (root / "neg").string() + " --seed 3") == 0);
    REQUIRE(run("train --stage 1 --data " + (d / "pairs.jsonl").string() +
                " --scenes " + scenes + " --out " + (root / "s1").string() +
                " --steps 6 --batch 2 --accum 1 --seed 7") == 0);
    REQUIRE(run("train --stage 3 --data " +
                (root / "neg" / "triplets.jsonl").string() + " --scenes " +
                scenes + " --init " + (root / "s1" / "params.bin").string() +
                " --vocab " + (root / "s1" / "vocab.txt").string() + " --out " +
                (root / "s3").string() +
                " --steps 6 --batch 2 --accum 1 --seed 7") == 0);
    return root;
  };
  const fs::path a = pipeline("a"), b = pipeline("b");
  for (const char* rel :
       {"neg/triplets.jsonl", "s1/params.bin", "s3/params.bin",
        "s3/state.bin", "s3/metrics.csv"})
    CHECK_MESSAGE(slurp(a / rel) == slurp(b / rel), rel);
}
