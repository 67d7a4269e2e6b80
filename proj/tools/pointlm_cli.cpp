// Single entry point for the pipeline: synthetic data, preparation, negative
// generation, staged training, evaluation, and diagnostics export.
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pointlm/checkpoint.hpp"
#include "pointlm/dataset.hpp"
#include "pointlm/errors.hpp"
#include "pointlm/evaluation.hpp"
#include "pointlm/forge.hpp"
#include "pointlm/geometry.hpp"
#include "pointlm/model.hpp"
#include "pointlm/synthetic.hpp"
#include "pointlm/training.hpp"

#ifndef POINTLM_NO_HTTP
#define CPPHTTPLIB_NO_EXCEPTIONS 0
#include <httplib.h>
#endif

namespace fs = std::filesystem;
using namespace pointlm;

namespace {

constexpr const char* kVersion = "pointlm-0.1.0";

std::string iso_now() {
  const std::time_t t =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Every command drops a manifest beside its outputs.
struct Manifest {
  std::string command;
  std::string config;
  uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::string started = iso_now();

  void write(const std::string& out_dir) const {
    nlohmann::json j{{"command", command}, {"config", config},
                     {"seed", seed},      {"inputs", inputs},
                     {"outputs", outputs}, {"version", kVersion},
                     {"started", started}, {"finished", iso_now()}};
    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "manifest.json");
    if (!out) throw DataError("cannot write manifest in " + out_dir);
    out << j.dump(2) << "\n";
  }
};

std::map<std::string, Scene> load_scene_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a scene directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".jsonl") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .jsonl scenes in " + dir);
  std::map<std::string, Scene> scenes;
  for (const auto& f : files) {
    Scene s = load_scene_jsonl(f.string());
    validate_scene(s);
    scenes[s.scene_id] = std::move(s);
  }
  return scenes;
}

std::vector<Scene> scene_list(const std::map<std::string, Scene>& scenes) {
  std::vector<Scene> out;
  for (const auto& [_, s] : scenes) out.push_back(s);
  return out;
}

const Scene& scene_for(const std::map<std::string, Scene>& scenes,
                       const std::string& id) {
  auto it = scenes.find(id);
  if (it == scenes.end()) throw DataError("sample references unknown scene: " + id);
  return it->second;
}

// ---------------------------------------------------------------------------
// make-synthetic
// ---------------------------------------------------------------------------

struct MakeSyntheticArgs {
  std::string out;
  int scenes = 100;
  int points = 24;
  uint64_t seed = 7;
};

int cmd_make_synthetic(const MakeSyntheticArgs& a, const std::string& config) {
  SyntheticConfig sc;
  sc.n_scenes = a.scenes;
  sc.points_per_object = a.points;
  sc.seed = a.seed;
  const SyntheticData data = make_synthetic_dataset(sc);

  const fs::path out(a.out);
  fs::create_directories(out / "scenes");
  for (const auto& s : data.scenes)
    save_scene_jsonl(s, (out / "scenes" / (s.scene_id + ".jsonl")).string());

  std::vector<PairSample> pairs;
  for (const auto& p : data.pairs) pairs.push_back(p.sample);
  save_pairs_jsonl(pairs, (out / "pairs.jsonl").string());
  std::vector<TripletSample> triplets;
  for (const auto& t : data.triplets) triplets.push_back(t.sample);
  save_triplets_jsonl(triplets, (out / "triplets.jsonl").string());

  nlohmann::json mock(data.mock_responses);
  std::ofstream mock_out(out / "mock_responses.json");
  if (!mock_out) throw DataError("cannot write mock fixture in " + a.out);
  mock_out << mock.dump(2) << "\n";

  Manifest m{"make-synthetic", config, a.seed, {},
             {"scenes/", "pairs.jsonl", "triplets.jsonl", "mock_responses.json"}};
  m.write(a.out);
  std::cout << "wrote " << data.scenes.size() << " scenes, " << pairs.size()
            << " pairs, " << triplets.size() << " triplets to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// prepare-data
// ---------------------------------------------------------------------------

struct PrepareArgs {
  std::string scenes;
  std::string annotations;
  std::string out;
  int points_per_object = 8192;
  bool low_res = false;
  uint64_t seed = 0;
};

int cmd_prepare_data(const PrepareArgs& a, const std::string& config) {
  std::mt19937_64 rng(a.seed);
  const int k = a.low_res ? 1024 : a.points_per_object;
  const auto scenes = load_scene_dir(a.scenes);

  const fs::path out(a.out);
  fs::create_directories(out / "scenes");
  for (const auto& [id, raw] : scenes) {
    Scene s = align_to_centroid(raw);
    for (auto& obj : s.objects) {
      const size_t seed_index = rng() % obj.points.size();
      obj = farthest_point_sample(obj, static_cast<size_t>(k), seed_index);
      obj.recompute_centroid();
    }
    save_scene_jsonl(s, (out / "scenes" / (id + ".jsonl")).string());
  }

  // Annotations: pair schema plus an optional "situation" merged into the
  // instruction before the per-task format prompt is attached.
  std::ifstream in(a.annotations);
  if (!in) throw DataError("cannot open annotation file: " + a.annotations);
  std::vector<PairSample> pairs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(a.annotations + ":" + std::to_string(lineno) + ": " +
                      e.what());
    }
    PairSample s;
    try {
      s.scene_id = j.at("scene_id").get<std::string>();
      s.task = task_from_string(j.at("task").get<std::string>());
      s.instruction = j.at("instruction").get<std::string>();
      s.response = j.at("response").get<std::string>();
      s.target_object = j.value("target_object", "");
      s.instruction =
          merge_situation(j.value("situation", ""), s.instruction);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(a.annotations + ":" + std::to_string(lineno) + ": " +
                      e.what());
    }
    s.instruction = attach_format_prompt(s.task, s.instruction);
    s.validate();
    scene_for(scenes, s.scene_id);  // reject dangling references
    pairs.push_back(std::move(s));
  }
  if (pairs.empty()) throw DataError("no annotations in " + a.annotations);
  save_pairs_jsonl(pairs, (out / "pairs.jsonl").string());

  Manifest m{"prepare-data", config, a.seed,
             {a.scenes, a.annotations}, {"scenes/", "pairs.jsonl"}};
  m.write(a.out);
  std::cout << "prepared " << scenes.size() << " scenes at " << k
            << " points/object, " << pairs.size() << " pairs\n";
  return 0;
}

// ---------------------------------------------------------------------------
// gen-negatives
// ---------------------------------------------------------------------------

#ifndef POINTLM_NO_HTTP
// POST {"prompt": ...} to $POINTLM_COMPLETION_ENDPOINT, expects
// {"completion": ...}; $POINTLM_COMPLETION_KEY becomes a bearer token.
class HttpCompletionClient : public CompletionClient {
 public:
  using CompletionClient::send;

  HttpCompletionClient() {
    const char* ep = std::getenv("POINTLM_COMPLETION_ENDPOINT");
    if (!ep)
      throw UsageError(
          "POINTLM_COMPLETION_ENDPOINT is not set; use --mock for offline runs");
    endpoint_ = ep;
    const size_t scheme = endpoint_.find("://");
    const size_t host0 = scheme == std::string::npos ? 0 : scheme + 3;
    const size_t slash = endpoint_.find('/', host0);
    base_ = endpoint_.substr(0, slash == std::string::npos ? endpoint_.size() : slash);
    path_ = slash == std::string::npos ? "/" : endpoint_.substr(slash);
    if (const char* key = std::getenv("POINTLM_COMPLETION_KEY")) key_ = key;
  }

  std::string send(const std::string& prompt,
                   const std::vector<std::string>& attachments) override {
    nlohmann::json body{{"prompt", prompt}, {"attachments", attachments}};
    httplib::Client cli(base_);
    httplib::Headers headers;
    if (!key_.empty()) headers.emplace("Authorization", "Bearer " + key_);
    for (int attempt = 0; attempt < 2; ++attempt) {
      auto res = cli.Post(path_, headers, body.dump(), "application/json");
      if (!res) continue;  // transport failure: one retry
      if (res->status != 200)
        throw DataError("completion endpoint returned status " +
                        std::to_string(res->status));
      try {
        return nlohmann::json::parse(res->body).at("completion").get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad completion response: ") + e.what());
      }
    }
    throw DataError("completion endpoint unreachable: " + endpoint_);
  }

 private:
  std::string endpoint_, base_, path_, key_;
};
#endif

struct GenNegArgs {
  std::string pairs;
  std::string scenes;
  std::string out;
  std::string mock;
  bool easy = false;
  bool existence = false;
  int per_scene = 4;
  uint64_t seed = 0;
};

int cmd_gen_negatives(const GenNegArgs& a, const std::string& config) {
  std::mt19937_64 rng(a.seed);
  const fs::path out(a.out);
  fs::create_directories(out);
  Manifest m{"gen-negatives", config, a.seed, {}, {"triplets.jsonl"}};

  std::vector<TripletSample> triplets;
  if (a.existence) {
    if (a.scenes.empty())
      throw UsageError("--existence requires --scenes");
    m.inputs.push_back(a.scenes);
    const auto scenes = scene_list(load_scene_dir(a.scenes));
    std::vector<std::string> warnings;
    triplets = existence_questions(scenes, a.per_scene, rng(), &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  } else if (a.easy) {
    if (a.pairs.empty()) throw UsageError("--easy requires --pairs");
    m.inputs.push_back(a.pairs);
    const auto pairs = load_pairs_jsonl(a.pairs);
    for (size_t i = 0; i < pairs.size(); ++i) {
      TripletSample t;
      t.scene_id = pairs[i].scene_id;
      t.task = pairs[i].task;
      t.instruction = pairs[i].instruction;
      t.positive = pairs[i].response;
      t.negative = easy_negative(pairs, i, rng());
      t.validate();
      triplets.push_back(std::move(t));
    }
  } else {
    if (a.pairs.empty()) throw UsageError("hard negatives require --pairs");
    m.inputs.push_back(a.pairs);
    const auto pairs = load_pairs_jsonl(a.pairs);
    std::map<std::string, std::vector<std::string>> scene_objects;
    if (!a.scenes.empty()) {
      m.inputs.push_back(a.scenes);
      for (const auto& [id, s] : load_scene_dir(a.scenes))
        scene_objects[id] = scene_object_labels(s);
    }
    ForgeReport report;
    if (!a.mock.empty()) {
      m.inputs.push_back(a.mock);
      MockClient client = MockClient::from_json_file(a.mock);
      triplets = forge_hard_negatives(pairs, client, scene_objects, &report);
    } else {
#ifndef POINTLM_NO_HTTP
      HttpCompletionClient client;
      triplets = forge_hard_negatives(pairs, client, scene_objects, &report);
#else
      throw UsageError("built without HTTP support; use --mock");
#endif
    }
    save_removal_log(report, (out / "removals.csv").string());
    m.outputs.push_back("removals.csv");
    std::cout << "removed " << report.removed << " of " << pairs.size()
              << " samples\n";
  }

  save_triplets_jsonl(triplets, (out / "triplets.jsonl").string());
  m.write(a.out);
  std::cout << "wrote " << triplets.size() << " triplets to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct DimArgs {
  int d_obj = 16;
  int enc_layers = 1;
  int enc_heads = 4;
  int d_point_hidden = 8;
  int d_model = 16;
  int lm_layers = 1;
  int lm_heads = 2;
  int max_len = 128;
};

void add_dim_flags(CLI::App* cmd, DimArgs& d) {
  cmd->add_option("--d-obj", d.d_obj, "object token width");
  cmd->add_option("--enc-layers", d.enc_layers, "spatial transformer depth");
  cmd->add_option("--enc-heads", d.enc_heads, "spatial transformer heads");
  cmd->add_option("--d-point-hidden", d.d_point_hidden, "point MLP hidden width");
  cmd->add_option("--d-model", d.d_model, "decoder width");
  cmd->add_option("--lm-layers", d.lm_layers, "decoder depth");
  cmd->add_option("--lm-heads", d.lm_heads, "decoder heads");
  cmd->add_option("--max-len", d.max_len, "maximum sequence length");
}

ModelConfig model_config(const DimArgs& d, int vocab_size) {
  ModelConfig mc;
  mc.encoder.d_obj = d.d_obj;
  mc.encoder.n_layers = d.enc_layers;
  mc.encoder.n_heads = d.enc_heads;
  mc.encoder.d_llm = d.d_model;
  mc.encoder.d_point_hidden = d.d_point_hidden;
  mc.lm.vocab_size = vocab_size;
  mc.lm.d_model = d.d_model;
  mc.lm.n_layers = d.lm_layers;
  mc.lm.n_heads = d.lm_heads;
  mc.lm.max_len = d.max_len;
  return mc;
}

struct TrainArgs {
  int stage = 1;
  std::string data;
  std::string scenes;
  std::string out;
  std::string loss = "or";
  double lambda_max = -1;  // <0: stage default
  int steps = 0;           // 0: stage default
  int batch = 0;
  int accum = 0;
  double lr = 0;
  uint64_t seed = 0;
  std::string resume;
  std::string init;
  std::string vocab_path;
  bool allow_skip = false;
  DimArgs dims;
};

int cmd_train(const TrainArgs& a, const std::string& config) {
  StageConfig cfg = default_stage_config(a.stage);
  if (a.stage == 3) {
    if (a.loss == "sft") {
      cfg.loss_mode = LossMode::nll_only;
      cfg.lambda_max = 0.0;
    } else if (a.loss == "pr") {
      cfg.loss_mode = LossMode::nll_plus_pr;
    } else if (a.loss != "or") {
      throw UsageError("--loss must be one of or|pr|sft");
    }
  } else if (a.loss != "or") {
    throw UsageError("--loss applies to stage 3 only");
  }
  if (a.lambda_max >= 0 && cfg.loss_mode != LossMode::nll_only)
    cfg.lambda_max = a.lambda_max;
  if (a.steps > 0) cfg.max_steps = a.steps;
  if (a.batch > 0) cfg.batch_size = a.batch;
  if (a.accum > 0) cfg.accumulation = a.accum;
  if (a.lr > 0) cfg.learning_rate = a.lr;
  cfg.seed = a.seed;
  cfg.validate();

  // Stage sequencing: later stages start from the previous stage's export.
  if (a.stage > 1 && a.init.empty() && a.resume.empty() && !a.allow_skip)
    throw UsageError("stage " + std::to_string(a.stage) +
                     " requires --init from stage " + std::to_string(a.stage - 1) +
                     " (or --allow-skip)");

  const auto scenes = load_scene_dir(a.scenes);
  TrainDataset data;
  const bool triplet_stage = a.stage == 3;
  if (triplet_stage) {
    for (const auto& t : load_triplets_jsonl(a.data))
      data.triplets.push_back({scene_for(scenes, t.scene_id), t});
  } else {
    for (const auto& p : load_pairs_jsonl(a.data))
      data.pairs.push_back({scene_for(scenes, p.scene_id), p});
  }

  Vocab vocab;
  if (!a.vocab_path.empty()) {
    vocab = Vocab::load(a.vocab_path);
  } else {
    std::vector<std::string> corpus{system_prompt()};
    for (const auto& p : data.pairs) {
      corpus.push_back(p.sample.instruction);
      corpus.push_back(p.sample.response);
    }
    for (const auto& t : data.triplets) {
      corpus.push_back(t.sample.instruction);
      corpus.push_back(t.sample.positive);
      corpus.push_back(t.sample.negative);
    }
    vocab = Vocab::build(corpus);
  }

  SceneLM model;
  std::mt19937_64 rng(a.seed);
  model.init(rng, model_config(a.dims, vocab.size()));
  if (!a.init.empty()) load_params(model.store(), a.init);

  const fs::path out(a.out);
  fs::create_directories(out);
  vocab.save((out / "vocab.txt").string());

  Manifest m{"train", config, a.seed, {a.data, a.scenes},
             {"metrics.csv", "state.bin", "params.bin", "vocab.txt"}};
  if (!a.init.empty()) m.inputs.push_back(a.init);
  if (!a.resume.empty()) m.inputs.push_back(a.resume);

  StageResult res;
  try {
    res = run_stage(model, vocab, data, cfg, a.out,
                    a.resume.empty() ? std::nullopt
                                     : std::optional<std::string>(a.resume));
  } catch (const NumericError&) {
    // Preference losses can destabilize; dump what we have before aborting.
    save_params(model.store(), (out / "crash_params.bin").string(), /*f64=*/true);
    throw;
  }
  m.write(a.out);
  std::cout << "stage " << a.stage << " (" << to_string(cfg.loss_mode)
            << ") finished at step " << res.final_step << "; params at "
            << res.params_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string records;
  std::string model_path;
  std::string vocab_path;
  std::string scenes;
  std::string pairs;
  std::string out;
  std::string pope;
  int pope_k = 2;
  int max_new = 16;
  uint64_t seed = 0;
  DimArgs dims;
};

nlohmann::json text_metric_report(const std::vector<EvalRecord>& records,
                                  const std::string& csv_path) {
  if (records.empty()) throw DataError("empty eval set");
  std::ofstream csv(csv_path);
  if (!csv) throw DataError("cannot write per-sample metrics: " + csv_path);
  csv << "sample_id,bleu4,rouge_l,meteor_lite,em1,em1_refined,similarity\n";
  double bleu = 0, rouge = 0, meteor = 0, em = 0, em_ref = 0, sim = 0;
  std::vector<CiderInput> cider_corpus;
  for (const auto& r : records) {
    const double b = bleu4(r.prediction, r.references);
    const double ro = rouge_l(r.prediction, r.references);
    const double me = meteor_lite(r.prediction, r.references);
    const bool e1 = em1(r.prediction, r.references);
    const bool e2 = em1_refined(r.prediction, r.references);
    double s = -1;
    for (const auto& ref : r.references)
      s = std::max(s, sentence_similarity(r.prediction, ref));
    bleu += b;
    rouge += ro;
    meteor += me;
    em += e1;
    em_ref += e2;
    sim += s;
    cider_corpus.push_back({r.prediction, r.references});
    csv << r.sample_id << ',' << b << ',' << ro << ',' << me << ',' << e1
        << ',' << e2 << ',' << s << "\n";
  }
  const double n = static_cast<double>(records.size());
  return nlohmann::json{{"samples", records.size()},
                        {"bleu4", bleu / n},
                        {"rouge_l", rouge / n},
                        {"meteor_lite", meteor / n},
                        {"cider", cider(cider_corpus)},
                        {"em1", em / n},
                        {"em1_refined", em_ref / n},
                        {"sentence_similarity", sim / n}};
}

int cmd_evaluate(const EvalArgs& a, const std::string& config) {
  const fs::path out(a.out);
  fs::create_directories(out);
  Manifest m{"evaluate", config, a.seed, {}, {"report.json"}};
  nlohmann::json report;

  std::optional<SceneLM> model;
  Vocab vocab;
  std::map<std::string, Scene> scenes;
  if (!a.model_path.empty()) {
    if (a.vocab_path.empty() || a.scenes.empty())
      throw UsageError("--model requires --vocab and --scenes");
    vocab = Vocab::load(a.vocab_path);
    scenes = load_scene_dir(a.scenes);
    model.emplace();
    std::mt19937_64 rng(a.seed);
    model->init(rng, model_config(a.dims, vocab.size()));
    load_params(model->store(), a.model_path);
    m.inputs.insert(m.inputs.end(), {a.model_path, a.vocab_path, a.scenes});
  }

  if (!a.pope.empty()) {
    if (!model) throw UsageError("--pope requires --model");
    PopeSetting setting{pope_kind_from_string(a.pope), a.pope_k};
    const auto questions =
        pope_sample_questions(scene_list(scenes), setting, a.seed);
    std::ofstream qf(out / "pope_questions.csv");
    if (!qf) throw DataError("cannot write POPE questions in " + a.out);
    qf << "scene_id,label,gt\n";
    std::vector<bool> answers, gts;
    int unparsed = 0;
    for (const auto& q : questions) {
      qf << q.scene_id << ',' << q.label << ',' << (q.ground_truth ? "yes" : "no")
         << "\n";
      const std::string instruction = attach_format_prompt(
          TaskType::existence, "Is there a " + q.label + " present in this scene?");
      const std::string reply = model->generate(
          vocab, scene_for(scenes, q.scene_id), instruction, a.max_new);
      const YesNo parsed = parse_yes_no(reply);
      unparsed += !parsed.parsed;
      answers.push_back(parsed.yes);
      gts.push_back(q.ground_truth);
    }
    const PopeReport r = pope_eval(answers, gts);
    report["pope"] = {{"setting", a.pope},       {"k", a.pope_k},
                      {"precision", r.precision}, {"recall", r.recall},
                      {"f1", r.f1},               {"accuracy", r.accuracy},
                      {"yes_rate", r.yes_rate},   {"unparsed", unparsed}};
    m.outputs.push_back("pope_questions.csv");
  }

  std::vector<EvalRecord> records;
  if (!a.records.empty()) {
    records = load_eval_records(a.records);
    if (records.empty()) throw DataError("empty eval set: " + a.records);
    m.inputs.push_back(a.records);
  } else if (model && !a.pairs.empty()) {
    // Generate predictions over a pair file; the responses are references.
    m.inputs.push_back(a.pairs);
    const auto pairs = load_pairs_jsonl(a.pairs);
    for (size_t i = 0; i < pairs.size(); ++i) {
      EvalRecord r;
      r.sample_id = pairs[i].scene_id + "#" + std::to_string(i);
      r.references = {pairs[i].response};
      r.prediction = model->generate(vocab, scene_for(scenes, pairs[i].scene_id),
                                     pairs[i].instruction, a.max_new);
      records.push_back(std::move(r));
    }
  }
  if (!records.empty()) {
    report["text"] =
        text_metric_report(records, (out / "per_sample.csv").string());
    m.outputs.push_back("per_sample.csv");
  }
  if (report.empty())
    throw UsageError("nothing to evaluate: pass --records, --pairs, or --pope");

  std::ofstream rf(out / "report.json");
  if (!rf) throw DataError("cannot write report in " + a.out);
  rf << report.dump(2) << "\n";
  m.write(a.out);
  std::cout << report.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

struct DiagnoseArgs {
  std::string metrics;
  std::string out;
  int window = 1;
};

int cmd_diagnose(const DiagnoseArgs& a, const std::string& config) {
  if (a.window < 1) throw UsageError("--window must be >= 1");
  std::ifstream in(a.metrics);
  if (!in) throw DataError("cannot open metrics file: " + a.metrics);
  std::string line;
  if (!std::getline(in, line) ||
      line != "step,nll,or_loss,lambda,total,log_odds_ratio,reward_margin")
    throw DataError("unrecognized metrics header in " + a.metrics);

  std::vector<int> steps;
  std::vector<double> lor, margin;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7)
      throw DataError("malformed metrics row in " + a.metrics + ": " + line);
    steps.push_back(std::stoi(cells[0]));
    lor.push_back(std::stod(cells[5]));
    margin.push_back(std::stod(cells[6]));
  }
  if (steps.empty()) throw DataError("no metric rows in " + a.metrics);

  // Trailing moving average; shorter prefix windows shrink to what exists,
  // so the row count is preserved and window=1 is the identity.
  auto smooth = [&](const std::vector<double>& v, size_t i) {
    const size_t lo = i + 1 >= static_cast<size_t>(a.window)
                          ? i + 1 - static_cast<size_t>(a.window)
                          : 0;
    double sum = 0;
    for (size_t k = lo; k <= i; ++k) sum += v[k];
    return sum / static_cast<double>(i - lo + 1);
  };

  const fs::path out_path(a.out);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  std::ofstream outf(a.out);
  if (!outf) throw DataError("cannot write curves file: " + a.out);
  outf << "step,log_odds_ratio,reward_margin\n";
  for (size_t i = 0; i < steps.size(); ++i)
    outf << steps[i] << ',' << smooth(lor, i) << ',' << smooth(margin, i) << "\n";

  Manifest m{"diagnose", config, 0, {a.metrics}, {out_path.filename().string()}};
  m.write(out_path.has_parent_path() ? out_path.parent_path().string() : ".");
  std::cout << "wrote " << steps.size() << " rows to " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point-cloud preference-tuning pipeline"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key-value config file; flags take precedence");

  MakeSyntheticArgs ms;
  auto* c_ms = app.add_subcommand("make-synthetic",
                                  "Generate the colored-box synthetic corpus");
  c_ms->add_option("--out", ms.out, "output directory")->required();
  c_ms->add_option("--scenes", ms.scenes, "number of scenes");
  c_ms->add_option("--points", ms.points, "points per object");
  c_ms->add_option("--seed", ms.seed, "RNG seed");

  PrepareArgs pr;
  auto* c_pr = app.add_subcommand("prepare-data",
                                  "Align, resample, and format raw data");
  c_pr->add_option("--scenes", pr.scenes, "scene directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  c_pr->add_option("--annotations", pr.annotations, "annotation JSON-lines")
      ->required()
      ->check(CLI::ExistingFile);
  c_pr->add_option("--out", pr.out, "output directory")->required();
  c_pr->add_option("--points-per-object", pr.points_per_object,
                   "FPS target per object");
  c_pr->add_flag("--low-res", pr.low_res, "use 1024 points per object");
  c_pr->add_option("--seed", pr.seed, "RNG seed");

  GenNegArgs gn;
  auto* c_gn = app.add_subcommand("gen-negatives",
                                  "Build triplet datasets from pairs or scenes");
  c_gn->add_option("--pairs", gn.pairs, "pair JSON-lines")->check(CLI::ExistingFile);
  c_gn->add_option("--scenes", gn.scenes, "scene directory")
      ->check(CLI::ExistingDirectory);
  c_gn->add_option("--out", gn.out, "output directory")->required();
  c_gn->add_option("--mock", gn.mock, "mock client fixture (prompt -> response)")
      ->check(CLI::ExistingFile);
  c_gn->add_flag("--easy", gn.easy, "easy negatives from other instructions");
  c_gn->add_flag("--existence", gn.existence, "existence yes/no task");
  c_gn->add_option("--per-scene", gn.per_scene, "existence questions per scene");
  c_gn->add_option("--seed", gn.seed, "RNG seed");

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Run one training stage");
  c_tr->add_option("--stage", tr.stage, "training stage")
      ->required()
      ->check(CLI::Range(1, 3));
  c_tr->add_option("--data", tr.data, "pairs (stage 1-2) or triplets (stage 3)")
      ->required()
      ->check(CLI::ExistingFile);
  c_tr->add_option("--scenes", tr.scenes, "scene directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  c_tr->add_option("--out", tr.out, "output directory")->required();
  c_tr->add_option("--loss", tr.loss, "stage-3 objective: or|pr|sft");
  c_tr->add_option("--lambda-max", tr.lambda_max, "contrastive weight ceiling");
  c_tr->add_option("--steps", tr.steps, "optimizer steps");
  c_tr->add_option("--batch", tr.batch, "micro-batch size");
  c_tr->add_option("--accum", tr.accum, "gradient accumulation factor");
  c_tr->add_option("--lr", tr.lr, "base learning rate");
  c_tr->add_option("--seed", tr.seed, "RNG seed");
  c_tr->add_option("--resume", tr.resume, "train state to resume")
      ->check(CLI::ExistingFile);
  c_tr->add_option("--init", tr.init, "parameter export from the previous stage")
      ->check(CLI::ExistingFile);
  c_tr->add_option("--vocab", tr.vocab_path, "vocabulary file")
      ->check(CLI::ExistingFile);
  c_tr->add_flag("--allow-skip", tr.allow_skip,
                 "train a later stage without earlier-stage parameters");
  add_dim_flags(c_tr, tr.dims);

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "Metric stack and 3D-POPE");
  c_ev->add_option("--records", ev.records, "prediction/reference JSON-lines")
      ->check(CLI::ExistingFile);
  c_ev->add_option("--model", ev.model_path, "parameter export")
      ->check(CLI::ExistingFile);
  c_ev->add_option("--vocab", ev.vocab_path, "vocabulary file")
      ->check(CLI::ExistingFile);
  c_ev->add_option("--scenes", ev.scenes, "scene directory")
      ->check(CLI::ExistingDirectory);
  c_ev->add_option("--pairs", ev.pairs, "pair file to generate over")
      ->check(CLI::ExistingFile);
  c_ev->add_option("--out", ev.out, "output directory")->required();
  c_ev->add_option("--pope", ev.pope, "random|popular|adversarial");
  c_ev->add_option("--k", ev.pope_k, "POPE questions per polarity per scene");
  c_ev->add_option("--max-new", ev.max_new, "generation budget");
  c_ev->add_option("--seed", ev.seed, "RNG seed");
  add_dim_flags(c_ev, ev.dims);

  DiagnoseArgs dg;
  auto* c_dg = app.add_subcommand("diagnose",
                                  "Export log-odds-ratio and reward-margin curves");
  c_dg->add_option("--metrics", dg.metrics, "metrics.csv from train")
      ->required()
      ->check(CLI::ExistingFile);
  c_dg->add_option("--out", dg.out, "curves CSV path")->required();
  c_dg->add_option("--window", dg.window, "moving-average window");

  try {
    app.parse(argc, argv);
    const CLI::Option* config_opt = app.get_config_ptr();
    const std::string config =
        config_opt && config_opt->count() ? config_opt->as<std::string>() : "";
    if (c_ms->parsed()) return cmd_make_synthetic(ms, config);
    if (c_pr->parsed()) return cmd_prepare_data(pr, config);
    if (c_gn->parsed()) return cmd_gen_negatives(gn, config);
    if (c_tr->parsed()) return cmd_train(tr, config);
    if (c_ev->parsed()) return cmd_evaluate(ev, config);
    if (c_dg->parsed()) return cmd_diagnose(dg, config);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  }
}
