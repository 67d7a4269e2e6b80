#pragma once

// Deterministic synthetic corpus: rooms of colored boxes where the answer to
// every question is carried by the point colors. Small enough to train on a
// laptop, hard enough that preference tuning has something to separate.

#include <algorithm>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "pointlm/dataset.hpp"
#include "pointlm/errors.hpp"
#include "pointlm/forge.hpp"
#include "pointlm/geometry.hpp"
#include "pointlm/language_model.hpp"
#include "pointlm/training.hpp"

namespace pointlm {

struct SyntheticConfig {
  int n_scenes = 100;
  int min_objects = 3;
  int max_objects = 5;
  int points_per_object = 24;
  uint64_t seed = 7;

  void validate() const {
    if (n_scenes < 2) throw DataError("SyntheticConfig: need at least 2 scenes");
    if (min_objects < 2 || max_objects < min_objects)
      throw DataError("SyntheticConfig: bad object count range");
    if (points_per_object < 1)
      throw DataError("SyntheticConfig: points_per_object must be >= 1");
  }
};

namespace synth {

struct Palette {
  std::string name;
  double r, g, b;
};

inline const std::vector<Palette>& palette() {
  static const std::vector<Palette> kColors = {
      {"red", 0.9, 0.1, 0.1},    {"green", 0.1, 0.8, 0.15},
      {"blue", 0.1, 0.2, 0.9},   {"yellow", 0.9, 0.85, 0.1},
      {"white", 0.95, 0.95, 0.95}, {"purple", 0.6, 0.15, 0.8}};
  return kColors;
}

inline std::string color_question() {
  return "What colors are the boxes in the room?";
}

// Colors rendered in palette order: "the room contains red, blue and white
// boxes".
inline std::string color_answer(const std::vector<std::string>& names) {
  std::string list = names.front();
  for (size_t i = 1; i + 1 < names.size(); ++i) list += ", " + names[i];
  if (names.size() > 1) list += " and " + names.back();
  return "the room contains " + list + " boxes";
}

inline std::string count_question() {
  return "How many boxes are in the room?";
}

inline std::string count_answer(int n) {
  static const std::vector<std::string> kWords = {
      "zero", "one", "two", "three", "four", "five", "six"};
  if (n < 0 || n >= static_cast<int>(kWords.size()))
    throw DataError("count_answer: out of range");
  return "there are " + kWords[n] + " boxes in the room";
}

// The shade task names colors by synonyms the inventory task never uses, so
// the word-to-color mapping must be learned from the preference data itself.
inline const std::vector<std::string>& shade_names() {
  static const std::vector<std::string> kShades = {
      "crimson", "emerald", "azure", "golden", "ivory", "violet"};
  return kShades;
}

inline std::string shade_question() {
  return "Name one shade seen in the room.";
}

inline std::string shade_answer(const std::string& shade) {
  return "a " + shade + " shade appears in the room";
}

}  // namespace synth

// Sorted unique labels, the object-list convention for negative prompts.
inline std::vector<std::string> scene_object_labels(const Scene& scene) {
  std::vector<std::string> labels;
  for (const auto& o : scene.objects) labels.push_back(o.label);
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  return labels;
}

struct SyntheticData {
  std::vector<Scene> scenes;
  std::vector<PairExample> pairs;        // SFT / stage 1-2 material
  std::vector<TripletExample> triplets;  // attribute-swap hard negatives
  // forge prompt -> completion, for replaying negative generation offline
  std::map<std::string, std::string> mock_responses;
};

// Boxes with distinct colors and strictly distinct sizes; the color signal
// lives only in the point RGB channels, the size signal only in geometry.
inline Scene make_synthetic_scene(std::mt19937_64& rng,
                                  const SyntheticConfig& cfg,
                                  const std::string& scene_id,
                                  std::vector<int>* color_ids_out = nullptr) {
  std::uniform_int_distribution<int> n_dist(cfg.min_objects, cfg.max_objects);
  const int n = n_dist(rng);
  const auto& colors = synth::palette();
  if (n > static_cast<int>(colors.size()))
    throw DataError("make_synthetic_scene: more objects than palette colors");

  std::vector<int> color_ids(colors.size());
  for (size_t i = 0; i < color_ids.size(); ++i) color_ids[i] = static_cast<int>(i);
  std::shuffle(color_ids.begin(), color_ids.end(), rng);

  // Half-extents spaced so the ordering is unambiguous after noise.
  std::vector<double> sizes;
  for (int i = 0; i < n; ++i) sizes.push_back(0.15 + 0.12 * i);
  std::shuffle(sizes.begin(), sizes.end(), rng);

  std::uniform_real_distribution<double> center_dist(-2.0, 2.0);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> tint(-0.04, 0.04);

  Scene scene;
  scene.scene_id = scene_id;
  for (int i = 0; i < n; ++i) {
    ObjectCloud obj;
    obj.object_id = i;
    obj.label = colors[color_ids[i]].name + " box";
    const double cx = center_dist(rng), cy = center_dist(rng),
                 cz = 0.5 * sizes[i];
    for (int p = 0; p < cfg.points_per_object; ++p) {
      Point pt;
      pt.x = cx + sizes[i] * unit(rng);
      pt.y = cy + sizes[i] * unit(rng);
      pt.z = cz + sizes[i] * unit(rng);
      pt.has_color = true;
      pt.r = std::clamp(colors[color_ids[i]].r + tint(rng), 0.0, 1.0);
      pt.g = std::clamp(colors[color_ids[i]].g + tint(rng), 0.0, 1.0);
      pt.b = std::clamp(colors[color_ids[i]].b + tint(rng), 0.0, 1.0);
      obj.points.push_back(pt);
    }
    obj.recompute_centroid();
    scene.objects.push_back(std::move(obj));
  }
  if (color_ids_out) {
    color_ids_out->assign(color_ids.begin(), color_ids.begin() + n);
    std::sort(color_ids_out->begin(), color_ids_out->end());
  }
  return scene;
}

inline SyntheticData make_synthetic_dataset(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const auto& colors = synth::palette();

  SyntheticData out;
  for (int s = 0; s < cfg.n_scenes; ++s) {
    std::vector<int> present;
    Scene scene =
        make_synthetic_scene(rng, cfg, "synth" + std::to_string(s), &present);
    std::vector<int> absent;
    for (int c = 0; c < static_cast<int>(colors.size()); ++c)
      if (std::find(present.begin(), present.end(), c) == present.end())
        absent.push_back(c);

    // Two questions per scene, each with an attribute-swap hard negative
    // differing from the positive in exactly one token: the color inventory
    // (one present color replaced by an absent one) and the box count
    // (off by one).
    const int n = static_cast<int>(present.size());
    for (const bool color_q : {true, false}) {
      PairSample pair;
      pair.scene_id = scene.scene_id;
      pair.task = TaskType::qa;
      std::string negative;
      if (color_q) {
        std::vector<std::string> names;
        for (int c : present) names.push_back(colors[c].name);
        pair.instruction = synth::color_question();
        pair.response = synth::color_answer(names);
        names[rng() % names.size()] = colors[absent[rng() % absent.size()]].name;
        negative = synth::color_answer(names);
      } else {
        pair.instruction = synth::count_question();
        pair.response = synth::count_answer(n);
        const int lo = std::max(1, cfg.min_objects - 1);
        const int hi = std::min<int>(cfg.max_objects + 1,
                                     static_cast<int>(colors.size()));
        int alt = n + ((rng() & 1) ? 1 : -1);
        alt = std::clamp(alt, lo, hi);
        if (alt == n) alt = n + 1 <= hi ? n + 1 : n - 1;
        negative = synth::count_answer(alt);
      }
      pair.validate();

      TripletSample trip;
      trip.scene_id = scene.scene_id;
      trip.task = TaskType::qa;
      trip.instruction = pair.instruction;
      trip.positive = pair.response;
      trip.negative = negative;
      trip.validate();

      const std::string prompt =
          forge_prompt_for(pair, scene_object_labels(scene));
      out.mock_responses[prompt] = trip.negative;

      out.pairs.push_back({scene, pair});
      out.triplets.push_back({scene, std::move(trip)});
    }
    out.scenes.push_back(std::move(scene));
  }
  return out;
}

// Palette index recovered from an object label of the form "<color> box".
inline int palette_index_of(const std::string& label) {
  const auto& colors = synth::palette();
  for (size_t i = 0; i < colors.size(); ++i)
    if (label.rfind(colors[i].name + " ", 0) == 0) return static_cast<int>(i);
  throw DataError("palette_index_of: unknown label " + label);
}

// Preference triplets for the shade task: the positive names a random present
// color, the negative a random absent one, both via the synonym vocabulary.
inline std::vector<TripletExample> make_shade_triplets(
    const std::vector<Scene>& scenes, uint64_t seed, int per_scene = 2) {
  if (per_scene < 1) throw DataError("make_shade_triplets: per_scene must be >= 1");
  const auto& shades = synth::shade_names();
  std::mt19937_64 rng(seed);
  std::vector<TripletExample> out;
  for (const Scene& scene : scenes) {
    std::vector<int> present;
    for (const auto& o : scene.objects) present.push_back(palette_index_of(o.label));
    std::sort(present.begin(), present.end());
    present.erase(std::unique(present.begin(), present.end()), present.end());
    std::vector<int> absent;
    for (int c = 0; c < static_cast<int>(shades.size()); ++c)
      if (!std::binary_search(present.begin(), present.end(), c)) absent.push_back(c);
    if (absent.empty())
      throw DataError("make_shade_triplets: scene uses the whole palette");
    for (int k = 0; k < per_scene; ++k) {
      TripletSample t;
      t.scene_id = scene.scene_id;
      t.task = TaskType::qa;
      t.instruction = synth::shade_question();
      t.positive = synth::shade_answer(shades[present[rng() % present.size()]]);
      t.negative = synth::shade_answer(shades[absent[rng() % absent.size()]]);
      t.validate();
      out.push_back({scene, std::move(t)});
    }
  }
  return out;
}

// Vocabulary covering the system prompt plus every instruction and both
// responses of the corpus.
inline Vocab make_synthetic_vocab(
    const SyntheticData& data,
    const std::vector<TripletExample>& extra = {}) {
  std::vector<std::string> corpus = {system_prompt(), synth::color_question(),
                                     synth::count_question()};
  for (const auto& t : data.triplets) {
    corpus.push_back(t.sample.positive);
    corpus.push_back(t.sample.negative);
  }
  for (const auto& t : extra) {
    corpus.push_back(t.sample.instruction);
    corpus.push_back(t.sample.positive);
    corpus.push_back(t.sample.negative);
  }
  return Vocab::build(corpus);
}

// Fraction of triplets whose positive outscores its negative.
inline double preference_accuracy(const SceneLM& model, const Vocab& vocab,
                                  const std::vector<TripletExample>& triplets) {
  if (triplets.empty()) throw DataError("preference_accuracy: no triplets");
  int wins = 0;
  for (const auto& ex : triplets) {
    Graph g(/*record=*/false);
    const auto scene_tokens = model.encode_scene_tokens(g, ex.scene);
    const TokenSequence pos =
        model.assemble(vocab, ex.scene, ex.sample.instruction, ex.sample.positive);
    const TokenSequence neg =
        model.assemble(vocab, ex.scene, ex.sample.instruction, ex.sample.negative);
    const double lp_pos = model.response_logprob(g, pos, scene_tokens)->v[0];
    const double lp_neg = model.response_logprob(g, neg, scene_tokens)->v[0];
    if (lp_pos > lp_neg) ++wins;
  }
  return static_cast<double>(wins) / triplets.size();
}

}  // namespace pointlm
