#pragma once

// Dataset forge: prompt construction for hard-negative generation through a
// pluggable completion client, sample filtering, easy negatives, existence
// questions, and instruction formatting.

#include <algorithm>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pointlm/dataset.hpp"
#include "pointlm/errors.hpp"
#include "pointlm/geometry.hpp"

namespace pointlm {

// ---------------------------------------------------------------------------
// Prompt templates. These texts are the product artifact and must stay
// byte-stable; golden-file tests pin them.
// ---------------------------------------------------------------------------

inline const std::string& qa_negative_prompt_template() {
  static const std::string t =
      "Generate an ‘incorrect answer' for a given question about a 3D "
      "scene. The ‘incorrect answer' should be a hard negative: plausible "
      "yet wrong, challenging to distinguish from the ground truth answer. The "
      "input context includes a top-view 2D image, scene metadata, the "
      "original question, and the ground truth answer.\n"
      "\n"
      "Conditions for generating the ‘incorrect answer':\n"
      "1. The ‘incorrect answer' should demonstrate one or more of the "
      "following perceptual blindness issues:\n"
      "1-1. Failure to recognize the existence of objects that are actually "
      "present in the scene.\n"
      "1-2. Misidentification of object locations within the scene. For "
      "ambiguous direction questions, generate an ‘incorrect answer' with "
      "a clearly incorrect object. (e.g., Q: “Where is the beige wooden "
      "working table placed?\" GT: “right of tall cabinet\" Incorrect "
      "answer: “left of nightstand\")\n"
      "1-3. Misattribution of object attributes such as size, shape, or "
      "color.\n"
      "\n"
      "2. Create a short, concise ‘incorrect answer' that:\n"
      "2-1. Is composed of objects listed in the ‘all objects' "
      "information.\n"
      "2-2. Follows the same format as the GT.\n"
      "2-3. Is short and concise. Do not provide any other type of response "
      "like ‘-', ‘output:', or ‘incorrect answer:'.\n"
      "\n"
      "3. For certain problematic cases, generate one of the following "
      "responses instead of an ‘incorrect answer':\n"
      "3-1. “REMOVE THIS SAMPLE: Insufficient image context\" - If the "
      "image alone does not provide enough context to answer the question or "
      "determine the GT answer.\n"
      "3-2. “REMOVE THIS SAMPLE: Unreasonable GT\" - If the GT is "
      "unreasonable (e.g., Q: “What is under the table?\" GT: "
      "“Yes\").\n"
      "3-3. “REMOVE THIS SAMPLE: Directional ambiguity\" - If the "
      "question or GT involves ambiguous directions such as left or right.\n"
      "\n"
      "Input context:\n"
      "- Question: {question}\n"
      "- Ground Truth (GT): {chosen_value}\n"
      "- All objects in the scene: {object_dict}\n";
  return t;
}

inline const std::string& caption_negative_prompt_template() {
  static const std::string t =
      "Below is a description of a specific object and its positional "
      "relationship to another object. Based on this description, generate a "
      "plausible but slightly noisy description by adding some hallucinations, "
      "such as incorrect colors or incorrect positional relationships. The new "
      "description should not deviate significantly from the original form and "
      "should maintain a similar structure to the following set. Even if the "
      "resulting description contains grammatical errors, ensure it retains "
      "the original format as much as possible:\n"
      "\n"
      "Ex1) a black tv, in the direction from the entrance and from the "
      "outside, will be on the right side of the blue curtain. on the left of "
      "the tv is a small bike.\n"
      "Ex2) there is a white toilet. placed in the corner of the bath.\n"
      "Ex3) there is a white plastic clothes handler. placed next to the bin "
      "in the corner.\n"
      "\n"
      "Target Object: {Target_Object}\n"
      "Description: {Description}\n"
      "\n"
      "Generate a new description:\n";
  return t;
}

inline std::string build_scene_caption_prompt() {
  static const std::string t =
      "Your task is to provide a detailed description of a space-based solely "
      "on provided multi-view images, without mentioning the image itself. "
      "Describe the space from different perspectives to give a comprehensive "
      "understanding of its layout, features, and atmosphere.\n"
      "\n"
      "Your descriptions must comply with the following constraints:\n"
      "- Describe each detail as comprehensively as possible.\n"
      "- Avoid mentioning external information, such as the perspective of the "
      "image.\n"
      "- Format your description into a single paragraph without any special "
      "symbols.\n"
      "- Include detailed descriptions of each object and its color within the "
      "scene.\n"
      "- You do provide captions based on visuals, but in your responses, "
      "never use the word 'images.' Instead, use different expressions to "
      "write the descriptions.\n"
      "- In some images, certain objects or scenes may not be clearly visible "
      "and there may be ambiguous parts. In such cases, do not attempt to "
      "forcefully add captions based on arbitrary guesses.\n"
      "\n"
      "For example 1)\n"
      "Description :\n"
      "In this depiction, the scene unfolds within a room richly adorned with "
      "contemporary furnishings marked by vibrant splashes of red and "
      "understated neutral tones. Predominantly, a plush red sofa commands "
      "attention, complemented by a matching red ottoman centered on a large "
      "gray area rug. This lounge area is flanked by a variety of shelving "
      "units filled with an assortment of items that suggest a living "
      "space-cum-studio. The bookshelves are packed with knick-knacks and "
      "books, indicating a personal and used space. Visible soft gray pillows "
      "tastefully arranged on the sofa add a touch of comfort and style, "
      "suitable for relaxation and guest entertainment. Nearby, a modernistic "
      "white floor lamp provides functional yet aesthetic lighting, and small, "
      "colorful art pieces on the walls contribute a creative and lively "
      "ambiance to the space. Other details, such as a white decorative vase "
      "and green cabinetry, enhance the eclectic and personalized feel of the "
      "room, suggesting this is a well-lived and cherished space.\n"
      "\n"
      "For example 2)\n"
      "Description :\n"
      "In this detailed scene, we are presented with a diverse visual "
      "compilation of a living area, kitchen, and utility spaces. The living "
      "area features a comfortable couch, alongside which stands a floor lamp "
      "offering illumination. Adjacent to this is a compact yet stocked "
      "kitchenette showcasing essential appliances like a microwave and a "
      "coffee maker, both indicative of modern living comforts. A dining "
      "corner is discerned, identified by a wooden table surrounded by chairs, "
      "which indicates a common area for meals. Notable domestic features such "
      "as a washing machine and a basket suggest routine laundry activities. "
      "The ambiance is complemented by personal touches evident from pictures "
      "and posters adorning the walls, adding a layer of individuality and "
      "lived-in appeal. The floor, visible as a continuous surface stretching "
      "across the area, bears no significant wear, enhancing the overall "
      "aesthetics. The inclusion of a bathroom, though partially visible, with "
      "standard fittings underscores the comprehensive functionality of the "
      "layout. Instruments such as a guitar imply leisure and creative "
      "pursuits within this space, enriching the scene's narrative of daily "
      "life and recreation. The presence of storage solutions, seen as "
      "bookshelves brimming with books and sundry items, ensures that the "
      "essentials are neatly organized, promoting an orderly environment. "
      "Collectively, these elements piece together a vivid portrayal of a "
      "dwelling designed for comfort, convenience, and personal expression.\n"
      "\n"
      "Description :\n";
  return t;
}

inline std::string system_prompt() {
  return
      "You are able to understand the visual content that the user provides "
      "and assist the user with a variety of tasks using natural language. "
      "You should follow the instructions carefully.";
}

namespace detail {

inline std::string replace_once(std::string text, const std::string& slot,
                                const std::string& value) {
  const size_t pos = text.find(slot);
  if (pos == std::string::npos)
    throw NumericError("prompt template missing slot " + slot);
  return text.replace(pos, slot.size(), value);
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline std::string build_qa_negative_prompt(
    const std::string& question, const std::string& ground_truth,
    const std::vector<std::string>& object_list) {
  if (question.empty()) throw DataError("build_qa_negative_prompt: empty question");
  if (ground_truth.empty())
    throw DataError("build_qa_negative_prompt: empty ground truth");
  std::string objects;
  if (object_list.empty()) {
    objects = "[] (warning: no object list available)";
  } else {
    objects = "[";
    for (size_t i = 0; i < object_list.size(); ++i) {
      if (i) objects += ", ";
      objects += object_list[i];
    }
    objects += "]";
  }
  std::string p = qa_negative_prompt_template();
  p = detail::replace_once(std::move(p), "{question}", question);
  p = detail::replace_once(std::move(p), "{chosen_value}", ground_truth);
  p = detail::replace_once(std::move(p), "{object_dict}", objects);
  return p;
}

inline std::string build_caption_negative_prompt(
    const std::string& target_object, const std::string& description) {
  if (target_object.empty())
    throw DataError("build_caption_negative_prompt: empty target object");
  if (description.empty())
    throw DataError("build_caption_negative_prompt: empty description");
  std::string p = caption_negative_prompt_template();
  p = detail::replace_once(std::move(p), "{Target_Object}", target_object);
  p = detail::replace_once(std::move(p), "{Description}", description);
  return p;
}

// ---------------------------------------------------------------------------
// Completion clients
// ---------------------------------------------------------------------------

class CompletionClient {
 public:
  virtual ~CompletionClient() = default;
  // attachments are image paths; clients may ignore them.
  virtual std::string send(const std::string& prompt,
                           const std::vector<std::string>& attachments) = 0;
  std::string send(const std::string& prompt) { return send(prompt, {}); }
};

// Deterministic fixture-driven client: exact prompt -> response.
class MockClient : public CompletionClient {
 public:
  using CompletionClient::send;

  MockClient() = default;
  explicit MockClient(std::map<std::string, std::string> responses)
      : responses_(std::move(responses)) {}

  static MockClient from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open mock fixture: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ": " + e.what());
    }
    std::map<std::string, std::string> m;
    for (auto it = j.begin(); it != j.end(); ++it)
      m[it.key()] = it.value().get<std::string>();
    return MockClient(std::move(m));
  }

  void set(const std::string& prompt, const std::string& response) {
    responses_[prompt] = response;
  }

  std::string send(const std::string& prompt,
                   const std::vector<std::string>&) override {
    auto it = responses_.find(prompt);
    if (it == responses_.end())
      throw DataError("mock client has no response for prompt");
    return it->second;
  }

 private:
  std::map<std::string, std::string> responses_;
};

// ---------------------------------------------------------------------------
// Hard negatives
// ---------------------------------------------------------------------------

enum class RemoveReason {
  insufficient_context,
  unreasonable_gt,
  directional_ambiguity,
};

inline std::string to_string(RemoveReason r) {
  switch (r) {
    case RemoveReason::insufficient_context: return "insufficient_context";
    case RemoveReason::unreasonable_gt: return "unreasonable_gt";
    case RemoveReason::directional_ambiguity: return "directional_ambiguity";
  }
  throw NumericError("to_string: bad RemoveReason");
}

struct NegativeResult {
  enum class Kind { answer, remove };
  Kind kind = Kind::answer;
  std::string text;
  // Unset only when the client emitted a removal reason outside the known
  // set; the verbatim reason then lives in text.
  std::optional<RemoveReason> remove_reason;
};

inline NegativeResult generate_hard_negative(
    CompletionClient& client, const std::string& prompt,
    const std::vector<std::string>& attachments = {}) {
  const std::string raw = detail::trim(client.send(prompt, attachments));
  static const std::string kMarker = "REMOVE THIS SAMPLE:";
  NegativeResult out;
  if (raw.rfind(kMarker, 0) == 0) {
    out.kind = NegativeResult::Kind::remove;
    const std::string reason = detail::trim(raw.substr(kMarker.size()));
    if (reason == "Insufficient image context")
      out.remove_reason = RemoveReason::insufficient_context;
    else if (reason == "Unreasonable GT")
      out.remove_reason = RemoveReason::unreasonable_gt;
    else if (reason == "Directional ambiguity")
      out.remove_reason = RemoveReason::directional_ambiguity;
    out.text = reason;
  } else {
    out.kind = NegativeResult::Kind::answer;
    out.text = raw;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Easy negatives
// ---------------------------------------------------------------------------

// Uniformly random response drawn from a sample whose instruction differs
// from the target's. Deterministic given the seed.
inline std::string easy_negative(const std::vector<PairSample>& corpus,
                                 size_t index, uint64_t rng_seed) {
  if (corpus.size() < 2) throw DataError("easy_negative: corpus too small");
  if (index >= corpus.size()) throw DataError("easy_negative: index out of range");
  std::vector<size_t> eligible;
  for (size_t i = 0; i < corpus.size(); ++i)
    if (corpus[i].instruction != corpus[index].instruction) eligible.push_back(i);
  if (eligible.empty())
    throw DataError("easy_negative: no sample with a different instruction");
  bool all_same = true;
  for (size_t i : eligible) all_same &= corpus[i].response == corpus[index].response;
  if (all_same) throw DataError("easy_negative: all responses identical");
  std::mt19937_64 rng(rng_seed);
  std::uniform_int_distribution<size_t> pick(0, eligible.size() - 1);
  // Reject draws that collide with the positive so the triplet stays valid.
  for (;;) {
    const std::string& r = corpus[eligible[pick(rng)]].response;
    if (r != corpus[index].response) return r;
  }
}

// ---------------------------------------------------------------------------
// Existence questions
// ---------------------------------------------------------------------------

struct LabelStats {
  std::map<std::string, int> frequency;  // object count across all scenes
  std::map<std::pair<std::string, std::string>, int> cooccurrence;  // scenes containing both
  std::vector<std::string> all_labels;   // sorted unique
};

inline LabelStats compute_label_stats(const std::vector<Scene>& scenes) {
  LabelStats st;
  std::set<std::string> all;
  for (const auto& s : scenes) {
    std::set<std::string> present;
    for (const auto& o : s.objects) {
      ++st.frequency[o.label];
      present.insert(o.label);
    }
    for (const auto& a : present)
      for (const auto& b : present)
        if (a < b) ++st.cooccurrence[{a, b}];
    all.insert(present.begin(), present.end());
  }
  st.all_labels.assign(all.begin(), all.end());
  return st;
}

inline int cooccurrence(const LabelStats& st, const std::string& a,
                        const std::string& b) {
  if (a == b) return 0;
  auto it = st.cooccurrence.find(a < b ? std::make_pair(a, b)
                                       : std::make_pair(b, a));
  return it == st.cooccurrence.end() ? 0 : it->second;
}

// Sampling weight for an absent label: global frequency times the maximum
// co-occurrence with any label present in the scene.
inline std::vector<std::pair<std::string, double>> absent_label_weights(
    const Scene& scene, const LabelStats& stats) {
  std::set<std::string> present;
  for (const auto& o : scene.objects) present.insert(o.label);
  std::vector<std::pair<std::string, double>> out;
  for (const auto& label : stats.all_labels) {
    if (present.count(label)) continue;
    int max_cooc = 0;
    for (const auto& p : present)
      max_cooc = std::max(max_cooc, cooccurrence(stats, label, p));
    out.emplace_back(label,
                     static_cast<double>(stats.frequency.at(label)) * max_cooc);
  }
  return out;
}

inline std::string existence_instruction(const std::string& label,
                                         std::mt19937_64& rng) {
  static const std::vector<std::string> kTemplates = {
      "Does the room contain any {}?",
      "Have you noticed any {} in the room?",
      "Is there a {} present in this scene?",
  };
  std::uniform_int_distribution<size_t> pick(0, kTemplates.size() - 1);
  std::string t = kTemplates[pick(rng)];
  return detail::replace_once(std::move(t), "{}", label);
}

inline std::string attach_format_prompt(TaskType task,
                                        const std::string& instruction) {
  switch (task) {
    case TaskType::qa:
      return instruction + " Answer the question using a single word or phrase.";
    case TaskType::object_in_scene_caption:
      return instruction + " Describe it briefly.";
    case TaskType::existence:
      return instruction + " Please answer with yes or no.";
    default:
      return instruction;  // stage 1-2 tasks carry no format prompt
  }
}

inline std::string merge_situation(const std::string& situation,
                                   const std::string& question) {
  if (situation.empty()) return question;
  return situation + " " + question;
}

// Per scene: half the questions ask about present objects (positive "yes"),
// half about absent ones chosen with probability proportional to
// frequency x max co-occurrence (positive "no"). Balanced within +-1.
inline std::vector<TripletSample> existence_questions(
    const std::vector<Scene>& scenes, int n_per_scene, uint64_t rng_seed,
    std::vector<std::string>* warnings = nullptr) {
  if (scenes.size() < 2)
    throw DataError("existence_questions: need at least 2 scenes for statistics");
  if (n_per_scene < 1)
    throw DataError("existence_questions: n_per_scene must be positive");
  const LabelStats stats = compute_label_stats(scenes);
  std::mt19937_64 rng(rng_seed);
  std::vector<TripletSample> out;

  for (const auto& scene : scenes) {
    const int n_yes = (n_per_scene + 1) / 2;
    const int n_no = n_per_scene - n_yes;

    std::set<std::string> present_set;
    for (const auto& o : scene.objects) present_set.insert(o.label);
    std::vector<std::string> present(present_set.begin(), present_set.end());

    for (int i = 0; i < n_yes; ++i) {
      std::uniform_int_distribution<size_t> pick(0, present.size() - 1);
      const std::string& label = present[pick(rng)];
      TripletSample t;
      t.scene_id = scene.scene_id;
      t.task = TaskType::existence;
      t.instruction = attach_format_prompt(
          TaskType::existence, existence_instruction(label, rng));
      t.positive = "yes";
      t.negative = "no";
      out.push_back(std::move(t));
    }

    auto weights = absent_label_weights(scene, stats);
    if (weights.empty()) {
      if (n_no > 0 && warnings)
        warnings->push_back("scene " + scene.scene_id +
                            " contains every known label; absent-object "
                            "questions skipped");
      continue;
    }
    double total = 0;
    for (const auto& [_, w] : weights) total += w;
    for (int i = 0; i < n_no; ++i) {
      size_t chosen = 0;
      if (total > 0) {
        std::uniform_real_distribution<double> u(0, total);
        double x = u(rng), acc = 0;
        for (size_t k = 0; k < weights.size(); ++k) {
          acc += weights[k].second;
          if (x <= acc) {
            chosen = k;
            break;
          }
        }
      } else {  // all weights zero: fall back to uniform
        std::uniform_int_distribution<size_t> pick(0, weights.size() - 1);
        chosen = pick(rng);
      }
      TripletSample t;
      t.scene_id = scene.scene_id;
      t.task = TaskType::existence;
      t.instruction = attach_format_prompt(
          TaskType::existence,
          existence_instruction(weights[chosen].first, rng));
      t.positive = "no";
      t.negative = "yes";
      out.push_back(std::move(t));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hard-negative pipeline over a pair corpus
// ---------------------------------------------------------------------------

struct ForgeRemoval {
  std::string sample_id;
  std::string reason;
};

struct ForgeReport {
  size_t produced = 0;
  size_t removed = 0;
  std::vector<ForgeRemoval> removals;
};

inline std::string forge_prompt_for(const PairSample& pair,
                                    const std::vector<std::string>& objects) {
  switch (pair.task) {
    case TaskType::qa:
      return build_qa_negative_prompt(pair.instruction, pair.response, objects);
    case TaskType::object_in_scene_caption:
      return build_caption_negative_prompt(
          pair.target_object.empty() ? "the described object"
                                     : pair.target_object,
          pair.response);
    default:
      throw DataError("forge_prompt_for: task has no negative prompt: " +
                      to_string(pair.task));
  }
}

// Runs the client over every pair, dropping removals and negatives equal to
// the positive. Outputs keep input order, so files are deterministic.
inline std::vector<TripletSample> forge_hard_negatives(
    const std::vector<PairSample>& pairs, CompletionClient& client,
    const std::map<std::string, std::vector<std::string>>& scene_objects,
    ForgeReport* report = nullptr) {
  std::vector<TripletSample> out;
  size_t removed = 0;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const PairSample& p = pairs[i];
    const std::string sample_id = p.scene_id + "#" + std::to_string(i);
    std::vector<std::string> objects;
    if (auto it = scene_objects.find(p.scene_id); it != scene_objects.end())
      objects = it->second;
    const NegativeResult neg =
        generate_hard_negative(client, forge_prompt_for(p, objects));
    if (neg.kind == NegativeResult::Kind::remove) {
      ++removed;
      if (report)
        report->removals.push_back(
            {sample_id, neg.remove_reason ? to_string(*neg.remove_reason)
                                          : neg.text});
      continue;
    }
    if (neg.text == p.response) {
      ++removed;
      if (report)
        report->removals.push_back({sample_id, "negative equals positive"});
      continue;
    }
    TripletSample t;
    t.scene_id = p.scene_id;
    t.task = p.task;
    t.instruction = p.instruction;
    t.positive = p.response;
    t.negative = neg.text;
    t.validate();
    out.push_back(std::move(t));
  }
  if (report) {
    report->produced = out.size();
    report->removed = removed;
  }
  return out;
}

inline void save_removal_log(const ForgeReport& report,
                             const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write removal log: " + path);
  out << "sample_id,reason\n";
  for (const auto& r : report.removals)
    out << r.sample_id << "," << r.reason << "\n";
}

}  // namespace pointlm
