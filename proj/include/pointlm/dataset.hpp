#pragma once

// On-disk sample schemas: (instruction, response) pairs for stages 1-2 and
// (instruction, positive, negative) triplets for stage 3. JSON-lines, one
// sample per line.

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pointlm/errors.hpp"

namespace pointlm {

enum class TaskType {
  object_caption,
  object_in_scene_caption,
  scene_caption,
  qa,
  existence,
};

inline std::string to_string(TaskType t) {
  switch (t) {
    case TaskType::object_caption: return "object_caption";
    case TaskType::object_in_scene_caption: return "object_in_scene_caption";
    case TaskType::scene_caption: return "scene_caption";
    case TaskType::qa: return "qa";
    case TaskType::existence: return "existence";
  }
  throw NumericError("to_string: bad TaskType");
}

inline TaskType task_from_string(const std::string& s) {
  if (s == "object_caption") return TaskType::object_caption;
  if (s == "object_in_scene_caption") return TaskType::object_in_scene_caption;
  if (s == "scene_caption") return TaskType::scene_caption;
  if (s == "qa") return TaskType::qa;
  if (s == "existence") return TaskType::existence;
  throw DataError("unknown task type: " + s);
}

struct PairSample {
  std::string scene_id;
  TaskType task = TaskType::object_caption;
  std::string instruction;
  std::string response;
  // Only meaningful for object-in-scene captions; names the described object
  // for negative-prompt construction.
  std::string target_object;

  void validate() const {
    if (instruction.empty()) throw DataError("PairSample: empty instruction");
    if (response.empty()) throw DataError("PairSample: empty response");
  }
};

struct TripletSample {
  std::string scene_id;
  TaskType task = TaskType::qa;
  std::string instruction;
  std::string positive;
  std::string negative;

  void validate() const {
    if (instruction.empty()) throw DataError("TripletSample: empty instruction");
    if (positive.empty() || negative.empty())
      throw DataError("TripletSample: empty response");
    if (positive == negative)
      throw DataError("TripletSample: negative equals positive");
    if (task == TaskType::existence) {
      auto yn = [](const std::string& s) { return s == "yes" || s == "no"; };
      if (!yn(positive) || !yn(negative))
        throw DataError("TripletSample: existence responses must be yes/no");
    }
  }
};

namespace detail {

inline nlohmann::json parse_line(const std::string& path, int lineno,
                                 const std::string& line) {
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
  }
}

}  // namespace detail

inline void save_pairs_jsonl(const std::vector<PairSample>& samples,
                             const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write pair file: " + path);
  for (const auto& s : samples) {
    nlohmann::json j{{"scene_id", s.scene_id},
                     {"task", to_string(s.task)},
                     {"instruction", s.instruction},
                     {"response", s.response}};
    if (!s.target_object.empty()) j["target_object"] = s.target_object;
    out << j.dump() << "\n";
  }
}

inline std::vector<PairSample> load_pairs_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open pair file: " + path);
  std::vector<PairSample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const nlohmann::json j = detail::parse_line(path, lineno, line);
    PairSample s;
    try {
      s.scene_id = j.at("scene_id").get<std::string>();
      s.task = task_from_string(j.at("task").get<std::string>());
      s.instruction = j.at("instruction").get<std::string>();
      s.response = j.at("response").get<std::string>();
      s.target_object = j.value("target_object", "");
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

inline void save_triplets_jsonl(const std::vector<TripletSample>& samples,
                                const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write triplet file: " + path);
  for (const auto& s : samples) {
    out << nlohmann::json{{"scene_id", s.scene_id},
                          {"task", to_string(s.task)},
                          {"instruction", s.instruction},
                          {"positive", s.positive},
                          {"negative", s.negative}}
               .dump()
        << "\n";
  }
}

inline std::vector<TripletSample> load_triplets_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open triplet file: " + path);
  std::vector<TripletSample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const nlohmann::json j = detail::parse_line(path, lineno, line);
    TripletSample s;
    try {
      s.scene_id = j.at("scene_id").get<std::string>();
      s.task = task_from_string(j.at("task").get<std::string>());
      s.instruction = j.at("instruction").get<std::string>();
      s.positive = j.at("positive").get<std::string>();
      s.negative = j.at("negative").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace pointlm
