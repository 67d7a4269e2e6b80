#pragma once

// Text-metric stack (BLEU-4, ROUGE-L, CIDEr, METEOR-lite, exact match) and
// the object-existence hallucination protocol with random/popular/adversarial
// negative sampling.
//
// METEOR here omits the synonymy stage (no lexical database), hence the
// meteor_lite name; its absolute values are not comparable to full METEOR.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pointlm/errors.hpp"
#include "pointlm/forge.hpp"
#include "pointlm/geometry.hpp"
#include "pointlm/language_model.hpp"

namespace pointlm {

// ---------------------------------------------------------------------------
// Normalization and tokenization
// ---------------------------------------------------------------------------

// Lowercase, strip punctuation, collapse whitespace, drop leading articles.
inline std::vector<std::string> normalize_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) {
      out.push_back(word);
      word.clear();
    }
  };
  for (char ch : text) {
    const unsigned char c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80)
      word.push_back(static_cast<char>(std::tolower(c)));
    else
      flush();
  }
  flush();
  while (!out.empty() &&
         (out.front() == "a" || out.front() == "an" || out.front() == "the"))
    out.erase(out.begin());
  return out;
}

// Metric tokenization keeps punctuation as tokens (same as the LM tokenizer).
inline std::vector<std::string> metric_tokens(const std::string& text) {
  return Vocab::split(text);
}

// ---------------------------------------------------------------------------
// BLEU-4
// ---------------------------------------------------------------------------

namespace detail {

inline std::map<std::string, int> ngram_counts(
    const std::vector<std::string>& toks, int n) {
  std::map<std::string, int> out;
  if (static_cast<int>(toks.size()) < n) return out;
  for (size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key;
    for (int j = 0; j < n; ++j) {
      if (j) key.push_back('\x1f');
      key += toks[i + j];
    }
    ++out[key];
  }
  return out;
}

}  // namespace detail

inline double bleu4(const std::string& pred,
                    const std::vector<std::string>& refs) {
  if (refs.empty()) throw DataError("bleu4: no references");
  const auto p = metric_tokens(pred);
  if (p.empty()) return 0.0;
  std::vector<std::vector<std::string>> rtoks;
  for (const auto& r : refs) rtoks.push_back(metric_tokens(r));

  // Orders the prediction is too short to populate are skipped; the uniform
  // weights renormalize over the orders actually present.
  constexpr double kEps = 1e-9;
  double log_sum = 0.0;
  int orders = 0;
  for (int n = 1; n <= 4; ++n) {
    const auto pc = detail::ngram_counts(p, n);
    std::map<std::string, int> max_ref;
    for (const auto& rt : rtoks)
      for (const auto& [k, c] : detail::ngram_counts(rt, n))
        max_ref[k] = std::max(max_ref[k], c);
    int total = 0, clipped = 0;
    for (const auto& [k, c] : pc) {
      total += c;
      auto it = max_ref.find(k);
      clipped += std::min(c, it == max_ref.end() ? 0 : it->second);
    }
    if (total == 0) continue;
    // epsilon numerator keeps the geometric mean finite on zero matches
    const double prec = clipped > 0 ? static_cast<double>(clipped) / total
                                    : kEps / total;
    log_sum += std::log(prec);
    ++orders;
  }
  if (orders == 0) return 0.0;
  log_sum /= orders;

  // Brevity penalty against the closest reference length (ties -> shorter).
  size_t best_r = rtoks[0].size();
  for (const auto& rt : rtoks) {
    const auto d = [&](size_t len) {
      return len > p.size() ? len - p.size() : p.size() - len;
    };
    if (d(rt.size()) < d(best_r) || (d(rt.size()) == d(best_r) && rt.size() < best_r))
      best_r = rt.size();
  }
  const double bp =
      p.size() >= best_r
          ? 1.0
          : std::exp(1.0 - static_cast<double>(best_r) / p.size());
  return bp * std::exp(log_sum);
}

// ---------------------------------------------------------------------------
// ROUGE-L
// ---------------------------------------------------------------------------

inline int lcs_length(const std::vector<std::string>& a,
                      const std::vector<std::string>& b) {
  std::vector<int> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1
                                    : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l(const std::string& pred,
                      const std::vector<std::string>& refs) {
  if (refs.empty()) throw DataError("rouge_l: no references");
  const auto p = metric_tokens(pred);
  constexpr double kBeta = 1.2;
  double best = 0.0;
  for (const auto& ref : refs) {
    const auto r = metric_tokens(ref);
    if (p.empty() || r.empty()) continue;
    const int l = lcs_length(p, r);
    if (l == 0) continue;
    const double prec = static_cast<double>(l) / p.size();
    const double rec = static_cast<double>(l) / r.size();
    const double f = (1 + kBeta * kBeta) * prec * rec /
                     (rec + kBeta * kBeta * prec);
    best = std::max(best, f);
  }
  return best;
}

// ---------------------------------------------------------------------------
// CIDEr
// ---------------------------------------------------------------------------

struct CiderInput {
  std::string pred;
  std::vector<std::string> refs;
};

// TF-IDF n-gram (n=1..4) cosine averaged over n, with document frequency
// counted over reference sets and a Gaussian length penalty (sigma = 6).
inline double cider(const std::vector<CiderInput>& corpus) {
  if (corpus.empty()) throw DataError("cider: empty corpus");
  const double n_docs = static_cast<double>(corpus.size());
  constexpr double kSigma = 6.0;

  double total = 0.0;
  for (int n = 1; n <= 4; ++n) {
    // df = number of corpus items whose reference set contains the n-gram.
    std::map<std::string, int> df;
    for (const auto& item : corpus) {
      std::set<std::string> seen;
      for (const auto& ref : item.refs)
        for (const auto& [k, c] : detail::ngram_counts(metric_tokens(ref), n))
          seen.insert(k);
      for (const auto& k : seen) ++df[k];
    }
    auto idf = [&](const std::string& k) {
      auto it = df.find(k);
      return std::log(n_docs / std::max(1, it == df.end() ? 0 : it->second));
    };
    auto tfidf = [&](const std::vector<std::string>& toks) {
      std::map<std::string, double> v;
      for (const auto& [k, c] : detail::ngram_counts(toks, n))
        v[k] = c * idf(k);
      return v;
    };
    auto norm = [](const std::map<std::string, double>& v) {
      double s = 0;
      for (const auto& [_, x] : v) s += x * x;
      return std::sqrt(s);
    };

    double sum_n = 0.0;
    for (const auto& item : corpus) {
      const auto ptoks = metric_tokens(item.pred);
      const auto pv = tfidf(ptoks);
      const double pn = norm(pv);
      double acc = 0.0;
      for (const auto& ref : item.refs) {
        const auto rtoks = metric_tokens(ref);
        const auto rv = tfidf(rtoks);
        const double rn = norm(rv);
        if (pn == 0 || rn == 0) continue;
        double dot = 0;
        for (const auto& [k, x] : pv) {
          auto it = rv.find(k);
          if (it != rv.end()) dot += x * it->second;
        }
        const double dl =
            static_cast<double>(ptoks.size()) - static_cast<double>(rtoks.size());
        acc += std::exp(-dl * dl / (2 * kSigma * kSigma)) * dot / (pn * rn);
      }
      sum_n += item.refs.empty() ? 0.0 : acc / item.refs.size();
    }
    total += sum_n / n_docs;
  }
  return total / 4.0;
}

// ---------------------------------------------------------------------------
// METEOR-lite
// ---------------------------------------------------------------------------

namespace detail {

// Crude suffix stemmer, enough for plural/inflection matches.
inline std::string stem(const std::string& w) {
  for (const char* suf : {"ing", "ed", "es", "s"}) {
    const size_t n = std::char_traits<char>::length(suf);
    if (w.size() > n + 2 && w.compare(w.size() - n, n, suf) == 0)
      return w.substr(0, w.size() - n);
  }
  return w;
}

struct Alignment {
  int matches = 0;
  int chunks = 0;
};

// Exact matches first, then stem matches over the remainder; both greedy
// left-to-right. Chunks count maximal runs contiguous in both strings.
inline Alignment align(const std::vector<std::string>& p,
                       const std::vector<std::string>& r) {
  std::vector<int> map_to_ref(p.size(), -1);
  std::vector<char> used(r.size(), 0);
  for (size_t i = 0; i < p.size(); ++i)
    for (size_t j = 0; j < r.size(); ++j)
      if (!used[j] && p[i] == r[j]) {
        map_to_ref[i] = static_cast<int>(j);
        used[j] = 1;
        break;
      }
  for (size_t i = 0; i < p.size(); ++i) {
    if (map_to_ref[i] >= 0) continue;
    for (size_t j = 0; j < r.size(); ++j)
      if (!used[j] && stem(p[i]) == stem(r[j])) {
        map_to_ref[i] = static_cast<int>(j);
        used[j] = 1;
        break;
      }
  }
  Alignment a;
  int prev_ref = -2;
  for (size_t i = 0; i < p.size(); ++i) {
    if (map_to_ref[i] < 0) {
      prev_ref = -2;
      continue;
    }
    ++a.matches;
    if (map_to_ref[i] != prev_ref + 1) ++a.chunks;
    prev_ref = map_to_ref[i];
  }
  return a;
}

}  // namespace detail

inline double meteor_lite(const std::string& pred,
                          const std::vector<std::string>& refs) {
  if (refs.empty()) throw DataError("meteor_lite: no references");
  constexpr double kAlpha = 0.9, kGamma = 0.5, kBeta = 3.0;
  const auto p = metric_tokens(pred);
  double best = 0.0;
  for (const auto& ref : refs) {
    const auto r = metric_tokens(ref);
    if (p.empty() || r.empty()) continue;
    const auto a = detail::align(p, r);
    if (a.matches == 0) continue;
    const double prec = static_cast<double>(a.matches) / p.size();
    const double rec = static_cast<double>(a.matches) / r.size();
    const double fmean = prec * rec / (kAlpha * prec + (1 - kAlpha) * rec);
    const double frag = static_cast<double>(a.chunks) / a.matches;
    const double penalty = kGamma * std::pow(frag, kBeta);
    best = std::max(best, fmean * (1 - penalty));
  }
  return best;
}

// ---------------------------------------------------------------------------
// Exact match
// ---------------------------------------------------------------------------

namespace detail {

inline bool is_subsequence(const std::vector<std::string>& needle,
                           const std::vector<std::string>& haystack) {
  size_t i = 0;
  for (const auto& t : haystack) {
    if (i < needle.size() && needle[i] == t) ++i;
  }
  return i == needle.size();
}

}  // namespace detail

inline bool em1(const std::string& pred, const std::vector<std::string>& refs) {
  if (refs.empty()) throw DataError("em1: no references");
  const auto p = normalize_tokens(pred);
  for (const auto& r : refs)
    if (p == normalize_tokens(r)) return true;
  return false;
}

inline bool em1_refined(const std::string& pred,
                        const std::vector<std::string>& refs) {
  if (em1(pred, refs)) return true;
  const auto p = normalize_tokens(pred);
  for (const auto& ref : refs) {
    const auto r = normalize_tokens(ref);
    if (p.empty() || r.empty()) continue;
    if (detail::is_subsequence(r, p) || detail::is_subsequence(p, r))
      return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Sentence similarity
// ---------------------------------------------------------------------------

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::vector<double> embed(const std::string& text) = 0;
};

inline double cosine(const std::vector<double>& a,
                     const std::vector<double>& b) {
  if (a.size() != b.size())
    throw NumericError("cosine: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Fallback when no provider is given: cosine over term-frequency vectors of
// normalized tokens.
inline double sentence_similarity(const std::string& pred,
                                  const std::string& ref,
                                  EmbeddingProvider* provider = nullptr) {
  if (provider) return cosine(provider->embed(pred), provider->embed(ref));
  std::map<std::string, double> pv, rv;
  for (const auto& t : normalize_tokens(pred)) ++pv[t];
  for (const auto& t : normalize_tokens(ref)) ++rv[t];
  double dot = 0, np = 0, nr = 0;
  for (const auto& [k, x] : pv) {
    np += x * x;
    auto it = rv.find(k);
    if (it != rv.end()) dot += x * it->second;
  }
  for (const auto& [_, x] : rv) nr += x * x;
  if (np == 0 || nr == 0) return 0.0;
  return dot / (std::sqrt(np) * std::sqrt(nr));
}

// ---------------------------------------------------------------------------
// Existence hallucination protocol
// ---------------------------------------------------------------------------

enum class PopeKind { random, popular, adversarial };

inline std::string to_string(PopeKind k) {
  switch (k) {
    case PopeKind::random: return "random";
    case PopeKind::popular: return "popular";
    case PopeKind::adversarial: return "adversarial";
  }
  throw NumericError("to_string: bad PopeKind");
}

inline PopeKind pope_kind_from_string(const std::string& s) {
  if (s == "random") return PopeKind::random;
  if (s == "popular") return PopeKind::popular;
  if (s == "adversarial") return PopeKind::adversarial;
  throw DataError("unknown pope setting: " + s);
}

struct PopeSetting {
  PopeKind kind = PopeKind::random;
  int k = 1;  // questions per polarity per scene
};

struct PopeQuestion {
  std::string scene_id;
  std::string label;
  bool ground_truth = false;  // true = present
};

// Per scene: k present-object questions (gt yes) and k absent-object
// questions (gt no); absent selection per setting. Deterministic given seed.
inline std::vector<PopeQuestion> pope_sample_questions(
    const std::vector<Scene>& scenes, const PopeSetting& setting,
    uint64_t rng_seed) {
  if (setting.k < 1) throw DataError("pope_sample_questions: k must be >= 1");
  if (scenes.empty()) throw DataError("pope_sample_questions: no scenes");
  const LabelStats stats = compute_label_stats(scenes);
  std::mt19937_64 rng(rng_seed);
  std::vector<PopeQuestion> out;

  for (const auto& scene : scenes) {
    std::set<std::string> present_set;
    for (const auto& o : scene.objects) present_set.insert(o.label);
    std::vector<std::string> present(present_set.begin(), present_set.end());
    std::vector<std::string> absent;
    for (const auto& l : stats.all_labels)
      if (!present_set.count(l)) absent.push_back(l);

    // Present half: sample without replacement, cycling when k > |present|.
    std::vector<std::string> pool = present;
    std::shuffle(pool.begin(), pool.end(), rng);
    for (int i = 0; i < setting.k; ++i)
      out.push_back({scene.scene_id, pool[i % pool.size()], true});

    if (absent.empty())
      throw DataError("pope_sample_questions: scene " + scene.scene_id +
                      " has no absent labels");
    std::vector<std::string> chosen;
    switch (setting.kind) {
      case PopeKind::random: {
        std::vector<std::string> apool = absent;
        std::shuffle(apool.begin(), apool.end(), rng);
        for (int i = 0; i < setting.k; ++i)
          chosen.push_back(apool[i % apool.size()]);
        break;
      }
      case PopeKind::popular: {
        // Top-k most frequent absent labels; ties lexicographic.
        std::vector<std::string> ranked = absent;
        std::stable_sort(ranked.begin(), ranked.end(),
                         [&](const std::string& a, const std::string& b) {
                           const int fa = stats.frequency.at(a);
                           const int fb = stats.frequency.at(b);
                           if (fa != fb) return fa > fb;
                           return a < b;
                         });
        for (int i = 0; i < setting.k; ++i)
          chosen.push_back(ranked[i % ranked.size()]);
        break;
      }
      case PopeKind::adversarial: {
        // Absent labels maximizing max co-occurrence with present labels.
        auto score = [&](const std::string& l) {
          int best = 0;
          for (const auto& p : present)
            best = std::max(best, cooccurrence(stats, l, p));
          return best;
        };
        std::vector<std::string> ranked = absent;
        std::stable_sort(ranked.begin(), ranked.end(),
                         [&](const std::string& a, const std::string& b) {
                           const int sa = score(a), sb = score(b);
                           if (sa != sb) return sa > sb;
                           return a < b;
                         });
        for (int i = 0; i < setting.k; ++i)
          chosen.push_back(ranked[i % ranked.size()]);
        break;
      }
    }
    for (const auto& l : chosen) out.push_back({scene.scene_id, l, false});
  }
  return out;
}

struct PopeReport {
  double precision = 0, recall = 0, f1 = 0, accuracy = 0, yes_rate = 0;
  int unparseable = 0;
};

// "yes" is the positive class.
inline PopeReport pope_eval(const std::vector<bool>& answers,
                            const std::vector<bool>& ground_truths) {
  if (answers.size() != ground_truths.size())
    throw DataError("pope_eval: answer/ground-truth size mismatch");
  if (answers.empty()) throw DataError("pope_eval: empty input");
  int tp = 0, fp = 0, fn = 0, tn = 0;
  for (size_t i = 0; i < answers.size(); ++i) {
    if (answers[i] && ground_truths[i]) ++tp;
    else if (answers[i] && !ground_truths[i]) ++fp;
    else if (!answers[i] && ground_truths[i]) ++fn;
    else ++tn;
  }
  PopeReport r;
  r.precision = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  r.recall = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  r.f1 = r.precision + r.recall > 0
             ? 2 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  r.accuracy = static_cast<double>(tp + tn) / answers.size();
  r.yes_rate = static_cast<double>(tp + fp) / answers.size();
  return r;
}

struct YesNo {
  bool yes = false;
  bool parsed = false;  // false when neither token appeared cleanly
};

// First normalized token in {yes, no} wins; otherwise "yes" anywhere counts
// as yes, else no, flagged unparsed.
inline YesNo parse_yes_no(const std::string& text) {
  const auto toks = normalize_tokens(text);
  YesNo out;
  if (!toks.empty() && (toks.front() == "yes" || toks.front() == "no")) {
    out.yes = toks.front() == "yes";
    out.parsed = true;
    return out;
  }
  for (const auto& t : toks)
    if (t == "yes") {
      out.yes = true;
      return out;
    }
  out.yes = false;
  return out;
}

// ---------------------------------------------------------------------------
// Eval records
// ---------------------------------------------------------------------------

struct EvalRecord {
  std::string sample_id;
  std::string prediction;
  std::vector<std::string> references;
};

inline std::vector<EvalRecord> load_eval_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open eval file: " + path);
  std::vector<EvalRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const nlohmann::json j = detail::parse_line(path, lineno, line);
    EvalRecord r;
    try {
      r.sample_id = j.at("sample_id").get<std::string>();
      r.prediction = j.at("prediction").get<std::string>();
      r.references = j.at("references").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (r.references.empty())
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": record has no references");
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace pointlm
