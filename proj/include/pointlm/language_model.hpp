#pragma once

// Word-level vocabulary and a miniature decoder-only LM with point-token
// injection, teacher-forced sequence likelihood, and greedy decoding.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pointlm/autograd.hpp"
#include "pointlm/errors.hpp"
#include "pointlm/params.hpp"

namespace pointlm {

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kPointStart = 4;
  static constexpr int kPointPatch = 5;
  static constexpr int kPointEnd = 6;
  static constexpr int kNumSpecial = 7;
  static constexpr size_t kDefaultCap = 8192;

  Vocab() { init_specials(); }

  // Lowercased words; punctuation characters become single-char tokens.
  static std::vector<std::string> split(const std::string& text) {
    std::vector<std::string> out;
    std::string word;
    for (char ch : text) {
      const unsigned char c = static_cast<unsigned char>(ch);
      if (std::isalnum(c) || ch == '\'' || ch == '_' ||
          c >= 0x80) {  // keep utf-8 bytes inside words
        word.push_back(static_cast<char>(std::tolower(c)));
      } else {
        if (!word.empty()) {
          out.push_back(word);
          word.clear();
        }
        if (!std::isspace(c)) out.push_back(std::string(1, ch));
      }
    }
    if (!word.empty()) out.push_back(word);
    return out;
  }

  static Vocab build(const std::vector<std::string>& corpus,
                     size_t cap = kDefaultCap) {
    std::map<std::string, size_t> freq;
    for (const auto& text : corpus)
      for (const auto& w : split(text)) ++freq[w];
    // Frequency-sorted, ties by lexicographic order, capped.
    std::vector<std::pair<std::string, size_t>> items(freq.begin(), freq.end());
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocab v;
    for (const auto& [w, f] : items) {
      if (v.tokens_.size() >= cap + kNumSpecial) break;
      v.add(w);
    }
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(int id) const { return tokens_.at(id); }

  std::vector<int> tokenize(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : split(text)) ids.push_back(id(w));
    return ids;
  }

  std::string detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int i : ids) {
      if (i < kNumSpecial) continue;
      if (!out.empty()) out.push_back(' ');
      out += token(i);
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocab file: " + path);
    for (const auto& t : tokens_) out << t << "\n";
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocab file: " + path);
    Vocab v;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (lineno <= kNumSpecial) {
        if (line != v.tokens_[lineno - 1])
          throw DataError(path + ": special token order mismatch at line " +
                          std::to_string(lineno));
        continue;
      }
      v.add(line);
    }
    return v;
  }

 private:
  void init_specials() {
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>", "<point_start>",
                          "<point_patch>", "<point_end>"})
      add(s);
  }
  void add(const std::string& t) {
    if (index_.count(t)) return;
    index_[t] = static_cast<int>(tokens_.size());
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

struct TokenSequence {
  std::vector<int> ids;
  std::vector<int> point_slots;     // positions holding <point_patch>
  std::vector<char> response_mask;  // 1 on response (label) positions

  int length() const { return static_cast<int>(ids.size()); }
  std::vector<int> response_positions() const {
    std::vector<int> out;
    for (size_t i = 0; i < response_mask.size(); ++i)
      if (response_mask[i]) out.push_back(static_cast<int>(i));
    return out;
  }
};

struct LMConfig {
  int vocab_size = 0;
  int d_model = 96;
  int n_layers = 4;
  int n_heads = 4;
  int max_len = 256;

  void validate() const {
    if (d_model % n_heads != 0)
      throw NumericError("LMConfig: d_model must be divisible by n_heads");
    if (vocab_size <= 0) throw NumericError("LMConfig: vocab_size not set");
  }
};

// Layout: <bos> system <point_start> N x <point_patch> <point_end>
// instruction [response <eos>]. The terminating <eos> counts as part of the
// response for masking and likelihood.
inline TokenSequence assemble_input(const std::string& system_text,
                                    int n_point_tokens,
                                    const std::string& instruction,
                                    const std::optional<std::string>& response,
                                    const Vocab& vocab, int max_len) {
  TokenSequence seq;
  auto push = [&seq](int id) { seq.ids.push_back(id); };
  push(Vocab::kBos);
  for (int id : vocab.tokenize(system_text)) push(id);
  push(Vocab::kPointStart);
  for (int i = 0; i < n_point_tokens; ++i) {
    seq.point_slots.push_back(seq.length());
    push(Vocab::kPointPatch);
  }
  push(Vocab::kPointEnd);
  for (int id : vocab.tokenize(instruction)) push(id);
  const int response_start = seq.length();
  if (response) {
    for (int id : vocab.tokenize(*response)) push(id);
    push(Vocab::kEos);
  }
  seq.response_mask.assign(seq.ids.size(), 0);
  for (int i = response_start; i < seq.length(); ++i) seq.response_mask[i] = 1;
  if (seq.length() > max_len)
    throw DataError("assembled sequence length " + std::to_string(seq.length()) +
                    " exceeds max_len " + std::to_string(max_len));
  return seq;
}

class DecoderLM {
 public:
  DecoderLM() = default;

  void init(ParamStore& store, std::mt19937_64& rng, LMConfig cfg) {
    cfg.validate();
    cfg_ = cfg;
    const int d = cfg.d_model, v = cfg.vocab_size;
    store.create("lm.tok_emb", "lm", v, d, rng, d);
    store.create("lm.pos_emb", "lm", cfg.max_len, d, rng, d);
    // The three point-token embeddings train in every stage, so they live in
    // their own group.
    store.create("special.point_tokens", "special_embeddings", 3, d, rng, d);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "lm.l" + std::to_string(l) + ".";
      store.create_const(p + "ln1_g", "lm", 1, d, 1.0);
      store.create_const(p + "ln1_b", "lm", 1, d, 0.0);
      store.create(p + "wq", "lm", d, d, rng, d);
      store.create_const(p + "bq", "lm", 1, d, 0.0);
      store.create(p + "wk", "lm", d, d, rng, d);
      store.create_const(p + "bk", "lm", 1, d, 0.0);
      store.create(p + "wv", "lm", d, d, rng, d);
      store.create_const(p + "bv", "lm", 1, d, 0.0);
      store.create(p + "wo", "lm", d, d, rng, d);
      store.create_const(p + "bo", "lm", 1, d, 0.0);
      store.create_const(p + "ln2_g", "lm", 1, d, 1.0);
      store.create_const(p + "ln2_b", "lm", 1, d, 0.0);
      store.create(p + "mlp_w1", "lm", d, 4 * d, rng, d);
      store.create_const(p + "mlp_b1", "lm", 1, 4 * d, 0.0);
      store.create(p + "mlp_w2", "lm", 4 * d, d, rng, 4 * d);
      store.create_const(p + "mlp_b2", "lm", 1, d, 0.0);
    }
    store.create_const("lm.lnf_g", "lm", 1, d, 1.0);
    store.create_const("lm.lnf_b", "lm", 1, d, 0.0);
    store.create("lm.out_w", "lm", d, v, rng, d);
    store.create_const("lm.out_b", "lm", 1, v, 0.0);
  }

  const LMConfig& config() const { return cfg_; }

  // Per-position log-probability table [T, V]; row t predicts token t+1.
  // injected[i] replaces the embedding at point_slots[i].
  Tensor forward(Graph& g, const TokenSequence& seq,
                 const std::vector<Tensor>& injected,
                 const ParamStore& store) const {
    const int t = seq.length();
    if (t == 0) throw DataError("forward: empty sequence");
    if (t > cfg_.max_len) throw DataError("forward: sequence exceeds max_len");
    if (injected.size() != seq.point_slots.size())
      throw NumericError("forward: injected embedding count mismatch");

    Tensor tok_emb = store.get("lm.tok_emb");
    Tensor special = store.get("special.point_tokens");
    std::vector<Tensor> rows;
    rows.reserve(t);
    size_t slot = 0;
    for (int i = 0; i < t; ++i) {
      const int id = seq.ids[i];
      if (slot < seq.point_slots.size() && seq.point_slots[slot] == i) {
        if (injected[slot]->cols != cfg_.d_model || injected[slot]->rows != 1)
          throw NumericError("forward: injected embedding has wrong shape");
        rows.push_back(injected[slot]);
        ++slot;
      } else if (id >= Vocab::kPointStart && id <= Vocab::kPointEnd) {
        rows.push_back(g.gather_rows(special, {id - Vocab::kPointStart}));
      } else {
        rows.push_back(g.gather_rows(tok_emb, {id}));
      }
    }
    Tensor x = g.add(g.concat_rows(rows),
                     g.slice_rows(store.get("lm.pos_emb"), 0, t));

    const int d = cfg_.d_model, nh = cfg_.n_heads, dh = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> causal(static_cast<size_t>(t) * t, 0.0);
    for (int i = 0; i < t; ++i)
      for (int j = i + 1; j < t; ++j) causal[static_cast<size_t>(i) * t + j] = -1e30;

    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "lm.l" + std::to_string(l) + ".";
      Tensor xn = g.layer_norm(x, store.get(p + "ln1_g"), store.get(p + "ln1_b"));
      Tensor q = g.add_rowvec(g.matmul(xn, store.get(p + "wq")),
                              store.get(p + "bq"));
      Tensor k = g.add_rowvec(g.matmul(xn, store.get(p + "wk")),
                              store.get(p + "bk"));
      Tensor v = g.add_rowvec(g.matmul(xn, store.get(p + "wv")),
                              store.get(p + "bv"));
      std::vector<Tensor> heads;
      for (int hh = 0; hh < nh; ++hh) {
        Tensor qh = g.slice_cols(q, hh * dh, (hh + 1) * dh);
        Tensor kh = g.slice_cols(k, hh * dh, (hh + 1) * dh);
        Tensor vh = g.slice_cols(v, hh * dh, (hh + 1) * dh);
        Tensor scores =
            g.add_const(g.scale(g.matmul_nt(qh, kh), scale), causal);
        heads.push_back(g.matmul(g.row_softmax(scores), vh));
      }
      Tensor attn = g.add_rowvec(
          g.matmul(g.concat_cols(heads), store.get(p + "wo")),
          store.get(p + "bo"));
      x = g.add(x, attn);
      Tensor xn2 =
          g.layer_norm(x, store.get(p + "ln2_g"), store.get(p + "ln2_b"));
      Tensor mlp = g.add_rowvec(
          g.matmul(g.gelu(g.add_rowvec(g.matmul(xn2, store.get(p + "mlp_w1")),
                                       store.get(p + "mlp_b1"))),
                   store.get(p + "mlp_w2")),
          store.get(p + "mlp_b2"));
      x = g.add(x, mlp);
    }
    x = g.layer_norm(x, store.get("lm.lnf_g"), store.get("lm.lnf_b"));
    Tensor logits = g.add_rowvec(g.matmul(x, store.get("lm.out_w")),
                                 store.get("lm.out_b"));
    return g.row_log_softmax(logits);
  }

  // Average response log-probability: (1/|y|) sum over masked positions i of
  // table[i-1, ids[i]].
  static Tensor sequence_logprob(Graph& g, const Tensor& table,
                                 const TokenSequence& seq) {
    std::vector<std::pair<int, int>> sel;
    for (int i : seq.response_positions()) {
      if (i == 0) throw DataError("sequence_logprob: response at position 0");
      sel.emplace_back(i - 1, seq.ids[i]);
    }
    if (sel.empty()) throw DataError("sequence_logprob: empty response mask");
    return g.mean_selected(table, sel);
  }

  // Greedy argmax decoding, ties to the lowest id; stops at <eos> or after
  // max_new tokens. Returns the detokenized response.
  std::string generate(const TokenSequence& prefix,
                       const std::vector<Tensor>& injected,
                       const ParamStore& store, const Vocab& vocab,
                       int max_new) const {
    for (char m : prefix.response_mask)
      if (m) throw DataError("generate: prefix must not carry a response");
    TokenSequence seq = prefix;
    std::vector<int> out;
    for (int step = 0; step < max_new; ++step) {
      if (seq.length() >= cfg_.max_len) break;
      Graph g(/*record=*/false);
      Tensor table = forward(g, seq, injected, store);
      const int last = table->rows - 1;
      int best = 0;
      double best_v = table->at(last, 0);
      for (int c = 1; c < table->cols; ++c)
        if (table->at(last, c) > best_v) {
          best_v = table->at(last, c);
          best = c;
        }
      if (best == Vocab::kEos) break;
      out.push_back(best);
      seq.ids.push_back(best);
      seq.response_mask.push_back(0);
    }
    return vocab.detokenize(out);
  }

 private:
  LMConfig cfg_;
};

}  // namespace pointlm
