#pragma once

// Full model bundle: scene encoder + decoder LM over one parameter store,
// with helpers to assemble inputs and score responses.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pointlm/forge.hpp"
#include "pointlm/geometry.hpp"
#include "pointlm/language_model.hpp"
#include "pointlm/params.hpp"
#include "pointlm/scene_encoder.hpp"

namespace pointlm {

struct ModelConfig {
  EncoderConfig encoder;
  LMConfig lm;

  void validate() const {
    encoder.validate();
    lm.validate();
    if (encoder.d_llm != lm.d_model)
      throw NumericError("ModelConfig: connector output dim must equal d_model");
  }
};

class SceneLM {
 public:
  void init(std::mt19937_64& rng, ModelConfig cfg) {
    cfg.validate();
    cfg_ = cfg;
    encoder_.init(store_, rng, cfg.encoder);
    lm_.init(store_, rng, cfg.lm);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  const SceneEncoder& encoder() const { return encoder_; }
  const DecoderLM& lm() const { return lm_; }

  // Scene tokens split into one injected [1, d_model] row per object.
  std::vector<Tensor> encode_scene_tokens(Graph& g, const Scene& scene) const {
    Tensor tokens = encoder_.encode_scene(g, scene, store_);
    std::vector<Tensor> rows;
    for (int i = 0; i < tokens->rows; ++i)
      rows.push_back(g.slice_rows(tokens, i, i + 1));
    return rows;
  }

  TokenSequence assemble(const Vocab& vocab, const Scene& scene,
                         const std::string& instruction,
                         const std::optional<std::string>& response) const {
    return assemble_input(system_prompt(),
                          static_cast<int>(scene.objects.size()), instruction,
                          response, vocab, cfg_.lm.max_len);
  }

  // Length-normalized response log-probability for an assembled sequence,
  // reusing already-encoded scene tokens (shared between the positive and
  // negative pass of a triplet).
  Tensor response_logprob(Graph& g, const TokenSequence& seq,
                          const std::vector<Tensor>& scene_tokens) const {
    Tensor table = lm_.forward(g, seq, scene_tokens, store_);
    return DecoderLM::sequence_logprob(g, table, seq);
  }

  std::string generate(const Vocab& vocab, const Scene& scene,
                       const std::string& instruction, int max_new) const {
    Graph g(/*record=*/false);
    const auto scene_tokens = encode_scene_tokens(g, scene);
    const TokenSequence prefix = assemble(vocab, scene, instruction, std::nullopt);
    return lm_.generate(prefix, scene_tokens, store_, vocab, max_new);
  }

 private:
  ModelConfig cfg_;
  ParamStore store_;
  SceneEncoder encoder_;
  DecoderLM lm_;
};

}  // namespace pointlm
