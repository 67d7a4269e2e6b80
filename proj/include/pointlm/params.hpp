#pragma once

// Named, grouped trainable parameters. Groups drive the per-stage trainable
// masks ("point_encoder", "spatial_transformer", "connector", "lm",
// "special_embeddings").

#include <map>
#include <random>
#include <string>
#include <vector>

#include "pointlm/autograd.hpp"
#include "pointlm/errors.hpp"

namespace pointlm {

struct NamedParam {
  std::string name;
  std::string group;
  Tensor t;
};

class ParamStore {
 public:
  // Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
  Tensor create(const std::string& name, const std::string& group, int rows,
                int cols, std::mt19937_64& rng, int fan_in) {
    Tensor t = make_tensor(rows, cols);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& x : t->v) x = dist(rng);
    add(name, group, t);
    return t;
  }

  Tensor create_const(const std::string& name, const std::string& group,
                      int rows, int cols, double fill) {
    Tensor t = make_tensor(rows, cols, fill);
    add(name, group, t);
    return t;
  }

  void add(const std::string& name, const std::string& group, Tensor t) {
    if (index_.count(name)) throw NumericError("duplicate parameter: " + name);
    index_[name] = params_.size();
    params_.push_back({name, group, std::move(t)});
  }

  Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw NumericError("unknown parameter: " + name);
    return params_[it->second].t;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<NamedParam>& all() const { return params_; }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& p : params_) n += p.t->size();
    return n;
  }

  void zero_grads() {
    for (auto& p : params_) p.t->zero_grad();
  }

 private:
  std::vector<NamedParam> params_;
  std::map<std::string, size_t> index_;
};

}  // namespace pointlm
