#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "pointlm/autograd.hpp"

using namespace pointlm;

namespace {

Tensor random_tensor(int r, int c, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Tensor t = make_tensor(r, c);
  for (double& x : t->v) x = u(rng);
  return t;
}

// Central finite differences of a scalar-valued graph function w.r.t. every
// entry of the listed leaves, compared against the taped gradients.
double max_rel_error(const std::vector<Tensor>& leaves,
                     const std::function<Tensor(Graph&)>& fn,
                     double h = 1e-6) {
  for (const Tensor& leaf : leaves) leaf->zero_grad();
  Graph g;
  Tensor loss = fn(g);
  g.backward(loss);
  double worst = 0;
  for (const Tensor& leaf : leaves) {
    for (size_t i = 0; i < leaf->size(); ++i) {
      const double keep = leaf->v[i];
      leaf->v[i] = keep + h;
      Graph gp(false);
      const double fp = fn(gp)->v[0];
      leaf->v[i] = keep - h;
      Graph gm(false);
      const double fm = fn(gm)->v[0];
      leaf->v[i] = keep;
      const double num = (fp - fm) / (2 * h);
      const double ana = leaf->g[i];
      const double denom = std::max({std::abs(num), std::abs(ana), 1e-8});
      worst = std::max(worst, std::abs(num - ana) / denom);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("matmul forward and gradient") {
  std::mt19937_64 rng(1);
  Tensor a = random_tensor(3, 4, rng);
  Tensor b = random_tensor(4, 5, rng);
  CHECK(max_rel_error({a, b}, [&](Graph& g) {
          return g.mean_all(g.matmul(a, b));
        }) < 1e-7);
}

TEST_CASE("matmul_nt gradient") {
  std::mt19937_64 rng(2);
  Tensor a = random_tensor(3, 4, rng);
  Tensor b = random_tensor(6, 4, rng);
  CHECK(max_rel_error({a, b}, [&](Graph& g) {
          return g.mean_all(g.gelu(g.matmul_nt(a, b)));
        }) < 1e-6);
}

TEST_CASE("softmax, log_softmax, layer_norm gradients") {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor(4, 6, rng, 2.0);
  Tensor gain = random_tensor(1, 6, rng);
  Tensor bias = random_tensor(1, 6, rng);
  Tensor w = random_tensor(4, 6, rng);  // fixed readout to avoid degenerate sums
  CHECK(max_rel_error({x}, [&](Graph& g) {
          return g.mean_all(g.mul(g.row_softmax(x), w));
        }) < 1e-6);
  CHECK(max_rel_error({x}, [&](Graph& g) {
          return g.mean_selected(g.row_log_softmax(x), {{0, 1}, {2, 3}});
        }) < 1e-6);
  CHECK(max_rel_error({x, gain, bias}, [&](Graph& g) {
          return g.mean_all(g.mul(g.layer_norm(x, gain, bias), w));
        }) < 1e-5);
}

TEST_CASE("col_max routes gradient to the argmax row") {
  Tensor x = make_tensor(3, 2, {1.0, 5.0, 7.0, 2.0, 7.0, 5.0});
  Graph g;
  Tensor m = g.col_max(x);
  CHECK(m->v[0] == 7.0);
  CHECK(m->v[1] == 5.0);
  g.backward(g.mean_all(m));
  // ties go to the lowest row index: column 0 max at row 1, column 1 tie rows 0,2 -> row 0
  CHECK(x->grad_at(1, 0) == 0.5);
  CHECK(x->grad_at(2, 0) == 0.0);
  CHECK(x->grad_at(0, 1) == 0.5);
  CHECK(x->grad_at(2, 1) == 0.0);
}

TEST_CASE("slicing, concatenation, gather gradients") {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor(5, 6, rng);
  Tensor table = random_tensor(7, 4, rng);
  CHECK(max_rel_error({x}, [&](Graph& g) {
          Tensor a = g.slice_rows(x, 1, 4);
          Tensor b = g.slice_cols(a, 2, 5);
          return g.mean_all(g.concat_cols({b, b}));
        }) < 1e-7);
  CHECK(max_rel_error({table}, [&](Graph& g) {
          Tensor e = g.gather_rows(table, {0, 3, 3, 6});
          return g.mean_all(g.gelu(e));
        }) < 1e-6);
}

TEST_CASE("composite expression matches finite differences") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor(4, 8, rng);
  Tensor w = random_tensor(8, 8, rng);
  Tensor b = random_tensor(1, 8, rng);
  CHECK(max_rel_error({x, w, b}, [&](Graph& g) {
          Tensor h = g.gelu(g.add_rowvec(g.matmul(x, w), b));
          Tensor s = g.row_softmax(g.matmul_nt(h, h));
          return g.mean_all(g.matmul(s, h));
        }) < 1e-5);
}

TEST_CASE("unary and binary scalar hooks propagate partials") {
  Tensor a = make_tensor(1, 1, {0.3});
  Tensor b = make_tensor(1, 1, {-0.7});
  Graph g;
  Tensor out = g.binary_scalar(a, b, 1.5, 2.0, -3.0);
  g.backward(out);
  CHECK(a->g[0] == 2.0);
  CHECK(b->g[0] == -3.0);
}
