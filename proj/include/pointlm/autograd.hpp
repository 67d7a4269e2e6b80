#pragma once

// Minimal reverse-mode autodiff over dense 2-D double tensors. Ops append
// backward closures to a tape; Graph::backward runs the tape in reverse.
// Single-threaded and fully deterministic.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pointlm/errors.hpp"

namespace pointlm {

struct TensorData {
  int rows = 0, cols = 0;
  std::vector<double> v;  // row-major values
  std::vector<double> g;  // gradient, same layout

  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
  double& grad_at(int r, int c) { return g[static_cast<size_t>(r) * cols + c]; }
  size_t size() const { return v.size(); }
  void zero_grad() { std::fill(g.begin(), g.end(), 0.0); }
};

using Tensor = std::shared_ptr<TensorData>;

inline Tensor make_tensor(int rows, int cols, double fill = 0.0) {
  auto t = std::make_shared<TensorData>();
  t->rows = rows;
  t->cols = cols;
  t->v.assign(static_cast<size_t>(rows) * cols, fill);
  t->g.assign(t->v.size(), 0.0);
  return t;
}

inline Tensor make_tensor(int rows, int cols, std::vector<double> values) {
  auto t = make_tensor(rows, cols);
  if (values.size() != t->v.size())
    throw NumericError("make_tensor: value count does not match shape");
  t->v = std::move(values);
  return t;
}

class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}

  bool recording() const { return record_; }

  void backward(const Tensor& loss) {
    if (loss->size() != 1) throw NumericError("backward: loss must be scalar");
    loss->g[0] = 1.0;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

  void clear() { tape_.clear(); }

  // --- elementwise / shape ---

  Tensor add(const Tensor& a, const Tensor& b) {
    check_same(a, b, "add");
    Tensor out = make_tensor(a->rows, a->cols);
    for (size_t i = 0; i < out->size(); ++i) out->v[i] = a->v[i] + b->v[i];
    if (record_)
      tape_.push_back([a, b, out] {
        for (size_t i = 0; i < out->size(); ++i) {
          a->g[i] += out->g[i];
          b->g[i] += out->g[i];
        }
      });
    return out;
  }

  Tensor sub(const Tensor& a, const Tensor& b) {
    check_same(a, b, "sub");
    Tensor out = make_tensor(a->rows, a->cols);
    for (size_t i = 0; i < out->size(); ++i) out->v[i] = a->v[i] - b->v[i];
    if (record_)
      tape_.push_back([a, b, out] {
        for (size_t i = 0; i < out->size(); ++i) {
          a->g[i] += out->g[i];
          b->g[i] -= out->g[i];
        }
      });
    return out;
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    check_same(a, b, "mul");
    Tensor out = make_tensor(a->rows, a->cols);
    for (size_t i = 0; i < out->size(); ++i) out->v[i] = a->v[i] * b->v[i];
    if (record_)
      tape_.push_back([a, b, out] {
        for (size_t i = 0; i < out->size(); ++i) {
          a->g[i] += out->g[i] * b->v[i];
          b->g[i] += out->g[i] * a->v[i];
        }
      });
    return out;
  }

  Tensor scale(const Tensor& a, double s) {
    Tensor out = make_tensor(a->rows, a->cols);
    for (size_t i = 0; i < out->size(); ++i) out->v[i] = a->v[i] * s;
    if (record_)
      tape_.push_back([a, out, s] {
        for (size_t i = 0; i < out->size(); ++i) a->g[i] += out->g[i] * s;
      });
    return out;
  }

  // Adds a constant matrix (no gradient through the constant).
  Tensor add_const(const Tensor& a, const std::vector<double>& c) {
    if (c.size() != a->size())
      throw NumericError("add_const: size mismatch");
    Tensor out = make_tensor(a->rows, a->cols);
    for (size_t i = 0; i < out->size(); ++i) out->v[i] = a->v[i] + c[i];
    if (record_)
      tape_.push_back([a, out] {
        for (size_t i = 0; i < out->size(); ++i) a->g[i] += out->g[i];
      });
    return out;
  }

  // Broadcasts a [1,c] row vector over every row of a.
  Tensor add_rowvec(const Tensor& a, const Tensor& row) {
    if (row->rows != 1 || row->cols != a->cols)
      throw NumericError("add_rowvec: shape mismatch");
    Tensor out = make_tensor(a->rows, a->cols);
    for (int r = 0; r < a->rows; ++r)
      for (int c = 0; c < a->cols; ++c)
        out->at(r, c) = a->at(r, c) + row->v[c];
    if (record_)
      tape_.push_back([a, row, out] {
        for (int r = 0; r < a->rows; ++r)
          for (int c = 0; c < a->cols; ++c) {
            a->grad_at(r, c) += out->grad_at(r, c);
            row->g[c] += out->grad_at(r, c);
          }
      });
    return out;
  }

  Tensor reshape(const Tensor& a, int rows, int cols) {
    if (static_cast<size_t>(rows) * cols != a->size())
      throw NumericError("reshape: element count mismatch");
    Tensor out = make_tensor(rows, cols);
    out->v = a->v;
    if (record_)
      tape_.push_back([a, out] {
        for (size_t i = 0; i < out->size(); ++i) a->g[i] += out->g[i];
      });
    return out;
  }

  Tensor gelu(const Tensor& a) {
    Tensor out = make_tensor(a->rows, a->cols);
    for (size_t i = 0; i < out->size(); ++i) {
      const double x = a->v[i];
      out->v[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    if (record_)
      tape_.push_back([a, out] {
        for (size_t i = 0; i < out->size(); ++i) {
          const double x = a->v[i];
          const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
          const double pdf = std::exp(-0.5 * x * x) * kInvSqrt2Pi;
          a->g[i] += out->g[i] * (cdf + x * pdf);
        }
      });
    return out;
  }

  // --- matrix products ---

  // [m,k] x [k,n]
  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a->cols != b->rows) throw NumericError("matmul: inner dim mismatch");
    Tensor out = make_tensor(a->rows, b->cols);
    gemm(a->v.data(), b->v.data(), out->v.data(), a->rows, a->cols, b->cols);
    if (record_)
      tape_.push_back([a, b, out] {
        // dA += dOut * B^T ; dB += A^T * dOut
        gemm_nt_acc(out->g.data(), b->v.data(), a->g.data(), a->rows, b->cols,
                    a->cols);
        gemm_tn_acc(a->v.data(), out->g.data(), b->g.data(), a->cols, a->rows,
                    b->cols);
      });
    return out;
  }

  // [m,k] x [n,k]^T
  Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a->cols != b->cols) throw NumericError("matmul_nt: dim mismatch");
    Tensor out = make_tensor(a->rows, b->rows);
    gemm_nt(a->v.data(), b->v.data(), out->v.data(), a->rows, a->cols, b->rows);
    if (record_)
      tape_.push_back([a, b, out] {
        // dA += dOut * B ; dB += dOut^T * A
        gemm_acc(out->g.data(), b->v.data(), a->g.data(), a->rows, b->rows,
                 a->cols);
        gemm_tn_acc(out->g.data(), a->v.data(), b->g.data(), b->rows, a->rows,
                    a->cols);
      });
    return out;
  }

  // --- slicing / concatenation ---

  Tensor slice_rows(const Tensor& a, int r0, int r1) {
    if (r0 < 0 || r1 > a->rows || r0 >= r1)
      throw NumericError("slice_rows: bad range");
    Tensor out = make_tensor(r1 - r0, a->cols);
    std::copy(a->v.begin() + static_cast<size_t>(r0) * a->cols,
              a->v.begin() + static_cast<size_t>(r1) * a->cols,
              out->v.begin());
    if (record_)
      tape_.push_back([a, out, r0] {
        const size_t base = static_cast<size_t>(r0) * a->cols;
        for (size_t i = 0; i < out->size(); ++i) a->g[base + i] += out->g[i];
      });
    return out;
  }

  Tensor slice_cols(const Tensor& a, int c0, int c1) {
    if (c0 < 0 || c1 > a->cols || c0 >= c1)
      throw NumericError("slice_cols: bad range");
    Tensor out = make_tensor(a->rows, c1 - c0);
    for (int r = 0; r < a->rows; ++r)
      for (int c = c0; c < c1; ++c) out->at(r, c - c0) = a->at(r, c);
    if (record_)
      tape_.push_back([a, out, c0] {
        for (int r = 0; r < out->rows; ++r)
          for (int c = 0; c < out->cols; ++c)
            a->grad_at(r, c0 + c) += out->grad_at(r, c);
      });
    return out;
  }

  Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw NumericError("concat_rows: empty input");
    const int cols = parts[0]->cols;
    int rows = 0;
    for (const auto& p : parts) {
      if (p->cols != cols) throw NumericError("concat_rows: column mismatch");
      rows += p->rows;
    }
    Tensor out = make_tensor(rows, cols);
    size_t off = 0;
    for (const auto& p : parts) {
      std::copy(p->v.begin(), p->v.end(), out->v.begin() + off);
      off += p->size();
    }
    if (record_)
      tape_.push_back([parts, out] {
        size_t off = 0;
        for (const auto& p : parts) {
          for (size_t i = 0; i < p->size(); ++i) p->g[i] += out->g[off + i];
          off += p->size();
        }
      });
    return out;
  }

  Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw NumericError("concat_cols: empty input");
    const int rows = parts[0]->rows;
    int cols = 0;
    for (const auto& p : parts) {
      if (p->rows != rows) throw NumericError("concat_cols: row mismatch");
      cols += p->cols;
    }
    Tensor out = make_tensor(rows, cols);
    int c_off = 0;
    for (const auto& p : parts) {
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < p->cols; ++c) out->at(r, c_off + c) = p->at(r, c);
      c_off += p->cols;
    }
    if (record_)
      tape_.push_back([parts, out] {
        int c_off = 0;
        for (const auto& p : parts) {
          for (int r = 0; r < p->rows; ++r)
            for (int c = 0; c < p->cols; ++c)
              p->grad_at(r, c) += out->grad_at(r, c_off + c);
          c_off += p->cols;
        }
      });
    return out;
  }

  // Embedding lookup; backward scatter-adds into the table.
  Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    Tensor out = make_tensor(static_cast<int>(ids.size()), table->cols);
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= table->rows)
        throw NumericError("gather_rows: id out of range");
      std::copy(table->v.begin() + static_cast<size_t>(ids[i]) * table->cols,
                table->v.begin() + static_cast<size_t>(ids[i] + 1) * table->cols,
                out->v.begin() + i * table->cols);
    }
    if (record_)
      tape_.push_back([table, ids, out] {
        for (size_t i = 0; i < ids.size(); ++i)
          for (int c = 0; c < table->cols; ++c)
            table->grad_at(ids[i], c) += out->grad_at(static_cast<int>(i), c);
      });
    return out;
  }

  // --- reductions / normalizations ---

  // Column-wise max over rows -> [1, cols]. Ties route the gradient to the
  // lowest row index.
  Tensor col_max(const Tensor& a) {
    Tensor out = make_tensor(1, a->cols);
    auto argmax = std::make_shared<std::vector<int>>(a->cols, 0);
    for (int c = 0; c < a->cols; ++c) {
      double best = a->at(0, c);
      int best_r = 0;
      for (int r = 1; r < a->rows; ++r)
        if (a->at(r, c) > best) {
          best = a->at(r, c);
          best_r = r;
        }
      out->v[c] = best;
      (*argmax)[c] = best_r;
    }
    if (record_)
      tape_.push_back([a, out, argmax] {
        for (int c = 0; c < a->cols; ++c)
          a->grad_at((*argmax)[c], c) += out->g[c];
      });
    return out;
  }

  Tensor row_softmax(const Tensor& a) {
    Tensor out = make_tensor(a->rows, a->cols);
    for (int r = 0; r < a->rows; ++r) {
      double mx = a->at(r, 0);
      for (int c = 1; c < a->cols; ++c) mx = std::max(mx, a->at(r, c));
      double sum = 0;
      for (int c = 0; c < a->cols; ++c) {
        out->at(r, c) = std::exp(a->at(r, c) - mx);
        sum += out->at(r, c);
      }
      for (int c = 0; c < a->cols; ++c) out->at(r, c) /= sum;
    }
    if (record_)
      tape_.push_back([a, out] {
        for (int r = 0; r < a->rows; ++r) {
          double dot = 0;
          for (int c = 0; c < a->cols; ++c)
            dot += out->grad_at(r, c) * out->at(r, c);
          for (int c = 0; c < a->cols; ++c)
            a->grad_at(r, c) += out->at(r, c) * (out->grad_at(r, c) - dot);
        }
      });
    return out;
  }

  Tensor row_log_softmax(const Tensor& a) {
    Tensor out = make_tensor(a->rows, a->cols);
    for (int r = 0; r < a->rows; ++r) {
      double mx = a->at(r, 0);
      for (int c = 1; c < a->cols; ++c) mx = std::max(mx, a->at(r, c));
      double sum = 0;
      for (int c = 0; c < a->cols; ++c) sum += std::exp(a->at(r, c) - mx);
      const double lse = mx + std::log(sum);
      for (int c = 0; c < a->cols; ++c) out->at(r, c) = a->at(r, c) - lse;
    }
    if (record_)
      tape_.push_back([a, out] {
        for (int r = 0; r < a->rows; ++r) {
          double gsum = 0;
          for (int c = 0; c < a->cols; ++c) gsum += out->grad_at(r, c);
          for (int c = 0; c < a->cols; ++c)
            a->grad_at(r, c) +=
                out->grad_at(r, c) - std::exp(out->at(r, c)) * gsum;
        }
      });
    return out;
  }

  // Row-wise layer normalization with learned gain/bias ([1,c] each).
  Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                    double eps = 1e-5) {
    if (gain->cols != a->cols || bias->cols != a->cols)
      throw NumericError("layer_norm: shape mismatch");
    Tensor out = make_tensor(a->rows, a->cols);
    auto stats = std::make_shared<std::vector<double>>(
        static_cast<size_t>(a->rows) * 2);
    const int n = a->cols;
    for (int r = 0; r < a->rows; ++r) {
      double mean = 0;
      for (int c = 0; c < n; ++c) mean += a->at(r, c);
      mean /= n;
      double var = 0;
      for (int c = 0; c < n; ++c) {
        const double d = a->at(r, c) - mean;
        var += d * d;
      }
      var /= n;
      const double inv_std = 1.0 / std::sqrt(var + eps);
      (*stats)[2 * r] = mean;
      (*stats)[2 * r + 1] = inv_std;
      for (int c = 0; c < n; ++c)
        out->at(r, c) = (a->at(r, c) - mean) * inv_std * gain->v[c] + bias->v[c];
    }
    if (record_)
      tape_.push_back([a, gain, bias, out, stats, n] {
        for (int r = 0; r < a->rows; ++r) {
          const double mean = (*stats)[2 * r];
          const double inv_std = (*stats)[2 * r + 1];
          double sum_dy = 0, sum_dy_xhat = 0;
          for (int c = 0; c < n; ++c) {
            const double xhat = (a->at(r, c) - mean) * inv_std;
            const double dy = out->grad_at(r, c) * gain->v[c];
            sum_dy += dy;
            sum_dy_xhat += dy * xhat;
            gain->g[c] += out->grad_at(r, c) * xhat;
            bias->g[c] += out->grad_at(r, c);
          }
          for (int c = 0; c < n; ++c) {
            const double xhat = (a->at(r, c) - mean) * inv_std;
            const double dy = out->grad_at(r, c) * gain->v[c];
            a->grad_at(r, c) +=
                inv_std * (dy - sum_dy / n - xhat * sum_dy_xhat / n);
          }
        }
      });
    return out;
  }

  // Mean of table[positions[i].first, positions[i].second] -> scalar [1,1].
  Tensor mean_selected(const Tensor& table,
                       const std::vector<std::pair<int, int>>& positions) {
    if (positions.empty()) throw NumericError("mean_selected: empty selection");
    Tensor out = make_tensor(1, 1);
    double sum = 0;
    for (const auto& [r, c] : positions) {
      if (r < 0 || r >= table->rows || c < 0 || c >= table->cols)
        throw NumericError("mean_selected: index out of range");
      sum += table->at(r, c);
    }
    out->v[0] = sum / static_cast<double>(positions.size());
    if (record_)
      tape_.push_back([table, positions, out] {
        const double w = out->g[0] / static_cast<double>(positions.size());
        for (const auto& [r, c] : positions) table->grad_at(r, c) += w;
      });
    return out;
  }

  // Custom scalar ops with caller-supplied value and partials; used by the
  // numerically stable loss nodes.
  Tensor unary_scalar(const Tensor& a, double value, double da) {
    if (a->size() != 1) throw NumericError("unary_scalar: input must be scalar");
    Tensor out = make_tensor(1, 1);
    out->v[0] = value;
    if (record_)
      tape_.push_back([a, out, da] { a->g[0] += out->g[0] * da; });
    return out;
  }

  Tensor binary_scalar(const Tensor& a, const Tensor& b, double value,
                       double da, double db) {
    if (a->size() != 1 || b->size() != 1)
      throw NumericError("binary_scalar: inputs must be scalar");
    Tensor out = make_tensor(1, 1);
    out->v[0] = value;
    if (record_)
      tape_.push_back([a, b, out, da, db] {
        a->g[0] += out->g[0] * da;
        b->g[0] += out->g[0] * db;
      });
    return out;
  }

  // Mean over all elements -> scalar.
  Tensor mean_all(const Tensor& a) {
    Tensor out = make_tensor(1, 1);
    double sum = 0;
    for (double x : a->v) sum += x;
    out->v[0] = sum / static_cast<double>(a->size());
    if (record_)
      tape_.push_back([a, out] {
        const double w = out->g[0] / static_cast<double>(a->size());
        for (size_t i = 0; i < a->size(); ++i) a->g[i] += w;
      });
    return out;
  }

 private:
  static constexpr double kInvSqrt2 = 0.7071067811865475244;
  static constexpr double kInvSqrt2Pi = 0.3989422804014326779;

  static void check_same(const Tensor& a, const Tensor& b, const char* op) {
    if (a->rows != b->rows || a->cols != b->cols)
      throw NumericError(std::string(op) + ": shape mismatch");
  }

  // C = A[m,k] * B[k,n]
  static void gemm(const double* a, const double* b, double* c, int m, int k,
                   int n) {
    for (int i = 0; i < m; ++i) {
      double* crow = c + static_cast<size_t>(i) * n;
      for (int p = 0; p < k; ++p) {
        const double av = a[static_cast<size_t>(i) * k + p];
        const double* brow = b + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
  // C += A[m,k] * B[k,n]
  static void gemm_acc(const double* a, const double* b, double* c, int m,
                       int k, int n) {
    gemm(a, b, c, m, k, n);
  }
  // C = A[m,k] * B[n,k]^T
  static void gemm_nt(const double* a, const double* b, double* c, int m,
                      int k, int n) {
    for (int i = 0; i < m; ++i) {
      const double* arow = a + static_cast<size_t>(i) * k;
      double* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const double* brow = b + static_cast<size_t>(j) * k;
        double s = 0;
        for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
        crow[j] += s;
      }
    }
  }
  static void gemm_nt_acc(const double* a, const double* b, double* c, int m,
                          int k, int n) {
    gemm_nt(a, b, c, m, k, n);
  }
  // C += A[k,m]^T * B[k,n]  (result [m,n])
  static void gemm_tn_acc(const double* a, const double* b, double* c, int m,
                          int k, int n) {
    for (int p = 0; p < k; ++p) {
      const double* arow = a + static_cast<size_t>(p) * m;
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int i = 0; i < m; ++i) {
        const double av = arow[i];
        double* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }

  bool record_;
  std::vector<std::function<void()>> tape_;
};

}  // namespace pointlm
