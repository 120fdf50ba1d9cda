#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "cfdt/errors.hpp"
#include "cfdt/rng.hpp"

// Minimal reverse-mode kernel for a small causal transformer: a fixed op
// vocabulary recorded on a tape, no general autograd. Real is float for
// training and double for gradient-check mode. All loops run in a fixed
// order, so results are bit-reproducible for a given input.

namespace cfdt::nn {

template <typename Real>
struct Tensor {
  std::vector<int> shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // allocated iff requires_grad
  bool requires_grad = false;

  int64_t size() const { return static_cast<int64_t>(value.size()); }
  int last_dim() const { return shape.back(); }
  // Product of all leading dims; ops treat tensors as (rows, last_dim).
  int64_t rows() const { return last_dim() == 0 ? 0 : size() / last_dim(); }

  void zero_grad() { std::fill(grad.begin(), grad.end(), Real(0)); }
};

template <typename Real>
using TensorPtr = std::shared_ptr<Tensor<Real>>;

template <typename Real>
int64_t shape_size(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

template <typename Real>
TensorPtr<Real> make_tensor(std::vector<int> shape, bool requires_grad = false) {
  auto t = std::make_shared<Tensor<Real>>();
  const int64_t n = shape_size<Real>(shape);
  t->shape = std::move(shape);
  t->value.assign(n, Real(0));
  t->requires_grad = requires_grad;
  if (requires_grad) t->grad.assign(n, Real(0));
  return t;
}

template <typename Real>
TensorPtr<Real> make_param(std::vector<int> shape) {
  return make_tensor<Real>(std::move(shape), true);
}

// Records backward closures as ops execute; backward() replays them in
// reverse. Values are computed eagerly. One backward pass per tape.
template <typename Real>
class Tape {
 public:
  using Ptr = TensorPtr<Real>;

  Ptr make(std::vector<int> shape, bool requires_grad) {
    return make_tensor<Real>(std::move(shape), requires_grad);
  }

  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

  void reset() { ops_.clear(); }

  void backward(const Ptr& loss) {
    if (loss->size() != 1) throw UsageError("backward: loss must be scalar");
    if (!loss->requires_grad) throw UsageError("backward: loss does not require grad");
    loss->grad[0] = Real(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  // y = a @ w, a: (lead..., K), w: (K, N)
  Ptr matmul(const Ptr& a, const Ptr& w) {
    if (w->shape.size() != 2) throw UsageError("matmul: weight must be 2-D");
    const int k = a->last_dim();
    const int n = w->shape[1];
    if (w->shape[0] != k) throw UsageError("matmul: inner dimensions disagree");
    std::vector<int> out_shape(a->shape.begin(), a->shape.end() - 1);
    out_shape.push_back(n);
    Ptr y = make(std::move(out_shape), a->requires_grad || w->requires_grad);

    const int64_t rows = a->rows();
    const Real* av = a->value.data();
    const Real* wv = w->value.data();
    Real* yv = y->value.data();
    for (int64_t m = 0; m < rows; ++m) {
      Real* yrow = yv + m * n;
      const Real* arow = av + m * k;
      for (int j = 0; j < n; ++j) yrow[j] = Real(0);
      for (int kk = 0; kk < k; ++kk) {
        const Real s = arow[kk];
        const Real* wrow = wv + static_cast<int64_t>(kk) * n;
        for (int j = 0; j < n; ++j) yrow[j] += s * wrow[j];
      }
    }

    if (y->requires_grad) {
      record([a, w, y, rows, k, n]() {
        const Real* gy = y->grad.data();
        if (a->requires_grad) {
          Real* ga = a->grad.data();
          const Real* wv = w->value.data();
          for (int64_t m = 0; m < rows; ++m) {
            const Real* gyrow = gy + m * n;
            Real* garow = ga + m * k;
            for (int kk = 0; kk < k; ++kk) {
              const Real* wrow = wv + static_cast<int64_t>(kk) * n;
              Real acc = Real(0);
              for (int j = 0; j < n; ++j) acc += gyrow[j] * wrow[j];
              garow[kk] += acc;
            }
          }
        }
        if (w->requires_grad) {
          Real* gw = w->grad.data();
          const Real* av = a->value.data();
          for (int64_t m = 0; m < rows; ++m) {
            const Real* gyrow = gy + m * n;
            const Real* arow = av + m * k;
            for (int kk = 0; kk < k; ++kk) {
              const Real s = arow[kk];
              Real* gwrow = gw + static_cast<int64_t>(kk) * n;
              for (int j = 0; j < n; ++j) gwrow[j] += s * gyrow[j];
            }
          }
        }
      });
    }
    return y;
  }

  // Same-shape elementwise add, or bias broadcast when b is 1-D of size
  // last_dim(a).
  Ptr add(const Ptr& a, const Ptr& b) {
    const bool b_is_bias = b->size() != a->size();
    if (b_is_bias && !(b->shape.size() == 1 && b->shape[0] == a->last_dim())) {
      throw UsageError("add: shape mismatch");
    }
    Ptr y = make(a->shape, a->requires_grad || b->requires_grad);
    const int64_t total = a->size();
    const int n = a->last_dim();
    if (b_is_bias) {
      for (int64_t i = 0; i < total; ++i) y->value[i] = a->value[i] + b->value[i % n];
    } else {
      for (int64_t i = 0; i < total; ++i) y->value[i] = a->value[i] + b->value[i];
    }

    if (y->requires_grad) {
      record([a, b, y, total, n, b_is_bias]() {
        if (a->requires_grad) {
          for (int64_t i = 0; i < total; ++i) a->grad[i] += y->grad[i];
        }
        if (b->requires_grad) {
          if (b_is_bias) {
            for (int64_t i = 0; i < total; ++i) b->grad[i % n] += y->grad[i];
          } else {
            for (int64_t i = 0; i < total; ++i) b->grad[i] += y->grad[i];
          }
        }
      });
    }
    return y;
  }

  // Last-axis layer norm with affine parameters; eps inside the sqrt.
  Ptr layer_norm(const Ptr& x, const Ptr& gamma, const Ptr& beta) {
    const int c = x->last_dim();
    if (gamma->size() != c || beta->size() != c) throw UsageError("layer_norm: affine size");
    Ptr y = make(x->shape, x->requires_grad || gamma->requires_grad || beta->requires_grad);
    const int64_t rows = x->rows();
    constexpr Real eps = Real(1e-5);

    auto xhat = std::make_shared<std::vector<Real>>(x->size());
    auto rstd = std::make_shared<std::vector<Real>>(rows);
    for (int64_t m = 0; m < rows; ++m) {
      const Real* xr = x->value.data() + m * c;
      Real mean = Real(0);
      for (int j = 0; j < c; ++j) mean += xr[j];
      mean /= c;
      Real var = Real(0);
      for (int j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
      var /= c;
      const Real rs = Real(1) / std::sqrt(var + eps);
      (*rstd)[m] = rs;
      Real* xh = xhat->data() + m * c;
      Real* yr = y->value.data() + m * c;
      for (int j = 0; j < c; ++j) {
        xh[j] = (xr[j] - mean) * rs;
        yr[j] = gamma->value[j] * xh[j] + beta->value[j];
      }
    }

    if (y->requires_grad) {
      record([x, gamma, beta, y, xhat, rstd, rows, c]() {
        for (int64_t m = 0; m < rows; ++m) {
          const Real* gy = y->grad.data() + m * c;
          const Real* xh = xhat->data() + m * c;
          if (gamma->requires_grad) {
            for (int j = 0; j < c; ++j) gamma->grad[j] += gy[j] * xh[j];
          }
          if (beta->requires_grad) {
            for (int j = 0; j < c; ++j) beta->grad[j] += gy[j];
          }
          if (x->requires_grad) {
            Real m1 = Real(0), m2 = Real(0);
            for (int j = 0; j < c; ++j) {
              const Real dxh = gy[j] * gamma->value[j];
              m1 += dxh;
              m2 += dxh * xh[j];
            }
            m1 /= c;
            m2 /= c;
            Real* gx = x->grad.data() + m * c;
            const Real rs = (*rstd)[m];
            for (int j = 0; j < c; ++j) {
              const Real dxh = gy[j] * gamma->value[j];
              gx[j] += rs * (dxh - m1 - xh[j] * m2);
            }
          }
        }
      });
    }
    return y;
  }

  // Numerically stable softmax over the last axis.
  Ptr softmax(const Ptr& x) {
    Ptr y = make(x->shape, x->requires_grad);
    const int c = x->last_dim();
    const int64_t rows = x->rows();
    for (int64_t m = 0; m < rows; ++m) {
      const Real* xr = x->value.data() + m * c;
      Real* yr = y->value.data() + m * c;
      Real mx = xr[0];
      for (int j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
      Real sum = Real(0);
      for (int j = 0; j < c; ++j) {
        yr[j] = std::exp(xr[j] - mx);
        sum += yr[j];
      }
      for (int j = 0; j < c; ++j) yr[j] /= sum;
    }
    if (y->requires_grad) {
      record([x, y, rows, c]() {
        for (int64_t m = 0; m < rows; ++m) {
          const Real* yr = y->value.data() + m * c;
          const Real* gy = y->grad.data() + m * c;
          Real dot = Real(0);
          for (int j = 0; j < c; ++j) dot += gy[j] * yr[j];
          Real* gx = x->grad.data() + m * c;
          for (int j = 0; j < c; ++j) gx[j] += yr[j] * (gy[j] - dot);
        }
      });
    }
    return y;
  }

  // GPT-2 style tanh-approximate GELU.
  Ptr gelu(const Ptr& x) {
    constexpr Real kC = Real(0.7978845608028653558798921198687);  // sqrt(2/pi)
    constexpr Real kA = Real(0.044715);
    Ptr y = make(x->shape, x->requires_grad);
    const int64_t total = x->size();
    for (int64_t i = 0; i < total; ++i) {
      const Real v = x->value[i];
      const Real t = std::tanh(kC * (v + kA * v * v * v));
      y->value[i] = Real(0.5) * v * (Real(1) + t);
    }
    if (y->requires_grad) {
      record([x, y, total]() {
        for (int64_t i = 0; i < total; ++i) {
          const Real v = x->value[i];
          const Real t = std::tanh(kC * (v + kA * v * v * v));
          const Real du = kC * (Real(1) + Real(3) * kA * v * v);
          const Real dydx = Real(0.5) * (Real(1) + t) + Real(0.5) * v * (Real(1) - t * t) * du;
          x->grad[i] += y->grad[i] * dydx;
        }
      });
    }
    return y;
  }

  // table: (V, C); ids indexed row-major over lead_shape.
  Ptr embedding_lookup(const Ptr& table, const std::vector<int>& ids,
                       std::vector<int> lead_shape) {
    if (table->shape.size() != 2) throw UsageError("embedding_lookup: table must be 2-D");
    const int v = table->shape[0];
    const int c = table->shape[1];
    if (shape_size<Real>(lead_shape) != static_cast<int64_t>(ids.size())) {
      throw UsageError("embedding_lookup: ids size mismatch");
    }
    std::vector<int> out_shape = std::move(lead_shape);
    out_shape.push_back(c);
    Ptr y = make(std::move(out_shape), table->requires_grad);
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= v) throw UsageError("embedding_lookup: id out of range");
      const Real* row = table->value.data() + static_cast<int64_t>(ids[i]) * c;
      std::copy(row, row + c, y->value.data() + static_cast<int64_t>(i) * c);
    }
    if (y->requires_grad) {
      auto ids_copy = std::make_shared<std::vector<int>>(ids);
      record([table, y, ids_copy, c]() {
        for (size_t i = 0; i < ids_copy->size(); ++i) {
          Real* grow = table->grad.data() + static_cast<int64_t>((*ids_copy)[i]) * c;
          const Real* gy = y->grad.data() + static_cast<int64_t>(i) * c;
          for (int j = 0; j < c; ++j) grow[j] += gy[j];
        }
      });
    }
    return y;
  }

  // Copies columns [offset, offset+len) of the last axis.
  Ptr slice_last(const Ptr& x, int offset, int len) {
    const int c = x->last_dim();
    if (offset < 0 || len < 1 || offset + len > c) throw UsageError("slice_last: bad range");
    std::vector<int> out_shape(x->shape.begin(), x->shape.end() - 1);
    out_shape.push_back(len);
    Ptr y = make(std::move(out_shape), x->requires_grad);
    const int64_t rows = x->rows();
    for (int64_t m = 0; m < rows; ++m) {
      const Real* xr = x->value.data() + m * c + offset;
      std::copy(xr, xr + len, y->value.data() + m * len);
    }
    if (y->requires_grad) {
      record([x, y, rows, c, offset, len]() {
        for (int64_t m = 0; m < rows; ++m) {
          Real* gx = x->grad.data() + m * c + offset;
          const Real* gy = y->grad.data() + m * len;
          for (int j = 0; j < len; ++j) gx[j] += gy[j];
        }
      });
    }
    return y;
  }

  // Multi-head causal self-attention over (B, T, C) inputs. key_mask, when
  // non-empty, is (B*T) with 0 marking keys no position may attend to (pads).
  // A query row whose allowed key set is empty outputs zeros.
  Ptr causal_attention(const Ptr& q, const Ptr& k, const Ptr& v, int heads,
                       const std::vector<uint8_t>& key_mask) {
    if (q->shape.size() != 3) throw UsageError("causal_attention: inputs must be (B, T, C)");
    if (q->shape != k->shape || q->shape != v->shape) {
      throw UsageError("causal_attention: q/k/v shapes disagree");
    }
    const int b_n = q->shape[0], t_n = q->shape[1], c_n = q->shape[2];
    if (heads < 1 || c_n % heads != 0) throw UsageError("causal_attention: bad head count");
    if (!key_mask.empty() && key_mask.size() != static_cast<size_t>(b_n) * t_n) {
      throw UsageError("causal_attention: key mask size");
    }
    const int hs = c_n / heads;
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(hs));

    Ptr y = make(q->shape, q->requires_grad || k->requires_grad || v->requires_grad);
    auto probs = std::make_shared<std::vector<Real>>(
        static_cast<size_t>(b_n) * heads * t_n * t_n, Real(0));

    auto at = [t_n, c_n](auto* base, int b, int t) {
      return base + (static_cast<int64_t>(b) * t_n + t) * c_n;
    };
    auto allowed = [&key_mask, t_n](int b, int j) {
      return key_mask.empty() || key_mask[static_cast<size_t>(b) * t_n + j] != 0;
    };

    // Left-padded windows always mask a prefix of keys; in that case the
    // per-key check collapses to a start index. Results are identical either
    // way (same ascending-j summation order).
    std::vector<int> first_valid(b_n, 0);
    bool prefix_mask = true;
    if (!key_mask.empty()) {
      for (int b = 0; b < b_n && prefix_mask; ++b) {
        int fv = t_n;
        for (int j = 0; j < t_n; ++j) {
          if (key_mask[static_cast<size_t>(b) * t_n + j]) {
            fv = j;
            break;
          }
        }
        for (int j = fv; j < t_n; ++j) {
          if (!key_mask[static_cast<size_t>(b) * t_n + j]) {
            prefix_mask = false;
            break;
          }
        }
        first_valid[b] = fv;
      }
    }

    std::vector<Real> scores(t_n);
    for (int b = 0; b < b_n; ++b) {
      const int j0_b = prefix_mask ? first_valid[b] : 0;
      for (int h = 0; h < heads; ++h) {
        const int off = h * hs;
        Real* prob_bh = probs->data() + (static_cast<size_t>(b) * heads + h) * t_n * t_n;
        for (int i = 0; i < t_n; ++i) {
          const Real* qi = at(q->value.data(), b, i) + off;
          Real mx = Real(0);
          bool any = false;
          for (int j = j0_b; j <= i; ++j) {
            if (!prefix_mask && !allowed(b, j)) continue;
            const Real* kj = at(k->value.data(), b, j) + off;
            Real s = Real(0);
            for (int d = 0; d < hs; ++d) s += qi[d] * kj[d];
            s *= scale;
            scores[j] = s;
            if (!any || s > mx) mx = s;
            any = true;
          }
          Real* yi = at(y->value.data(), b, i) + off;
          std::fill(yi, yi + hs, Real(0));
          if (!any) continue;  // fully masked query row
          Real sum = Real(0);
          Real* prow = prob_bh + static_cast<int64_t>(i) * t_n;
          for (int j = j0_b; j <= i; ++j) {
            if (!prefix_mask && !allowed(b, j)) continue;
            prow[j] = std::exp(scores[j] - mx);
            sum += prow[j];
          }
          for (int j = j0_b; j <= i; ++j) {
            if (!prefix_mask && !allowed(b, j)) continue;
            prow[j] /= sum;
            const Real* vj = at(v->value.data(), b, j) + off;
            const Real p = prow[j];
            for (int d = 0; d < hs; ++d) yi[d] += p * vj[d];
          }
        }
      }
    }

    if (y->requires_grad) {
      record([q, k, v, y, probs, b_n, t_n, heads, hs, scale, at, prefix_mask, first_valid]() {
        std::vector<Real> dprob(t_n);
        for (int b = 0; b < b_n; ++b) {
          const int j0_b = prefix_mask ? first_valid[b] : 0;
          for (int h = 0; h < heads; ++h) {
            const int off = h * hs;
            const Real* prob_bh = probs->data() + (static_cast<size_t>(b) * heads + h) * t_n * t_n;
            for (int i = 0; i < t_n; ++i) {
              const Real* gy = at(y->grad.data(), b, i) + off;
              const Real* prow = prob_bh + static_cast<int64_t>(i) * t_n;
              // dV and d(probs)
              Real pdot = Real(0);
              for (int j = j0_b; j <= i; ++j) {
                if (prow[j] == Real(0)) {
                  dprob[j] = Real(0);
                  continue;
                }
                const Real* vj = at(v->value.data(), b, j) + off;
                Real dp = Real(0);
                for (int d = 0; d < hs; ++d) dp += gy[d] * vj[d];
                dprob[j] = dp;
                pdot += dp * prow[j];
                if (v->requires_grad) {
                  Real* gv = at(v->grad.data(), b, j) + off;
                  const Real p = prow[j];
                  for (int d = 0; d < hs; ++d) gv[d] += p * gy[d];
                }
              }
              // softmax backward, then into q and k
              const Real* qi = at(q->value.data(), b, i) + off;
              Real* gq = q->requires_grad ? at(q->grad.data(), b, i) + off : nullptr;
              for (int j = j0_b; j <= i; ++j) {
                if (prow[j] == Real(0)) continue;
                const Real ds = prow[j] * (dprob[j] - pdot) * scale;
                const Real* kj = at(k->value.data(), b, j) + off;
                if (gq != nullptr) {
                  for (int d = 0; d < hs; ++d) gq[d] += ds * kj[d];
                }
                if (k->requires_grad) {
                  Real* gk = at(k->grad.data(), b, j) + off;
                  for (int d = 0; d < hs; ++d) gk[d] += ds * qi[d];
                }
              }
            }
          }
        }
      });
    }
    return y;
  }

  // Mean cross-entropy over unmasked elements. logits: (lead..., A); targets
  // and element_mask are row-major over the leading dims. Empty mask = all.
  Ptr cross_entropy(const Ptr& logits, const std::vector<int>& targets,
                    const std::vector<uint8_t>& element_mask) {
    const int a_n = logits->last_dim();
    const int64_t rows = logits->rows();
    if (static_cast<int64_t>(targets.size()) != rows) {
      throw UsageError("cross_entropy: target count mismatch");
    }
    if (!element_mask.empty() && static_cast<int64_t>(element_mask.size()) != rows) {
      throw UsageError("cross_entropy: mask size mismatch");
    }
    int64_t n_eff = 0;
    for (int64_t m = 0; m < rows; ++m) {
      if (element_mask.empty() || element_mask[m]) ++n_eff;
    }
    if (n_eff == 0) throw UsageError("cross_entropy: no unmasked elements");

    auto probs = std::make_shared<std::vector<Real>>(logits->size());
    Ptr loss = make({1}, logits->requires_grad);
    Real total = Real(0);
    for (int64_t m = 0; m < rows; ++m) {
      const Real* lr = logits->value.data() + m * a_n;
      Real* pr = probs->data() + m * a_n;
      Real mx = lr[0];
      for (int j = 1; j < a_n; ++j) mx = std::max(mx, lr[j]);
      Real sum = Real(0);
      for (int j = 0; j < a_n; ++j) {
        pr[j] = std::exp(lr[j] - mx);
        sum += pr[j];
      }
      for (int j = 0; j < a_n; ++j) pr[j] /= sum;
      if (element_mask.empty() || element_mask[m]) {
        const int t = targets[m];
        if (t < 0 || t >= a_n) throw UsageError("cross_entropy: target out of range");
        // -log softmax(target) via the stabilized terms
        total += std::log(sum) - (lr[t] - mx);
      }
    }
    loss->value[0] = total / static_cast<Real>(n_eff);

    if (loss->requires_grad) {
      auto targets_copy = std::make_shared<std::vector<int>>(targets);
      auto mask_copy = std::make_shared<std::vector<uint8_t>>(element_mask);
      record([logits, loss, probs, targets_copy, mask_copy, rows, a_n, n_eff]() {
        const Real g = loss->grad[0] / static_cast<Real>(n_eff);
        for (int64_t m = 0; m < rows; ++m) {
          if (!mask_copy->empty() && !(*mask_copy)[m]) continue;
          Real* gl = logits->grad.data() + m * a_n;
          const Real* pr = probs->data() + m * a_n;
          const int t = (*targets_copy)[m];
          for (int j = 0; j < a_n; ++j) gl[j] += g * (pr[j] - (j == t ? Real(1) : Real(0)));
        }
      });
    }
    return loss;
  }

  // Standard inverted dropout; identity when rate == 0 (draws nothing).
  Ptr dropout(const Ptr& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw UsageError("dropout: rate must be in [0, 1)");
    if (rate == 0.0) return x;
    Ptr y = make(x->shape, x->requires_grad);
    const int64_t total = x->size();
    auto mask = std::make_shared<std::vector<Real>>(total);
    const Real keep_scale = Real(1.0 / (1.0 - rate));
    for (int64_t i = 0; i < total; ++i) {
      const Real m = rng.uniform() >= rate ? keep_scale : Real(0);
      (*mask)[i] = m;
      y->value[i] = x->value[i] * m;
    }
    if (y->requires_grad) {
      record([x, y, mask, total]() {
        for (int64_t i = 0; i < total; ++i) x->grad[i] += y->grad[i] * (*mask)[i];
      });
    }
    return y;
  }

 private:
  std::vector<std::function<void()>> ops_;
};

// --- optimizer --------------------------------------------------------------

template <typename Real>
struct AdamConfig {
  Real lr = Real(1e-4);
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real eps = Real(1e-8);
  Real weight_decay = Real(0);  // decoupled
};

template <typename Real>
struct OptimizerState {
  int64_t step_count = 0;
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;

  void init(const std::vector<TensorPtr<Real>>& params) {
    step_count = 0;
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p->size(), Real(0));
      v.emplace_back(p->size(), Real(0));
    }
  }
};

// Bias-corrected Adam with decoupled weight decay, reading gradients from the
// parameter tensors.
template <typename Real>
void adam_step(const std::vector<TensorPtr<Real>>& params, OptimizerState<Real>& state,
               const AdamConfig<Real>& cfg) {
  if (state.m.size() != params.size()) throw UsageError("adam_step: state not initialized");
  state.step_count += 1;
  const Real bc1 = Real(1) - std::pow(cfg.beta1, static_cast<Real>(state.step_count));
  const Real bc2 = Real(1) - std::pow(cfg.beta2, static_cast<Real>(state.step_count));
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor<Real>& t = *params[p];
    if (static_cast<int64_t>(state.m[p].size()) != t.size()) {
      throw UsageError("adam_step: parameter shape changed");
    }
    Real* mv = state.m[p].data();
    Real* vv = state.v[p].data();
    Real* pv = t.value.data();
    const Real* gv = t.grad.data();
    const int64_t n = t.size();
    for (int64_t i = 0; i < n; ++i) {
      const Real g = gv[i];
      mv[i] = cfg.beta1 * mv[i] + (Real(1) - cfg.beta1) * g;
      vv[i] = cfg.beta2 * vv[i] + (Real(1) - cfg.beta2) * g * g;
      const Real mhat = mv[i] / bc1;
      const Real vhat = vv[i] / bc2;
      pv[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * pv[i]);
    }
  }
}

template <typename Real>
void zero_grads(const std::vector<TensorPtr<Real>>& params) {
  for (const auto& p : params) p->zero_grad();
}

}  // namespace cfdt::nn
