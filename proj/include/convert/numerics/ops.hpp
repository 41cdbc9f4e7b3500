#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <vector>

#include "convert/numerics/kernels.hpp"
#include "convert/numerics/tape.hpp"

// Differentiable operations on tape variables. Each op computes its forward
// value with the kernels in kernels.hpp and registers an adjoint that
// accumulates into its parents' gradient slots.
namespace convert::nn {

namespace detail {

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto out = matmul(a.value(), b.value());
  return a.tape->push(std::move(out), {a, b},
                      [ia = a.id, ib = b.id](GradTape<T>& t, std::size_t self) {
                        const auto& g = t.grad_slot(self);
                        if (t.requires_grad(ia)) detail::add_into(t.grad_slot(ia), matmul_nt(g, t.value(ib)));
                        if (t.requires_grad(ib)) detail::add_into(t.grad_slot(ib), matmul_tn(t.value(ia), g));
                      },
                      "matmul");
}

// a * b^T
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  auto out = matmul_nt(a.value(), b.value());
  return a.tape->push(std::move(out), {a, b},
                      [ia = a.id, ib = b.id](GradTape<T>& t, std::size_t self) {
                        const auto& g = t.grad_slot(self);
                        if (t.requires_grad(ia)) detail::add_into(t.grad_slot(ia), matmul(g, t.value(ib)));
                        if (t.requires_grad(ib)) detail::add_into(t.grad_slot(ib), matmul_tn(g, t.value(ia)));
                      },
                      "matmul_nt");
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  detail::add_into(out, b.value());
  return a.tape->push(std::move(out), {a, b},
                      [ia = a.id, ib = b.id](GradTape<T>& t, std::size_t self) {
                        const auto& g = t.grad_slot(self);
                        if (t.requires_grad(ia)) detail::add_into(t.grad_slot(ia), g);
                        if (t.requires_grad(ib)) detail::add_into(t.grad_slot(ib), g);
                      },
                      "add");
}

template <class T>
Var<T> operator+(Var<T> a, Var<T> b) {
  return add(a, b);
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->push(std::move(out), {a, b},
                      [ia = a.id, ib = b.id](GradTape<T>& t, std::size_t self) {
                        const auto& g = t.grad_slot(self);
                        if (t.requires_grad(ia)) {
                          auto& ga = t.grad_slot(ia);
                          const auto& bv = t.value(ib);
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
                        }
                        if (t.requires_grad(ib)) {
                          auto& gb = t.grad_slot(ib);
                          const auto& av = t.value(ia);
                          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
                        }
                      },
                      "mul");
}

template <class T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v *= factor;
  return x.tape->push(std::move(out), {x},
                      [ix = x.id, factor](GradTape<T>& t, std::size_t self) {
                        const auto& g = t.grad_slot(self);
                        auto& gx = t.grad_slot(ix);
                        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * factor;
                      },
                      "scale");
}

// x[m x n] + bias[n] broadcast over rows.
template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (xv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != xv.cols()) {
    fail(ErrorCode::dimension,
         "add_bias " + shape_string(xv.shape()) + " + " + shape_string(bv.shape()));
  }
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  return x.tape->push(std::move(out), {x, bias},
                      [ix = x.id, ib = bias.id](GradTape<T>& t, std::size_t self) {
                        const auto& g = t.grad_slot(self);
                        if (t.requires_grad(ix)) detail::add_into(t.grad_slot(ix), g);
                        if (t.requires_grad(ib)) {
                          auto& gb = t.grad_slot(ib);
                          for (std::size_t r = 0; r < g.rows(); ++r) {
                            auto row = g.row(r);
                            for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
                          }
                        }
                      },
                      "add_bias");
}

template <class T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return add_bias(matmul(x, weight), bias);
}

template <class T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = gelu(v);
  return x.tape->push(std::move(out), {x},
                      [ix = x.id](GradTape<T>& t, std::size_t self) {
                        const auto& g = t.grad_slot(self);
                        const auto& xv = t.value(ix);
                        auto& gx = t.grad_slot(ix);
                        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * gelu_grad(xv[i]);
                      },
                      "gelu");
}

template <class T>
Var<T> tanh(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = std::tanh(v);
  return x.tape->push(std::move(out), {x},
                      [ix = x.id](GradTape<T>& t, std::size_t self) {
                        const auto& g = t.grad_slot(self);
                        const auto& y = t.value(self);
                        auto& gx = t.grad_slot(ix);
                        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (T(1) - y[i] * y[i]);
                      },
                      "tanh");
}

// Row-wise layer normalization: (x - mean) / sqrt(var + eps) * gamma + beta.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  require(xv.rank() == 2 && gv.rank() == 1 && gv.dim(0) == xv.cols() && bv.shape() == gv.shape(),
          ErrorCode::dimension, "layer_norm shape mismatch");
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  auto normalized = std::make_shared<Tensor<T>>(xv.shape());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = xv.row(r);
    T mean{0};
    for (T v : in) mean += v;
    mean /= T(cols);
    T var{0};
    for (T v : in) var += (v - mean) * (v - mean);
    var /= T(cols);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    auto xhat = normalized->row(r);
    auto o = out.row(r);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat[c] = (in[c] - mean) * is;
      o[c] = xhat[c] * gv[c] + bv[c];
    }
  }
  return x.tape->push(
      std::move(out), {x, gamma, beta},
      [ix = x.id, ig = gamma.id, ib = beta.id, normalized, inv_std](GradTape<T>& t, std::size_t self) {
        const auto& g = t.grad_slot(self);
        const std::size_t rows = g.rows();
        const std::size_t cols = g.cols();
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          for (std::size_t r = 0; r < rows; ++r) {
            auto gr = g.row(r);
            auto xhat = normalized->row(r);
            if (t.requires_grad(ig)) {
              auto& gg = t.grad_slot(ig);
              for (std::size_t c = 0; c < cols; ++c) gg[c] += gr[c] * xhat[c];
            }
            if (t.requires_grad(ib)) {
              auto& gb = t.grad_slot(ib);
              for (std::size_t c = 0; c < cols; ++c) gb[c] += gr[c];
            }
          }
        }
        if (!t.requires_grad(ix)) return;
        const auto& gamma_v = t.value(ig);
        auto& gx = t.grad_slot(ix);
        std::vector<T> dxhat(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          auto gr = g.row(r);
          auto xhat = normalized->row(r);
          T mean_d{0};
          T mean_dx{0};
          for (std::size_t c = 0; c < cols; ++c) {
            dxhat[c] = gr[c] * gamma_v[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xhat[c];
          }
          mean_d /= T(cols);
          mean_dx /= T(cols);
          auto out_row = gx.row(r);
          const T is = (*inv_std)[r];
          for (std::size_t c = 0; c < cols; ++c) {
            out_row[c] += is * (dxhat[c] - mean_d - xhat[c] * mean_dx);
          }
        }
      },
      "layer_norm");
}

// Rows of `table` selected by `ids`; the adjoint scatter-adds.
template <class T>
Var<T> gather_rows(Var<T> table, std::vector<std::size_t> ids) {
  const auto& tv = table.value();
  require(tv.rank() == 2, ErrorCode::dimension, "gather_rows expects a matrix table");
  require(!ids.empty(), ErrorCode::contract, "gather_rows with no ids");
  const std::size_t cols = tv.cols();
  Tensor<T> out(Shape{ids.size(), cols});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows()) fail(ErrorCode::range, "gather_rows id out of range");
    auto src = tv.row(ids[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return table.tape->push(std::move(out), {table},
                          [it = table.id, ids = std::move(ids)](GradTape<T>& t, std::size_t self) {
                            const auto& g = t.grad_slot(self);
                            auto& gt = t.grad_slot(it);
                            for (std::size_t i = 0; i < ids.size(); ++i) {
                              auto src = g.row(i);
                              auto dst = gt.row(ids[i]);
                              for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                            }
                          },
                          "gather_rows");
}

// Inverted dropout. Identity when rate == 0.
template <class T>
Var<T> dropout(Var<T> x, T rate, std::mt19937_64& rng) {
  require(rate >= T(0) && rate < T(1), ErrorCode::config, "dropout rate must be in [0, 1)");
  if (rate == T(0)) return x;
  const T keep_scale = T(1) / (T(1) - rate);
  auto mask = std::make_shared<std::vector<T>>(x.value().size());
  for (auto& m : *mask) {
    const double u = double(rng() >> 11) * 0x1.0p-53;
    m = u < double(rate) ? T(0) : keep_scale;
  }
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
  return x.tape->push(std::move(out), {x},
                      [ix = x.id, mask](GradTape<T>& t, std::size_t self) {
                        const auto& g = t.grad_slot(self);
                        auto& gx = t.grad_slot(ix);
                        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (*mask)[i];
                      },
                      "dropout");
}

template <class T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  require(xv.rank() == 2 && begin < end && end <= xv.rows(), ErrorCode::range, "slice_rows range");
  const std::size_t cols = xv.cols();
  std::vector<T> data(xv.data() + begin * cols, xv.data() + end * cols);
  Tensor<T> out(Shape{end - begin, cols}, std::move(data));
  return x.tape->push(std::move(out), {x},
                      [ix = x.id, begin](GradTape<T>& t, std::size_t self) {
                        const auto& g = t.grad_slot(self);
                        auto& gx = t.grad_slot(ix);
                        T* dst = gx.data() + begin * g.cols();
                        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                      },
                      "slice_rows");
}

template <class T>
Var<T> sum(Var<T> x) {
  T total{0};
  for (T v : x.value().values()) total += v;
  return x.tape->push(Tensor<T>::scalar(total), {x},
                      [ix = x.id](GradTape<T>& t, std::size_t self) {
                        const T g = t.grad_slot(self)[0];
                        for (auto& v : t.grad_slot(ix).values()) v += g;
                      },
                      "sum");
}

template <class T>
Var<T> dot(Var<T> a, Var<T> b) {
  return sum(mul(a, b));
}

// Batches of variable-length sequences packed into one matrix: sequence b
// occupies rows [b * stride, b * stride + lengths[b]); the remaining rows of
// its block are padding.
struct SequenceLayout {
  std::size_t stride = 0;
  std::vector<std::size_t> lengths;

  std::size_t batch() const noexcept { return lengths.size(); }
  std::size_t rows() const noexcept { return stride * lengths.size(); }

  void validate() const {
    require(stride > 0, ErrorCode::contract, "sequence stride must be positive");
    for (std::size_t n : lengths) {
      if (n == 0 || n > stride) fail(ErrorCode::contract, "sequence length must be in [1, stride]");
    }
  }
};

// Attention probabilities of one head for one sequence: softmax over the
// unmasked keys of scale * q_i . k_j. Returned as len x len, row-major.
template <class T>
std::vector<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k, std::size_t base,
                               std::size_t len, std::size_t col0, std::size_t width, T scale) {
  std::vector<T> probs(len * len);
  for (std::size_t i = 0; i < len; ++i) {
    const T* qi = q.data() + (base + i) * q.cols() + col0;
    std::span<T> row(probs.data() + i * len, len);
    for (std::size_t j = 0; j < len; ++j) {
      const T* kj = k.data() + (base + j) * k.cols() + col0;
      T acc{0};
      for (std::size_t c = 0; c < width; ++c) acc += qi[c] * kj[c];
      row[j] = acc * scale;
    }
    softmax_inplace(row);
  }
  return probs;
}

// Multi-head scaled dot-product self-attention over packed sequences with
// padding keys masked out. q and k are rows x qk_dim, v is rows x v_dim; both
// widths split evenly across `heads`. Padding rows of the output are zero.
template <class T>
Var<T> masked_attention(Var<T> q, Var<T> k, Var<T> v, const SequenceLayout& layout,
                        std::size_t heads) {
  layout.validate();
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  if (qv.rank() != 2 || kv.shape() != qv.shape() || vv.rank() != 2 || vv.rows() != qv.rows() ||
      qv.rows() != layout.rows()) {
    fail(ErrorCode::dimension, "masked_attention operand shapes");
  }
  require(heads > 0 && qv.cols() % heads == 0 && vv.cols() % heads == 0, ErrorCode::dimension,
          "attention widths must divide evenly across heads");
  const std::size_t qk_head = qv.cols() / heads;
  const std::size_t v_head = vv.cols() / heads;
  const T scale = T(1) / std::sqrt(T(qk_head));

  // probs for (b, h) stored at offsets[b * heads + h]
  auto probs = std::make_shared<std::vector<T>>();
  auto offsets = std::make_shared<std::vector<std::size_t>>();
  Tensor<T> out(Shape{qv.rows(), vv.cols()});
  for (std::size_t b = 0; b < layout.batch(); ++b) {
    const std::size_t len = layout.lengths[b];
    const std::size_t base = b * layout.stride;
    for (std::size_t h = 0; h < heads; ++h) {
      auto p = attention_probs(qv, kv, base, len, h * qk_head, qk_head, scale);
      for (std::size_t i = 0; i < len; ++i) {
        T* o = out.data() + (base + i) * out.cols() + h * v_head;
        for (std::size_t j = 0; j < len; ++j) {
          const T w = p[i * len + j];
          const T* vj = vv.data() + (base + j) * vv.cols() + h * v_head;
          for (std::size_t c = 0; c < v_head; ++c) o[c] += w * vj[c];
        }
      }
      offsets->push_back(probs->size());
      probs->insert(probs->end(), p.begin(), p.end());
    }
  }

  return q.tape->push(
      std::move(out), {q, k, v},
      [iq = q.id, ik = k.id, iv = v.id, layout, heads, qk_head, v_head, scale, probs,
       offsets](GradTape<T>& t, std::size_t self) {
        const auto& g = t.grad_slot(self);
        const auto& qv = t.value(iq);
        const auto& kv = t.value(ik);
        const auto& vv = t.value(iv);
        Tensor<T>* gq = t.requires_grad(iq) ? &t.grad_slot(iq) : nullptr;
        Tensor<T>* gk = t.requires_grad(ik) ? &t.grad_slot(ik) : nullptr;
        Tensor<T>* gv = t.requires_grad(iv) ? &t.grad_slot(iv) : nullptr;
        std::vector<T> dp;
        for (std::size_t b = 0; b < layout.batch(); ++b) {
          const std::size_t len = layout.lengths[b];
          const std::size_t base = b * layout.stride;
          for (std::size_t h = 0; h < heads; ++h) {
            const T* p = probs->data() + (*offsets)[b * heads + h];
            dp.assign(len * len, T(0));
            for (std::size_t i = 0; i < len; ++i) {
              const T* gi = g.data() + (base + i) * g.cols() + h * v_head;
              for (std::size_t j = 0; j < len; ++j) {
                const T* vj = vv.data() + (base + j) * vv.cols() + h * v_head;
                T acc{0};
                for (std::size_t c = 0; c < v_head; ++c) acc += gi[c] * vj[c];
                dp[i * len + j] = acc;
                if (gv) {
                  T* gvj = gv->data() + (base + j) * gv->cols() + h * v_head;
                  const T w = p[i * len + j];
                  for (std::size_t c = 0; c < v_head; ++c) gvj[c] += w * gi[c];
                }
              }
            }
            if (!gq && !gk) continue;
            // softmax adjoint in place: dS = P * (dP - sum_j P dP)
            for (std::size_t i = 0; i < len; ++i) {
              T inner{0};
              for (std::size_t j = 0; j < len; ++j) inner += p[i * len + j] * dp[i * len + j];
              for (std::size_t j = 0; j < len; ++j) {
                dp[i * len + j] = p[i * len + j] * (dp[i * len + j] - inner) * scale;
              }
            }
            for (std::size_t i = 0; i < len; ++i) {
              const T* qi = qv.data() + (base + i) * qv.cols() + h * qk_head;
              T* gqi = gq ? gq->data() + (base + i) * gq->cols() + h * qk_head : nullptr;
              for (std::size_t j = 0; j < len; ++j) {
                const T ds = dp[i * len + j];
                const T* kj = kv.data() + (base + j) * kv.cols() + h * qk_head;
                if (gqi) {
                  for (std::size_t c = 0; c < qk_head; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  T* gkj = gk->data() + (base + j) * gk->cols() + h * qk_head;
                  for (std::size_t c = 0; c < qk_head; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      },
      "masked_attention");
}

// Square-root-of-N reduction: sum of the unmasked rows of each sequence
// divided by sqrt(length). Returns batch x cols.
template <class T>
Var<T> sqrt_n_pool(Var<T> x, const SequenceLayout& layout) {
  layout.validate();
  const auto& xv = x.value();
  require(xv.rank() == 2 && xv.rows() == layout.rows(), ErrorCode::dimension,
          "sqrt_n_pool rows do not match the layout");
  const std::size_t cols = xv.cols();
  Tensor<T> out(Shape{layout.batch(), cols});
  for (std::size_t b = 0; b < layout.batch(); ++b) {
    auto o = out.row(b);
    for (std::size_t i = 0; i < layout.lengths[b]; ++i) {
      auto r = xv.row(b * layout.stride + i);
      for (std::size_t c = 0; c < cols; ++c) o[c] += r[c];
    }
    const T inv = T(1) / std::sqrt(T(layout.lengths[b]));
    for (auto& v : o) v *= inv;
  }
  return x.tape->push(std::move(out), {x},
                      [ix = x.id, layout](GradTape<T>& t, std::size_t self) {
                        const auto& g = t.grad_slot(self);
                        auto& gx = t.grad_slot(ix);
                        for (std::size_t b = 0; b < layout.batch(); ++b) {
                          const T inv = T(1) / std::sqrt(T(layout.lengths[b]));
                          auto gr = g.row(b);
                          for (std::size_t i = 0; i < layout.lengths[b]; ++i) {
                            auto dst = gx.row(b * layout.stride + i);
                            for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += gr[c] * inv;
                          }
                        }
                      },
                      "sqrt_n_pool");
}

// Mean over rows of -log softmax(scores[i])[i]: row i must pick column i
// among all K columns. With `symmetric`, the column-wise term (each response
// picking its input) is added.
template <class T>
T in_batch_cross_entropy_value(const Tensor<T>& scores, bool symmetric = false) {
  require(scores.rank() == 2, ErrorCode::contract, "score matrix must be 2-D");
  require(scores.rows() == scores.cols(), ErrorCode::contract, "score matrix must be square");
  const std::size_t k = scores.rows();
  T loss{0};
  for (std::size_t i = 0; i < k; ++i) loss += log_sum_exp(scores.row(i)) - scores(i, i);
  if (symmetric) {
    const Tensor<T> st = transpose(scores);
    for (std::size_t j = 0; j < k; ++j) loss += log_sum_exp(st.row(j)) - st(j, j);
  }
  return loss / T(k);
}

template <class T>
Var<T> in_batch_cross_entropy(Var<T> scores, bool symmetric = false) {
  const T value = in_batch_cross_entropy_value(scores.value(), symmetric);
  return scores.tape->push(
      Tensor<T>::scalar(value), {scores},
      [is = scores.id, symmetric](GradTape<T>& t, std::size_t self) {
        const T g = t.grad_slot(self)[0];
        const auto& s = t.value(is);
        const std::size_t k = s.rows();
        auto& gs = t.grad_slot(is);
        Tensor<T> p = softmax_rows(s);
        for (std::size_t i = 0; i < k; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            gs(i, j) += g * (p(i, j) - (i == j ? T(1) : T(0))) / T(k);
          }
        }
        if (symmetric) {
          Tensor<T> pc = softmax_rows(transpose(s));
          for (std::size_t j = 0; j < k; ++j) {
            for (std::size_t i = 0; i < k; ++i) {
              gs(i, j) += g * (pc(j, i) - (i == j ? T(1) : T(0))) / T(k);
            }
          }
        }
      },
      "in_batch_cross_entropy");
}

}  // namespace convert::nn
