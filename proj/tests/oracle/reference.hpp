#pragma once

// Test-only reference implementation in double precision. Deliberately naive and
// written without calling any laco kernel, merge or forward code: it reads tensor
// payloads out of a ModelCheckpoint and recomputes everything from scratch.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "laco/checkpoint.hpp"
#include "laco/corpus.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;  // row-major, [row][col]
using Vec = std::vector<double>;

inline Mat to_mat(const laco::Tensor& t) {
  const std::size_t rows = t.shape()[0];
  const std::size_t cols = t.rank() == 2 ? t.shape()[1] : 1;
  Mat m(rows, Vec(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = t.raw()[r * cols + c];
  return m;
}

inline Vec to_vec(const laco::Tensor& t) { return Vec(t.raw(), t.raw() + t.numel()); }

struct Layer {
  Mat wq, wk, wv, wo, wgate, wup, wdown;
  Vec ln1, ln2;
};

struct Model {
  laco::ModelConfig cfg;
  Mat embed, head;
  Vec final_norm;
  std::vector<Layer> layers;
};

inline Model from_checkpoint(const laco::ModelCheckpoint& ck) {
  Model m;
  m.cfg = ck.config;
  m.embed = to_mat(*ck.embed_tokens);
  m.head = ck.lm_head ? to_mat(*ck.lm_head) : m.embed;
  m.final_norm = to_vec(*ck.final_norm_weight);
  for (const auto& l : ck.layers) {
    m.layers.push_back({to_mat(l.q_proj()), to_mat(l.k_proj()), to_mat(l.v_proj()), to_mat(l.o_proj()),
                        to_mat(l.gate_proj()), to_mat(l.up_proj()), to_mat(l.down_proj()),
                        to_vec(l.input_norm_weight()), to_vec(l.post_attn_norm_weight())});
  }
  return m;
}

// ---- primitives ---------------------------------------------------------------

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.size(), Vec(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < b.size(); ++p) s += a[i][p] * b[p][j];
      out[i][j] = s;
    }
  return out;
}

// y = W x for W stored (out x in)
inline Vec linear(const Mat& w, const Vec& x) {
  Vec y(w.size(), 0.0);
  for (std::size_t o = 0; o < w.size(); ++o)
    for (std::size_t i = 0; i < x.size(); ++i) y[o] += w[o][i] * x[i];
  return y;
}

inline Vec rmsnorm(const Vec& x, const Vec& w, double eps) {
  double ms = 0.0;
  for (double v : x) ms += v * v;
  ms /= double(x.size());
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / std::sqrt(ms + eps) * w[i];
  return y;
}

inline Vec softmax(const Vec& x) {
  const double mx = *std::max_element(x.begin(), x.end());
  Vec y(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += (y[i] = std::exp(x[i] - mx));
  for (double& v : y) v /= z;
  return y;
}

inline double cosine(const Vec& a, const Vec& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (std::sqrt(aa) < 1e-12 || std::sqrt(bb) < 1e-12) return 0.0;
  return ab / std::sqrt(aa * bb);
}

inline double kl(const Vec& p, const Vec& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / std::max(q[i], 1e-12));
  return s;
}

inline double frobenius_diff(const Mat& a, const Mat& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) s += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
  return std::sqrt(s);
}

inline Mat transpose(const Mat& a) {
  Mat t(a[0].size(), Vec(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

inline Mat center_columns(Mat x) {
  for (std::size_t c = 0; c < x[0].size(); ++c) {
    double mean = 0.0;
    for (const auto& r : x) mean += r[c];
    mean /= double(x.size());
    for (auto& r : x) r[c] -= mean;
  }
  return x;
}

inline double frob2(const Mat& a) {
  double s = 0.0;
  for (const auto& r : a)
    for (double v : r) s += v * v;
  return s;
}

// Feature-space form: |Yc^T Xc|_F^2 / (|Xc^T Xc|_F |Yc^T Yc|_F).
inline double linear_cka(const Mat& x, const Mat& y) {
  const Mat xc = center_columns(x), yc = center_columns(y);
  const double num = frob2(matmul(transpose(yc), xc));
  return num / (std::sqrt(frob2(matmul(transpose(xc), xc))) * std::sqrt(frob2(matmul(transpose(yc), yc))));
}

// Kernel form with an explicit centering matrix H = I - 11^T / n.
inline double rbf_cka(const Mat& x, const Mat& y) {
  const std::size_t n = x.size();
  auto gram = [n](const Mat& a) {
    Mat d(n, Vec(n, 0.0));
    std::vector<double> all;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < a[0].size(); ++c) s += (a[i][c] - a[j][c]) * (a[i][c] - a[j][c]);
        d[i][j] = std::sqrt(s);
        if (i < j) all.push_back(d[i][j]);
      }
    std::sort(all.begin(), all.end());
    const std::size_t m = all.size();
    const double sigma = m % 2 ? all[m / 2] : 0.5 * (all[m / 2 - 1] + all[m / 2]);
    Mat k(n, Vec(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) k[i][j] = std::exp(-d[i][j] * d[i][j] / (2 * sigma * sigma));
    return k;
  };
  Mat h(n, Vec(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) h[i][j] = (i == j ? 1.0 : 0.0) - 1.0 / double(n);
  const Mat kc = matmul(matmul(h, gram(x)), h);
  const Mat lc = matmul(matmul(h, gram(y)), h);
  double kl_ = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) kl_ += kc[i][j] * lc[i][j];
  return kl_ / std::sqrt(frob2(kc) * frob2(lc));
}

// ---- forward ------------------------------------------------------------------

inline void rope(Vec& v, std::size_t heads, std::size_t hd, std::size_t pos, double theta) {
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < hd / 2; ++i) {
      const double ang = double(pos) * std::pow(theta, -2.0 * double(i) / double(hd));
      double& a = v[h * hd + 2 * i];
      double& b = v[h * hd + 2 * i + 1];
      const double a0 = a, b0 = b;
      a = a0 * std::cos(ang) - b0 * std::sin(ang);
      b = a0 * std::sin(ang) + b0 * std::cos(ang);
    }
}

inline Mat run_layer(const Model& m, const Layer& L, Mat x) {
  const auto& c = m.cfg;
  const std::size_t n = x.size(), hd = c.hidden_size / c.num_attention_heads;
  Mat q(n), k(n), v(n);
  for (std::size_t t = 0; t < n; ++t) {
    const Vec xn = rmsnorm(x[t], L.ln1, c.norm_eps);
    q[t] = linear(L.wq, xn);
    k[t] = linear(L.wk, xn);
    v[t] = linear(L.wv, xn);
    rope(q[t], c.num_attention_heads, hd, t, c.rope_theta);
    rope(k[t], c.num_key_value_heads, hd, t, c.rope_theta);
  }
  const std::size_t per_kv = c.num_attention_heads / c.num_key_value_heads;
  for (std::size_t t = 0; t < n; ++t) {
    Vec att(c.hidden_size, 0.0);
    for (std::size_t h = 0; h < c.num_attention_heads; ++h) {
      const std::size_t g = h / per_kv;
      Vec sc(t + 1);
      for (std::size_t j = 0; j <= t; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < hd; ++d) s += q[t][h * hd + d] * k[j][g * hd + d];
        sc[j] = s / std::sqrt(double(hd));
      }
      const Vec p = softmax(sc);
      for (std::size_t j = 0; j <= t; ++j)
        for (std::size_t d = 0; d < hd; ++d) att[h * hd + d] += p[j] * v[j][g * hd + d];
    }
    const Vec o = linear(L.wo, att);
    for (std::size_t i = 0; i < o.size(); ++i) x[t][i] += o[i];
  }
  for (std::size_t t = 0; t < n; ++t) {
    const Vec xn = rmsnorm(x[t], L.ln2, c.norm_eps);
    const Vec g = linear(L.wgate, xn), u = linear(L.wup, xn);
    Vec a(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) a[i] = g[i] / (1.0 + std::exp(-g[i])) * u[i];
    const Vec d = linear(L.wdown, a);
    for (std::size_t i = 0; i < d.size(); ++i) x[t][i] += d[i];
  }
  return x;
}

inline Mat hidden(const Model& m, const laco::TokenSequence& ids) {
  Mat x;
  for (auto id : ids) x.push_back(m.embed[std::size_t(id)]);
  for (const auto& L : m.layers) x = run_layer(m, L, x);
  for (auto& row : x) row = rmsnorm(row, m.final_norm, m.cfg.norm_eps);
  return x;
}

// Residual stream after each layer.
inline std::vector<Mat> layer_outputs(const Model& m, const laco::TokenSequence& ids) {
  Mat x;
  for (auto id : ids) x.push_back(m.embed[std::size_t(id)]);
  std::vector<Mat> outs;
  for (const auto& L : m.layers) outs.push_back(x = run_layer(m, L, x));
  return outs;
}

inline Mat logits(const Model& m, const laco::TokenSequence& ids) {
  Mat out;
  for (const auto& h : hidden(m, ids)) out.push_back(linear(m.head, h));
  return out;
}

inline double perplexity(const Model& m, const laco::Corpus& corpus) {
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& ids : corpus.sentences) {
    const Mat lg = logits(m, ids);
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
      const Vec p = softmax(lg[t]);
      nll -= std::log(p[std::size_t(ids[t + 1])]);
      ++count;
    }
  }
  return std::exp(nll / double(count));
}

// ---- merge and pruning replay -------------------------------------------------

// theta_l + sum_k (theta_{l+k} - theta_l), literally.
inline Mat merge_mat(const std::vector<const Mat*>& w) {
  Mat out = *w[0];
  for (std::size_t k = 1; k < w.size(); ++k)
    for (std::size_t i = 0; i < out.size(); ++i)
      for (std::size_t j = 0; j < out[i].size(); ++j) out[i][j] += (*w[k])[i][j] - (*w[0])[i][j];
  return out;
}

inline Vec merge_vec(const std::vector<const Vec*>& w) {
  Vec out = *w[0];
  for (std::size_t k = 1; k < w.size(); ++k)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*w[k])[i] - (*w[0])[i];
  return out;
}

inline Model merge(const Model& m, std::size_t l, std::size_t k) {
  Model out = m;
  std::vector<const Layer*> win;
  for (std::size_t i = l; i <= l + k; ++i) win.push_back(&m.layers[i]);
  auto mats = [&](Mat Layer::*f) {
    std::vector<const Mat*> v;
    for (auto* L : win) v.push_back(&(L->*f));
    return merge_mat(v);
  };
  auto vecs = [&](Vec Layer::*f) {
    std::vector<const Vec*> v;
    for (auto* L : win) v.push_back(&(L->*f));
    return merge_vec(v);
  };
  Layer merged{mats(&Layer::wq), mats(&Layer::wk),   mats(&Layer::wv),    mats(&Layer::wo),
               mats(&Layer::wgate), mats(&Layer::wup), mats(&Layer::wdown), vecs(&Layer::ln1),
               vecs(&Layer::ln2)};
  out.layers.erase(out.layers.begin() + std::ptrdiff_t(l), out.layers.begin() + std::ptrdiff_t(l + k + 1));
  out.layers.insert(out.layers.begin() + std::ptrdiff_t(l), merged);
  out.cfg.num_layers = out.layers.size();
  return out;
}

// Sentence score: mean per-token cosine of final hidden states.
inline double avg_cos(const Model& cand, const std::vector<Mat>& ref_hidden, const laco::Corpus& d) {
  double total = 0.0;
  for (std::size_t s = 0; s < d.size(); ++s) {
    const Mat h = hidden(cand, d.sentences[s]);
    double acc = 0.0;
    for (std::size_t t = 0; t < h.size(); ++t) acc += cosine(h[t], ref_hidden[s][t]);
    total += acc / double(h.size());
  }
  return total / double(d.size());
}

struct Step {
  long long l;
  std::size_t k;
  double s;
  bool accepted;
  std::size_t layers_after;
};

struct Replay {
  std::vector<Step> steps;
  std::uint64_t candidate_forwards = 0;
  std::size_t final_layers = 0;
};

// Pruning-loop replay with 0-based layers: the pointer starts at H - C, K counts the
// layers strictly after l, and after an accepted merge the pointer is clamped to
// layers - C.
inline Replay replay_laco(const Model& original, std::size_t C, std::size_t L, std::size_t H,
                          std::size_t I, double T, const laco::Corpus& d) {
  std::vector<Mat> ref;
  for (const auto& ids : d.sentences) ref.push_back(hidden(original, ids));
  Replay r;
  Model cur = original;
  long long l = (long long)H - (long long)C;
  while (l >= (long long)L) {
    const long long n = (long long)cur.layers.size();
    const long long k = std::min((long long)C - 1, n - l - 1);
    Model tmp = merge(cur, std::size_t(l), std::size_t(k));
    const double s = avg_cos(tmp, ref, d);
    r.candidate_forwards += d.size();
    Step st{l, std::size_t(k), s, s > T, 0};
    if (s > T) {
      cur = std::move(tmp);
      l -= (long long)I;
      if (l > (long long)cur.layers.size() - (long long)C) l = (long long)cur.layers.size() - (long long)C;
    } else {
      l -= 1;
    }
    st.layers_after = cur.layers.size();
    r.steps.push_back(st);
  }
  r.final_layers = cur.layers.size();
  return r;
}

}  // namespace oracle
