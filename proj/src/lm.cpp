#include "moin/lm.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "moin/common.hpp"

namespace moin {

namespace {

template <class T>
inline T dot_n(const T* a, const T* b, int n) {
  T s{};
#pragma omp simd reduction(+ : s)
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <class T>
inline void axpy_n(T alpha, const T* x, T* y, int n) {
#pragma omp simd
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
T silu(T x) {
  return x / (T(1) + std::exp(-x));
}

template <class T>
struct LayerCache {
  Matrix<T> x_in;
  std::vector<T> inv1;
  Matrix<T> n1;
  std::array<Matrix<T>, kLinearsPerBlock> mid;  // LoRA W_a x per slot
  Matrix<T> q, k, v;
  Matrix<T> probs;  // (heads * L) x L
  Matrix<T> att;
  Matrix<T> x_mid;
  std::vector<T> inv2;
  Matrix<T> n2;
  Matrix<T> gate, up, act;
};

template <class T>
struct Tape {
  std::vector<LayerCache<T>> layers;
  Matrix<T> x_final;
  std::vector<T> inv_f;
  Matrix<T> nf;
  Matrix<T> logits;
};

template <class T>
void rmsnorm_forward(const Matrix<T>& x, const Matrix<T>& gain, double eps, Matrix<T>& y, std::vector<T>& inv) {
  const int n = x.rows, d = x.cols;
  y = Matrix<T>(n, d);
  inv.assign(static_cast<std::size_t>(n), T{});
  for (int i = 0; i < n; ++i) {
    const T ms = dot_n(x.row(i), x.row(i), d) / static_cast<T>(d);
    const T r = T(1) / std::sqrt(ms + static_cast<T>(eps));
    inv[static_cast<std::size_t>(i)] = r;
    for (int j = 0; j < d; ++j) y(i, j) = x(i, j) * r * gain.data[static_cast<std::size_t>(j)];
  }
}

// dx += d(rmsnorm)/dx^T dy; dgain += ... when non-null.
template <class T>
void rmsnorm_backward(const Matrix<T>& x, const std::vector<T>& inv, const Matrix<T>& gain, const Matrix<T>& dy,
                      Matrix<T>& dx, Matrix<T>* dgain) {
  const int n = x.rows, d = x.cols;
  std::vector<T> dxhat(static_cast<std::size_t>(d));
  for (int i = 0; i < n; ++i) {
    const T r = inv[static_cast<std::size_t>(i)];
    for (int j = 0; j < d; ++j) dxhat[static_cast<std::size_t>(j)] = dy(i, j) * gain.data[static_cast<std::size_t>(j)];
    if (dgain) {
      for (int j = 0; j < d; ++j) dgain->data[static_cast<std::size_t>(j)] += dy(i, j) * x(i, j) * r;
    }
    const T proj = dot_n(dxhat.data(), x.row(i), d);
    const T coeff = r * r * r * proj / static_cast<T>(d);
    for (int j = 0; j < d; ++j) dx(i, j) += r * dxhat[static_cast<std::size_t>(j)] - coeff * x(i, j);
  }
}

template <class T>
void linear_forward(const Matrix<T>& w, const LoraLayer<T>* lora, const Matrix<T>& x, Matrix<T>& y, Matrix<T>& mid) {
  const int n = x.rows, in = w.cols, out = w.rows;
  y = Matrix<T>(n, out);
  for (int i = 0; i < n; ++i) {
    T* yr = y.row(i);
    const T* xr = x.row(i);
    for (int o = 0; o < out; ++o) yr[o] = dot_n(xr, w.row(o), in);
  }
  if (!lora) return;
  const int r = lora->a.rows;
  mid = Matrix<T>(n, r);
  for (int i = 0; i < n; ++i) {
    const T* xr = x.row(i);
    T* mr = mid.row(i);
    for (int q = 0; q < r; ++q) mr[q] = dot_n(xr, lora->a.row(q), in);
    T* yr = y.row(i);
    for (int o = 0; o < out; ++o) yr[o] += dot_n(mr, lora->b.row(o), r);
  }
}

template <class T>
void linear_backward(const Matrix<T>& w, const LoraLayer<T>* lora, const Matrix<T>& x, const Matrix<T>& mid,
                     const Matrix<T>& dy, Matrix<T>& dx, Matrix<T>* dw, LoraLayer<T>* dlora) {
  const int n = x.rows, in = w.cols, out = w.rows;
  for (int i = 0; i < n; ++i) {
    const T* dyr = dy.row(i);
    T* dxr = dx.row(i);
    for (int o = 0; o < out; ++o) {
      const T g = dyr[o];
      if (g == T{}) continue;
      axpy_n(g, w.row(o), dxr, in);
      if (dw) axpy_n(g, x.row(i), dw->row(o), in);
    }
  }
  if (!lora) return;
  const int r = lora->a.rows;
  std::vector<T> du(static_cast<std::size_t>(r));
  for (int i = 0; i < n; ++i) {
    std::fill(du.begin(), du.end(), T{});
    const T* dyr = dy.row(i);
    for (int o = 0; o < out; ++o) {
      const T g = dyr[o];
      if (g == T{}) continue;
      axpy_n(g, lora->b.row(o), du.data(), r);
      if (dlora) axpy_n(g, mid.row(i), dlora->b.row(o), r);
    }
    T* dxr = dx.row(i);
    for (int q = 0; q < r; ++q) {
      const T g = du[static_cast<std::size_t>(q)];
      axpy_n(g, lora->a.row(q), dxr, in);
      if (dlora) axpy_n(g, x.row(i), dlora->a.row(q), in);
    }
  }
}

template <class T>
const LoraLayer<T>* lora_for(const BasicAdapter<T>* adapter, int block, LinearSlot slot) {
  return adapter ? &adapter->layer(block, slot) : nullptr;
}

template <class T>
void check_inputs(const BasicModel<T>& model, const BasicAdapter<T>* adapter, std::span<const int> tokens) {
  const auto& c = model.config;
  if (tokens.empty()) throw Error("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > c.context_len) {
    throw Error("forward: sequence length " + std::to_string(tokens.size()) + " exceeds context_len " +
                std::to_string(c.context_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= c.vocab_size) throw Error("forward: token id " + std::to_string(t) + " out of range");
  }
  if (adapter) {
    const std::size_t expected = static_cast<std::size_t>(c.n_layers) * kLinearsPerBlock;
    if (adapter->layers.size() != expected) throw Error("forward: adapter shape mismatch");
    for (int b = 0; b < c.n_layers; ++b) {
      for (int s = 0; s < kLinearsPerBlock; ++s) {
        const auto& l = adapter->layer(b, static_cast<LinearSlot>(s));
        const auto& w = model.blocks[static_cast<std::size_t>(b)].linear[static_cast<std::size_t>(s)];
        if (l.a.cols != w.cols || l.b.rows != w.rows || l.a.rows != l.b.cols) {
          throw Error("forward: adapter shape mismatch at " + l.name);
        }
      }
    }
  }
}

template <class T>
void run_forward(const BasicModel<T>& model, const BasicAdapter<T>* adapter, std::span<const int> tokens,
                 Tape<T>& tape) {
  check_inputs(model, adapter, tokens);
  const auto& c = model.config;
  const int n = static_cast<int>(tokens.size());
  const int d = c.d_model, heads = c.n_heads, hd = c.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));

  Matrix<T> x(n, d);
  for (int i = 0; i < n; ++i) {
    const T* te = model.tok_emb.row(tokens[static_cast<std::size_t>(i)]);
    const T* pe = model.pos_emb.row(i);
    for (int j = 0; j < d; ++j) x(i, j) = te[j] + pe[j];
  }

  tape.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (int b = 0; b < c.n_layers; ++b) {
    const auto& blk = model.blocks[static_cast<std::size_t>(b)];
    auto& lc = tape.layers[static_cast<std::size_t>(b)];
    lc.x_in = x;
    rmsnorm_forward(x, blk.attn_norm, c.rms_norm_eps, lc.n1, lc.inv1);
    const auto slot = [&](LinearSlot s) { return static_cast<std::size_t>(s); };
    linear_forward(blk.at(LinearSlot::q), lora_for(adapter, b, LinearSlot::q), lc.n1, lc.q, lc.mid[slot(LinearSlot::q)]);
    linear_forward(blk.at(LinearSlot::k), lora_for(adapter, b, LinearSlot::k), lc.n1, lc.k, lc.mid[slot(LinearSlot::k)]);
    linear_forward(blk.at(LinearSlot::v), lora_for(adapter, b, LinearSlot::v), lc.n1, lc.v, lc.mid[slot(LinearSlot::v)]);

    lc.probs = Matrix<T>(heads * n, n);
    lc.att = Matrix<T>(n, d);
    for (int h = 0; h < heads; ++h) {
      const int off = h * hd;
      for (int i = 0; i < n; ++i) {
        T* p = lc.probs.row(h * n + i);
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= i; ++j) {
          p[j] = dot_n(lc.q.row(i) + off, lc.k.row(j) + off, hd) * scale;
          mx = std::max(mx, p[j]);
        }
        T sum{};
        for (int j = 0; j <= i; ++j) {
          p[j] = std::exp(p[j] - mx);
          sum += p[j];
        }
        const T inv = T(1) / sum;
        T* out = lc.att.row(i) + off;
        for (int j = 0; j <= i; ++j) {
          p[j] *= inv;
          axpy_n(p[j], lc.v.row(j) + off, out, hd);
        }
      }
    }
    Matrix<T> o;
    linear_forward(blk.at(LinearSlot::o), lora_for(adapter, b, LinearSlot::o), lc.att, o, lc.mid[slot(LinearSlot::o)]);
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += o.data[i];
    lc.x_mid = x;

    rmsnorm_forward(x, blk.mlp_norm, c.rms_norm_eps, lc.n2, lc.inv2);
    linear_forward(blk.at(LinearSlot::gate), lora_for(adapter, b, LinearSlot::gate), lc.n2, lc.gate,
                   lc.mid[slot(LinearSlot::gate)]);
    linear_forward(blk.at(LinearSlot::up), lora_for(adapter, b, LinearSlot::up), lc.n2, lc.up,
                   lc.mid[slot(LinearSlot::up)]);
    lc.act = Matrix<T>(n, c.mlp_hidden);
    for (std::size_t i = 0; i < lc.act.data.size(); ++i) lc.act.data[i] = silu(lc.gate.data[i]) * lc.up.data[i];
    Matrix<T> m;
    linear_forward(blk.at(LinearSlot::down), lora_for(adapter, b, LinearSlot::down), lc.act, m,
                   lc.mid[slot(LinearSlot::down)]);
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += m.data[i];
  }
  tape.x_final = x;
  rmsnorm_forward(x, model.final_norm, c.rms_norm_eps, tape.nf, tape.inv_f);
  Matrix<T> unused;
  linear_forward<T>(model.head, nullptr, tape.nf, tape.logits, unused);
}

// Row-wise log-softmax NLL in double precision.
template <class T>
double row_nll(const T* logits, int vocab, int target, std::vector<double>* probs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int v = 0; v < vocab; ++v) mx = std::max(mx, static_cast<double>(logits[v]));
  double sum = 0.0;
  for (int v = 0; v < vocab; ++v) sum += std::exp(static_cast<double>(logits[v]) - mx);
  const double lse = mx + std::log(sum);
  if (probs) {
    probs->resize(static_cast<std::size_t>(vocab));
    for (int v = 0; v < vocab; ++v) (*probs)[static_cast<std::size_t>(v)] = std::exp(static_cast<double>(logits[v]) - lse);
  }
  return lse - static_cast<double>(logits[target]);
}

void check_targets(int rows, int vocab, std::span<const int> targets) {
  if (static_cast<int>(targets.size()) != rows) throw Error("lm_loss: targets length does not match logits rows");
  for (int t : targets) {
    if (t != kIgnoreTarget && (t < 0 || t >= vocab)) throw Error("lm_loss: target id out of range");
  }
}

}  // namespace

std::vector<Window> make_windows(std::span<const int> tokens, int context_len) {
  std::vector<Window> out;
  if (tokens.size() < 2) return out;
  const std::size_t predict = tokens.size() - 1;
  for (std::size_t s = 0; s < predict; s += static_cast<std::size_t>(context_len)) {
    const std::size_t len = std::min(static_cast<std::size_t>(context_len), predict - s);
    out.push_back({tokens.subspan(s, len), tokens.subspan(s + 1, len)});
  }
  return out;
}

template <class T>
Matrix<T> forward(const BasicModel<T>& model, const BasicAdapter<T>* adapter, std::span<const int> tokens) {
  Tape<T> tape;
  run_forward(model, adapter, tokens, tape);
  return std::move(tape.logits);
}

template <class T>
double lm_loss(const Matrix<T>& logits, std::span<const int> targets) {
  check_targets(logits.rows, logits.cols, targets);
  double total = 0.0;
  std::size_t count = 0;
  for (int i = 0; i < logits.rows; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t == kIgnoreTarget) continue;
    total += row_nll(logits.row(i), logits.cols, t, nullptr);
    ++count;
  }
  if (count == 0) throw Error("lm_loss: no target positions");
  return total / static_cast<double>(count);
}

template <class T>
NllSum backprop(const BasicModel<T>& model, const BasicAdapter<T>* adapter, std::span<const int> inputs,
                std::span<const int> targets, double scale, BasicModel<T>* base_grad, BasicAdapter<T>* lora_grad) {
  if (lora_grad && !adapter) throw Error("backprop: LoRA gradient requested without an adapter");
  Tape<T> tape;
  run_forward(model, adapter, inputs, tape);
  const auto& c = model.config;
  const int n = static_cast<int>(inputs.size());
  const int d = c.d_model, heads = c.n_heads, hd = c.head_dim(), vocab = c.vocab_size;
  check_targets(n, vocab, targets);
  const T att_scale = T(1) / std::sqrt(static_cast<T>(hd));

  NllSum result;
  Matrix<T> dlogits(n, vocab);
  std::vector<double> probs;
  for (int i = 0; i < n; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t == kIgnoreTarget) continue;
    result.nll += row_nll(tape.logits.row(i), vocab, t, &probs);
    ++result.tokens;
    for (int v = 0; v < vocab; ++v) {
      dlogits(i, v) = static_cast<T>(scale * (probs[static_cast<std::size_t>(v)] - (v == t ? 1.0 : 0.0)));
    }
  }

  Matrix<T> dnf(n, d);
  Matrix<T> none;
  linear_backward<T>(model.head, nullptr, tape.nf, none, dlogits, dnf, base_grad ? &base_grad->head : nullptr,
                     nullptr);
  Matrix<T> dx(n, d);
  rmsnorm_backward(tape.x_final, tape.inv_f, model.final_norm, dnf, dx, base_grad ? &base_grad->final_norm : nullptr);

  for (int b = c.n_layers - 1; b >= 0; --b) {
    const auto& blk = model.blocks[static_cast<std::size_t>(b)];
    const auto& lc = tape.layers[static_cast<std::size_t>(b)];
    auto* gblk = base_grad ? &base_grad->blocks[static_cast<std::size_t>(b)] : nullptr;
    auto dw = [&](LinearSlot s) { return gblk ? &gblk->at(s) : nullptr; };
    auto dl = [&](LinearSlot s) { return lora_grad ? &lora_grad->layer(b, s) : nullptr; };
    auto mid = [&](LinearSlot s) -> const Matrix<T>& { return lc.mid[static_cast<std::size_t>(s)]; };

    // MLP branch: x_out = x_mid + down(silu(gate) * up).
    Matrix<T> dact(n, c.mlp_hidden);
    linear_backward(blk.at(LinearSlot::down), lora_for(adapter, b, LinearSlot::down), lc.act, mid(LinearSlot::down), dx,
                    dact, dw(LinearSlot::down), dl(LinearSlot::down));
    Matrix<T> dgate(n, c.mlp_hidden), dup(n, c.mlp_hidden);
    for (std::size_t i = 0; i < dact.data.size(); ++i) {
      const T g = lc.gate.data[i];
      const T sig = T(1) / (T(1) + std::exp(-g));
      const T sg = g * sig;
      dup.data[i] = dact.data[i] * sg;
      dgate.data[i] = dact.data[i] * lc.up.data[i] * sig * (T(1) + g * (T(1) - sig));
    }
    Matrix<T> dn2(n, d);
    linear_backward(blk.at(LinearSlot::gate), lora_for(adapter, b, LinearSlot::gate), lc.n2, mid(LinearSlot::gate),
                    dgate, dn2, dw(LinearSlot::gate), dl(LinearSlot::gate));
    linear_backward(blk.at(LinearSlot::up), lora_for(adapter, b, LinearSlot::up), lc.n2, mid(LinearSlot::up), dup, dn2,
                    dw(LinearSlot::up), dl(LinearSlot::up));
    Matrix<T> dx_mid = dx;
    rmsnorm_backward(lc.x_mid, lc.inv2, blk.mlp_norm, dn2, dx_mid, gblk ? &gblk->mlp_norm : nullptr);

    // Attention branch: x_mid = x_in + o(attention(q, k, v)).
    Matrix<T> datt(n, d);
    linear_backward(blk.at(LinearSlot::o), lora_for(adapter, b, LinearSlot::o), lc.att, mid(LinearSlot::o), dx_mid,
                    datt, dw(LinearSlot::o), dl(LinearSlot::o));
    Matrix<T> dq(n, d), dk(n, d), dv(n, d);
    std::vector<T> dp(static_cast<std::size_t>(n));
    for (int h = 0; h < heads; ++h) {
      const int off = h * hd;
      for (int i = 0; i < n; ++i) {
        const T* p = lc.probs.row(h * n + i);
        const T* dout = datt.row(i) + off;
        T weighted{};
        for (int j = 0; j <= i; ++j) {
          dp[static_cast<std::size_t>(j)] = dot_n(dout, lc.v.row(j) + off, hd);
          weighted += p[j] * dp[static_cast<std::size_t>(j)];
          axpy_n(p[j], dout, dv.row(j) + off, hd);
        }
        for (int j = 0; j <= i; ++j) {
          const T ds = p[j] * (dp[static_cast<std::size_t>(j)] - weighted) * att_scale;
          axpy_n(ds, lc.k.row(j) + off, dq.row(i) + off, hd);
          axpy_n(ds, lc.q.row(i) + off, dk.row(j) + off, hd);
        }
      }
    }
    Matrix<T> dn1(n, d);
    linear_backward(blk.at(LinearSlot::q), lora_for(adapter, b, LinearSlot::q), lc.n1, mid(LinearSlot::q), dq, dn1,
                    dw(LinearSlot::q), dl(LinearSlot::q));
    linear_backward(blk.at(LinearSlot::k), lora_for(adapter, b, LinearSlot::k), lc.n1, mid(LinearSlot::k), dk, dn1,
                    dw(LinearSlot::k), dl(LinearSlot::k));
    linear_backward(blk.at(LinearSlot::v), lora_for(adapter, b, LinearSlot::v), lc.n1, mid(LinearSlot::v), dv, dn1,
                    dw(LinearSlot::v), dl(LinearSlot::v));
    dx = dx_mid;
    rmsnorm_backward(lc.x_in, lc.inv1, blk.attn_norm, dn1, dx, gblk ? &gblk->attn_norm : nullptr);
  }

  if (base_grad) {
    for (int i = 0; i < n; ++i) {
      axpy_n(T(1), dx.row(i), base_grad->tok_emb.row(inputs[static_cast<std::size_t>(i)]), d);
      axpy_n(T(1), dx.row(i), base_grad->pos_emb.row(i), d);
    }
  }
  return result;
}

template Matrix<float> forward(const BasicModel<float>&, const BasicAdapter<float>*, std::span<const int>);
template Matrix<double> forward(const BasicModel<double>&, const BasicAdapter<double>*, std::span<const int>);
template double lm_loss(const Matrix<float>&, std::span<const int>);
template double lm_loss(const Matrix<double>&, std::span<const int>);
template NllSum backprop(const BasicModel<float>&, const BasicAdapter<float>*, std::span<const int>,
                         std::span<const int>, double, BasicModel<float>*, BasicAdapter<float>*);
template NllSum backprop(const BasicModel<double>&, const BasicAdapter<double>*, std::span<const int>,
                         std::span<const int>, double, BasicModel<double>*, BasicAdapter<double>*);

NllSum sequence_nll(const BaseModel& model, const LoraAdapter* adapter, std::span<const int> tokens) {
  NllSum total;
  for (const auto& w : make_windows(tokens, model.config.context_len)) {
    const Matrix<float> logits = forward(model, adapter, w.inputs);
    for (int i = 0; i < logits.rows; ++i) {
      total.nll += row_nll(logits.row(i), logits.cols, w.targets[static_cast<std::size_t>(i)], nullptr);
      ++total.tokens;
    }
  }
  return total;
}

NllSum corpus_nll(const BaseModel& model, const LoraAdapter* adapter, const std::vector<std::vector<int>>& docs,
                  int threads) {
  std::vector<NllSum> per_doc(docs.size());
  parallel_for(docs.size(), threads, [&](std::size_t i) { per_doc[i] = sequence_nll(model, adapter, docs[i]); });
  NllSum total;
  for (const auto& s : per_doc) total += s;
  return total;
}

double perplexity(const BaseModel& model, const LoraAdapter* adapter, const std::vector<std::vector<int>>& docs,
                  int threads) {
  if (docs.empty()) throw Error("perplexity: no documents");
  const NllSum total = corpus_nll(model, adapter, docs, threads);
  if (total.tokens == 0) throw Error("perplexity: no predicted tokens");
  return std::exp(total.nll / static_cast<double>(total.tokens));
}

NllSum continuation_nll(const BaseModel& model, const LoraAdapter* adapter, std::span<const int> prefix,
                        std::span<const int> continuation) {
  if (prefix.empty()) throw Error("continuation_nll: empty prefix");
  std::vector<int> joint(prefix.begin(), prefix.end());
  joint.insert(joint.end(), continuation.begin(), continuation.end());
  const std::size_t window = static_cast<std::size_t>(model.config.context_len) + 1;
  const std::size_t start = joint.size() > window ? joint.size() - window : 0;
  std::span<const int> seq(joint.data() + start, joint.size() - start);
  const Matrix<float> logits = forward(model, adapter, seq.first(seq.size() - 1));
  // Position of the first continuation token within seq.
  const std::size_t first = prefix.size() > start ? prefix.size() - start : 1;
  NllSum out;
  for (std::size_t pos = first; pos < seq.size(); ++pos) {
    out.nll += row_nll(logits.row(static_cast<int>(pos - 1)), logits.cols, seq[pos], nullptr);
    ++out.tokens;
  }
  return out;
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min) {
  if (total_steps == 0) return lr_max;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step(const std::vector<std::span<float>>& params, const std::vector<std::span<const float>>& grads,
                 double lr) {
  if (params.size() != grads.size()) throw Error("AdamW: params/grads count mismatch");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.size(), 0.0f);
      v_.emplace_back(p.size(), 0.0f);
    }
  }
  if (m_.size() != params.size()) throw Error("AdamW: parameter list changed between steps");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  const auto step_size = static_cast<float>(lr / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  const auto decay = static_cast<float>(1.0 - lr * weight_decay_);
  const auto eps = static_cast<float>(eps_);
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto p = params[t];
    auto g = grads[t];
    if (p.size() != g.size() || p.size() != m_[t].size()) throw Error("AdamW: tensor size changed");
    float* m = m_[t].data();
    float* v = v_[t].data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      const float denom = std::sqrt(v[i] * inv_bc2) + eps;
      p[i] = p[i] * decay - step_size * m[i] / denom;
    }
  }
}

PretrainReport pretrain_base(BaseModel& model, const Corpus& corpus, const PretrainOptions& options) {
  if (model.frozen) throw Error("pretrain_base: model is frozen");
  PretrainReport report;
  if (options.steps <= 0) return report;
  if (options.batch_size < 1) throw Error("pretrain_base: batch_size must be >= 1");

  std::vector<Window> windows;
  for (const auto& doc : corpus.documents) {
    if (doc.token_ids.empty()) throw Error("pretrain_base: corpus is not tokenized");
    auto w = make_windows(doc.token_ids, model.config.context_len);
    windows.insert(windows.end(), w.begin(), w.end());
  }
  if (windows.empty()) throw Error("pretrain_base: no training windows");

  Rng rng(mix_seed(options.seed, 0x707265));
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());
  std::size_t cursor = 0;

  AdamW opt(options.beta1, options.beta2, options.weight_decay);
  const std::size_t batch = static_cast<std::size_t>(options.batch_size);
  std::vector<BaseModel> grads(batch, zeros_like_config<float>(model.config));
  BaseModel total = zeros_like_config<float>(model.config);

  std::vector<std::span<float>> params;
  model.for_each_tensor([&](const std::string&, Matrix<float>& m) { params.emplace_back(m.data); });
  std::vector<std::span<const float>> gspans;
  total.for_each_tensor([&](const std::string&, Matrix<float>& m) { gspans.emplace_back(m.data); });

  for (int step = 0; step < options.steps; ++step) {
    std::vector<std::size_t> picked(batch);
    for (auto& p : picked) {
      if (cursor == order.size()) {
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      p = order[cursor++];
    }
    std::size_t tokens = 0;
    for (auto p : picked) tokens += windows[p].targets.size();
    const double scale = 1.0 / static_cast<double>(tokens);
    std::vector<NllSum> sums(batch);
    parallel_for(batch, options.threads, [&](std::size_t i) {
      grads[i].for_each_tensor([](const std::string&, Matrix<float>& m) { m.zero(); });
      const auto& w = windows[picked[i]];
      sums[i] = backprop<float>(model, nullptr, w.inputs, w.targets, scale, &grads[i], nullptr);
    });
    total.for_each_tensor([](const std::string&, Matrix<float>& m) { m.zero(); });
    NllSum loss;
    for (std::size_t i = 0; i < batch; ++i) {
      loss += sums[i];
      std::vector<Matrix<float>*> src;
      grads[i].for_each_tensor([&](const std::string&, Matrix<float>& m) { src.push_back(&m); });
      std::size_t t = 0;
      total.for_each_tensor([&](const std::string&, Matrix<float>& m) {
        const auto& s = src[t++]->data;
        for (std::size_t j = 0; j < m.data.size(); ++j) m.data[j] += s[j];
      });
    }
    opt.step(params, gspans,
             cosine_lr(static_cast<std::size_t>(step), static_cast<std::size_t>(options.steps), options.lr_max,
                       options.lr_min));
    report.losses.push_back(loss.nll / static_cast<double>(loss.tokens));
  }
  return report;
}

}  // namespace moin
