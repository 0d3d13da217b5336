#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "moin/corpus.hpp"
#include "moin/lora.hpp"
#include "moin/model.hpp"

namespace moin {

// Target value excluded from the loss (right-padding).
inline constexpr int kIgnoreTarget = -1;

// A training/eval window: predict targets[i] from inputs[0..i].
struct Window {
  std::span<const int> inputs;
  std::span<const int> targets;
};

// Splits one token sequence into consecutive windows of at most context_len
// predictions; every token after the first is predicted exactly once.
std::vector<Window> make_windows(std::span<const int> tokens, int context_len);

// Logits (seq_len x vocab). adapter may be null.
template <class T>
Matrix<T> forward(const BasicModel<T>& model, const BasicAdapter<T>* adapter, std::span<const int> tokens);

// Mean cross-entropy over positions whose target is not kIgnoreTarget.
template <class T>
double lm_loss(const Matrix<T>& logits, std::span<const int> targets);

struct NllSum {
  double nll = 0.0;
  std::size_t tokens = 0;

  NllSum& operator+=(const NllSum& o) {
    nll += o.nll;
    tokens += o.tokens;
    return *this;
  }
};

// Runs forward and backward on one window and accumulates the gradient of
// scale * (summed NLL) into base_grad and/or lora_grad (either may be null).
// Returns the unscaled summed NLL.
template <class T>
NllSum backprop(const BasicModel<T>& model, const BasicAdapter<T>* adapter, std::span<const int> inputs,
                std::span<const int> targets, double scale, BasicModel<T>* base_grad, BasicAdapter<T>* lora_grad);

NllSum sequence_nll(const BaseModel& model, const LoraAdapter* adapter, std::span<const int> tokens);

// exp(total NLL / total predicted tokens) over per-document windows.
double perplexity(const BaseModel& model, const LoraAdapter* adapter, const std::vector<std::vector<int>>& docs,
                  int threads = 1);
NllSum corpus_nll(const BaseModel& model, const LoraAdapter* adapter, const std::vector<std::vector<int>>& docs,
                  int threads = 1);

// Sum of log p(continuation | prefix) and the number of continuation tokens
// scored. The joint sequence is left-truncated to fit the context.
NllSum continuation_nll(const BaseModel& model, const LoraAdapter* adapter, std::span<const int> prefix,
                        std::span<const int> continuation);

double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min);

class AdamW {
 public:
  AdamW(double beta1, double beta2, double weight_decay, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {}

  // params[i] and grads[i] must keep their sizes across calls.
  void step(const std::vector<std::span<float>>& params, const std::vector<std::span<const float>>& grads, double lr);
  long steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, weight_decay_, eps_;
  long t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

struct PretrainOptions {
  int steps = 300;
  int batch_size = 16;
  double lr_max = 3e-3;
  double lr_min = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.0;
  uint64_t seed = 0;
  int threads = 1;
};

struct PretrainReport {
  std::vector<double> losses;  // per step
};

PretrainReport pretrain_base(BaseModel& model, const Corpus& corpus, const PretrainOptions& options);

}  // namespace moin
