#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moin/corpus.hpp"
#include "moin/lora.hpp"
#include "moin/model.hpp"
#include "moin/topic_model.hpp"

namespace moin {

struct TrainRecipe {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.0;
  double lr_max = 4e-4;
  double lr_min = 4e-5;
  int epochs = 1;
  // Effective batch = micro_batch * grad_accum windows per optimizer step.
  int micro_batch = 16;
  int grad_accum = 1;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  int rank = 8;
  uint64_t seed = 0;

  int effective_batch() const { return micro_batch * grad_accum; }
  void validate() const;
};

struct TopicShard {
  int topic_id = 0;
  std::vector<uint64_t> doc_ids;
  uint64_t total_tokens = 0;
};

struct TrainReport {
  int topic_id = 0;
  std::size_t steps = 0;
  uint64_t tokens_seen = 0;
  std::vector<double> losses;  // per optimizer step
  double first_loss = 0.0;
  double final_loss = 0.0;
  double wall_seconds = 0.0;
  int worker_id = -1;
};

struct ExpertResult {
  LoraAdapter adapter;
  TrainReport report;
};

// One shard per retained topic, in topic order; pruned topics' documents are
// dropped.
std::vector<TopicShard> shard_corpus(const Corpus& corpus, const Assignment& assignment, const TopicModel& model);

// Holds out every document whose position in the (doc_id-sorted) shard is
// congruent to `period - 1` modulo `period`; period 10 holds out 10%.
struct ShardSplit {
  TopicShard train;
  TopicShard holdout;
};
ShardSplit split_holdout(const TopicShard& shard, const Corpus& corpus, int period = 10);

// Called before every optimizer step; may throw to abort the run.
using StepHook = std::function<void(int topic_id, std::size_t step)>;

// One epoch over the shard in a seed-shuffled document order with a cosine
// schedule over the exact step count. The base must be frozen.
ExpertResult train_expert(const BaseModel& base, const TopicShard& shard, const Corpus& corpus,
                          const TrainRecipe& recipe, const StepHook& hook = {});

struct ManifestEntry {
  int topic_id = 0;
  std::string status;  // "ok" | "failed"
  std::string adapter_path;
  uint64_t tokens_seen = 0;
  double final_loss = 0.0;
  std::string error;
};

struct TrainAllOptions {
  int num_workers = 1;
  // Fault injection: the worker training this topic dies at this step.
  std::optional<int> kill_topic;
  std::size_t kill_at_step = 0;
  // Simulated heterogeneous hardware: per-worker sleep per step (ms).
  std::vector<int> worker_step_delay_ms;
};

struct TrainAllResult {
  std::vector<ManifestEntry> manifest;  // sorted by topic_id
  std::vector<TrainReport> reports;     // successful runs, sorted by topic_id
};

// Trains every shard on a pool of isolated workers. Each worker reads the
// frozen base and its shard and writes only its own adapter file. Writes
// <out_dir>/manifest.jsonl.
TrainAllResult train_all(const BaseModel& base, const std::vector<TopicShard>& shards, const Corpus& corpus,
                         const TrainRecipe& recipe, const std::string& out_dir, const TrainAllOptions& options);

std::string adapter_filename(int topic_id);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path);
std::vector<ManifestEntry> read_manifest(const std::string& path);

// Adapters on disk plus their manifest.
struct AdapterRegistry {
  std::map<int, LoraAdapter> adapters;

  const LoraAdapter* find(int topic_id) const {
    auto it = adapters.find(topic_id);
    return it == adapters.end() ? nullptr : &it->second;
  }
  bool empty() const { return adapters.empty(); }
  std::size_t size() const { return adapters.size(); }
};

// Loads every "ok" manifest entry; an absent manifest yields an empty registry.
AdapterRegistry load_registry(const std::string& dir, const BaseModelConfig& config);
// Directory scan for adapter files (independent of the manifest).
std::vector<std::string> scan_registry(const std::string& dir);

}  // namespace moin
