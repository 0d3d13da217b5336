#include "moin/expert_trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "json.hpp"
#include "moin/common.hpp"
#include "moin/lm.hpp"

namespace moin {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr uint64_t kOrderStream = 0x6f72646572ULL;
constexpr uint64_t kInitStream = 0x696e6974ULL;

class WorkerKilled : public Error {
 public:
  using Error::Error;
};

std::map<uint64_t, const Document*> index_corpus(const Corpus& corpus) {
  std::map<uint64_t, const Document*> idx;
  for (const auto& d : corpus.documents) idx[d.doc_id] = &d;
  return idx;
}

}  // namespace

void TrainRecipe::validate() const {
  if (lr_min > lr_max) throw Error("recipe: lr_min must be <= lr_max");
  if (epochs < 1) throw Error("recipe: epochs must be >= 1");
  if (micro_batch < 1 || grad_accum < 1) throw Error("recipe: batch sizes must be >= 1");
  if (rank < 1) throw Error("recipe: rank must be >= 1");
  if (grad_clip < 0) throw Error("recipe: grad_clip must be >= 0");
}

std::vector<TopicShard> shard_corpus(const Corpus& corpus, const Assignment& assignment, const TopicModel& model) {
  std::vector<TopicShard> by_topic(static_cast<std::size_t>(model.k));
  for (int t = 0; t < model.k; ++t) by_topic[static_cast<std::size_t>(t)].topic_id = t;
  for (const auto& doc : corpus.documents) {
    const int t = assignment.at(doc.doc_id);
    if (t < 0 || t >= model.k) throw Error("shard_corpus: topic index out of range");
    auto& s = by_topic[static_cast<std::size_t>(t)];
    s.doc_ids.push_back(doc.doc_id);
    s.total_tokens += doc.token_ids.size();
  }
  std::vector<TopicShard> out;
  for (int t = 0; t < model.k; ++t) {
    if (model.is_retained(t)) out.push_back(std::move(by_topic[static_cast<std::size_t>(t)]));
  }
  return out;
}

ShardSplit split_holdout(const TopicShard& shard, const Corpus& corpus, int period) {
  if (period < 2) throw Error("split_holdout: period must be >= 2");
  const auto idx = index_corpus(corpus);
  std::vector<uint64_t> ids = shard.doc_ids;
  std::sort(ids.begin(), ids.end());
  ShardSplit out;
  out.train.topic_id = out.holdout.topic_id = shard.topic_id;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto& dst = (i % static_cast<std::size_t>(period) == static_cast<std::size_t>(period - 1)) ? out.holdout : out.train;
    dst.doc_ids.push_back(ids[i]);
    dst.total_tokens += idx.at(ids[i])->token_ids.size();
  }
  return out;
}

ExpertResult train_expert(const BaseModel& base, const TopicShard& shard, const Corpus& corpus,
                          const TrainRecipe& recipe, const StepHook& hook) {
  recipe.validate();
  if (!base.frozen) throw Error("train_expert: base model must be frozen");
  if (shard.doc_ids.empty()) throw Error("train_expert: empty shard for topic " + std::to_string(shard.topic_id));
  const auto started = std::chrono::steady_clock::now();
  const auto topic = static_cast<uint64_t>(shard.topic_id);

  const auto idx = index_corpus(corpus);
  std::vector<uint64_t> order = shard.doc_ids;
  std::sort(order.begin(), order.end());
  Rng rng(mix_seed(recipe.seed, topic ^ kOrderStream));
  rng.shuffle(order.begin(), order.end());

  std::vector<Window> windows;
  for (int e = 0; e < recipe.epochs; ++e) {
    for (uint64_t id : order) {
      auto it = idx.find(id);
      if (it == idx.end()) throw Error("train_expert: doc_id " + std::to_string(id) + " not in corpus");
      if (it->second->token_ids.empty()) throw Error("train_expert: corpus is not tokenized");
      auto w = make_windows(it->second->token_ids, base.config.context_len);
      windows.insert(windows.end(), w.begin(), w.end());
    }
  }
  if (windows.empty()) throw Error("train_expert: shard has no trainable tokens");

  ExpertResult result;
  result.adapter = init_adapter(base, topic, recipe.rank, mix_seed(recipe.seed, topic ^ kInitStream));
  LoraAdapter& adapter = result.adapter;
  LoraAdapter grad = zeros_like(adapter);

  std::vector<std::span<float>> params;
  adapter.for_each_tensor([&](const std::string&, Matrix<float>& m) { params.emplace_back(m.data); });
  std::vector<std::span<const float>> gspans;
  grad.for_each_tensor([&](const std::string&, Matrix<float>& m) { gspans.emplace_back(m.data); });

  AdamW opt(recipe.beta1, recipe.beta2, recipe.weight_decay);
  const std::size_t batch = static_cast<std::size_t>(recipe.effective_batch());
  const std::size_t steps = (windows.size() + batch - 1) / batch;
  TrainReport& report = result.report;
  report.topic_id = shard.topic_id;
  report.steps = steps;

  for (std::size_t step = 0; step < steps; ++step) {
    if (hook) hook(shard.topic_id, step);
    const std::size_t lo = step * batch;
    const std::size_t hi = std::min(windows.size(), lo + batch);
    std::size_t tokens = 0;
    for (std::size_t i = lo; i < hi; ++i) tokens += windows[i].targets.size();
    grad.for_each_tensor([](const std::string&, Matrix<float>& m) { m.zero(); });
    NllSum loss;
    for (std::size_t i = lo; i < hi; ++i) {
      loss += backprop<float>(base, &adapter, windows[i].inputs, windows[i].targets, 1.0 / static_cast<double>(tokens),
                              nullptr, &grad);
    }
    if (recipe.grad_clip > 0) {
      double norm2 = 0.0;
      for (auto g : gspans) {
        for (float v : g) norm2 += static_cast<double>(v) * v;
      }
      const double norm = std::sqrt(norm2);
      if (norm > recipe.grad_clip) {
        const auto s = static_cast<float>(recipe.grad_clip / norm);
        grad.for_each_tensor([&](const std::string&, Matrix<float>& m) {
          for (auto& v : m.data) v *= s;
        });
      }
    }
    opt.step(params, gspans, cosine_lr(step, steps, recipe.lr_max, recipe.lr_min));
    report.tokens_seen += tokens;
    report.losses.push_back(loss.nll / static_cast<double>(loss.tokens));
  }
  report.first_loss = report.losses.front();
  report.final_loss = report.losses.back();
  adapter.meta.tokens_seen = report.tokens_seen;
  adapter.meta.final_loss = static_cast<float>(report.final_loss);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

std::string adapter_filename(int topic_id) { return "adapter_" + std::to_string(topic_id) + ".lra"; }

void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  for (const auto& e : entries) {
    json j{{"topic_id", e.topic_id},
           {"status", e.status},
           {"adapter_path", e.adapter_path},
           {"tokens_seen", e.tokens_seen},
           {"final_loss", e.final_loss}};
    if (!e.error.empty()) j["error"] = e.error;
    out << j.dump() << '\n';
  }
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      ManifestEntry e;
      e.topic_id = j.at("topic_id").get<int>();
      e.status = j.at("status").get<std::string>();
      e.adapter_path = j.at("adapter_path").get<std::string>();
      e.tokens_seen = j.at("tokens_seen").get<uint64_t>();
      e.final_loss = j.at("final_loss").get<double>();
      if (j.contains("error")) e.error = j["error"].get<std::string>();
      out.push_back(std::move(e));
    } catch (const json::exception& e) {
      throw Error(path + ": malformed manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

TrainAllResult train_all(const BaseModel& base, const std::vector<TopicShard>& shards, const Corpus& corpus,
                         const TrainRecipe& recipe, const std::string& out_dir, const TrainAllOptions& options) {
  if (options.num_workers < 1) throw Error("train_all: num_workers must be >= 1");
  if (!base.frozen) throw Error("train_all: base model must be frozen");
  recipe.validate();
  fs::create_directories(out_dir);
  const uint64_t base_sum = checksum(base);

  // Orchestrator state: a work cursor and per-shard status slots. Workers
  // never read each other's slots.
  std::atomic<std::size_t> next{0};
  std::vector<std::optional<ManifestEntry>> entries(shards.size());
  std::vector<std::optional<TrainReport>> reports(shards.size());

  auto worker = [&](int worker_id) {
    const int delay = worker_id < static_cast<int>(options.worker_step_delay_ms.size())
                          ? options.worker_step_delay_ms[static_cast<std::size_t>(worker_id)]
                          : 0;
    StepHook hook = [&](int topic, std::size_t step) {
      if (options.kill_topic && *options.kill_topic == topic && step == options.kill_at_step) {
        throw WorkerKilled("worker " + std::to_string(worker_id) + " killed while training topic " +
                           std::to_string(topic));
      }
      if (delay > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay));
    };
    for (std::size_t i = next++; i < shards.size(); i = next++) {
      const auto& shard = shards[i];
      ManifestEntry e;
      e.topic_id = shard.topic_id;
      e.adapter_path = adapter_filename(shard.topic_id);
      const fs::path final_path = fs::path(out_dir) / e.adapter_path;
      const fs::path tmp_path = final_path.string() + ".tmp";
      try {
        auto result = train_expert(base, shard, corpus, recipe, hook);
        result.report.worker_id = worker_id;
        save_adapter(result.adapter, tmp_path.string());
        fs::rename(tmp_path, final_path);
        e.status = "ok";
        e.tokens_seen = result.report.tokens_seen;
        e.final_loss = result.report.final_loss;
        reports[i] = std::move(result.report);
        entries[i] = std::move(e);
      } catch (const WorkerKilled& err) {
        std::error_code ec;
        fs::remove(tmp_path, ec);
        e.status = "failed";
        e.error = err.what();
        entries[i] = std::move(e);
        return;  // the worker is gone; its remaining work is picked up by others
      } catch (const std::exception& err) {
        std::error_code ec;
        fs::remove(tmp_path, ec);
        e.status = "failed";
        e.error = err.what();
        entries[i] = std::move(e);
      }
    }
  };

  std::vector<std::thread> pool;
  for (int w = 0; w < options.num_workers; ++w) pool.emplace_back(worker, w);
  for (auto& t : pool) t.join();

  if (checksum(base) != base_sum) throw Error("train_all: base model changed during expert training");

  TrainAllResult result;
  for (std::size_t i = 0; i < shards.size(); ++i) {
    if (entries[i]) {
      result.manifest.push_back(std::move(*entries[i]));
    } else {
      ManifestEntry e;
      e.topic_id = shards[i].topic_id;
      e.status = "failed";
      e.adapter_path = adapter_filename(shards[i].topic_id);
      e.error = "not run: no live workers";
      result.manifest.push_back(std::move(e));
    }
    if (reports[i]) result.reports.push_back(std::move(*reports[i]));
  }
  std::sort(result.manifest.begin(), result.manifest.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.topic_id < b.topic_id; });
  std::sort(result.reports.begin(), result.reports.end(),
            [](const TrainReport& a, const TrainReport& b) { return a.topic_id < b.topic_id; });
  write_manifest(result.manifest, (fs::path(out_dir) / "manifest.jsonl").string());
  return result;
}

AdapterRegistry load_registry(const std::string& dir, const BaseModelConfig& config) {
  AdapterRegistry reg;
  const fs::path manifest = fs::path(dir) / "manifest.jsonl";
  if (!fs::exists(manifest)) return reg;
  for (const auto& e : read_manifest(manifest.string())) {
    if (e.status != "ok") continue;
    LoraAdapter a = load_adapter((fs::path(dir) / e.adapter_path).string());
    validate_adapter(a, config);
    if (static_cast<int>(a.topic_id) != e.topic_id) {
      throw Error(e.adapter_path + ": topic id does not match manifest");
    }
    reg.adapters.emplace(e.topic_id, std::move(a));
  }
  return reg;
}

std::vector<std::string> scan_registry(const std::string& dir) {
  std::vector<std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".lra") out.push_back(entry.path().filename().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace moin
