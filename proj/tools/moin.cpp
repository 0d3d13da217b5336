#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "moin/common.hpp"
#include "moin/corpus.hpp"
#include "moin/embedder.hpp"
#include "moin/eval_harness.hpp"
#include "moin/expert_trainer.hpp"
#include "moin/lm.hpp"
#include "moin/router.hpp"
#include "moin/serving_sim.hpp"
#include "moin/topic_model.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace moin;

namespace {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void log(const std::string& msg) { std::cerr << "[moin] " << msg << '\n'; }

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << text;
  if (!out) throw Error("write failed: " + path);
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(path + ": " + e.what());
  }
}

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

// doc_id -> topic, one JSON object per line.
void save_assignment(const Assignment& a, const std::string& path) {
  std::ostringstream os;
  for (const auto& [doc, topic] : a.topic_of) os << json{{"doc_id", doc}, {"topic", topic}}.dump() << '\n';
  write_file(path, os.str());
}

Assignment load_assignment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  Assignment a;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      a.topic_of[j.at("doc_id").get<uint64_t>()] = j.at("topic").get<int>();
    } catch (const json::exception& e) {
      throw Error(path + ": malformed assignment line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return a;
}

void add_embedder_flags(CLI::App* cmd, EmbedderConfig& cfg) {
  cmd->add_option("--dim", cfg.dimension, "embedding dimension")->capture_default_str();
  cmd->add_option("--ngram", cfg.ngram_size, "byte n-gram length")->capture_default_str();
  cmd->add_option("--buckets", cfg.hash_buckets, "hash buckets")->capture_default_str();
  cmd->add_option("--projection-seed", cfg.projection_seed, "random projection seed")->capture_default_str();
}

// ---------------------------------------------------------------- gen-corpus

struct GenOptions {
  std::string out_dir = "data";
  int topics = 8;
  int docs_per_topic = 300;
  int val_docs_per_topic = 30;
  int vocab = 50;
  int mc_items_per_topic = 25;
  int mc_options = 4;
  uint64_t seed = 1;
};

void run_gen(const GenOptions& o) {
  fs::create_directories(o.out_dir);
  const auto train = make_synthetic_corpus(o.topics, o.docs_per_topic, o.vocab, o.seed);
  const auto val = make_synthetic_split(train, o.val_docs_per_topic, mix_seed(o.seed, 1), 1000000, Split::validation);
  std::vector<int> mc_planted;
  const auto mc = make_synthetic_mc(train, o.mc_items_per_topic, o.mc_options, mix_seed(o.seed, 2), &mc_planted);
  const fs::path dir(o.out_dir);
  save_corpus(train.corpus, (dir / "train.jsonl").string());
  save_corpus(val.corpus, (dir / "val.jsonl").string());
  save_mc_items(mc, (dir / "mc.jsonl").string());
  json planted;
  planted["train"] = train.planted;
  planted["val"] = val.planted;
  planted["mc"] = mc_planted;
  planted["topic_pools"] = train.topic_pools;
  write_file((dir / "planted.json").string(), planted.dump());
  log("wrote " + std::to_string(train.corpus.size()) + " train docs (" + std::to_string(train.corpus.total_tokens()) +
      " tokens), " + std::to_string(val.corpus.size()) + " validation docs, " + std::to_string(mc.size()) +
      " MC items to " + o.out_dir);
}

// -------------------------------------------------------------------- ingest

struct IngestOptions {
  std::string corpus;
  std::string out;
  EmbedderConfig embedder;
  int threads = default_threads();
};

void run_ingest(const IngestOptions& o) {
  o.embedder.validate();
  Stopwatch sw;
  const Corpus c = load_corpus(o.corpus, Split::train);
  std::vector<std::string> texts;
  texts.reserve(c.size());
  for (const auto& d : c.documents) texts.push_back(d.text);
  const auto emb = embed_batch(texts, o.embedder, o.threads);
  ensure_parent(o.out);
  save_embeddings(emb, o.embedder.dimension, o.out);
  std::size_t degenerate = 0;
  for (const auto& e : emb) degenerate += e.degenerate ? 1 : 0;
  std::ostringstream os;
  os << "embedded " << emb.size() << " docs (D=" << o.embedder.dimension << ", " << degenerate << " empty) in "
     << sw.seconds() << "s -> " << o.out;
  log(os.str());
}

// ------------------------------------------------------------------- cluster

struct ClusterOptions {
  std::string corpus;
  std::string embeddings;
  std::string out;
  std::string assignment_out;
  int k = 8;
  uint64_t seed = 0;
  int max_iters = 100;
  double tol = 1e-6;
  int restarts = 10;
  uint64_t min_docs = 1;
  int keywords = 10;
};

void run_cluster(const ClusterOptions& o) {
  Stopwatch sw;
  const Corpus c = load_corpus(o.corpus, Split::train);
  const auto emb = load_embeddings(o.embeddings);
  if (emb.size() != c.size()) throw Error("cluster: embeddings count does not match corpus size");
  auto fit = kmeans_fit(emb, o.k, o.seed, o.max_iters, o.tol, o.restarts);
  const Assignment asg = make_assignment(c, fit.labels);
  TopicModel model = prune(fit.model, o.min_docs);
  model.keywords = ctfidf_keywords(c, asg, model, o.keywords);
  ensure_parent(o.out);
  save_topic_model(model, o.out);
  if (!o.assignment_out.empty()) save_assignment(asg, o.assignment_out);
  std::ostringstream os;
  os << "k-means k=" << o.k << " " << fit.iterations << " iterations" << (fit.converged ? "" : " (not converged)")
     << ", WCSS " << fit.wcss_history.back() << ", retained " << model.retained_count() << "/" << model.k
     << " topics (min_docs=" << o.min_docs << ") in " << sw.seconds() << "s";
  log(os.str());
  std::cout << render_histogram(docs_per_topic(asg, model)) << render_topic_keywords(model, 10);
}

// ------------------------------------------------------------------ pretrain

struct PretrainCliOptions {
  std::string corpus;
  std::string out;
  BaseModelConfig model;
  PretrainOptions train;
};

void run_pretrain(const PretrainCliOptions& o) {
  o.model.validate();
  Stopwatch sw;
  const Corpus c = load_corpus(o.corpus, Split::train);
  BaseModel base = init_base(o.model);
  log("pretraining " + std::to_string(parameter_count(o.model)) + " parameters for " + std::to_string(o.train.steps) +
      " steps on " + std::to_string(c.total_tokens()) + " tokens");
  const auto report = pretrain_base(base, c, o.train);
  base.frozen = true;
  ensure_parent(o.out);
  save_base(base, o.out);
  std::ostringstream os;
  os << "pretrained in " << sw.seconds() << "s";
  if (!report.losses.empty()) os << ", loss " << report.losses.front() << " -> " << report.losses.back();
  os << " -> " << o.out;
  log(os.str());
}

// --------------------------------------------------------------------- train

struct TrainCliOptions {
  std::string base;
  std::string corpus;
  std::string topic_model;
  std::string assignment;
  std::string out_dir;
  TrainRecipe recipe;
  int workers = 1;
  int holdout_period = 10;
  std::optional<int> kill_topic;
  std::size_t kill_at_step = 0;
  std::vector<int> worker_delay_ms;
};

void run_train(const TrainCliOptions& o) {
  Stopwatch sw;
  BaseModel base = load_base(o.base);
  base.frozen = true;
  const Corpus c = load_corpus(o.corpus, Split::train);
  const TopicModel model = load_topic_model(o.topic_model);
  const Assignment asg = load_assignment(o.assignment);
  const auto shards = shard_corpus(c, asg, model);
  std::vector<TopicShard> train_shards;
  json holdout = json::object();
  for (const auto& s : shards) {
    const auto split = split_holdout(s, c, o.holdout_period);
    train_shards.push_back(split.train);
    holdout[std::to_string(s.topic_id)] = split.holdout.doc_ids;
  }
  fs::create_directories(o.out_dir);
  write_file((fs::path(o.out_dir) / "holdout.json").string(), holdout.dump());

  TrainAllOptions ta;
  ta.num_workers = o.workers;
  ta.kill_topic = o.kill_topic;
  ta.kill_at_step = o.kill_at_step;
  ta.worker_step_delay_ms = o.worker_delay_ms;
  log("training " + std::to_string(train_shards.size()) + " experts on " + std::to_string(o.workers) + " worker(s)");
  const auto result = train_all(base, train_shards, c, o.recipe, o.out_dir, ta);

  json summary = json::array();
  std::map<int, const TrainReport*> by_topic;
  for (const auto& r : result.reports) by_topic[r.topic_id] = &r;
  std::size_t ok = 0;
  for (const auto& e : result.manifest) {
    json j{{"topic_id", e.topic_id}, {"status", e.status}};
    if (auto it = by_topic.find(e.topic_id); it != by_topic.end()) {
      const auto& r = *it->second;
      j["steps"] = r.steps;
      j["tokens_seen"] = r.tokens_seen;
      j["first_loss"] = r.first_loss;
      j["final_loss"] = r.final_loss;
      j["wall_seconds"] = r.wall_seconds;
      j["worker_id"] = r.worker_id;
    }
    if (!e.error.empty()) j["error"] = e.error;
    ok += e.status == "ok" ? 1 : 0;
    summary.push_back(j);
  }
  write_file((fs::path(o.out_dir) / "training.json").string(), summary.dump(2));
  std::ostringstream os;
  os << "trained " << ok << "/" << result.manifest.size() << " experts in " << sw.seconds() << "s -> " << o.out_dir;
  log(os.str());
}

// --------------------------------------------------------------------- route

struct RouteCliOptions {
  std::string topic_model;
  std::string queries;
  std::string mode = "fallback";
  std::string out;
  EmbedderConfig embedder;
  int inspect_n = 5;
  int threads = default_threads();
};

void run_route(const RouteCliOptions& o) {
  const TopicModel model = load_topic_model(o.topic_model);
  const auto queries = load_queries(o.queries);
  const RouteMode mode = parse_route_mode(o.mode);
  const auto batch = route_batch(queries, model, o.embedder, mode, o.threads);
  if (!o.out.empty()) {
    ensure_parent(o.out);
    save_decisions(batch.decisions, o.out);
  }
  std::cout << "routed " << batch.stats.queries << " queries (" << to_string(mode) << "): " << batch.stats.fallbacks
            << " to base, " << batch.stats.unique_topics << " distinct experts\n";
  for (const auto& [topic, n] : batch.stats.histogram) std::cout << "  topic " << topic << ": " << n << '\n';
  for (int i = 0; i < std::min<int>(o.inspect_n, static_cast<int>(queries.size())); ++i) {
    const auto idx = static_cast<std::size_t>(i);
    std::cout << inspect(batch.decisions[idx], queries[idx].text, model) << '\n';
  }
}

// ---------------------------------------------------------------------- eval

struct EvalCliOptions {
  std::string base;
  std::string adapters;
  std::string topic_model;
  std::string val;
  std::string mc;
  std::string corpus;      // training corpus, for held-out expert slices
  std::string assignment;  // for the docs-per-topic histogram
  std::string out;
  EmbedderConfig embedder;
  int examples = 6;
  int threads = default_threads();
};

void run_eval(const EvalCliOptions& o) {
  Stopwatch sw;
  BaseModel base = load_base(o.base);
  base.frozen = true;
  const TopicModel topics = load_topic_model(o.topic_model);
  const AdapterRegistry registry = load_registry(o.adapters, base.config);
  const Corpus val = load_corpus(o.val, Split::validation);
  const EvalContext ctx{base, registry, topics, o.embedder, o.threads};
  const std::vector<Variant> variants{std::nullopt, RouteMode::fallback, RouteMode::always_route};

  ReportBundle b;
  b.total_adapters = registry.size();
  for (const auto& v : variants) b.perplexity[variant_name(v)] = eval_perplexity(ctx, val, v).perplexity;

  if (!o.mc.empty()) {
    const auto items = load_mc_items(o.mc);
    McTaskReport t;
    t.name = fs::path(o.mc).stem().string();
    t.items = items.size();
    for (const auto& v : variants) {
      const auto r = eval_mc(ctx, items, v);
      t.accuracy[variant_name(v)] = r.accuracy;
      if (v) t.unique_adapters[variant_name(v)] = r.unique_adapters;
    }
    b.mc_tasks.push_back(t);
  }

  const auto holdout_path = fs::path(o.adapters) / "holdout.json";
  if (!o.corpus.empty() && fs::exists(holdout_path)) {
    const Corpus train = load_corpus(o.corpus, Split::train);
    std::map<uint64_t, const Document*> idx;
    for (const auto& d : train.documents) idx[d.doc_id] = &d;
    std::map<int, std::vector<std::vector<int>>> holdouts;
    const json holdout = read_json(holdout_path.string());
    for (const auto& [topic, ids] : holdout.items()) {
      auto& docs = holdouts[std::stoi(topic)];
      for (const auto& id : ids) {
        auto it = idx.find(id.get<uint64_t>());
        if (it == idx.end()) throw Error("eval: held-out doc " + id.dump() + " not in " + o.corpus);
        docs.push_back(it->second->token_ids);
      }
    }
    b.expert_perplexity = per_expert_perplexity(base, registry, holdouts, o.threads);
  }

  if (!o.assignment.empty()) {
    b.histogram = docs_per_topic(load_assignment(o.assignment), topics);
  } else {
    b.histogram.counts = topics.doc_counts;
    b.histogram.retained = topics.retained;
  }
  b.keywords = topics.keywords;

  for (int i = 0; i < std::min<int>(o.examples, static_cast<int>(val.size())); ++i) {
    const auto& doc = val.documents[static_cast<std::size_t>(i)];
    b.routing_examples.push_back(inspect(route(doc.text, topics, o.embedder, RouteMode::fallback, doc.doc_id), doc.text, topics, 60));
  }
  const auto training_path = fs::path(o.adapters) / "training.json";
  if (fs::exists(training_path)) b.training = read_json(training_path.string());

  ensure_parent(o.out);
  write_file(o.out, b.to_json().dump(2));
  std::ostringstream os;
  os << "evaluated " << registry.size() << " adapters in " << sw.seconds() << "s -> " << o.out;
  log(os.str());
  for (const auto& [name, ppl] : b.perplexity) std::cout << "  perplexity " << name << " " << ppl << '\n';
}

// ----------------------------------------------------------------- serve-sim

struct ServeCliOptions {
  int nodes = 2;
  int cache = 2;
  std::string policy = "hash";
  std::string trace;
  std::string topic_model;
  double cost_hit = 1.0;
  double cost_load = 10.0;
  std::string format = "text";
  std::string out;
};

void run_serve(const ServeCliOptions& o) {
  const auto decisions = load_decisions(o.trace);
  TopicModel model;
  if (!o.topic_model.empty()) {
    model = load_topic_model(o.topic_model);
  } else {
    // No topic model: place every topic seen in the trace, weighted by requests.
    int max_topic = -1;
    for (const auto& d : decisions)
      if (auto e = d.expert()) max_topic = std::max(max_topic, *e);
    model.k = max_topic + 1;
    model.doc_counts.assign(static_cast<std::size_t>(model.k), 0);
    model.retained.assign(static_cast<std::size_t>(model.k), 0);
    for (const auto& d : decisions) {
      if (auto e = d.expert()) {
        ++model.doc_counts[static_cast<std::size_t>(*e)];
        model.retained[static_cast<std::size_t>(*e)] = 1;
      }
    }
  }
  const auto topo = place(model, o.nodes, parse_placement_policy(o.policy), o.cache, o.cost_hit, o.cost_load);
  const auto metrics = simulate(topo, decisions);
  if (o.format != "text" && o.format != "json") throw Error("serve-sim: --format must be text or json");
  if (!o.out.empty()) {
    ensure_parent(o.out);
    write_file(o.out, report(metrics, ReportFormat::json));
  }
  std::cout << report(metrics, o.format == "json" ? ReportFormat::json : ReportFormat::text) << '\n';
}

// -------------------------------------------------------------------- report

struct ReportCliOptions {
  std::string eval;
  std::string serving;
  std::string format = "text";
  std::string out;
};

void run_report(const ReportCliOptions& o) {
  auto bundle = ReportBundle::from_json(read_json(o.eval));
  if (!o.serving.empty()) bundle.serving = read_json(o.serving);
  std::string text;
  if (o.format == "json") {
    text = bundle.to_json().dump(2);
  } else if (o.format == "text") {
    text = bundle.render_text();
  } else {
    throw Error("report: --format must be text or json");
  }
  if (!o.out.empty()) {
    ensure_parent(o.out);
    write_file(o.out, text);
  }
  std::cout << text;
}

// ------------------------------------------------------------------ pipeline

struct PipelineOptions {
  std::string work_dir = "moin_run";
  GenOptions gen;
  EmbedderConfig embedder;
  ClusterOptions cluster;
  PretrainCliOptions pretrain;
  TrainCliOptions train;
  ServeCliOptions serve;
  int threads = default_threads();
};

void run_pipeline(PipelineOptions o) {
  Stopwatch sw;
  const fs::path w(o.work_dir);
  fs::create_directories(w);
  auto at = [&](const std::string& name) { return (w / name).string(); };

  o.gen.out_dir = at("data");
  run_gen(o.gen);

  IngestOptions ingest{at("data/train.jsonl"), at("embeddings.bin"), o.embedder, o.threads};
  run_ingest(ingest);

  o.cluster.corpus = at("data/train.jsonl");
  o.cluster.embeddings = at("embeddings.bin");
  o.cluster.out = at("topics.tpc");
  o.cluster.assignment_out = at("assignment.jsonl");
  run_cluster(o.cluster);

  o.pretrain.corpus = at("data/train.jsonl");
  o.pretrain.out = at("base.bse");
  o.pretrain.train.threads = o.threads;
  run_pretrain(o.pretrain);

  o.train.base = at("base.bse");
  o.train.corpus = at("data/train.jsonl");
  o.train.topic_model = at("topics.tpc");
  o.train.assignment = at("assignment.jsonl");
  o.train.out_dir = at("adapters");
  run_train(o.train);

  RouteCliOptions route_opts;
  route_opts.topic_model = at("topics.tpc");
  route_opts.queries = at("data/val.jsonl");
  route_opts.mode = "fallback";
  route_opts.out = at("decisions.jsonl");
  route_opts.embedder = o.embedder;
  route_opts.threads = o.threads;
  run_route(route_opts);

  EvalCliOptions eval;
  eval.base = at("base.bse");
  eval.adapters = at("adapters");
  eval.topic_model = at("topics.tpc");
  eval.val = at("data/val.jsonl");
  eval.mc = at("data/mc.jsonl");
  eval.corpus = at("data/train.jsonl");
  eval.assignment = at("assignment.jsonl");
  eval.out = at("eval.json");
  eval.embedder = o.embedder;
  eval.threads = o.threads;
  run_eval(eval);

  o.serve.trace = at("decisions.jsonl");
  o.serve.topic_model = at("topics.tpc");
  o.serve.out = at("serving.json");
  run_serve(o.serve);

  ReportCliOptions rep{at("eval.json"), at("serving.json"), "json", at("report.json")};
  run_report(rep);
  rep.format = "text";
  rep.out = at("report.txt");
  run_report(rep);

  std::ostringstream os;
  os << "pipeline finished in " << sw.seconds() << "s; report in " << at("report.txt");
  log(os.str());
}

// ------------------------------------------------------------- flag helpers

void add_gen_flags(CLI::App* cmd, GenOptions& o) {
  cmd->add_option("--topics", o.topics, "planted topics")->capture_default_str();
  cmd->add_option("--docs-per-topic", o.docs_per_topic, "training docs per topic")->capture_default_str();
  cmd->add_option("--val-docs-per-topic", o.val_docs_per_topic, "validation docs per topic")->capture_default_str();
  cmd->add_option("--vocab", o.vocab, "private words per topic")->capture_default_str();
  cmd->add_option("--mc-items-per-topic", o.mc_items_per_topic, "multiple-choice items per topic")->capture_default_str();
  cmd->add_option("--mc-options", o.mc_options, "options per MC item")->capture_default_str();
  cmd->add_option("--corpus-seed", o.seed, "corpus seed")->capture_default_str();
}

void add_cluster_flags(CLI::App* cmd, ClusterOptions& o) {
  cmd->add_option("-k,--k", o.k, "number of clusters")->capture_default_str();
  cmd->add_option("--kmeans-seed", o.seed, "k-means seed")->capture_default_str();
  cmd->add_option("--max-iters", o.max_iters, "Lloyd iterations cap")->capture_default_str();
  cmd->add_option("--tol", o.tol, "centroid movement tolerance")->capture_default_str();
  cmd->add_option("--restarts", o.restarts, "k-means++ restarts (lowest WCSS wins)")->capture_default_str();
  cmd->add_option("--min-docs", o.min_docs, "prune topics with fewer docs")->capture_default_str();
  cmd->add_option("--keywords", o.keywords, "c-TF-IDF keywords per topic")->capture_default_str();
}

void add_model_flags(CLI::App* cmd, PretrainCliOptions& o) {
  cmd->add_option("--d-model", o.model.d_model, "model width")->capture_default_str();
  cmd->add_option("--layers", o.model.n_layers, "transformer blocks")->capture_default_str();
  cmd->add_option("--heads", o.model.n_heads, "attention heads")->capture_default_str();
  cmd->add_option("--context", o.model.context_len, "context length")->capture_default_str();
  cmd->add_option("--mlp-hidden", o.model.mlp_hidden, "MLP hidden size")->capture_default_str();
  cmd->add_option("--init-seed", o.model.init_seed, "weight init seed")->capture_default_str();
  cmd->add_option("--pretrain-steps", o.train.steps, "optimizer steps")->capture_default_str();
  cmd->add_option("--pretrain-batch", o.train.batch_size, "windows per step")->capture_default_str();
  cmd->add_option("--pretrain-lr-max", o.train.lr_max, "peak learning rate")->capture_default_str();
  cmd->add_option("--pretrain-lr-min", o.train.lr_min, "final learning rate")->capture_default_str();
  cmd->add_option("--pretrain-seed", o.train.seed, "window shuffle seed")->capture_default_str();
}

void add_recipe_flags(CLI::App* cmd, TrainCliOptions& o) {
  auto& r = o.recipe;
  cmd->add_option("--beta1", r.beta1, "AdamW beta1")->capture_default_str();
  cmd->add_option("--beta2", r.beta2, "AdamW beta2")->capture_default_str();
  cmd->add_option("--weight-decay", r.weight_decay, "decoupled weight decay")->capture_default_str();
  cmd->add_option("--lr-max", r.lr_max, "peak learning rate")->capture_default_str();
  cmd->add_option("--lr-min", r.lr_min, "final learning rate")->capture_default_str();
  cmd->add_option("--epochs", r.epochs, "passes over each shard")->capture_default_str();
  cmd->add_option("--micro-batch", r.micro_batch, "windows per micro-batch")->capture_default_str();
  cmd->add_option("--grad-accum", r.grad_accum, "micro-batches per step")->capture_default_str();
  cmd->add_option("--grad-clip", r.grad_clip, "global-norm clip, 0 = off")->capture_default_str();
  cmd->add_option("--rank", r.rank, "LoRA rank")->capture_default_str();
  cmd->add_option("--seed", r.seed, "expert seed")->capture_default_str();
  cmd->add_option("--workers", o.workers, "parallel isolated workers")->capture_default_str();
  cmd->add_option("--holdout-period", o.holdout_period, "hold out every Nth doc per shard")->capture_default_str();
  cmd->add_option("--kill-topic", o.kill_topic, "fault injection: kill the worker training this topic");
  cmd->add_option("--kill-at-step", o.kill_at_step, "step at which the worker dies")->capture_default_str();
  cmd->add_option("--worker-delay-ms", o.worker_delay_ms, "per-worker sleep per step");
}

void add_serve_flags(CLI::App* cmd, ServeCliOptions& o) {
  cmd->add_option("--nodes", o.nodes, "serving nodes")->capture_default_str();
  cmd->add_option("--cache", o.cache, "resident adapters per node")->capture_default_str();
  cmd->add_option("--policy", o.policy, "placement: hash|rr|balanced")->capture_default_str();
  cmd->add_option("--cost-hit", o.cost_hit, "cost of a forward pass")->capture_default_str();
  cmd->add_option("--cost-load", o.cost_load, "cost of loading an adapter")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moin: topic experts on a frozen toy language model"};
  app.require_subcommand(1);

  GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-corpus", "write a synthetic planted-topic corpus, validation split and MC task");
  gen_cmd->add_option("--out-dir", gen.out_dir, "output directory")->capture_default_str();
  add_gen_flags(gen_cmd, gen);
  gen_cmd->callback([&] { run_gen(gen); });

  IngestOptions ingest;
  auto* ingest_cmd = app.add_subcommand("ingest", "embed a corpus");
  ingest_cmd->add_option("--corpus", ingest.corpus, "corpus JSONL")->required();
  ingest_cmd->add_option("--out", ingest.out, "embedding file")->required();
  ingest_cmd->add_option("--threads", ingest.threads, "worker threads")->capture_default_str();
  add_embedder_flags(ingest_cmd, ingest.embedder);
  ingest_cmd->callback([&] { run_ingest(ingest); });

  ClusterOptions cluster;
  auto* cluster_cmd = app.add_subcommand("cluster", "k-means topics, pruning and keywords");
  cluster_cmd->add_option("--corpus", cluster.corpus, "corpus JSONL")->required();
  cluster_cmd->add_option("--embeddings", cluster.embeddings, "embedding file")->required();
  cluster_cmd->add_option("--out", cluster.out, "topic model file")->required();
  cluster_cmd->add_option("--assignment", cluster.assignment_out, "doc -> topic JSONL output");
  add_cluster_flags(cluster_cmd, cluster);
  cluster_cmd->callback([&] { run_cluster(cluster); });

  PretrainCliOptions pretrain;
  pretrain.train.steps = 600;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "pretrain and freeze the base model");
  pretrain_cmd->add_option("--corpus", pretrain.corpus, "corpus JSONL")->required();
  pretrain_cmd->add_option("--out", pretrain.out, "base checkpoint")->required();
  pretrain_cmd->add_option("--threads", pretrain.train.threads, "worker threads")->capture_default_str();
  add_model_flags(pretrain_cmd, pretrain);
  pretrain_cmd->callback([&] { run_pretrain(pretrain); });

  TrainCliOptions train;
  train.recipe.micro_batch = 4;
  auto* train_cmd = app.add_subcommand("train", "train one adapter per retained topic");
  train_cmd->add_option("--base", train.base, "base checkpoint")->required();
  train_cmd->add_option("--corpus", train.corpus, "training corpus JSONL")->required();
  train_cmd->add_option("--topic-model", train.topic_model, "topic model file")->required();
  train_cmd->add_option("--assignment", train.assignment, "doc -> topic JSONL")->required();
  train_cmd->add_option("--out-dir", train.out_dir, "adapter directory")->required();
  add_recipe_flags(train_cmd, train);
  train_cmd->callback([&] { run_train(train); });

  RouteCliOptions route_opts;
  auto* route_cmd = app.add_subcommand("route", "route queries to experts");
  route_cmd->add_option("--topic-model", route_opts.topic_model, "topic model file")->required();
  route_cmd->add_option("--mode", route_opts.mode, "fallback|always")->capture_default_str();
  route_cmd->add_option("--queries", route_opts.queries, "queries JSONL (id, text)")->required();
  route_cmd->add_option("--out", route_opts.out, "decision JSONL output (serve-sim trace)");
  route_cmd->add_option("--inspect", route_opts.inspect_n, "print this many example decisions")->capture_default_str();
  route_cmd->add_option("--threads", route_opts.threads, "worker threads")->capture_default_str();
  add_embedder_flags(route_cmd, route_opts.embedder);
  route_cmd->callback([&] { run_route(route_opts); });

  EvalCliOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "perplexity, MC accuracy and per-expert perplexity");
  eval_cmd->add_option("--base", eval.base, "base checkpoint")->required();
  eval_cmd->add_option("--adapters", eval.adapters, "adapter directory")->required();
  eval_cmd->add_option("--topic-model", eval.topic_model, "topic model file")->required();
  eval_cmd->add_option("--val", eval.val, "validation corpus JSONL")->required();
  eval_cmd->add_option("--mc", eval.mc, "multiple-choice JSONL");
  eval_cmd->add_option("--corpus", eval.corpus, "training corpus (for held-out expert slices)");
  eval_cmd->add_option("--assignment", eval.assignment, "doc -> topic JSONL (for the histogram)");
  eval_cmd->add_option("--out", eval.out, "evaluation JSON")->required();
  eval_cmd->add_option("--examples", eval.examples, "routing examples to record")->capture_default_str();
  eval_cmd->add_option("--threads", eval.threads, "worker threads")->capture_default_str();
  add_embedder_flags(eval_cmd, eval.embedder);
  eval_cmd->callback([&] { run_eval(eval); });

  ServeCliOptions serve;
  auto* serve_cmd = app.add_subcommand("serve-sim", "simulate adapter serving over a routing trace");
  serve_cmd->add_option("--trace", serve.trace, "decision JSONL from route")->required();
  serve_cmd->add_option("--topic-model", serve.topic_model, "topic model (placement uses retained topics and sizes)");
  serve_cmd->add_option("--format", serve.format, "text|json")->capture_default_str();
  serve_cmd->add_option("--out", serve.out, "metrics JSON output");
  add_serve_flags(serve_cmd, serve);
  serve_cmd->callback([&] { run_serve(serve); });

  ReportCliOptions rep;
  auto* report_cmd = app.add_subcommand("report", "render the report bundle");
  report_cmd->add_option("--eval", rep.eval, "evaluation JSON")->required();
  report_cmd->add_option("--serving", rep.serving, "serving metrics JSON");
  report_cmd->add_option("--format", rep.format, "text|json")->capture_default_str();
  report_cmd->add_option("--out", rep.out, "output file");
  report_cmd->callback([&] { run_report(rep); });

  PipelineOptions pipe;
  pipe.train.recipe.micro_batch = 4;
  pipe.pretrain.train.steps = 600;
  auto* pipe_cmd = app.add_subcommand("pipeline", "gen-corpus, ingest, cluster, pretrain, train, route, eval, serve-sim, report");
  pipe_cmd->add_option("--work-dir", pipe.work_dir, "output directory")->capture_default_str();
  pipe_cmd->add_option("--threads", pipe.threads, "worker threads")->capture_default_str();
  add_gen_flags(pipe_cmd, pipe.gen);
  add_embedder_flags(pipe_cmd, pipe.embedder);
  add_cluster_flags(pipe_cmd, pipe.cluster);
  add_model_flags(pipe_cmd, pipe.pretrain);
  add_recipe_flags(pipe_cmd, pipe.train);
  add_serve_flags(pipe_cmd, pipe.serve);
  pipe_cmd->callback([&] { run_pipeline(pipe); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
