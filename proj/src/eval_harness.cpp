#include "moin/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "moin/common.hpp"

namespace moin {

using nlohmann::json;

std::string variant_name(const Variant& v) { return v ? to_string(*v) : "base"; }

const LoraAdapter* adapter_for(const RoutingDecision& decision, const AdapterRegistry& registry) {
  const auto expert = decision.expert();
  return expert ? registry.find(*expert) : nullptr;
}

PerplexityResult eval_perplexity(const EvalContext& ctx, const Corpus& val_corpus, const Variant& variant) {
  if (val_corpus.documents.empty()) throw Error("eval_perplexity: empty validation corpus");
  const auto& docs = val_corpus.documents;
  PerplexityResult out;
  if (variant) {
    out.decisions.resize(docs.size());
    parallel_for(docs.size(), ctx.threads, [&](std::size_t i) {
      out.decisions[i] = route(docs[i].text, ctx.topics, ctx.embedder, *variant, docs[i].doc_id);
    });
  }
  std::vector<NllSum> per_doc(docs.size());
  parallel_for(docs.size(), ctx.threads, [&](std::size_t i) {
    const LoraAdapter* adapter = variant ? adapter_for(out.decisions[i], ctx.registry) : nullptr;
    const auto tokens = docs[i].token_ids.empty() ? tokenize(docs[i].text) : docs[i].token_ids;
    per_doc[i] = sequence_nll(ctx.base, adapter, tokens);
  });
  for (const auto& s : per_doc) out.total += s;
  if (out.total.tokens == 0) throw Error("eval_perplexity: no predicted tokens");
  out.perplexity = std::exp(out.total.nll / static_cast<double>(out.total.tokens));
  return out;
}

double option_score(const BaseModel& base, const LoraAdapter* adapter, const std::string& prompt,
                    const std::string& option) {
  std::vector<int> prefix = tokenize(prompt);
  prefix.pop_back();  // EOS
  std::vector<int> cont = tokenize(option);
  cont.erase(cont.begin());
  cont.pop_back();
  const NllSum s = continuation_nll(base, adapter, prefix, cont);
  if (s.tokens == 0) throw Error("option_score: option has no scorable tokens");
  return -s.nll / static_cast<double>(s.tokens);
}

McResult eval_mc(const EvalContext& ctx, const std::vector<McItem>& items, const Variant& variant) {
  McResult out;
  out.predictions.resize(items.size());
  out.scores.resize(items.size());
  if (variant) out.decisions.resize(items.size());
  parallel_for(items.size(), ctx.threads, [&](std::size_t i) {
    const auto& item = items[i];
    const LoraAdapter* adapter = nullptr;
    if (variant) {
      out.decisions[i] = route(item.prompt, ctx.topics, ctx.embedder, *variant, item.item_id);
      adapter = adapter_for(out.decisions[i], ctx.registry);
    }
    int best = 0;
    for (std::size_t o = 0; o < item.options.size(); ++o) {
      const double s = option_score(ctx.base, adapter, item.prompt, item.options[o]);
      out.scores[i].push_back(s);
      if (s > out.scores[i][static_cast<std::size_t>(best)]) best = static_cast<int>(o);
    }
    out.predictions[i] = best;
  });
  std::size_t correct = 0;
  for (std::size_t i = 0; i < items.size(); ++i) correct += out.predictions[i] == items[i].gold_index ? 1 : 0;
  out.accuracy = items.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(items.size());
  std::set<int> used;
  for (const auto& d : out.decisions) {
    if (auto e = d.expert(); e && ctx.registry.find(*e)) used.insert(*e);
  }
  out.unique_adapters = used.size();
  return out;
}

std::vector<ExpertPerplexity> per_expert_perplexity(const BaseModel& base, const AdapterRegistry& registry,
                                                    const std::map<int, std::vector<std::vector<int>>>& holdouts,
                                                    int threads) {
  std::vector<ExpertPerplexity> out;
  for (const auto& [topic, adapter] : registry.adapters) {
    auto it = holdouts.find(topic);
    if (it == holdouts.end() || it->second.empty()) {
      std::cerr << "warning: expert " << topic << " has no held-out documents; skipped\n";
      continue;
    }
    out.push_back({topic, perplexity(base, &adapter, it->second, threads)});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const ExpertPerplexity& a, const ExpertPerplexity& b) { return a.perplexity < b.perplexity; });
  return out;
}

std::vector<std::vector<double>> cross_perplexity(const BaseModel& base, const AdapterRegistry& registry,
                                                  const std::vector<int>& topics,
                                                  const std::map<int, std::vector<std::vector<int>>>& holdouts,
                                                  int threads) {
  const std::size_t n = topics.size();
  for (int t : topics) {
    if (!registry.find(t)) throw Error("cross_perplexity: no adapter for topic " + std::to_string(t));
    if (!holdouts.count(t)) throw Error("cross_perplexity: no held-out documents for topic " + std::to_string(t));
  }
  std::vector<std::vector<double>> m(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    const LoraAdapter* adapter = registry.find(topics[i]);
    for (std::size_t j = 0; j < n; ++j) m[i][j] = perplexity(base, adapter, holdouts.at(topics[j]), threads);
  }
  return m;
}

uint64_t TopicHistogram::total() const { return std::accumulate(counts.begin(), counts.end(), uint64_t{0}); }

TopicHistogram docs_per_topic(const Assignment& assignment, const TopicModel& model) {
  TopicHistogram h;
  h.counts.assign(static_cast<std::size_t>(model.k), 0);
  h.retained = model.retained;
  for (const auto& [doc, topic] : assignment.topic_of) {
    if (topic < 0 || topic >= model.k) throw Error("docs_per_topic: topic index out of range");
    ++h.counts[static_cast<std::size_t>(topic)];
  }
  return h;
}

std::string render_histogram(const TopicHistogram& hist, int width) {
  std::ostringstream os;
  const uint64_t mx = hist.counts.empty() ? 0 : *std::max_element(hist.counts.begin(), hist.counts.end());
  for (std::size_t t = 0; t < hist.counts.size(); ++t) {
    const auto bar = mx ? static_cast<int>(std::llround(static_cast<double>(hist.counts[t]) * width / static_cast<double>(mx))) : 0;
    os << "  topic " << std::setw(4) << t << " " << std::setw(7) << hist.counts[t] << " |" << std::string(static_cast<std::size_t>(bar), '#');
    if (t < hist.retained.size() && !hist.retained[t]) os << " (pruned)";
    os << '\n';
  }
  const auto kept = std::count_if(hist.retained.begin(), hist.retained.end(), [](uint8_t r) { return r != 0; });
  os << "  total " << hist.total() << " documents, " << kept << "/" << hist.counts.size() << " topics retained\n";
  return os.str();
}

json to_json(const TopicHistogram& hist) {
  json j = json::array();
  for (std::size_t t = 0; t < hist.counts.size(); ++t) {
    j.push_back({{"topic_id", t}, {"docs", hist.counts[t]}, {"retained", t < hist.retained.size() && hist.retained[t] != 0}});
  }
  return j;
}

std::string render_topic_keywords(const TopicModel& model, std::size_t n_topics) {
  std::vector<int> order(static_cast<std::size_t>(model.k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return model.doc_counts[static_cast<std::size_t>(a)] > model.doc_counts[static_cast<std::size_t>(b)];
  });
  std::ostringstream os;
  os << "  topic   docs  keywords\n";
  for (std::size_t i = 0; i < std::min(n_topics, order.size()); ++i) {
    const int t = order[i];
    os << "  " << std::setw(5) << t << std::setw(7) << model.doc_counts[static_cast<std::size_t>(t)] << "  ";
    if (static_cast<std::size_t>(t) < model.keywords.size()) {
      const auto& kw = model.keywords[static_cast<std::size_t>(t)];
      for (std::size_t k = 0; k < kw.size(); ++k) os << (k ? ", " : "") << kw[k];
    }
    os << '\n';
  }
  return os.str();
}

json ReportBundle::to_json() const {
  json j;
  j["perplexity"] = perplexity;
  json tasks = json::array();
  json unique = json::array();
  for (const auto& t : mc_tasks) {
    tasks.push_back({{"task", t.name}, {"items", t.items}, {"accuracy", t.accuracy}});
    unique.push_back({{"task", t.name}, {"unique_adapters", t.unique_adapters}, {"total_adapters", total_adapters}});
  }
  j["mc_accuracy"] = tasks;
  j["unique_adapters"] = unique;
  json experts = json::array();
  for (const auto& e : expert_perplexity) experts.push_back({{"topic_id", e.topic_id}, {"perplexity", e.perplexity}});
  j["expert_perplexity"] = experts;
  j["docs_per_topic"] = moin::to_json(histogram);
  json kw = json::array();
  for (std::size_t t = 0; t < keywords.size(); ++t) kw.push_back({{"topic_id", t}, {"keywords", keywords[t]}});
  j["topic_keywords"] = kw;
  j["routing_examples"] = routing_examples;
  j["training"] = training;
  j["serving"] = serving;
  return j;
}

ReportBundle ReportBundle::from_json(const json& j) {
  ReportBundle b;
  b.perplexity = j.at("perplexity").get<std::map<std::string, double>>();
  const auto& unique = j.at("unique_adapters");
  for (std::size_t i = 0; i < j.at("mc_accuracy").size(); ++i) {
    const auto& t = j["mc_accuracy"][i];
    McTaskReport r;
    r.name = t.at("task").get<std::string>();
    r.items = t.at("items").get<std::size_t>();
    r.accuracy = t.at("accuracy").get<std::map<std::string, double>>();
    if (i < unique.size()) {
      r.unique_adapters = unique[i].at("unique_adapters").get<std::map<std::string, std::size_t>>();
      b.total_adapters = unique[i].at("total_adapters").get<std::size_t>();
    }
    b.mc_tasks.push_back(std::move(r));
  }
  for (const auto& e : j.at("expert_perplexity")) {
    b.expert_perplexity.push_back({e.at("topic_id").get<int>(), e.at("perplexity").get<double>()});
  }
  for (const auto& h : j.at("docs_per_topic")) {
    b.histogram.counts.push_back(h.at("docs").get<uint64_t>());
    b.histogram.retained.push_back(h.at("retained").get<bool>() ? 1 : 0);
  }
  for (const auto& k : j.at("topic_keywords")) b.keywords.push_back(k.at("keywords").get<std::vector<std::string>>());
  b.routing_examples = j.at("routing_examples").get<std::vector<std::string>>();
  b.training = j.value("training", json());
  b.serving = j.value("serving", json());
  return b;
}

std::string ReportBundle::render_text() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "== Validation perplexity (lower is better)\n";
  for (const auto& [variant, ppl] : perplexity) os << "  " << std::left << std::setw(10) << variant << std::right << ppl << '\n';

  os << "\n== Zero-shot multiple-choice accuracy\n";
  for (const auto& t : mc_tasks) {
    os << "  " << t.name << " (" << t.items << " items):";
    for (const auto& [variant, acc] : t.accuracy) os << "  " << variant << "=" << acc;
    os << '\n';
  }

  os << "\n== Unique adapters used per task (of " << total_adapters << " trained)\n";
  for (const auto& t : mc_tasks) {
    os << "  " << t.name << ":";
    for (const auto& [variant, n] : t.unique_adapters) os << "  " << variant << "=" << n;
    os << '\n';
  }

  os << "\n== Per-expert held-out perplexity, sorted\n";
  double mx = 0.0;
  for (const auto& e : expert_perplexity) mx = std::max(mx, e.perplexity);
  for (std::size_t i = 0; i < expert_perplexity.size(); ++i) {
    const auto& e = expert_perplexity[i];
    const int bar = mx > 0 ? static_cast<int>(std::lround(40.0 * e.perplexity / mx)) : 0;
    os << "  #" << std::setw(3) << i << " topic " << std::setw(4) << e.topic_id << "  " << std::setw(9) << e.perplexity
       << " |" << std::string(static_cast<std::size_t>(bar), '#') << '\n';
  }

  os << "\n== Documents per topic\n" << render_histogram(histogram);

  os << "\n== Topic keywords (c-TF-IDF), largest topics first\n";
  std::vector<std::size_t> order(keywords.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ca = a < histogram.counts.size() ? histogram.counts[a] : 0;
    const auto cb = b < histogram.counts.size() ? histogram.counts[b] : 0;
    return ca > cb;
  });
  for (std::size_t i = 0; i < std::min<std::size_t>(10, order.size()); ++i) {
    const auto t = order[i];
    os << "  topic " << std::setw(4) << t << ": ";
    for (std::size_t k = 0; k < keywords[t].size(); ++k) os << (k ? ", " : "") << keywords[t][k];
    os << '\n';
  }

  os << "\n== Query routing examples\n";
  for (const auto& r : routing_examples) os << "  " << r << '\n';

  if (!serving.is_null()) os << "\n== Serving simulation\n" << serving.dump(2) << '\n';
  return os.str();
}

}  // namespace moin
