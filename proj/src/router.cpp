#include "moin/router.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "moin/common.hpp"

namespace moin {

using nlohmann::json;

std::string to_string(RouteMode mode) { return mode == RouteMode::fallback ? "fallback" : "always"; }

RouteMode parse_route_mode(std::string_view s) {
  if (s == "fallback") return RouteMode::fallback;
  if (s == "always" || s == "always_route") return RouteMode::always_route;
  throw Error("unknown routing mode '" + std::string(s) + "' (expected fallback|always)");
}

RoutingDecision route_embedding(const EmbeddingVector& query, const TopicModel& model, RouteMode mode,
                                uint64_t query_id) {
  if (model.retained_count() == 0) throw Error("route: no retained topics");
  if (static_cast<int>(query.dim()) != model.dim) throw Error("route: query dimension does not match topic model");
  int best_all = -1, best_kept = -1;
  double d_all = std::numeric_limits<double>::infinity();
  double d_kept = d_all;
  for (int t = 0; t < model.k; ++t) {
    const double d = squared_distance(query.values, model.centroid(t));
    if (d < d_all) {
      d_all = d;
      best_all = t;
    }
    if (model.is_retained(t) && d < d_kept) {
      d_kept = d;
      best_kept = t;
    }
  }
  RoutingDecision out;
  out.query_id = query_id;
  out.mode = mode;
  if (query.degenerate) {
    out.topic_id = best_all;
    out.similarity = -std::sqrt(d_all);
    out.fallback = true;
  } else if (mode == RouteMode::fallback) {
    out.topic_id = best_all;
    out.similarity = -std::sqrt(d_all);
    out.fallback = !model.is_retained(best_all);
  } else {
    out.topic_id = best_kept;
    out.similarity = -std::sqrt(d_kept);
    out.fallback = false;
  }
  return out;
}

RoutingDecision route(std::string_view query_text, const TopicModel& model, const EmbedderConfig& config,
                      RouteMode mode, uint64_t query_id) {
  if (model.retained_count() == 0) throw Error("route: no retained topics");
  return route_embedding(embed(query_text, config), model, mode, query_id);
}

RoutingStats routing_stats(const std::vector<RoutingDecision>& decisions) {
  RoutingStats s;
  s.queries = decisions.size();
  for (const auto& d : decisions) {
    if (auto e = d.expert()) {
      ++s.histogram[*e];
    } else {
      ++s.fallbacks;
    }
  }
  s.unique_topics = s.histogram.size();
  return s;
}

RoutedBatch route_batch(const std::vector<Query>& queries, const TopicModel& model, const EmbedderConfig& config,
                        RouteMode mode, int threads) {
  RoutedBatch out;
  out.decisions.resize(queries.size());
  parallel_for(queries.size(), threads, [&](std::size_t i) {
    out.decisions[i] = route(queries[i].text, model, config, mode, queries[i].id);
  });
  out.stats = routing_stats(out.decisions);
  return out;
}

std::string inspect(const RoutingDecision& decision, std::string_view query_text, const TopicModel& model,
                    std::size_t excerpt_chars) {
  std::ostringstream os;
  std::string excerpt(query_text.substr(0, excerpt_chars));
  for (char& c : excerpt) {
    if (c == '\n' || c == '\r' || c == '\t') c = ' ';
  }
  if (query_text.size() > excerpt_chars) excerpt += "...";
  os << "query " << decision.query_id << ": \"" << excerpt << "\"\n  -> ";
  if (decision.fallback) {
    os << "BASE (no expert)";
    if (decision.topic_id) os << ", nearest topic " << *decision.topic_id << " is pruned or query is empty";
  } else {
    os << "topic " << *decision.topic_id;
  }
  os << " | similarity " << std::fixed << std::setprecision(4) << decision.similarity;
  if (decision.topic_id && !model.keywords.empty()) {
    const auto& kw = model.keywords[static_cast<std::size_t>(*decision.topic_id)];
    os << " | keywords: ";
    for (std::size_t i = 0; i < kw.size(); ++i) os << (i ? ", " : "") << kw[i];
  }
  return os.str();
}

void save_decisions(const std::vector<RoutingDecision>& decisions, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  for (const auto& d : decisions) {
    json j{{"query_id", d.query_id},
           {"topic_id", d.topic_id ? json(*d.topic_id) : json(nullptr)},
           {"similarity", d.similarity},
           {"fallback", d.fallback},
           {"mode", to_string(d.mode)}};
    out << j.dump() << '\n';
  }
}

std::vector<RoutingDecision> load_decisions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::vector<RoutingDecision> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      RoutingDecision d;
      d.query_id = j.at("query_id").get<uint64_t>();
      if (!j.at("topic_id").is_null()) d.topic_id = j["topic_id"].get<int>();
      d.similarity = j.at("similarity").get<double>();
      d.fallback = j.at("fallback").get<bool>();
      d.mode = parse_route_mode(j.at("mode").get<std::string>());
      out.push_back(d);
    } catch (const json::exception& e) {
      throw Error(path + ": malformed decision line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<Query> load_queries(const std::string& path) {
  std::vector<Query> out;
  for (auto& d : load_corpus(path, Split::validation).documents) out.push_back({d.doc_id, std::move(d.text)});
  return out;
}

}  // namespace moin
