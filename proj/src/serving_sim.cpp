#include "moin/serving_sim.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "moin/common.hpp"

namespace moin {

using nlohmann::json;

PlacementPolicy parse_placement_policy(std::string_view s) {
  if (s == "hash") return PlacementPolicy::hash;
  if (s == "rr" || s == "round_robin") return PlacementPolicy::round_robin;
  if (s == "balanced" || s == "size_balanced") return PlacementPolicy::size_balanced;
  throw Error("unknown placement policy '" + std::string(s) + "' (expected hash|rr|balanced)");
}

std::string to_string(PlacementPolicy p) {
  switch (p) {
    case PlacementPolicy::hash:
      return "hash";
    case PlacementPolicy::round_robin:
      return "rr";
    default:
      return "balanced";
  }
}

void Topology::validate() const {
  if (num_nodes < 1) throw Error("topology: num_nodes must be >= 1");
  if (cache_capacity < 1) throw Error("topology: cache capacity must be >= 1");
  if (cost_hit < 0 || cost_load < 0) throw Error("topology: costs must be >= 0");
  if (base_node < 0 || base_node >= num_nodes) throw Error("topology: base node out of range");
  for (const auto& [topic, node] : placement) {
    if (node < 0 || node >= num_nodes) throw Error("topology: topic " + std::to_string(topic) + " placed off-cluster");
  }
}

Topology place(const TopicModel& model, int num_nodes, PlacementPolicy policy, int cache_capacity, double cost_hit,
               double cost_load) {
  if (num_nodes < 1) throw Error("place: N must be >= 1");
  Topology topo;
  topo.num_nodes = num_nodes;
  topo.cache_capacity = cache_capacity;
  topo.cost_hit = cost_hit;
  topo.cost_load = cost_load;
  std::vector<int> topics;
  for (int t = 0; t < model.k; ++t) {
    if (model.is_retained(t)) topics.push_back(t);
  }
  switch (policy) {
    case PlacementPolicy::hash:
      for (int t : topics) topo.placement[t] = t % num_nodes;
      break;
    case PlacementPolicy::round_robin:
      for (std::size_t i = 0; i < topics.size(); ++i) topo.placement[topics[i]] = static_cast<int>(i % static_cast<std::size_t>(num_nodes));
      break;
    case PlacementPolicy::size_balanced: {
      std::stable_sort(topics.begin(), topics.end(), [&](int a, int b) {
        return model.doc_counts[static_cast<std::size_t>(a)] > model.doc_counts[static_cast<std::size_t>(b)];
      });
      std::vector<uint64_t> load(static_cast<std::size_t>(num_nodes), 0);
      for (int t : topics) {
        const auto node = static_cast<std::size_t>(std::min_element(load.begin(), load.end()) - load.begin());
        topo.placement[t] = static_cast<int>(node);
        load[node] += model.doc_counts[static_cast<std::size_t>(t)];
      }
      break;
    }
  }
  topo.validate();
  return topo;
}

ServingMetrics simulate(const Topology& topology, const std::vector<RoutingDecision>& decisions,
                        std::vector<ServeEvent>* events) {
  topology.validate();
  std::vector<NodeState> nodes(static_cast<std::size_t>(topology.num_nodes));
  for (int n = 0; n < topology.num_nodes; ++n) nodes[static_cast<std::size_t>(n)].node_id = n;
  std::vector<std::set<int>> used(nodes.size());
  if (events) events->clear();

  for (std::size_t r = 0; r < decisions.size(); ++r) {
    const auto expert = decisions[r].expert();
    ServeEvent ev;
    ev.request = r;
    if (!expert) {
      auto& node = nodes[static_cast<std::size_t>(topology.base_node)];
      ++node.requests;
      ++node.fallbacks;
      node.busy_time += topology.cost_hit;
      ev.node = topology.base_node;
      ev.kind = EventKind::fallback;
      if (events) events->push_back(ev);
      continue;
    }
    auto placed = topology.placement.find(*expert);
    if (placed == topology.placement.end()) {
      throw Error("simulate: topic " + std::to_string(*expert) + " is not placed on any node");
    }
    auto& node = nodes[static_cast<std::size_t>(placed->second)];
    ++node.requests;
    used[static_cast<std::size_t>(placed->second)].insert(*expert);
    ev.node = placed->second;
    ev.topic = *expert;
    auto it = std::find(node.resident.begin(), node.resident.end(), *expert);
    if (it != node.resident.end()) {
      ++node.hits;
      node.busy_time += topology.cost_hit;
      node.resident.splice(node.resident.begin(), node.resident, it);
      ev.kind = EventKind::hit;
    } else {
      ++node.misses;
      node.busy_time += topology.cost_hit + topology.cost_load;
      node.resident.push_front(*expert);
      ev.kind = EventKind::miss;
      if (static_cast<int>(node.resident.size()) > topology.cache_capacity) {
        ev.evicted = node.resident.back();
        node.resident.pop_back();
        ++node.evictions;
      }
    }
    if (events) events->push_back(ev);
  }

  ServingMetrics m;
  std::set<int> all_used;
  for (std::size_t n = 0; n < nodes.size(); ++n) {
    const auto& s = nodes[n];
    NodeMetrics nm;
    nm.node_id = s.node_id;
    nm.requests = s.requests;
    nm.hits = s.hits;
    nm.misses = s.misses;
    nm.hit_rate = (s.hits + s.misses) ? static_cast<double>(s.hits) / static_cast<double>(s.hits + s.misses) : 0.0;
    nm.total_cost = s.busy_time;
    nm.evictions = s.evictions;
    nm.unique_adapters_used = used[n].size();
    nm.fallback_count = s.fallbacks;
    all_used.insert(used[n].begin(), used[n].end());
    m.requests += nm.requests;
    m.hits += nm.hits;
    m.misses += nm.misses;
    m.evictions += nm.evictions;
    m.fallback_count += nm.fallback_count;
    m.nodes.push_back(nm);
  }
  // Global cost from counters so the accounting identity holds exactly.
  m.total_cost = static_cast<double>(m.hits) * topology.cost_hit +
                 static_cast<double>(m.misses) * (topology.cost_hit + topology.cost_load) +
                 static_cast<double>(m.fallback_count) * topology.cost_hit;
  m.hit_rate = (m.hits + m.misses) ? static_cast<double>(m.hits) / static_cast<double>(m.hits + m.misses) : 0.0;
  m.unique_adapters_used = all_used.size();
  return m;
}

namespace {

template <class M>
json metrics_fields(const M& m) {
  return json{{"requests", m.requests},
              {"hits", m.hits},
              {"misses", m.misses},
              {"hit_rate", m.hit_rate},
              {"total_cost", m.total_cost},
              {"evictions", m.evictions},
              {"unique_adapters_used", m.unique_adapters_used},
              {"fallback_count", m.fallback_count}};
}

template <class M>
void read_fields(const json& j, M& m) {
  m.requests = j.at("requests").get<uint64_t>();
  m.hits = j.at("hits").get<uint64_t>();
  m.misses = j.at("misses").get<uint64_t>();
  m.hit_rate = j.at("hit_rate").get<double>();
  m.total_cost = j.at("total_cost").get<double>();
  m.evictions = j.at("evictions").get<uint64_t>();
  m.unique_adapters_used = j.at("unique_adapters_used").get<uint64_t>();
  m.fallback_count = j.at("fallback_count").get<uint64_t>();
}

}  // namespace

std::string report(const ServingMetrics& metrics, ReportFormat format) {
  if (format == ReportFormat::json) {
    json j = metrics_fields(metrics);
    j["nodes"] = json::array();
    for (const auto& n : metrics.nodes) {
      json nj = metrics_fields(n);
      nj["node_id"] = n.node_id;
      j["nodes"].push_back(nj);
    }
    return j.dump(2);
  }
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "serving summary\n";
  os << "  requests             " << metrics.requests << '\n';
  os << "  hits / misses        " << metrics.hits << " / " << metrics.misses << '\n';
  os << "  hit_rate             " << metrics.hit_rate << '\n';
  os << "  evictions            " << metrics.evictions << '\n';
  os << "  fallback_count       " << metrics.fallback_count << '\n';
  os << "  unique_adapters_used " << metrics.unique_adapters_used << '\n';
  os << "  total_cost           " << metrics.total_cost << '\n';
  os << "  node  requests    hits  misses  hit_rate  evictions  adapters  fallbacks       cost\n";
  for (const auto& n : metrics.nodes) {
    os << "  " << std::setw(4) << n.node_id << std::setw(10) << n.requests << std::setw(8) << n.hits << std::setw(8)
       << n.misses << std::setw(10) << n.hit_rate << std::setw(11) << n.evictions << std::setw(10)
       << n.unique_adapters_used << std::setw(11) << n.fallback_count << std::setw(11) << n.total_cost << '\n';
  }
  return os.str();
}

ServingMetrics parse_metrics_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    ServingMetrics m;
    read_fields(j, m);
    for (const auto& nj : j.at("nodes")) {
      NodeMetrics n;
      read_fields(nj, n);
      n.node_id = nj.at("node_id").get<int>();
      m.nodes.push_back(n);
    }
    return m;
  } catch (const json::exception& e) {
    throw Error(std::string("parse_metrics_json: ") + e.what());
  }
}

}  // namespace moin
