#include "vitscope/circuits/graph.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace vitscope::circuits {

bool CircuitGraph::contains(int layer, int feature) const {
  if (layer < 0 || layer >= num_layers()) return false;
  for (const auto& n : layers[layer]) {
    if (!n.key.error && n.key.index == feature) return true;
  }
  return false;
}

bool CircuitGraph::has_error(int layer) const {
  if (layer < 0 || layer >= num_layers()) return false;
  for (const auto& n : layers[layer]) {
    if (n.key.error) return true;
  }
  return false;
}

std::vector<int> CircuitGraph::features(int layer) const {
  std::vector<int> out;
  if (layer < 0 || layer >= num_layers()) return out;
  for (const auto& n : layers[layer]) {
    if (!n.key.error) out.push_back(n.key.index);
  }
  return out;
}

std::size_t CircuitGraph::num_nodes() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.size();
  return n;
}

CircuitGraph CircuitGraph::full(const std::vector<int>& layer_sizes, int top, bool errors) {
  CircuitGraph g;
  g.strategy = "full";
  g.top = top;
  g.layers.resize(top + 1);
  for (int l = 0; l <= top; ++l) {
    for (int i = 0; i < layer_sizes.at(l); ++i) g.layers[l].push_back({{l, false, i}, 0.0, 0.0});
    if (errors) g.layers[l].push_back({{l, true, 0}, 0.0, 0.0});
  }
  return g;
}

CircuitGraph CircuitGraph::empty(int top) {
  CircuitGraph g;
  g.strategy = "empty";
  g.top = top;
  g.layers.resize(top + 1);
  return g;
}

CircuitGraph CircuitGraph::complement(const std::vector<int>& layer_sizes, bool errors_exist) const {
  CircuitGraph g = *this;
  g.strategy = strategy + "-complement";
  g.edges.clear();
  for (int l = 0; l < num_layers(); ++l) {
    const auto f = features(l);
    const std::set<int> in(f.begin(), f.end());
    g.layers[l].clear();
    for (int i = 0; i < layer_sizes.at(l); ++i) {
      if (!in.count(i)) g.layers[l].push_back({{l, false, i}, 0.0, 0.0});
    }
    if (errors_exist && !has_error(l)) g.layers[l].push_back({{l, true, 0}, 0.0, 0.0});
  }
  return g;
}

Json to_json(const NodeKey& k) {
  Json j = {{"layer", k.layer}, {"kind", k.error ? "error" : "feature"}};
  if (!k.error) j["index"] = k.index;
  return j;
}

NodeKey node_key_from_json(const Json& j) {
  NodeKey k;
  k.layer = j.at("layer").get<int>();
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "error") {
    k.error = true;
  } else if (kind == "feature") {
    k.index = j.at("index").get<int>();
  } else {
    throw InputError("node kind must be 'feature' or 'error', got '" + kind + "'");
  }
  return k;
}

std::string node_label(const NodeKey& k) {
  return "L" + std::to_string(k.layer) + "#" + (k.error ? std::string("E") : std::to_string(k.index));
}

Json to_json(const CircuitGraph& g) {
  double max_node = 0.0, max_edge = 0.0;
  Json layers = Json::array();
  for (int l = 0; l < g.num_layers(); ++l) {
    Json nodes = Json::array();
    for (const auto& n : g.layers[l]) {
      Json j = to_json(n.key);
      j["activation"] = n.activation;
      j["importance"] = n.importance;
      j["label"] = node_label(n.key);
      if (!n.key.error && g.basis == "sae") {
        j["card"] = "L" + std::to_string(l) + "_F" + std::to_string(n.key.index);
      } else {
        j["card"] = nullptr;
      }
      max_node = std::max(max_node, std::abs(n.importance));
      nodes.push_back(j);
    }
    layers.push_back({{"layer", l}, {"nodes", nodes}});
  }
  Json edges = Json::array();
  for (const auto& e : g.edges) {
    edges.push_back({{"src", to_json(e.src)}, {"dst", to_json(e.dst)}, {"importance", e.importance}});
    max_edge = std::max(max_edge, std::abs(e.importance));
  }
  return {{"format", "vitscope-circuit/1"},
          {"objective", attribution::to_json(g.objective)},
          {"strategy", g.strategy},
          {"basis", g.basis},
          {"mode", backbone::to_string(g.mode)},
          {"k", g.k},
          {"image", g.image},
          {"top", g.top},
          {"layers", layers},
          {"edges", edges},
          {"normalization", {{"max_node_importance", max_node}, {"max_edge_importance", max_edge}}},
          {"warnings", g.warnings}};
}

CircuitGraph circuit_from_json(const Json& j) {
  CircuitGraph g;
  g.objective = attribution::objective_from_json(j.at("objective"));
  g.strategy = j.at("strategy").get<std::string>();
  g.basis = j.value("basis", std::string("sae"));
  g.mode = backbone::grad_mode_from_string(j.at("mode").get<std::string>());
  g.k = j.at("k").get<int>();
  g.image = j.value("image", -1);
  g.top = j.at("top").get<int>();
  g.layers.resize(g.top + 1);
  for (const auto& lj : j.at("layers")) {
    const int l = lj.at("layer").get<int>();
    if (l < 0 || l > g.top) throw InputError("circuit layer " + std::to_string(l) + " outside [0, top]");
    for (const auto& nj : lj.at("nodes")) {
      CircuitNode n;
      n.key = node_key_from_json(nj);
      n.activation = nj.value("activation", 0.0);
      n.importance = nj.value("importance", 0.0);
      g.layers[l].push_back(n);
    }
  }
  for (const auto& ej : j.at("edges")) {
    g.edges.push_back({node_key_from_json(ej.at("src")), node_key_from_json(ej.at("dst")), ej.at("importance").get<double>()});
  }
  g.warnings = j.value("warnings", std::vector<std::string>{});
  return g;
}

void save_circuit(const std::filesystem::path& path, const CircuitGraph& g) { write_json_atomic(path, to_json(g)); }

CircuitGraph load_circuit(const std::filesystem::path& path) { return circuit_from_json(read_json(path)); }

}  // namespace vitscope::circuits
