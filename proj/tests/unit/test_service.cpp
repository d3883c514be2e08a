#include "fixtures.hpp"

#include "vitscope/io.hpp"
#include "vitscope/service/config.hpp"
#include "vitscope/service/pipeline.hpp"
#include "vitscope/service/server.hpp"
#include "vitscope/service/workspace.hpp"

#include <doctest.h>
#include <httplib.h>

#include <fstream>
#include <sstream>

using namespace vitscope;
using namespace vitscope::service;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Config smoke_config() { return load_config(std::filesystem::path(VITSCOPE_SOURCE_DIR) / "configs" / "smoke.json"); }

// One small workspace with every artifact the API serves, built once.
struct SmokeWorkspace {
  Workspace ws{fixtures::temp_dir("smoke_ws")};
  Config cfg = smoke_config();
  Json debias;
  std::string circuit;

  SmokeWorkspace() {
    ws.init();
    Pipeline p(ws, cfg);
    p.gen_data();
    p.train_backbone();
    p.train_sae();
    p.feature_stats();
    DiscoverRequest req;
    req.image = 0;
    circuit = p.discover(req).at("id").get<std::string>();
    debias = p.debias();
  }
};

SmokeWorkspace& smoke() {
  static SmokeWorkspace s;
  return s;
}

}  // namespace

TEST_CASE("config defaults and overrides") {
  const auto c = default_config();
  CHECK(c.sae.f == 256);
  CHECK(c.sae.k == 8);
  CHECK(c.sae.fvu_gate == doctest::Approx(0.15));
  CHECK(c.features.mi_threshold == doctest::Approx(0.05));
  c.validate();

  const auto dir = fixtures::temp_dir("config");
  write_json_atomic(dir / "c.json", Json{{"sae", {{"k", 4}}}});
  const auto loaded = load_config(dir / "c.json", {"circuits.k=7", "circuits.mode=vanilla"});
  CHECK(loaded.sae.k == 4);
  CHECK(loaded.sae.f == 256);
  CHECK(loaded.circuits.k == 7);
  CHECK(loaded.circuits.mode == backbone::GradMode::kVanilla);
  CHECK(config_from_json(to_json(loaded)).sae.k == 4);

  CHECK_THROWS_AS(load_config({}, {"sae.k=999"}), ConfigError);
  CHECK_THROWS_AS(load_config({}, {"no-equals-sign"}), ConfigError);
  CHECK_THROWS_AS(load_config(dir / "missing.json"), NotFoundError);
}

TEST_CASE("workspace provenance") {
  const Workspace ws(fixtures::temp_dir("ws"));
  CHECK_FALSE(ws.initialized());
  ws.init();
  CHECK(ws.initialized());
  CHECK_THROWS_WITH_AS(ws.require(ws.backbone(), "h1", "train-backbone"), doctest::Contains("train-backbone"),
                       NotFoundError);
  write_json_atomic(ws.report("x"), Json{{"a", 1}});
  ws.stamp(ws.report("x"), "h1");
  CHECK(ws.fresh(ws.report("x"), "h1"));
  CHECK_NOTHROW(ws.require(ws.report("x"), "h1", "x"));
  CHECK_THROWS_AS(ws.require(ws.report("x"), "h2", "x"), StaleArtifactError);
  CHECK(Workspace::valid_id("e0_logit-3_edge_k10"));
  CHECK_FALSE(Workspace::valid_id("../etc/passwd"));
  CHECK_FALSE(Workspace::valid_id(""));
}

TEST_CASE("artifact hashes follow their upstream inputs") {
  const auto a = default_config();
  auto b = a;
  b.sae.k = 4;
  const Hashes ha(a), hb(b);
  CHECK(ha.data == hb.data);
  CHECK(ha.backbone == hb.backbone);
  CHECK(ha.sae[2] != hb.sae[2]);
  CHECK(ha.stats[2] != hb.stats[2]);
  auto c = a;
  c.data.seed = 99;
  const Hashes hc(c);
  CHECK(hc.backbone != ha.backbone);
  CHECK(hc.sae[0] != ha.sae[0]);
}

TEST_CASE("stale upstream artifacts are refused") {
  auto& s = smoke();
  auto cfg = s.cfg;
  cfg.backbone_train.epochs += 1;
  Pipeline p(s.ws, cfg);
  CHECK_THROWS_AS(p.train_sae({0}), StaleArtifactError);
  const Workspace empty(fixtures::temp_dir("empty_ws"));
  empty.init();
  Pipeline q(empty, s.cfg);
  CHECK_THROWS_AS(q.train_backbone(), NotFoundError);
}

TEST_CASE("generated manifest matches the configured counts") {
  auto& s = smoke();
  const Json m = read_json(s.ws.manifest());
  std::map<std::string, int> counts;
  for (const auto& r : m.at("images")) counts[r.at("split").get<std::string>()]++;
  CHECK(counts["train"] == s.cfg.data.train_count);
  CHECK(counts["eval"] == s.cfg.data.eval_count);
  CHECK(counts["spurious-only"] == s.cfg.data.probe_count);
  CHECK(counts["class-only"] == s.cfg.data.probe_count);
}

TEST_CASE("discovery clamps k above the layer width") {
  auto& s = smoke();
  Pipeline p(s.ws, s.cfg);
  DiscoverRequest req;
  req.image = 1;
  req.k = 100000;
  const Json out = p.discover(req);
  CHECK_FALSE(out.at("warnings").empty());
}

TEST_CASE("HTTP API") {
  auto& s = smoke();
  ApiServer server(s.ws, s.cfg);
  const int port = server.start("127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(300, 0);

  SUBCASE("health and unknown routes") {
    auto r = cli.Get("/api/health");
    REQUIRE(r);
    CHECK(r->status == 200);
    r = cli.Get("/api/circuits/does_not_exist");
    REQUIRE(r);
    CHECK(r->status == 404);
    CHECK(Json::parse(r->body).contains("error"));
    r = cli.Get("/api/reports/nope");
    REQUIRE(r);
    CHECK(r->status == 404);
  }
  SUBCASE("documents are served as stored") {
    auto r = cli.Get("/api/circuits/" + s.circuit);
    REQUIRE(r);
    CHECK(r->status == 200);
    CHECK(r->body == slurp(s.ws.circuit(s.circuit)));
    r = cli.Get("/api/reports/debias");
    REQUIRE(r);
    CHECK(r->body == slurp(s.ws.report("debias")));
    r = cli.Get("/api/stats/1");
    REQUIRE(r);
    CHECK(r->body == slurp(s.ws.stats(1)));
    r = cli.Get("/api/circuits");
    REQUIRE(r);
    CHECK(r->body.find(s.circuit) != std::string::npos);
  }
  SUBCASE("feature cards") {
    auto r = cli.Get("/api/cards/1/0");
    REQUIRE(r);
    CHECK(r->status == 200);
    const Json card = Json::parse(r->body);
    CHECK(card.at("layer") == 1);
    r = cli.Get("/api/cards/1/100000");
    REQUIRE(r);
    CHECK(r->status == 404);
  }
  SUBCASE("annotations") {
    auto r = cli.Post("/api/annotations", R"({"layer": 1, "index": 2, "category": "Bogus", "score": 1, "annotator": "a"})",
                      "application/json");
    REQUIRE(r);
    CHECK(r->status == 400);
    CHECK(r->body.find("category") != std::string::npos);
    r = cli.Post("/api/annotations", "{not json", "application/json");
    REQUIRE(r);
    CHECK(r->status == 400);
    r = cli.Post("/api/annotations", R"({"layer": 1, "index": 2, "category": "Color", "score": 0.5, "annotator": "a"})",
                 "application/json");
    REQUIRE(r);
    CHECK(r->status == 201);

    // A fresh server over the same workspace sees the record.
    server.stop();
    ApiServer again(s.ws, s.cfg);
    const int p2 = again.start("127.0.0.1", 0);
    httplib::Client c2("127.0.0.1", p2);
    r = c2.Get("/api/annotations?layer=1&index=2");
    REQUIRE(r);
    const Json got = Json::parse(r->body);
    REQUIRE(got.size() >= 1);
    CHECK(got.back().at("category") == "Color");
    r = c2.Get("/api/annotations/summary");
    REQUIRE(r);
    CHECK(r->status == 200);
    again.stop();
  }
  SUBCASE("ablations") {
    auto r = cli.Post("/api/ablations", R"({"nodes": [], "policy": "median"})", "application/json");
    REQUIRE(r);
    REQUIRE(r->status == 200);
    const Json empty = Json::parse(r->body);
    const Json& base = s.debias.at("baseline");
    CHECK(empty.at("auc") == base.at("auc"));
    CHECK(empty.at("accuracy") == base.at("accuracy"));
    CHECK(empty.at("spurious_planted_rate") == base.at("spurious_planted_rate"));
    CHECK(r->body == slurp(s.ws.report("ablation")));

    REQUIRE(s.debias.at("chosen").is_string());
    const Json body = {{"nodes", {s.debias.at("chosen")}}, {"policy", "median"}};
    r = cli.Post("/api/ablations", body.dump(), "application/json");
    REQUIRE(r);
    REQUIRE(r->status == 200);
    CHECK(Json::parse(r->body).at("auc").get<double>() > base.at("auc").get<double>());

    r = cli.Post("/api/ablations", R"({"nodes": ["L9#0"]})", "application/json");
    REQUIRE(r);
    CHECK(r->status == 404);
    r = cli.Post("/api/ablations", R"({"nodes": [], "policy": "mean"})", "application/json");
    REQUIRE(r);
    CHECK(r->status == 400);
    CHECK(r->body.find("policy") != std::string::npos);
  }
  server.stop();
}
