#include "vitscope/service/server.hpp"

#include "vitscope/features/annotations.hpp"
#include "vitscope/features/cards.hpp"

#include <httplib.h>

#include <mutex>
#include <thread>

namespace vitscope::service {

namespace fs = std::filesystem;

struct ApiServer::Impl {
  Impl(Workspace w, Config c, Progress p)
      : ws(w),
        cfg(c),
        pipeline(std::move(w), std::move(c), std::move(p)),
        annotations(ws.annotations(), [this](int layer, int index) {
          return layer >= 0 && layer < cfg.num_read_points() && index >= 0 && index < cfg.sae.f;
        }) {}

  Workspace ws;
  Config cfg;
  Pipeline pipeline;  // guarded by `compute`
  std::mutex compute;
  features::AnnotationStore annotations;
  httplib::Server server;
  std::thread thread;
  int port = -1;

  void routes();
};

namespace {

void send_json(httplib::Response& res, const Json& j, int status = 200) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& msg) {
  send_json(res, {{"error", msg}}, status);
}

/// Serves a stored file verbatim.
void send_file(httplib::Response& res, const fs::path& path, const char* type, const std::string& what) {
  if (!fs::exists(path)) {
    send_error(res, 404, what + " not found");
    return;
  }
  res.status = 200;
  res.set_content(read_file(path), type);
}

int parse_int(const std::string& s, const std::string& field) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw InputError("field '" + field + "': '" + s + "' is not an integer");
  }
}

Json parse_body(const httplib::Request& req) {
  Json j = Json::parse(req.body, nullptr, false);
  if (j.is_discarded()) throw InputError("request body is not valid JSON");
  return j;
}

}  // namespace

void ApiServer::Impl::routes() {
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const InputError& e) {
      send_error(res, 400, e.what());
    } catch (const ConfigError& e) {
      send_error(res, 400, e.what());
    } catch (const NotFoundError& e) {
      send_error(res, 404, e.what());
    } catch (const StaleArtifactError& e) {
      send_error(res, 409, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  });

  server.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) {
    send_json(res, {{"status", "ok"}, {"workspace", ws.root().string()}, {"version", Workspace::kVersion}});
  });

  server.Get("/api/circuits", [this](const httplib::Request&, httplib::Response& res) {
    Json out = Json::array();
    for (const auto& id : ws.list_ids(ws.circuits_dir(), ".json")) {
      const Json j = Json::parse(read_file(ws.circuit(id)), nullptr, false);
      if (j.is_discarded()) continue;
      out.push_back({{"id", id},
                     {"objective", j.value("objective", Json(nullptr))},
                     {"strategy", j.value("strategy", "")},
                     {"basis", j.value("basis", "")},
                     {"k", j.value("k", 0)},
                     {"image", j.value("image", -1)}});
    }
    send_json(res, out);
  });

  server.Get(R"(/api/circuits/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    if (!Workspace::valid_id(id)) throw NotFoundError("circuit '" + id + "' not found");
    send_file(res, ws.circuit(id), "application/json", "circuit '" + id + "'");
  });

  server.Get(R"(/api/cards/files/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string name = req.matches[1];
    const fs::path p(name);
    if (!Workspace::valid_id(name) || p.extension() != ".png") throw NotFoundError("card file '" + name + "' not found");
    send_file(res, ws.cards_dir() / name, "image/png", "card file '" + name + "'");
  });

  server.Get(R"(/api/cards/([^/]+)/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const int layer = parse_int(req.matches[1], "layer");
    const int index = parse_int(req.matches[2], "index");
    if (layer < 0 || layer >= cfg.num_read_points() || index < 0 || index >= cfg.sae.f) {
      throw NotFoundError("feature L" + std::to_string(layer) + "#" + std::to_string(index) + " does not exist");
    }
    const auto path = ws.cards_dir() / (features::card_stem(layer, index) + ".json");
    if (!fs::exists(path)) {
      std::lock_guard<std::mutex> lock(compute);
      if (!fs::exists(path)) pipeline.cards({layer}, {index});
    }
    send_file(res, path, "application/json", "card");
  });

  server.Get(R"(/api/stats/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const int layer = parse_int(req.matches[1], "layer");
    if (layer < 0 || layer >= cfg.num_read_points()) throw NotFoundError("no layer " + std::to_string(layer));
    send_file(res, ws.stats(layer), "application/json", "stats of layer " + std::to_string(layer));
  });

  server.Get("/api/annotations", [this](const httplib::Request& req, httplib::Response& res) {
    Json out = Json::array();
    if (req.has_param("layer") || req.has_param("index")) {
      if (!req.has_param("layer")) throw InputError("field 'layer': missing");
      if (!req.has_param("index")) throw InputError("field 'index': missing");
      for (const auto& r : annotations.latest(parse_int(req.get_param_value("layer"), "layer"),
                                              parse_int(req.get_param_value("index"), "index"))) {
        out.push_back(features::to_json(r));
      }
    } else {
      for (const auto& r : annotations.all()) out.push_back(features::to_json(r));
    }
    send_json(res, out);
  });

  server.Get("/api/annotations/summary", [this](const httplib::Request&, httplib::Response& res) {
    Json out = Json::array();
    for (int l = 0; l < cfg.num_read_points(); ++l) {
      const auto m = annotations.mean_score(l);
      out.push_back({{"layer", l}, {"mean_score", m ? Json(*m) : Json(nullptr)}});
    }
    send_json(res, out);
  });

  server.Post("/api/annotations", [this](const httplib::Request& req, httplib::Response& res) {
    const auto rec = features::annotation_from_json(parse_body(req));
    const long id = annotations.record(rec);
    send_json(res, {{"id", id}}, 201);
  });

  server.Post("/api/ablations", [this](const httplib::Request& req, httplib::Response& res) {
    const auto spec = intervene::intervention_spec_from_json(parse_body(req));
    for (const auto& n : spec.nodes) {
      if (n.layer < 0 || n.layer >= cfg.num_read_points() || n.index < 0 || n.index >= cfg.sae.f) {
        throw NotFoundError("feature L" + std::to_string(n.layer) + "#" + std::to_string(n.index) + " does not exist");
      }
    }
    // Single writer: the report file is replaced atomically and the
    // response is that file's content.
    std::lock_guard<std::mutex> lock(compute);
    pipeline.ablate(spec);
    send_file(res, ws.report("ablation"), "application/json", "ablation report");
  });

  server.Get("/api/reports", [this](const httplib::Request&, httplib::Response& res) {
    send_json(res, ws.list_ids(ws.reports_dir(), ".json"));
  });

  server.Get(R"(/api/reports/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string name = req.matches[1];
    if (!Workspace::valid_id(name)) throw NotFoundError("report '" + name + "' not found");
    send_file(res, ws.report(name), "application/json", "report '" + name + "'");
  });
}

ApiServer::ApiServer(Workspace ws, Config cfg, Progress progress)
    : impl_(std::make_unique<Impl>(std::move(ws), std::move(cfg), std::move(progress))) {
  impl_->routes();
}

ApiServer::~ApiServer() { stop(); }

int ApiServer::bind(const std::string& host, int port) {
  if (port == 0) {
    impl_->port = impl_->server.bind_to_any_port(host);
  } else {
    impl_->port = impl_->server.bind_to_port(host, port) ? port : -1;
  }
  if (impl_->port < 0) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
  return impl_->port;
}

void ApiServer::listen() { impl_->server.listen_after_bind(); }

int ApiServer::start(const std::string& host, int port) {
  const int p = bind(host, port);
  impl_->thread = std::thread([this] { listen(); });
  impl_->server.wait_until_ready();
  return p;
}

void ApiServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace vitscope::service
