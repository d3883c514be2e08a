#pragma once

#include "vitscope/service/pipeline.hpp"

#include <memory>
#include <string>

namespace vitscope::service {

/// JSON API over a workspace.
///
///   GET  /api/health
///   GET  /api/circuits                  index of stored circuit documents
///   GET  /api/circuits/{id}             circuit document, as stored
///   GET  /api/cards/{layer}/{index}     feature card (exported on first request)
///   GET  /api/cards/files/{name}.png    card exemplar image
///   GET  /api/stats/{layer}             feature stats document, as stored
///   GET  /api/annotations?layer=&index= latest record per annotator (all records without a query)
///   GET  /api/annotations/summary       mean score per layer
///   POST /api/annotations               AnnotationRecord body -> {"id": n}
///   POST /api/ablations                 {"nodes": [...], "policy": "median"|"zero"} -> debias report
///   GET  /api/reports                   report names
///   GET  /api/reports/{name}            report document, as stored
///
/// Errors are {"error": message}: 400 for malformed input (the message
/// names the field), 404 for unknown ids, 409 for stale artifacts.
class ApiServer {
 public:
  ApiServer(Workspace ws, Config cfg, Progress progress = {});
  ~ApiServer();
  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  /// Binds `host:port`; port 0 picks a free one. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after bind().
  void listen();
  /// bind + listen on a background thread; returns the port.
  int start(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace vitscope::service
