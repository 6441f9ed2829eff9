#pragma once

// HTTP inference service. JSON bodies; images travel as base64 PNG and masks
// as run-length encodings (row-major, counts alternate background/foreground
// starting with background, so a mask starting with foreground begins with 0).
//
//   GET  /info                     geometry and class count
//   POST /predict                  {image, class_id, mode, prompts?}
//   POST /sessions                 {image, class_id} → initial learned prediction
//   POST /sessions/{id}/refine     {prompts} → semi prediction on all prompts so far
//   GET  /sessions/{id}            session state and history
//   POST /sessions/{id}/accept     final mask as PNG (original size) + metadata
//
// Prompt coordinates are pixels of the original image. A brush is an RLE
// mask at the model's mask-prompt resolution covering the padded square.

#include "promptseg/config.hpp"
#include "promptseg/data.hpp"
#include "promptseg/ppn.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace httplib {
class Server;
}

namespace promptseg {

std::vector<std::uint32_t> rle_encode(const BinaryMask& mask);
/// InputError when the counts do not sum to height·width.
BinaryMask rle_decode(const std::vector<std::uint32_t>& counts, int height, int width);

/// Model-space mask logits mapped back onto the original image grid.
BinaryMask mask_to_original(const Matrix& mask_logits, const PadRecord& record);

struct HttpResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

enum class ServeMode { auto_, manual, semi };

class Service {
 public:
  using Clock = std::chrono::steady_clock;

  /// The model must outlive the service and is only used read-only.
  Service(const Model& model, ServeConfig config, std::function<Clock::time_point()> now = Clock::now);

  HttpResponse info() const;
  HttpResponse predict(const std::string& body);
  HttpResponse create_session(const std::string& body);
  HttpResponse refine(const std::string& id, const std::string& body);
  HttpResponse get_session(const std::string& id);
  HttpResponse accept(const std::string& id);

  /// Drops sessions idle for longer than the TTL; returns how many.
  std::size_t evict_expired();
  std::size_t session_count() const;

  /// Registers every route on `server`.
  void mount(httplib::Server& server);

 private:
  struct HistoryEntry {
    ManualPrompts prompts;  // model space, cumulative
    nlohmann::json prompts_original;
    SegmentationResult result;
    BinaryMask mask;  // original size, gated
  };
  struct Session {
    std::mutex mutex;
    std::string id;
    Sample image;  // model space
    int class_id = 0;
    std::vector<HistoryEntry> history;
    nlohmann::json prompts_original = nlohmann::json::object();  // cumulative, as submitted
    bool accepted = false;
    std::int64_t created_at = 0;  // unix seconds
    Clock::time_point last_access;
  };

  std::shared_ptr<Session> find_session(const std::string& id);
  nlohmann::json history_json(const Session& s, const HistoryEntry& e, std::size_t step) const;

  const Model& model_;
  ServeConfig config_;
  std::function<Clock::time_point()> now_;
  mutable std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
};

/// Loads the configured checkpoint and serves until the process is stopped.
int run_server(const ServeConfig& config);

}  // namespace promptseg
