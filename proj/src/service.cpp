#include "promptseg/service.hpp"

#include "promptseg/backbone.hpp"
#include "promptseg/checkpoint.hpp"
#include "promptseg/errors.hpp"
#include "promptseg/image_io.hpp"

#include <httplib.h>

#include <cstdio>
#include <iostream>
#include <random>

namespace promptseg {

using nlohmann::json;

// ------------------------------------------------------------------ RLE

std::vector<std::uint32_t> rle_encode(const BinaryMask& mask) {
  std::vector<std::uint32_t> counts;
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (std::uint8_t v : mask.pixels) {
    const std::uint8_t b = v ? 1 : 0;
    if (b != current) {
      counts.push_back(run);
      run = 0;
      current = b;
    }
    ++run;
  }
  counts.push_back(run);
  return counts;
}

BinaryMask rle_decode(const std::vector<std::uint32_t>& counts, int height, int width) {
  if (height <= 0 || width <= 0) throw InputError("rle: dimensions must be positive");
  BinaryMask m(height, width);
  std::size_t pos = 0;
  std::uint8_t value = 0;
  for (std::uint32_t c : counts) {
    if (pos + c > m.pixels.size()) throw InputError("rle: counts exceed height*width");
    std::fill_n(m.pixels.begin() + static_cast<std::ptrdiff_t>(pos), c, value);
    pos += c;
    value ^= 1;
  }
  if (pos != m.pixels.size())
    throw InputError("rle: counts sum to " + std::to_string(pos) + ", expected " + std::to_string(m.pixels.size()));
  return m;
}

BinaryMask mask_to_original(const Matrix& logits, const PadRecord& r) {
  const Matrix content = logits.topLeftCorner(r.content_height, r.content_width);
  const Matrix up = bilinear_matrix(r.original_height, r.content_height) * content *
                    bilinear_matrix(r.original_width, r.content_width).transpose();
  BinaryMask m(r.original_height, r.original_width);
  for (Index i = 0; i < up.size(); ++i) m.pixels[static_cast<std::size_t>(i)] = up.data()[i] > 0.0;
  return m;
}

// ------------------------------------------------------------------ request parsing

namespace {

struct HttpError {
  int status;
  std::string message;
};

HttpResponse json_response(int status, const json& body) { return HttpResponse{status, body.dump(), "application/json"}; }

HttpResponse error_response(int status, const std::string& message) {
  return json_response(status, json{{"error", message}, {"status", status}});
}

json parse_body(const std::string& body) {
  try {
    json j = json::parse(body);
    if (!j.is_object()) throw HttpError{400, "request body must be a JSON object"};
    return j;
  } catch (const json::parse_error& e) {
    throw HttpError{400, std::string("malformed JSON: ") + e.what()};
  }
}

double number_field(const json& j, const char* key, const char* what) {
  if (!j.is_object() || !j.contains(key) || !j[key].is_number())
    throw HttpError{400, std::string(what) + " needs numeric field '" + key + "'"};
  const double v = j[key].get<double>();
  if (!std::isfinite(v)) throw HttpError{400, std::string(what) + " field '" + key + "' must be finite"};
  return v;
}

int class_field(const json& body, int num_classes) {
  if (!body.contains("class_id")) return 0;
  if (!body["class_id"].is_number_integer()) throw HttpError{400, "class_id must be an integer"};
  const int k = body["class_id"].get<int>();
  if (k < 0 || k >= num_classes)
    throw HttpError{400, "class_id " + std::to_string(k) + " out of range [0," + std::to_string(num_classes) + ")"};
  return k;
}

Sample decode_image(const json& body, const ServeConfig& cfg, int input_size) {
  if (!body.contains("image") || !body["image"].is_string()) throw HttpError{400, "missing base64 'image' field"};
  const std::string& text = body["image"].get_ref<const std::string&>();
  if (text.size() / 4 * 3 > cfg.max_image_bytes)
    throw HttpError{413, "image payload exceeds " + std::to_string(cfg.max_image_bytes) + " bytes"};
  io::Raster r;
  try {
    r = io::decode_png(io::base64_decode(text));
  } catch (const InputError& e) {
    throw HttpError{422, std::string("undecodable image: ") + e.what()};
  }
  if (r.width > cfg.max_image_side || r.height > cfg.max_image_side)
    throw HttpError{413, "image " + std::to_string(r.width) + "x" + std::to_string(r.height) + " exceeds max side " +
                             std::to_string(cfg.max_image_side)};
  Sample s;
  s.id = "upload";
  s.image = ImageTensor::zeros(r.height, r.width);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      for (int c = 0; c < 3; ++c)
        s.image.at(c, y, x) =
            r.pixels[(static_cast<std::size_t>(y) * r.width + x) * r.channels + (r.channels == 1 ? 0 : c)] / 255.0;
  return resize_pad(s, input_size);
}

bool has_prompts(const json& p) {
  if (p.is_null()) return false;
  auto nonempty = [&](const char* k) { return p.contains(k) && !p[k].is_null() && !(p[k].is_array() && p[k].empty()); };
  return nonempty("points") || nonempty("boxes") || (p.contains("brush") && !p["brush"].is_null());
}

PointLabel parse_label(const json& j) {
  if (!j.contains("label")) return PointLabel::foreground;
  const json& l = j["label"];
  if (l.is_string()) {
    const auto s = l.get<std::string>();
    if (s == "foreground" || s == "fg") return PointLabel::foreground;
    if (s == "background" || s == "bg") return PointLabel::background;
  } else if (l.is_number_integer()) {
    if (l.get<int>() == 1) return PointLabel::foreground;
    if (l.get<int>() == 0) return PointLabel::background;
  }
  throw HttpError{400, "point label must be foreground/background (or 1/0)"};
}

/// Converts original-pixel prompts to model space. `echo` receives the
/// prompts mapped back to original pixels.
ManualPrompts parse_prompts(const json& p, const PadRecord& rec, int mask_prompt_size, json* echo) {
  ManualPrompts out;
  if (p.is_null()) return out;
  if (!p.is_object()) throw HttpError{400, "'prompts' must be an object"};
  for (const auto& [key, _] : p.items())
    if (key != "points" && key != "boxes" && key != "brush") throw HttpError{400, "unknown prompt field '" + key + "'"};
  const double s = rec.size;
  const double w = rec.original_width;
  const double h = rec.original_height;
  json echo_points = json::array(), echo_boxes = json::array();
  if (p.contains("points") && !p["points"].is_null()) {
    if (!p["points"].is_array()) throw HttpError{400, "'points' must be an array"};
    for (const auto& pt : p["points"]) {
      const double x = number_field(pt, "x", "point");
      const double y = number_field(pt, "y", "point");
      if (x < 0 || x > w || y < 0 || y > h) throw HttpError{400, "point outside the image"};
      const PointLabel label = parse_label(pt);
      out.points.push_back({rec.to_model_x(x) / s, rec.to_model_y(y) / s, label});
      const auto& q = out.points.back();
      echo_points.push_back({{"x", rec.to_original_x(q.x * s)},
                             {"y", rec.to_original_y(q.y * s)},
                             {"label", label == PointLabel::foreground ? "foreground" : "background"}});
    }
  }
  if (p.contains("boxes") && !p["boxes"].is_null()) {
    if (!p["boxes"].is_array()) throw HttpError{400, "'boxes' must be an array"};
    for (const auto& bj : p["boxes"]) {
      const Box b{number_field(bj, "x1", "box"), number_field(bj, "y1", "box"), number_field(bj, "x2", "box"),
                  number_field(bj, "y2", "box")};
      if (!(b.x1 < b.x2) || !(b.y1 < b.y2)) throw HttpError{400, "box must satisfy x1<x2 and y1<y2"};
      if (b.x1 < 0 || b.y1 < 0 || b.x2 > w || b.y2 > h) throw HttpError{400, "box outside the image"};
      out.boxes.push_back(rec.to_model_normalized(b));
      const Box back = rec.to_original_pixels(out.boxes.back());
      echo_boxes.push_back({{"x1", back.x1}, {"y1", back.y1}, {"x2", back.x2}, {"y2", back.y2}});
    }
  }
  if (p.contains("brush") && !p["brush"].is_null()) {
    const json& b = p["brush"];
    if (!b.is_object() || !b.contains("counts") || !b["counts"].is_array())
      throw HttpError{400, "brush needs 'height', 'width', 'counts'"};
    const int bh = static_cast<int>(number_field(b, "height", "brush"));
    const int bw = static_cast<int>(number_field(b, "width", "brush"));
    if (bh != mask_prompt_size || bw != mask_prompt_size)
      throw HttpError{400, "brush must be " + std::to_string(mask_prompt_size) + "x" + std::to_string(mask_prompt_size)};
    try {
      out.brush_mask = rle_decode(b["counts"].get<std::vector<std::uint32_t>>(), bh, bw);
    } catch (const InputError& e) {
      throw HttpError{400, std::string("brush: ") + e.what()};
    } catch (const json::exception&) {
      throw HttpError{400, "brush counts must be nonnegative integers"};
    }
  }
  try {
    out.validate();
  } catch (const InputError& e) {
    throw HttpError{400, e.what()};
  }
  if (echo != nullptr) {
    *echo = json{{"points", echo_points}, {"boxes", echo_boxes}};
    if (out.brush_mask) (*echo)["brush"] = p["brush"];
  }
  return out;
}

json mask_json(const BinaryMask& m) {
  return json{{"height", m.height}, {"width", m.width}, {"counts", rle_encode(m)}};
}

json box_json(const Box& b) { return json{{"x1", b.x1}, {"y1", b.y1}, {"x2", b.x2}, {"y2", b.y2}}; }

std::string new_session_id() {
  static std::mutex mu;
  static std::random_device rd;
  std::lock_guard<std::mutex> lock(mu);
  char buf[33];
  std::snprintf(buf, sizeof buf, "%08x%08x%08x%08x", rd(), rd(), rd(), rd());
  return buf;
}

std::int64_t unix_seconds() {
  return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch()).count();
}

struct Inference {
  SegmentationResult result;
  BinaryMask mask;  // original size, gated where the mode gates
  std::optional<Box> learned_box;  // original pixels
};

Inference run_inference(const Model& model, const Sample& image, int class_id, ServeMode mode,
                        const ManualPrompts& prompts) {
  Inference inf;
  const ImageEmbedding emb = model.backbone().encode_image(image.image);
  bool gated = true;
  if (mode == ServeMode::manual) {
    inf.result = model.segment_manual(emb, prompts);
    gated = false;
  } else {
    std::optional<ManualPrompts> manual;
    if (mode == ServeMode::semi && !prompts.empty()) manual = prompts;
    inf.result = model.segment_embedding(emb, class_id, manual);
    ag::NoGradGuard guard;
    inf.learned_box = image.record.to_original_pixels(to_bundle(model.ppn().predict(emb, class_id)).box);
  }
  if (gated && !inf.result.object_present)
    inf.mask = BinaryMask(image.record.original_height, image.record.original_width);
  else
    inf.mask = mask_to_original(inf.result.mask_logits, image.record);
  return inf;
}

json inference_json(const Inference& inf) {
  json j{{"object_present", inf.result.object_present},
         {"objectness_logit", inf.result.objectness_logit},
         {"prompt_tokens", inf.result.prompt_tokens},
         {"decoder_tokens", inf.result.decoder_tokens},
         {"mask", mask_json(inf.mask)}};
  if (inf.learned_box) j["learned_box"] = box_json(*inf.learned_box);
  return j;
}

ServeMode parse_mode(const json& body) {
  if (!body.contains("mode") || !body["mode"].is_string()) throw HttpError{400, "missing 'mode' (auto|manual|semi)"};
  const auto m = body["mode"].get<std::string>();
  if (m == "auto") return ServeMode::auto_;
  if (m == "manual") return ServeMode::manual;
  if (m == "semi") return ServeMode::semi;
  throw HttpError{400, "unknown mode '" + m + "' (expected auto, manual, semi)"};
}

template <class F>
HttpResponse guarded(F&& f) {
  try {
    return f();
  } catch (const HttpError& e) {
    return error_response(e.status, e.message);
  } catch (const InputError& e) {
    return error_response(400, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

// Appends the new prompts to the cumulative set; a new brush replaces the old.
void merge_prompts(json& into, const json& add) {
  for (const char* k : {"points", "boxes"}) {
    if (!into.contains(k)) into[k] = json::array();
    if (add.contains(k) && add[k].is_array())
      for (const auto& e : add[k]) into[k].push_back(e);
  }
  if (add.contains("brush") && !add["brush"].is_null()) into["brush"] = add["brush"];
}

}  // namespace

// ------------------------------------------------------------------ service

Service::Service(const Model& model, ServeConfig config, std::function<Clock::time_point()> now)
    : model_(model), config_(std::move(config)), now_(std::move(now)) {}

HttpResponse Service::info() const {
  const auto& g = model_.geometry();
  return json_response(200, json{{"geometry", g.name},
                                 {"input_size", g.input_size},
                                 {"mask_prompt_size", g.mask_prompt_size},
                                 {"embed_grid", g.embed_grid},
                                 {"num_classes", model_.config().num_classes},
                                 {"tokens_per_class", model_.config().tokens_per_class}});
}

HttpResponse Service::predict(const std::string& body_text) {
  return guarded([&] {
    const json body = parse_body(body_text);
    const ServeMode mode = parse_mode(body);
    const json prompts_j = body.contains("prompts") ? body["prompts"] : json();
    if (mode == ServeMode::auto_ && !prompts_j.is_null())
      throw HttpError{400, "mode 'auto' does not accept prompts"};
    if (mode == ServeMode::manual && !has_prompts(prompts_j))
      throw HttpError{400, "mode 'manual' requires at least one prompt"};
    const int class_id = class_field(body, model_.config().num_classes);
    const Sample image = decode_image(body, config_, model_.geometry().input_size);
    json echo = json{{"points", json::array()}, {"boxes", json::array()}};
    const ManualPrompts prompts = parse_prompts(prompts_j, image.record, model_.geometry().mask_prompt_size, &echo);
    const Inference inf = run_inference(model_, image, class_id, mode, prompts);
    json out = inference_json(inf);
    out["mode"] = body["mode"];
    out["class_id"] = class_id;
    out["width"] = image.record.original_width;
    out["height"] = image.record.original_height;
    out["prompts"] = echo;
    return json_response(200, out);
  });
}

json Service::history_json(const Session& s, const HistoryEntry& e, std::size_t step) const {
  (void)s;
  return json{{"step", step},
              {"prompts", e.prompts_original},
              {"object_present", e.result.object_present},
              {"objectness_logit", e.result.objectness_logit},
              {"prompt_tokens", e.result.prompt_tokens},
              {"mask", mask_json(e.mask)}};
}

HttpResponse Service::create_session(const std::string& body_text) {
  return guarded([&] {
    evict_expired();
    const json body = parse_body(body_text);
    if (body.contains("prompts") && !body["prompts"].is_null())
      throw HttpError{400, "sessions start from the learned prediction; send prompts to /refine"};
    auto s = std::make_shared<Session>();
    s->class_id = class_field(body, model_.config().num_classes);
    s->image = decode_image(body, config_, model_.geometry().input_size);
    s->id = new_session_id();
    s->created_at = unix_seconds();
    s->last_access = now_();
    s->prompts_original = json{{"points", json::array()}, {"boxes", json::array()}};
    const Inference inf = run_inference(model_, s->image, s->class_id, ServeMode::auto_, ManualPrompts{});
    s->history.push_back(HistoryEntry{ManualPrompts{}, s->prompts_original, inf.result, inf.mask});
    json out = inference_json(inf);
    out["session_id"] = s->id;
    out["width"] = s->image.record.original_width;
    out["height"] = s->image.record.original_height;
    out["history_length"] = s->history.size();
    {
      std::lock_guard<std::mutex> lock(sessions_mutex_);
      sessions_[s->id] = s;
    }
    return json_response(201, out);
  });
}

std::shared_ptr<Service::Session> Service::find_session(const std::string& id) {
  evict_expired();
  std::lock_guard<std::mutex> lock(sessions_mutex_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw HttpError{404, "unknown session '" + id + "'"};
  it->second->last_access = now_();
  return it->second;
}

HttpResponse Service::refine(const std::string& id, const std::string& body_text) {
  return guarded([&] {
    auto s = find_session(id);
    std::lock_guard<std::mutex> lock(s->mutex);
    if (s->accepted) throw HttpError{409, "session '" + id + "' was accepted; refinement is closed"};
    const json body = parse_body(body_text);
    const json add = body.contains("prompts") ? body["prompts"] : json();
    if (!has_prompts(add)) throw HttpError{400, "refine requires at least one new prompt"};
    const int mps = model_.geometry().mask_prompt_size;
    parse_prompts(add, s->image.record, mps, nullptr);  // validate before merging
    json merged = s->prompts_original;
    merge_prompts(merged, add);
    json echo;
    const ManualPrompts all = parse_prompts(merged, s->image.record, mps, &echo);
    const Inference inf = run_inference(model_, s->image, s->class_id, ServeMode::semi, all);
    s->prompts_original = merged;
    s->history.push_back(HistoryEntry{all, merged, inf.result, inf.mask});
    json out = inference_json(inf);
    out["session_id"] = s->id;
    out["history_length"] = s->history.size();
    out["prompts"] = echo;
    return json_response(200, out);
  });
}

HttpResponse Service::get_session(const std::string& id) {
  return guarded([&] {
    auto s = find_session(id);
    std::lock_guard<std::mutex> lock(s->mutex);
    json hist = json::array();
    for (std::size_t i = 0; i < s->history.size(); ++i) hist.push_back(history_json(*s, s->history[i], i + 1));
    return json_response(200, json{{"session_id", s->id},
                                   {"class_id", s->class_id},
                                   {"width", s->image.record.original_width},
                                   {"height", s->image.record.original_height},
                                   {"accepted", s->accepted},
                                   {"created_at", s->created_at},
                                   {"history_length", s->history.size()},
                                   {"history", hist}});
  });
}

HttpResponse Service::accept(const std::string& id) {
  return guarded([&] {
    auto s = find_session(id);
    std::lock_guard<std::mutex> lock(s->mutex);
    if (s->accepted) throw HttpError{409, "session '" + id + "' was already accepted"};
    s->accepted = true;
    const HistoryEntry& last = s->history.back();
    io::Raster r{last.mask.width, last.mask.height, 1, {}};
    r.pixels.resize(last.mask.pixels.size());
    for (std::size_t i = 0; i < r.pixels.size(); ++i) r.pixels[i] = last.mask.pixels[i] ? 255 : 0;
    return json_response(200, json{{"session_id", s->id},
                                   {"mask_png", io::base64_encode(io::encode_png(r))},
                                   {"metadata",
                                    {{"width", r.width},
                                     {"height", r.height},
                                     {"class_id", s->class_id},
                                     {"steps", s->history.size()},
                                     {"object_present", last.result.object_present},
                                     {"objectness_logit", last.result.objectness_logit},
                                     {"foreground_pixels", last.mask.count()},
                                     {"prompts", last.prompts_original}}}});
  });
}

std::size_t Service::evict_expired() {
  const auto now = now_();
  const auto ttl = std::chrono::seconds(config_.session_ttl_seconds);
  std::lock_guard<std::mutex> lock(sessions_mutex_);
  std::size_t n = 0;
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    if (now - it->second->last_access > ttl) {
      it = sessions_.erase(it);
      ++n;
    } else {
      ++it;
    }
  }
  return n;
}

std::size_t Service::session_count() const {
  std::lock_guard<std::mutex> lock(sessions_mutex_);
  return sessions_.size();
}

void Service::mount(httplib::Server& server) {
  auto reply = [](httplib::Response& res, const HttpResponse& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  // Base64 inflates by 4/3; leave headroom for the JSON envelope.
  server.set_payload_max_length(config_.max_image_bytes / 3 * 4 + (1u << 20));
  server.Get("/info", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, info()); });
  server.Post("/predict", [this, reply](const httplib::Request& req, httplib::Response& res) { reply(res, predict(req.body)); });
  server.Post("/sessions",
              [this, reply](const httplib::Request& req, httplib::Response& res) { reply(res, create_session(req.body)); });
  server.Post(R"(/sessions/([^/]+)/refine)", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, refine(req.matches[1], req.body));
  });
  server.Post(R"(/sessions/([^/]+)/accept)", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, accept(req.matches[1]));
  });
  server.Get(R"(/sessions/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, get_session(req.matches[1]));
  });
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      const std::string msg = res.status == 413 ? "payload too large" : res.status == 404 ? "not found" : "request failed";
      res.set_content(json{{"error", msg}, {"status", res.status}}.dump(), "application/json");
    }
  });
}

int run_server(const ServeConfig& config) {
  if (config.checkpoint.empty()) throw ConfigError("serve.checkpoint is not set");
  LoadedModel loaded = load_model(config.checkpoint);
  Service service(*loaded.model, config);
  httplib::Server server;
  server.new_task_queue = [threads = config.threads] { return new httplib::ThreadPool(static_cast<std::size_t>(std::max(1, threads))); };
  service.mount(server);
  std::cerr << "serving " << config.checkpoint << " on " << config.host << ":" << config.port << std::endl;
  if (!server.listen(config.host, config.port)) throw ConfigError("cannot listen on " + config.host + ":" + std::to_string(config.port));
  return 0;
}

}  // namespace promptseg
