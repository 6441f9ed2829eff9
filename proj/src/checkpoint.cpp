#include "promptseg/checkpoint.hpp"

#include "promptseg/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace promptseg {

static_assert(std::endian::native == std::endian::little, "archive payload is written in host order");

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'P', 'S', 'G', 'T', 'N', 'S', 'R', '1'};
constexpr std::size_t kHeaderBytes = 16;

std::string shape_str(Index r, Index c) { return std::to_string(r) + "x" + std::to_string(c); }

}  // namespace

const Matrix* TensorArchive::find(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return &m;
  return nullptr;
}

void write_archive(const fs::path& path, const TensorArchive& archive) {
  json manifest = archive.metadata;
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : archive.tensors) {
    entries.push_back({{"name", name}, {"dtype", "f64"}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(double);
  }
  manifest["tensors"] = std::move(entries);
  const std::string text = manifest.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  // Write to a sibling file and rename so readers never see a partial archive.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write archive " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, m] : archive.tensors)
      out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!out) throw LoadError("failed writing archive " + tmp.string());
  }
  fs::rename(tmp, path);
}

TensorArchive read_archive(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open archive " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw LoadError(path.string() + ": not a tensor archive (bad magic)");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof len);
  if (len > bytes.size() - kHeaderBytes)
    throw LoadError(path.string() + ": manifest length " + std::to_string(len) + " exceeds file size");

  json manifest;
  try {
    manifest = json::parse(bytes.begin() + kHeaderBytes, bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderBytes + len));
  } catch (const json::parse_error& e) {
    const std::size_t at = kHeaderBytes + (e.byte > 0 ? e.byte - 1 : 0);
    throw ParseError(path.string() + ": malformed manifest", at);
  }
  if (!manifest.is_object() || !manifest.contains("tensors") || !manifest["tensors"].is_array())
    throw ParseError(path.string() + ": manifest lacks a \"tensors\" array", kHeaderBytes);

  const std::size_t payload = kHeaderBytes + len;
  TensorArchive archive;
  for (const auto& e : manifest["tensors"]) {
    try {
      const std::string name = e.at("name").get<std::string>();
      if (e.at("dtype").get<std::string>() != "f64")
        throw LoadError(path.string() + ": tensor " + name + " has unsupported dtype");
      const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0)
        throw LoadError(path.string() + ": tensor " + name + " must be 2-D");
      const std::uint64_t nbytes = static_cast<std::uint64_t>(shape[0] * shape[1]) * sizeof(double);
      if (payload + offset + nbytes > bytes.size())
        throw LoadError(path.string() + ": tensor " + name + " runs past the end of the file (truncated)");
      Matrix m(shape[0], shape[1]);
      std::memcpy(m.data(), bytes.data() + payload + offset, nbytes);
      archive.add(name, std::move(m));
    } catch (const json::exception& ex) {
      throw ParseError(path.string() + ": bad tensor entry: " + ex.what(), kHeaderBytes);
    }
  }
  manifest.erase("tensors");
  archive.metadata = std::move(manifest);
  return archive;
}

GeometryPreset infer_geometry(const TensorArchive& archive) {
  const Matrix* w = archive.find("image_encoder.patch_embed.weight");
  if (w == nullptr) throw LoadError("cannot infer geometry: image_encoder.patch_embed.weight is missing");
  const int p = GeometryPreset::kPatchSize;
  for (const auto& g : {GeometryPreset::paper(), GeometryPreset::desk()})
    if (w->rows() == 3 * p * p && w->cols() == g.embed_channels) return g;
  throw LoadError("cannot infer geometry: patch embedding is " + shape_str(w->rows(), w->cols()) +
                  ", no preset has that shape");
}

std::vector<std::string> assign_parameters(nn::ParamList params, const TensorArchive& archive, bool required) {
  std::map<std::string, const Matrix*> by_name;
  for (const auto& [n, m] : archive.tensors) by_name.emplace(n, &m);
  std::vector<std::string> problems;
  std::set<std::string> used;
  for (const auto& [name, p] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      if (required) problems.push_back("missing " + name);
      continue;
    }
    const Matrix& m = *it->second;
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols()) {
      problems.push_back("shape mismatch " + name + ": archive " + shape_str(m.rows(), m.cols()) + ", expected " +
                         shape_str(p->value.rows(), p->value.cols()));
      continue;
    }
    used.insert(name);
  }
  if (!problems.empty()) {
    std::string msg = std::to_string(problems.size()) + " tensor problem(s): " + problems[0];
    for (std::size_t i = 1; i < problems.size(); ++i) msg += "; " + problems[i];
    throw LoadError(msg);
  }
  // Assign only after validation so a failed load leaves the target untouched.
  for (const auto& [name, p] : params)
    if (used.count(name)) p->value = *by_name.at(name);
  std::vector<std::string> unmapped;
  for (const auto& [n, m] : archive.tensors)
    if (!used.count(n)) unmapped.push_back(n);
  return unmapped;
}

ExternalBackbone load_external_weights(const fs::path& path) {
  const TensorArchive archive = read_archive(path);
  ExternalBackbone out;
  out.geometry = infer_geometry(archive);
  out.backbone = std::make_unique<Backbone>(out.geometry, 0);
  out.unmapped = assign_parameters(out.backbone->parameters(), archive, true);
  return out;
}

void save_model(const fs::path& path, Model& model, const FreezePolicy& policy, const TensorArchive& extra) {
  TensorArchive a;
  a.metadata = extra.metadata;
  a.metadata["format"] = "promptseg-checkpoint";
  a.metadata["model"] = {{"geometry", model.geometry().name},
                         {"num_classes", model.config().num_classes},
                         {"tokens_per_class", model.config().tokens_per_class}};
  a.metadata["freeze"] = {{"mode", to_string(policy.mode)}, {"lora_rank", policy.lora_rank}, {"lora_alpha", policy.lora_alpha}};
  for (const auto& [name, p] : model.parameters()) a.add(name, p->value);
  for (const auto& [name, m] : extra.tensors) a.add(name, m);
  write_archive(path, a);
}

void save_backbone(const fs::path& path, Backbone& backbone, const nlohmann::json& metadata) {
  TensorArchive a;
  a.metadata = metadata;
  a.metadata["format"] = "promptseg-backbone";
  a.metadata["geometry"] = backbone.geometry().name;
  for (const auto& [name, p] : backbone.parameters()) a.add(name, p->value);
  write_archive(path, a);
}

LoadedModel load_model(const fs::path& path) {
  LoadedModel out;
  out.archive = read_archive(path);
  const TensorArchive& a = out.archive;
  ModelConfig cfg;
  cfg.geometry = infer_geometry(a);
  int classes = 0;
  while (a.find("ppn.class_tokens." + std::to_string(classes)) != nullptr) ++classes;
  if (classes == 0) throw LoadError(path.string() + ": no ppn.class_tokens.* tensors; not a model checkpoint");
  cfg.num_classes = classes;
  cfg.tokens_per_class = static_cast<int>(a.find("ppn.class_tokens.0")->rows());

  try {
    if (a.metadata.contains("freeze")) {
      const auto& f = a.metadata["freeze"];
      out.policy.mode = parse_freeze_mode(f.at("mode").get<std::string>());
      out.policy.lora_rank = f.at("lora_rank").get<int>();
      out.policy.lora_alpha = f.at("lora_alpha").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": bad freeze metadata: " + e.what());
  }
  out.model = std::make_unique<Model>(cfg, 0);
  apply_policy(*out.model, out.policy);
  nn::ParamList params = out.model->parameters();
  const auto unmapped = assign_parameters(params, a, true);
  for (const auto& n : unmapped)
    if (!n.starts_with("optim.")) throw LoadError(path.string() + ": unexpected tensor " + n);
  return out;
}

void load_backbone_into(Model& model, const fs::path& path) {
  const TensorArchive a = read_archive(path);
  const GeometryPreset g = infer_geometry(a);
  if (!(g == model.geometry()))
    throw LoadError(path.string() + ": backbone geometry '" + g.name + "' differs from model geometry '" +
                    model.geometry().name + "'");
  nn::ParamList params;
  model.backbone().collect(params);
  // LoRA adapters are not part of a plain backbone archive.
  nn::ParamList base;
  for (const auto& e : params)
    if (!e.first.ends_with(".lora_a") && !e.first.ends_with(".lora_b")) base.push_back(e);
  assign_parameters(base, a, true);
}

}  // namespace promptseg
