#pragma once

// Named-tensor archive. Layout (all integers little-endian):
//
//   bytes 0..7    magic "PSGTNSR1"
//   bytes 8..15   u64 manifest length M
//   bytes 16..    M bytes of UTF-8 JSON manifest
//   then          tensor payload; each tensor is rows·cols f64 values,
//                 row-major, at manifest offset (relative to payload start)
//
// Manifest keys: "tensors" (array of {name, dtype:"f64", shape:[rows, cols],
// offset}) plus free-form metadata ("model", "freeze", "train", ...).

#include "promptseg/backbone.hpp"
#include "promptseg/peft.hpp"
#include "promptseg/ppn.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace promptseg {

struct TensorArchive {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Matrix* find(const std::string& name) const;
  void add(std::string name, Matrix value) { tensors.emplace_back(std::move(name), std::move(value)); }
};

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
/// LoadError when the file is missing, truncated, or has a bad magic;
/// ParseError (with absolute byte offset) when the manifest is malformed.
TensorArchive read_archive(const std::filesystem::path& path);

/// Picks the named preset whose channel count matches the stored tensors.
GeometryPreset infer_geometry(const TensorArchive& archive);

/// Copies every parameter with a matching name. Returns archive names that
/// no parameter claimed. Throws LoadError listing every parameter that is
/// missing from the archive or has the wrong shape when `required` is set.
std::vector<std::string> assign_parameters(nn::ParamList params, const TensorArchive& archive, bool required);

struct ExternalBackbone {
  std::unique_ptr<Backbone> backbone;
  GeometryPreset geometry;
  std::vector<std::string> unmapped;  // archive tensors the backbone did not use
};

/// Backbone from an archive of named tensors; geometry is inferred from the
/// tensor shapes.
ExternalBackbone load_external_weights(const std::filesystem::path& path);

/// Writes model parameters, the freeze policy, and optional extra tensors
/// and metadata (optimizer state, training progress).
void save_model(const std::filesystem::path& path, Model& model, const FreezePolicy& policy,
                const TensorArchive& extra = {});

/// Backbone-only archive, readable by `load_external_weights` and
/// `load_backbone_into`.
void save_backbone(const std::filesystem::path& path, Backbone& backbone, const nlohmann::json& metadata = {});

struct LoadedModel {
  std::unique_ptr<Model> model;
  FreezePolicy policy;
  TensorArchive archive;  // full archive, for optimizer state and metadata
};

/// Rebuilds a model (geometry, classes, tokens, LoRA adapters) from a
/// checkpoint written by `save_model`.
LoadedModel load_model(const std::filesystem::path& path);

/// Replaces backbone weights with those in `path` (backbone names only).
void load_backbone_into(Model& model, const std::filesystem::path& path);

}  // namespace promptseg
