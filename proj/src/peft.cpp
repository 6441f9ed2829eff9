#include "promptseg/peft.hpp"

#include "promptseg/errors.hpp"

#include <cstring>

namespace promptseg {

namespace {

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

bool is_lora(const std::string& name) {
  return name.ends_with(".lora_a") || name.ends_with(".lora_b");
}

}  // namespace

FreezeMode parse_freeze_mode(const std::string& name) {
  if (name == "ppn_only") return FreezeMode::ppn_only;
  if (name == "ppn_plus_lora_decoder") return FreezeMode::ppn_plus_lora_decoder;
  if (name == "full_decoder") return FreezeMode::full_decoder;
  throw ConfigError("unknown freeze mode '" + name + "' (expected ppn_only, ppn_plus_lora_decoder, full_decoder)");
}

std::string to_string(FreezeMode mode) {
  switch (mode) {
    case FreezeMode::ppn_only: return "ppn_only";
    case FreezeMode::ppn_plus_lora_decoder: return "ppn_plus_lora_decoder";
    case FreezeMode::full_decoder: return "full_decoder";
  }
  return "?";
}

void FreezePolicy::validate() const {
  if (lora_rank < 1) throw ConfigError("freeze.lora_rank must be >= 1");
  if (!(lora_alpha > 0.0)) throw ConfigError("freeze.lora_alpha must be > 0");
}

ParamGroup group_of(const std::string& name) {
  if (starts_with(name, "ppn.")) return ParamGroup::ppn;
  if (starts_with(name, "mask_decoder.")) return ParamGroup::decoder;
  return ParamGroup::other;
}

ParameterCensus census(Model& model) {
  ParameterCensus c;
  for (const auto& [name, p] : model.parameters()) {
    const auto n = static_cast<std::size_t>(p->value.size());
    c.total += n;
    if (is_lora(name)) c.lora += n;
    if (!p->trainable) {
      c.frozen += n;
      continue;
    }
    c.trainable += n;
    if (group_of(name) == ParamGroup::ppn) c.ppn += n;
    if (group_of(name) == ParamGroup::decoder) c.decoder += n;
  }
  return c;
}

ParameterCensus apply_policy(Model& model, const FreezePolicy& policy, std::uint64_t seed) {
  policy.validate();
  if (policy.mode == FreezeMode::ppn_plus_lora_decoder) {
    nn::Rng rng(seed ^ 0x4c6f5241ULL);
    for (nn::Attention* a : model.backbone().mask_decoder().attentions()) {
      if (!a->q_proj().has_lora()) a->q_proj().attach_lora(policy.lora_rank, policy.lora_alpha, rng);
      if (!a->v_proj().has_lora()) a->v_proj().attach_lora(policy.lora_rank, policy.lora_alpha, rng);
    }
  }
  for (auto& [name, p] : model.parameters()) {
    switch (group_of(name)) {
      case ParamGroup::ppn: p->trainable = true; break;
      case ParamGroup::decoder:
        p->trainable = policy.mode == FreezeMode::full_decoder ||
                       (policy.mode == FreezeMode::ppn_plus_lora_decoder && is_lora(name));
        break;
      case ParamGroup::other: p->trainable = false; break;
    }
  }
  return census(model);
}

FrozenSnapshot snapshot_frozen(Model& model) {
  FrozenSnapshot s;
  for (const auto& [name, p] : model.parameters())
    if (!p->trainable) s.emplace(name, p->value);
  return s;
}

bool frozen_integrity_check(Model& model, const FrozenSnapshot& snapshot) {
  std::map<std::string, const Parameter*> current;
  for (const auto& [name, p] : model.parameters()) current.emplace(name, p);
  for (const auto& [name, value] : snapshot) {
    auto it = current.find(name);
    if (it == current.end()) return false;
    const Matrix& v = it->second->value;
    if (v.rows() != value.rows() || v.cols() != value.cols()) return false;
    if (std::memcmp(v.data(), value.data(), sizeof(double) * static_cast<std::size_t>(v.size())) != 0) return false;
  }
  return true;
}

}  // namespace promptseg
