#pragma once

// Freeze policies. The image encoder and prompt encoder are frozen in every
// mode; the policy decides what else in the mask decoder may train.

#include "promptseg/ppn.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace promptseg {

enum class FreezeMode { ppn_only, ppn_plus_lora_decoder, full_decoder };

FreezeMode parse_freeze_mode(const std::string& name);  // ConfigError when unknown
std::string to_string(FreezeMode mode);

struct FreezePolicy {
  FreezeMode mode = FreezeMode::ppn_only;
  int lora_rank = 4;
  double lora_alpha = 8.0;

  void validate() const;
};

/// Element counts after a policy is applied.
struct ParameterCensus {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::size_t total = 0;
  std::size_t ppn = 0;           // trainable elements under "ppn."
  std::size_t decoder = 0;       // trainable elements under "mask_decoder." (LoRA included)
  std::size_t lora = 0;          // LoRA elements
};

enum class ParamGroup { ppn, decoder, other };
ParamGroup group_of(const std::string& name);

/// Sets trainable flags per the policy, attaching LoRA to every decoder
/// attention's query and value projections when requested (only once; a
/// second application reuses existing adapters). `seed` drives LoRA init.
ParameterCensus apply_policy(Model& model, const FreezePolicy& policy, std::uint64_t seed = 0);
ParameterCensus census(Model& model);

/// Values of every frozen tensor, keyed by name.
using FrozenSnapshot = std::map<std::string, Matrix>;
FrozenSnapshot snapshot_frozen(Model& model);
/// True iff every tensor in the snapshot still exists and is bitwise equal.
bool frozen_integrity_check(Model& model, const FrozenSnapshot& snapshot);

}  // namespace promptseg
