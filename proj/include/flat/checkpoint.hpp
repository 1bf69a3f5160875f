#pragma once

#include "flat/model.hpp"

#include <filesystem>

namespace flat {

// Checkpoint directory layout: `manifest.json` plus one little-endian
// row-major binary file per tensor. Tensors are stored as f64 so that
// save -> load round-trips bit-exactly; pass f32 = true for a lossy export.
// The manifest schema is documented in docs/checkpoint-format.md.

void save_checkpoint(const Model& model, const std::filesystem::path& dir, bool f32 = false);
void save_checkpoint(const CompressedModel& model, const std::filesystem::path& dir,
                     bool f32 = false);

Model load_checkpoint(const std::filesystem::path& dir);
CompressedModel load_compressed_checkpoint(const std::filesystem::path& dir);

bool checkpoint_is_compressed(const std::filesystem::path& dir);

} // namespace flat
