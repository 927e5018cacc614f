#pragma once

#include <string>

#include "caw/model.hpp"
#include "caw/training.hpp"

namespace caw {

/// Model checkpoint container: JSON header (architecture dims, tau, seed,
/// format version) followed by a little-endian float64 blob holding the
/// tuned parameters, the frozen snapshot, and the prototype rows, in that
/// order. Byte layout is documented in docs/file_formats.md.
void save_checkpoint(const DualEncoderModel& model, const std::string& path,
                     std::uint64_t seed = 0, const std::string& config_digest = "");
DualEncoderModel load_checkpoint(const std::string& path);

/// Optimizer-state blob: step counter plus the velocity buffers.
void save_optimizer(const OptimizerState& state, const std::string& path);
OptimizerState load_optimizer(const std::string& path, const DualEncoderModel& model);

} // namespace caw
