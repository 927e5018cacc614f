#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "caw/model.hpp"

namespace caw {

struct GradcheckOptions {
    std::size_t states = 100; // seeded random states per loss component
    double h = 1e-5;
    double tolerance = 1e-4;
    std::uint64_t seed = 0;
    // Small model keeps the finite-difference sweeps fast.
    EncoderConfig encoder{5, {6}, 4};
    std::size_t num_classes = 3;
    std::size_t batch = 4;
    double temperature = 0.07;
    /// Zero-parameter passthrough encoder: the sweep is vacuous and passes.
    bool identity_encoder = false;
};

struct GradcheckComponentResult {
    std::string component;
    double max_rel_error = 0.0;
    std::size_t states = 0;
    bool passed = false;
};

struct GradcheckReport {
    std::vector<GradcheckComponentResult> components;
    double max_rel_error = 0.0;
    bool passed = false;
};

/// Central-finite-difference verification of every loss component's
/// parameter gradient: L_CE, L_CA under both detach_weight settings and
/// both KL directions, L_Reg, and L_total. Setting the environment
/// variable CAW_GRADCHECK_PERTURB injects a wrong-gradient bias (negative
/// control for the harness itself).
GradcheckReport run_gradcheck(const GradcheckOptions& options);

} // namespace caw
