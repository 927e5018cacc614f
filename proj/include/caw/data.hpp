#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "caw/model.hpp"
#include "caw/tensor.hpp"

namespace caw {

/// Gaussian cluster generator standing in for image datasets: one cluster
/// per class, samples clipped to [0,1]^D, prototypes linked to clusters so
/// that the task is learnable by construction.
struct SyntheticDatasetSpec {
    std::size_t num_classes = 8;
    std::size_t input_dim = 64;
    std::size_t samples_per_class = 200;
    std::size_t embed_dim = 32;     // prototype dimension
    double center_scale = 0.3;      // cluster centers live in 0.5 +- scale/2
    double noise_sigma = 0.05;      // sigma == 0 collapses samples onto centers
    std::uint64_t seed = 0;
    /// cluster index -> prototype row; identity when empty.
    std::vector<std::size_t> prototype_linkage;

    void validate() const;
};

struct Dataset {
    std::string name;
    Tensor x; // [N, input_dim], values in [0,1]
    Labels y; // class per sample
    ClassPrototypeSet prototypes;
    SyntheticDatasetSpec spec;

    std::size_t size() const { return y.size(); }
};

Dataset generate_synthetic(const SyntheticDatasetSpec& spec);

/// Same geometry family, different seed: unseen cluster centers and an
/// unseen prototype set, for zero-shot style evaluation.
SyntheticDatasetSpec transfer_variant(SyntheticDatasetSpec spec, std::uint64_t shift_seed);

/// Binary container: magic, JSON header, float64 LE sample payload,
/// float64 LE prototype payload, int32 LE labels. Round-trips bit-exactly.
void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

} // namespace caw
