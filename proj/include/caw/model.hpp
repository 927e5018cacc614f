#pragma once

#include <atomic>
#include <cstdint>
#include <string>
#include <vector>

#include "caw/tensor.hpp"

namespace caw {

struct EncoderConfig {
    std::size_t input_dim = 64;
    std::vector<std::size_t> hidden_dims = {128, 128};
    std::size_t embed_dim = 32;

    void validate() const;
};

/// Multilayer perceptron image encoder with tanh between layers. An empty
/// layer stack (hidden_dims empty and input_dim == embed_dim via
/// ImageEncoder::identity) acts as the identity map with zero parameters.
class ImageEncoder {
public:
    ImageEncoder() = default;

    static ImageEncoder random_init(const EncoderConfig& cfg, std::uint64_t seed,
                                    bool trainable = true);
    /// Zero-parameter passthrough encoder (embeddings == inputs).
    static ImageEncoder identity(std::size_t dim);
    /// Rebuild from an explicit parameter list (checkpoint loading).
    static ImageEncoder from_parameters(const EncoderConfig& cfg, std::vector<Tensor> params,
                                        bool trainable);

    Tensor forward(const Tensor& x) const;

    std::vector<Tensor>& parameters() { return params_; }
    const std::vector<Tensor>& parameters() const { return params_; }

    /// Deep copy with no shared mutable state. Frozen snapshots carry
    /// requires_grad=false parameters, so no gradient ever reaches them.
    ImageEncoder snapshot(bool trainable = false) const;

    std::size_t input_dim() const { return cfg_.input_dim; }
    std::size_t embed_dim() const { return cfg_.embed_dim; }
    const EncoderConfig& config() const { return cfg_; }
    bool trainable() const { return trainable_; }

    /// FNV-1a over the raw parameter bytes; used by invariance probes.
    std::uint64_t parameter_hash() const;

    /// Overwrite parameter values from another encoder of identical layout.
    void copy_parameters_from(const ImageEncoder& other);

private:
    EncoderConfig cfg_;
    // Flat list: W0, b0, W1, b1, ... with W[i] of shape [in, out].
    std::vector<Tensor> params_;
    bool trainable_ = true;
};

/// Fixed unit-norm class embeddings standing in for the text pathway.
struct ClassPrototypeSet {
    std::size_t num_classes = 0;
    std::size_t embed_dim = 0;
    Tensor vectors; // [C, D_e], rows unit-norm, never trainable
    std::vector<std::string> names;

    /// Seeded random rows, orthonormalized when C <= D_e, unit-normalized
    /// otherwise. Rows are pairwise distinct by construction.
    static ClassPrototypeSet make(std::size_t num_classes, std::size_t embed_dim,
                                  std::uint64_t seed, std::vector<std::string> names = {});

    void validate() const;
};

/// Dual-encoder zero-shot classifier: a trainable image encoder, a frozen
/// snapshot of it, frozen class embeddings, and a cosine-similarity head
/// with temperature tau.
class DualEncoderModel {
public:
    DualEncoderModel() = default;
    DualEncoderModel(ImageEncoder tuned, ClassPrototypeSet prototypes, double temperature);

    ImageEncoder& tuned() { return tuned_; }
    const ImageEncoder& tuned() const { return tuned_; }
    const ImageEncoder& frozen() const { return frozen_; }
    const ClassPrototypeSet& prototypes() const { return prototypes_; }
    double temperature() const { return temperature_; }
    std::size_t num_classes() const { return prototypes_.num_classes; }

    /// Copies the current tuned parameters into the frozen slot, marking
    /// the start of fine-tuning. Construction takes an implicit snapshot;
    /// the explicit one is normally called once, after clean pre-training.
    /// Re-snapshotting after fine-tuning steps have run against it is a
    /// contract error unless forced.
    void snapshot_frozen(bool force = false);
    bool has_snapshot() const { return has_snapshot_; }

    // Bookkeeping used by the snapshot contract; training bumps this.
    void note_train_step() { ++steps_since_snapshot_; }
    std::size_t steps_since_snapshot() const { return steps_since_snapshot_; }

    // Used by checkpoint loading to restore an exact state.
    void restore_frozen(ImageEncoder frozen);

    /// Fully independent copy: cloned tuned and frozen parameters, shared
    /// nothing. Plain copies of this class share parameter storage.
    DualEncoderModel deep_copy() const;

private:
    ImageEncoder tuned_;
    ImageEncoder frozen_;
    ClassPrototypeSet prototypes_;
    double temperature_ = 0.07;
    bool has_snapshot_ = false;
    bool explicit_snapshot_ = false;
    std::size_t steps_since_snapshot_ = 0;
};

/// Batch of embeddings for x under the given encoder; gradients flow to
/// the encoder parameters iff they are trainable and grad mode is on.
Tensor encode(const ImageEncoder& encoder, const Tensor& x);

/// logits[i][j] = cos(features_i, prototypes_j) / tau with 1e-12 norm
/// guards. Zero-norm feature rows are counted in diagnostics, not errors.
Tensor zero_shot_logits(const Tensor& features, const Tensor& prototypes, double tau);

/// Argmax over zero_shot_logits with the selected encoder; ties go to the
/// lowest class index. Runs without gradient tracking.
Labels predict(const DualEncoderModel& model, const Tensor& x, bool use_frozen = false);

namespace diagnostics {
/// Count of feature rows that hit the zero-norm cosine guard.
std::uint64_t zero_norm_feature_rows();
void reset_zero_norm_feature_rows();
} // namespace diagnostics

} // namespace caw
