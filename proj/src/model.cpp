#include "caw/model.hpp"

#include <cmath>

#include "caw/rng.hpp"

namespace caw {

namespace {

std::atomic<std::uint64_t> g_zero_norm_rows{0};

constexpr double kNormGuard = 1e-12;

std::uint64_t fnv1a(std::uint64_t h, const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace

namespace diagnostics {
std::uint64_t zero_norm_feature_rows() { return g_zero_norm_rows.load(); }
void reset_zero_norm_feature_rows() { g_zero_norm_rows.store(0); }
} // namespace diagnostics

void EncoderConfig::validate() const {
    if (input_dim == 0 || embed_dim == 0) {
        throw ConfigError("encoder dims must be positive");
    }
    for (std::size_t h : hidden_dims) {
        if (h == 0) {
            throw ConfigError("encoder hidden dims must be positive");
        }
    }
}

ImageEncoder ImageEncoder::random_init(const EncoderConfig& cfg, std::uint64_t seed,
                                       bool trainable) {
    cfg.validate();
    ImageEncoder enc;
    enc.cfg_ = cfg;
    enc.trainable_ = trainable;
    Rng rng(seed);
    std::vector<std::size_t> dims;
    dims.push_back(cfg.input_dim);
    dims.insert(dims.end(), cfg.hidden_dims.begin(), cfg.hidden_dims.end());
    dims.push_back(cfg.embed_dim);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const std::size_t fan_in = dims[l], fan_out = dims[l + 1];
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::vector<double> w(fan_in * fan_out);
        for (double& v : w) {
            v = rng.uniform(-limit, limit);
        }
        enc.params_.push_back(Tensor::from_data({fan_in, fan_out}, std::move(w), trainable));
        enc.params_.push_back(Tensor::zeros({fan_out}, trainable));
    }
    return enc;
}

ImageEncoder ImageEncoder::identity(std::size_t dim) {
    ImageEncoder enc;
    enc.cfg_ = EncoderConfig{dim, {}, dim};
    enc.trainable_ = false;
    // params_ stays empty; forward is a passthrough.
    return enc;
}

ImageEncoder ImageEncoder::from_parameters(const EncoderConfig& cfg, std::vector<Tensor> params,
                                           bool trainable) {
    cfg.validate();
    std::vector<std::size_t> dims;
    dims.push_back(cfg.input_dim);
    dims.insert(dims.end(), cfg.hidden_dims.begin(), cfg.hidden_dims.end());
    dims.push_back(cfg.embed_dim);
    if (params.size() != 2 * (dims.size() - 1)) {
        throw ContractError("from_parameters: wrong parameter count for the layer layout");
    }
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        if (params[2 * l].shape() != Shape{dims[l], dims[l + 1]} ||
            params[2 * l + 1].shape() != Shape{dims[l + 1]}) {
            throw ContractError("from_parameters: parameter shape mismatch at layer " +
                                std::to_string(l));
        }
    }
    ImageEncoder enc;
    enc.cfg_ = cfg;
    enc.trainable_ = trainable;
    enc.params_.reserve(params.size());
    for (Tensor& p : params) {
        enc.params_.push_back(p.clone(trainable));
    }
    return enc;
}

Tensor ImageEncoder::forward(const Tensor& x) const {
    if (x.ndim() != 2 || x.cols() != cfg_.input_dim) {
        throw DimensionError("encode: input shape " + detail::shape_str(x.shape()) +
                             " does not match input_dim " + std::to_string(cfg_.input_dim));
    }
    if (params_.empty()) {
        if (cfg_.input_dim != cfg_.embed_dim) {
            throw ContractError("identity encoder requires input_dim == embed_dim");
        }
        // Identity map; preserves gradient flow to x.
        return add_scalar(x, 0.0);
    }
    Tensor h = x;
    const std::size_t n_layers = params_.size() / 2;
    for (std::size_t l = 0; l < n_layers; ++l) {
        h = add_row_broadcast(matmul(h, params_[2 * l]), params_[2 * l + 1]);
        if (l + 1 < n_layers) {
            h = tanh(h);
        }
    }
    return h;
}

ImageEncoder ImageEncoder::snapshot(bool trainable) const {
    ImageEncoder copy;
    copy.cfg_ = cfg_;
    copy.trainable_ = trainable;
    copy.params_.reserve(params_.size());
    for (const Tensor& p : params_) {
        copy.params_.push_back(p.clone(trainable));
    }
    return copy;
}

std::uint64_t ImageEncoder::parameter_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const Tensor& p : params_) {
        h = fnv1a(h, p.data().data(), p.data().size_bytes());
    }
    return h;
}

void ImageEncoder::copy_parameters_from(const ImageEncoder& other) {
    if (other.params_.size() != params_.size()) {
        throw ContractError("copy_parameters_from: layer layout mismatch");
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i].shape() != other.params_[i].shape()) {
            throw ContractError("copy_parameters_from: parameter shape mismatch");
        }
        auto dst = params_[i].data_mut();
        auto src = other.params_[i].data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

ClassPrototypeSet ClassPrototypeSet::make(std::size_t num_classes, std::size_t embed_dim,
                                          std::uint64_t seed, std::vector<std::string> names) {
    if (num_classes == 0 || embed_dim == 0) {
        throw ConfigError("prototypes need num_classes > 0 and embed_dim > 0");
    }
    Rng rng(seed);
    std::vector<std::vector<double>> rows(num_classes, std::vector<double>(embed_dim));
    for (auto& row : rows) {
        for (double& v : row) {
            v = rng.normal();
        }
    }
    const bool orthonormalize = num_classes <= embed_dim;
    for (std::size_t i = 0; i < num_classes; ++i) {
        if (orthonormalize) {
            // Gram-Schmidt against the previous rows.
            for (std::size_t k = 0; k < i; ++k) {
                double dot = 0.0;
                for (std::size_t j = 0; j < embed_dim; ++j) {
                    dot += rows[i][j] * rows[k][j];
                }
                for (std::size_t j = 0; j < embed_dim; ++j) {
                    rows[i][j] -= dot * rows[k][j];
                }
            }
        }
        double norm = 0.0;
        for (double v : rows[i]) {
            norm += v * v;
        }
        norm = std::sqrt(norm);
        if (norm < 1e-8) {
            // Degenerate draw (vanishing after Gram-Schmidt); redraw.
            for (double& v : rows[i]) {
                v = rng.normal();
            }
            --i;
            continue;
        }
        for (double& v : rows[i]) {
            v /= norm;
        }
    }
    ClassPrototypeSet set;
    set.num_classes = num_classes;
    set.embed_dim = embed_dim;
    set.vectors = Tensor::from_rows(rows, false);
    if (names.empty()) {
        for (std::size_t i = 0; i < num_classes; ++i) {
            names.push_back("class_" + std::to_string(i));
        }
    }
    set.names = std::move(names);
    set.validate();
    return set;
}

void ClassPrototypeSet::validate() const {
    if (vectors.ndim() != 2 || vectors.rows() != num_classes || vectors.cols() != embed_dim) {
        throw ContractError("prototype tensor shape mismatch");
    }
    if (names.size() != num_classes) {
        throw ContractError("prototype names count mismatch");
    }
    for (std::size_t i = 0; i < num_classes; ++i) {
        double norm = 0.0;
        for (std::size_t j = 0; j < embed_dim; ++j) {
            norm += vectors.at(i, j) * vectors.at(i, j);
        }
        if (std::abs(std::sqrt(norm) - 1.0) > 1e-9) {
            throw ContractError("prototype row " + std::to_string(i) + " is not unit norm");
        }
        for (std::size_t k = 0; k < i; ++k) {
            double diff = 0.0;
            for (std::size_t j = 0; j < embed_dim; ++j) {
                const double d = vectors.at(i, j) - vectors.at(k, j);
                diff += d * d;
            }
            if (diff < 1e-18) {
                throw ContractError("prototype rows " + std::to_string(i) + " and " +
                                    std::to_string(k) + " coincide");
            }
        }
    }
}

DualEncoderModel::DualEncoderModel(ImageEncoder tuned, ClassPrototypeSet prototypes,
                                   double temperature)
    : tuned_(std::move(tuned)), prototypes_(std::move(prototypes)), temperature_(temperature) {
    if (!(temperature_ > 0.0)) {
        throw ConfigError("temperature must be positive");
    }
    if (tuned_.embed_dim() != prototypes_.embed_dim) {
        throw DimensionError("encoder embed_dim does not match prototype embed_dim");
    }
    frozen_ = tuned_.snapshot(false);
    has_snapshot_ = true;
}

void DualEncoderModel::snapshot_frozen(bool force) {
    if (explicit_snapshot_ && steps_since_snapshot_ > 0 && !force) {
        throw ContractError("snapshot_frozen: fine-tuning already ran against the current "
                            "snapshot; pass force to override");
    }
    frozen_ = tuned_.snapshot(false);
    has_snapshot_ = true;
    explicit_snapshot_ = true;
    steps_since_snapshot_ = 0;
}

void DualEncoderModel::restore_frozen(ImageEncoder frozen) {
    frozen_ = std::move(frozen);
    has_snapshot_ = true;
    steps_since_snapshot_ = 0;
}

DualEncoderModel DualEncoderModel::deep_copy() const {
    DualEncoderModel copy;
    copy.tuned_ = tuned_.snapshot(tuned_.trainable());
    copy.frozen_ = frozen_.snapshot(false);
    copy.prototypes_ = prototypes_;
    copy.temperature_ = temperature_;
    copy.has_snapshot_ = has_snapshot_;
    copy.explicit_snapshot_ = explicit_snapshot_;
    copy.steps_since_snapshot_ = steps_since_snapshot_;
    return copy;
}

Tensor encode(const ImageEncoder& encoder, const Tensor& x) { return encoder.forward(x); }

Tensor zero_shot_logits(const Tensor& features, const Tensor& prototypes, double tau) {
    if (!(tau > 0.0)) {
        throw ConfigError("zero_shot_logits: tau must be positive");
    }
    if (features.ndim() != 2 || prototypes.ndim() != 2 ||
        features.cols() != prototypes.cols()) {
        throw DimensionError("zero_shot_logits: feature shape " +
                             detail::shape_str(features.shape()) +
                             " incompatible with prototypes " +
                             detail::shape_str(prototypes.shape()));
    }
    const std::size_t b = features.rows(), d = features.cols();
    for (std::size_t i = 0; i < b; ++i) {
        double norm = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = features.data()[i * d + j];
            norm += v * v;
        }
        if (std::sqrt(norm) < kNormGuard) {
            g_zero_norm_rows.fetch_add(1);
        }
    }
    Tensor cosines = matmul_nt(normalize_rows(features), normalize_rows(prototypes));
    return mul_scalar(cosines, 1.0 / tau);
}

Labels predict(const DualEncoderModel& model, const Tensor& x, bool use_frozen) {
    NoGradGuard no_grad;
    const ImageEncoder& enc = use_frozen ? model.frozen() : model.tuned();
    Tensor logits = zero_shot_logits(encode(enc, x), model.prototypes().vectors,
                                     model.temperature());
    const std::size_t b = logits.rows(), c = logits.cols();
    Labels out(b);
    for (std::size_t i = 0; i < b; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j) {
            if (logits.at(i, j) > logits.at(i, best)) {
                best = j; // strict >: ties keep the lowest index
            }
        }
        out[i] = static_cast<std::int32_t>(best);
    }
    return out;
}

} // namespace caw
