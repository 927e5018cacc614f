#include "caw/data.hpp"

#include <algorithm>
#include <cmath>

#include "caw/rng.hpp"
#include "container.hpp"

namespace caw {

namespace {
constexpr const char* kDatasetMagic = "CAWDATA\n";
}

void SyntheticDatasetSpec::validate() const {
    if (num_classes == 0) {
        throw ConfigError("dataset needs at least one class");
    }
    if (input_dim == 0 || embed_dim == 0) {
        throw ConfigError("dataset dims must be positive");
    }
    if (samples_per_class == 0) {
        throw ConfigError("dataset needs at least one sample per class");
    }
    if (noise_sigma < 0.0 || !std::isfinite(noise_sigma)) {
        throw ConfigError("noise_sigma must be >= 0");
    }
    if (center_scale <= 0.0 || center_scale > 1.0) {
        throw ConfigError("center_scale must be in (0, 1]");
    }
    if (!prototype_linkage.empty()) {
        if (prototype_linkage.size() != num_classes) {
            throw ConfigError("prototype_linkage must list one prototype per class");
        }
        std::vector<bool> used(num_classes, false);
        for (std::size_t idx : prototype_linkage) {
            if (idx >= num_classes || used[idx]) {
                throw ConfigError("prototype_linkage must be a permutation of class indices");
            }
            used[idx] = true;
        }
    }
}

Dataset generate_synthetic(const SyntheticDatasetSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const std::size_t n = spec.num_classes * spec.samples_per_class;

    // Cluster centers in a box of width center_scale around 0.5.
    const double lo = 0.5 - spec.center_scale / 2.0;
    const double hi = 0.5 + spec.center_scale / 2.0;
    std::vector<std::vector<double>> centers(spec.num_classes,
                                             std::vector<double>(spec.input_dim));
    for (auto& center : centers) {
        for (double& v : center) {
            v = rng.uniform(lo, hi);
        }
    }

    std::vector<double> x(n * spec.input_dim);
    Labels y(n);
    std::size_t row = 0;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        for (std::size_t s = 0; s < spec.samples_per_class; ++s, ++row) {
            for (std::size_t j = 0; j < spec.input_dim; ++j) {
                const double v = centers[c][j] + spec.noise_sigma * rng.normal();
                x[row * spec.input_dim + j] = std::clamp(v, 0.0, 1.0);
            }
            y[row] = static_cast<std::int32_t>(c);
        }
    }

    // Prototype pool, reordered so row c is class c's embedding.
    ClassPrototypeSet pool =
        ClassPrototypeSet::make(spec.num_classes, spec.embed_dim, rng.fork(777).next_u64());
    ClassPrototypeSet prototypes = pool;
    if (!spec.prototype_linkage.empty()) {
        std::vector<std::vector<double>> rows(spec.num_classes,
                                              std::vector<double>(spec.embed_dim));
        for (std::size_t c = 0; c < spec.num_classes; ++c) {
            const std::size_t src = spec.prototype_linkage[c];
            for (std::size_t j = 0; j < spec.embed_dim; ++j) {
                rows[c][j] = pool.vectors.at(src, j);
            }
            prototypes.names[c] = pool.names[src];
        }
        prototypes.vectors = Tensor::from_rows(rows, false);
    }
    prototypes.validate();

    Dataset dataset;
    dataset.name = "synthetic-c" + std::to_string(spec.num_classes) + "-seed" +
                   std::to_string(spec.seed);
    dataset.x = Tensor::from_data({n, spec.input_dim}, std::move(x));
    dataset.y = std::move(y);
    dataset.prototypes = std::move(prototypes);
    dataset.spec = spec;
    return dataset;
}

SyntheticDatasetSpec transfer_variant(SyntheticDatasetSpec spec, std::uint64_t shift_seed) {
    // New centers and a new (unseen) prototype set; same geometry family.
    spec.seed = Rng(spec.seed).fork(shift_seed ^ 0x5eedULL).next_u64();
    return spec;
}

void save_dataset(const Dataset& dataset, const std::string& path) {
    nlohmann::json header;
    header["format_version"] = container::kFormatVersion;
    header["kind"] = "dataset";
    header["name"] = dataset.name;
    header["n"] = dataset.size();
    header["input_dim"] = dataset.spec.input_dim;
    header["num_classes"] = dataset.prototypes.num_classes;
    header["embed_dim"] = dataset.prototypes.embed_dim;
    header["class_names"] = dataset.prototypes.names;
    header["spec"] = {{"num_classes", dataset.spec.num_classes},
                      {"input_dim", dataset.spec.input_dim},
                      {"samples_per_class", dataset.spec.samples_per_class},
                      {"embed_dim", dataset.spec.embed_dim},
                      {"center_scale", dataset.spec.center_scale},
                      {"noise_sigma", dataset.spec.noise_sigma},
                      {"seed", dataset.spec.seed},
                      {"prototype_linkage", dataset.spec.prototype_linkage}};

    std::string payload;
    payload.reserve(dataset.x.size() * 8 + dataset.prototypes.vectors.size() * 8 +
                    dataset.y.size() * 4);
    for (double v : dataset.x.data()) {
        container::append_f64(payload, v);
    }
    for (double v : dataset.prototypes.vectors.data()) {
        container::append_f64(payload, v);
    }
    for (std::int32_t label : dataset.y) {
        container::append_i32(payload, label);
    }
    container::write_file(path, kDatasetMagic, header, payload);
}

Dataset load_dataset(const std::string& path) {
    auto loaded = container::read_file(path, kDatasetMagic);
    const auto& header = loaded.header;
    if (header.value("kind", "") != "dataset") {
        throw FormatError("'" + path + "' is not a dataset container");
    }

    Dataset dataset;
    dataset.name = header.value("name", "");
    const std::size_t n = header.at("n").get<std::size_t>();
    const std::size_t input_dim = header.at("input_dim").get<std::size_t>();
    const std::size_t num_classes = header.at("num_classes").get<std::size_t>();
    const std::size_t embed_dim = header.at("embed_dim").get<std::size_t>();

    const auto& spec_json = header.at("spec");
    dataset.spec.num_classes = spec_json.at("num_classes").get<std::size_t>();
    dataset.spec.input_dim = spec_json.at("input_dim").get<std::size_t>();
    dataset.spec.samples_per_class = spec_json.at("samples_per_class").get<std::size_t>();
    dataset.spec.embed_dim = spec_json.at("embed_dim").get<std::size_t>();
    dataset.spec.center_scale = spec_json.at("center_scale").get<double>();
    dataset.spec.noise_sigma = spec_json.at("noise_sigma").get<double>();
    dataset.spec.seed = spec_json.at("seed").get<std::uint64_t>();
    dataset.spec.prototype_linkage =
        spec_json.at("prototype_linkage").get<std::vector<std::size_t>>();

    std::vector<double> x(n * input_dim);
    for (double& v : x) {
        v = loaded.payload.read_f64();
    }
    std::vector<std::vector<double>> proto_rows(num_classes, std::vector<double>(embed_dim));
    for (auto& row : proto_rows) {
        for (double& v : row) {
            v = loaded.payload.read_f64();
        }
    }
    Labels y(n);
    for (auto& label : y) {
        label = loaded.payload.read_i32();
    }
    container::expect_consumed(loaded.payload, path);

    dataset.x = Tensor::from_data({n, input_dim}, std::move(x));
    dataset.y = std::move(y);
    dataset.prototypes.num_classes = num_classes;
    dataset.prototypes.embed_dim = embed_dim;
    dataset.prototypes.vectors = Tensor::from_rows(proto_rows, false);
    dataset.prototypes.names = header.at("class_names").get<std::vector<std::string>>();
    return dataset;
}

} // namespace caw
