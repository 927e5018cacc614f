#include "caw/checkpoint.hpp"

#include "container.hpp"

namespace caw {

namespace {
constexpr const char* kCheckpointMagic = "CAWCKPT\n";
constexpr const char* kOptimizerMagic = "CAWOPTS\n";

void append_params(std::string& payload, const std::vector<Tensor>& params) {
    for (const Tensor& p : params) {
        for (double v : p.data()) {
            container::append_f64(payload, v);
        }
    }
}

std::vector<Tensor> read_params(container::Reader& reader, const EncoderConfig& cfg) {
    std::vector<std::size_t> dims;
    dims.push_back(cfg.input_dim);
    dims.insert(dims.end(), cfg.hidden_dims.begin(), cfg.hidden_dims.end());
    dims.push_back(cfg.embed_dim);
    std::vector<Tensor> params;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        std::vector<double> w(dims[l] * dims[l + 1]);
        for (double& v : w) {
            v = reader.read_f64();
        }
        params.push_back(Tensor::from_data({dims[l], dims[l + 1]}, std::move(w)));
        std::vector<double> b(dims[l + 1]);
        for (double& v : b) {
            v = reader.read_f64();
        }
        params.push_back(Tensor::from_data({dims[l + 1]}, std::move(b)));
    }
    return params;
}

} // namespace

void save_checkpoint(const DualEncoderModel& model, const std::string& path,
                     std::uint64_t seed, const std::string& config_digest) {
    const EncoderConfig& cfg = model.tuned().config();
    std::size_t param_count = 0;
    for (const Tensor& p : model.tuned().parameters()) {
        param_count += p.size();
    }

    nlohmann::json header;
    header["format_version"] = container::kFormatVersion;
    header["kind"] = "checkpoint";
    header["input_dim"] = cfg.input_dim;
    header["hidden_dims"] = cfg.hidden_dims;
    header["embed_dim"] = cfg.embed_dim;
    header["num_classes"] = model.num_classes();
    header["class_names"] = model.prototypes().names;
    header["temperature"] = model.temperature();
    header["seed"] = seed;
    header["config_digest"] = config_digest;
    header["param_count"] = param_count;
    header["sections"] = {"tuned", "frozen", "prototypes"};

    std::string payload;
    payload.reserve((2 * param_count + model.prototypes().vectors.size()) * 8);
    append_params(payload, model.tuned().parameters());
    append_params(payload, model.frozen().parameters());
    for (double v : model.prototypes().vectors.data()) {
        container::append_f64(payload, v);
    }
    container::write_file(path, kCheckpointMagic, header, payload);
}

DualEncoderModel load_checkpoint(const std::string& path) {
    auto loaded = container::read_file(path, kCheckpointMagic);
    const auto& header = loaded.header;
    if (header.value("kind", "") != "checkpoint") {
        throw FormatError("'" + path + "' is not a checkpoint container");
    }
    EncoderConfig cfg;
    cfg.input_dim = header.at("input_dim").get<std::size_t>();
    cfg.hidden_dims = header.at("hidden_dims").get<std::vector<std::size_t>>();
    cfg.embed_dim = header.at("embed_dim").get<std::size_t>();
    const std::size_t num_classes = header.at("num_classes").get<std::size_t>();
    const double temperature = header.at("temperature").get<double>();

    ImageEncoder tuned =
        ImageEncoder::from_parameters(cfg, read_params(loaded.payload, cfg), true);
    ImageEncoder frozen =
        ImageEncoder::from_parameters(cfg, read_params(loaded.payload, cfg), false);

    std::vector<std::vector<double>> proto_rows(num_classes,
                                                std::vector<double>(cfg.embed_dim));
    for (auto& row : proto_rows) {
        for (double& v : row) {
            v = loaded.payload.read_f64();
        }
    }
    container::expect_consumed(loaded.payload, path);

    ClassPrototypeSet prototypes;
    prototypes.num_classes = num_classes;
    prototypes.embed_dim = cfg.embed_dim;
    prototypes.vectors = Tensor::from_rows(proto_rows, false);
    prototypes.names = header.at("class_names").get<std::vector<std::string>>();

    DualEncoderModel model(std::move(tuned), std::move(prototypes), temperature);
    model.restore_frozen(std::move(frozen));
    return model;
}

void save_optimizer(const OptimizerState& state, const std::string& path) {
    nlohmann::json header;
    header["format_version"] = container::kFormatVersion;
    header["kind"] = "optimizer";
    header["step"] = state.step;
    std::vector<std::size_t> sizes;
    for (const auto& v : state.velocity) {
        sizes.push_back(v.size());
    }
    header["buffer_sizes"] = sizes;

    std::string payload;
    for (const auto& buffer : state.velocity) {
        for (double v : buffer) {
            container::append_f64(payload, v);
        }
    }
    container::write_file(path, kOptimizerMagic, header, payload);
}

OptimizerState load_optimizer(const std::string& path, const DualEncoderModel& model) {
    auto loaded = container::read_file(path, kOptimizerMagic);
    const auto& header = loaded.header;
    if (header.value("kind", "") != "optimizer") {
        throw FormatError("'" + path + "' is not an optimizer container");
    }
    OptimizerState state;
    state.step = header.at("step").get<std::uint64_t>();
    const auto sizes = header.at("buffer_sizes").get<std::vector<std::size_t>>();
    const auto& params = model.tuned().parameters();
    if (sizes.size() != params.size()) {
        throw PayloadSizeError("'" + path + "' optimizer buffers do not match the model");
    }
    for (std::size_t t = 0; t < sizes.size(); ++t) {
        if (sizes[t] != params[t].size()) {
            throw PayloadSizeError("'" + path + "' velocity buffer " + std::to_string(t) +
                                   " does not match its parameter");
        }
        std::vector<double> buffer(sizes[t]);
        for (double& v : buffer) {
            v = loaded.payload.read_f64();
        }
        state.velocity.push_back(std::move(buffer));
    }
    container::expect_consumed(loaded.payload, path);
    return state;
}

} // namespace caw
