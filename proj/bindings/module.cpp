#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "caw/checkpoint.hpp"
#include "caw/eval.hpp"
#include "caw/gradcheck.hpp"
#include "caw/training.hpp"

namespace py = pybind11;
using namespace caw;

namespace {

Tensor tensor_from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& array,
                         bool requires_grad = false) {
    Shape shape;
    for (py::ssize_t i = 0; i < array.ndim(); ++i) {
        shape.push_back(static_cast<std::size_t>(array.shape(i)));
    }
    std::vector<double> values(array.data(), array.data() + array.size());
    return Tensor::from_data(shape, std::move(values), requires_grad);
}

py::array_t<double> numpy_from_tensor(const Tensor& tensor) {
    std::vector<py::ssize_t> shape;
    for (std::size_t d : tensor.shape()) {
        shape.push_back(static_cast<py::ssize_t>(d));
    }
    py::array_t<double> out(shape);
    std::copy(tensor.data().begin(), tensor.data().end(), out.mutable_data());
    return out;
}

Labels labels_from_numpy(const py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>& array) {
    return Labels(array.data(), array.data() + array.size());
}

py::array_t<std::int32_t> numpy_from_labels(const Labels& labels) {
    py::array_t<std::int32_t> out(static_cast<py::ssize_t>(labels.size()));
    std::copy(labels.begin(), labels.end(), out.mutable_data());
    return out;
}

py::dict breakdown_dict(const LossBreakdown& b) {
    py::dict out;
    out["ce"] = b.l_ce;
    out["ca"] = b.l_ca;
    out["reg"] = b.l_reg;
    out["total"] = b.l_total;
    out["mean_weight"] = b.mean_confidence_weight;
    return out;
}

py::dict record_dict(const TrainLogRecord& r) {
    py::dict out;
    out["epoch"] = r.epoch;
    out["step"] = r.step;
    out["loss"] = breakdown_dict(r.loss);
    out["attack_success"] = r.attack_success_rate;
    return out;
}

AttackConfig attack_config(double epsilon, int steps, std::optional<double> step_size,
                           bool random_start, double clamp_min, double clamp_max) {
    AttackConfig cfg;
    cfg.epsilon = epsilon;
    cfg.steps = steps;
    cfg.step_size = step_size.value_or(epsilon);
    cfg.random_start = random_start;
    cfg.clamp_min = clamp_min;
    cfg.clamp_max = clamp_max;
    cfg.validate();
    return cfg;
}

CawConfig caw_config(double alpha, double beta, bool detach_weight,
                     const std::string& kl_direction, bool ce_on_adv) {
    CawConfig cfg;
    cfg.alpha = alpha;
    cfg.beta = beta;
    cfg.detach_weight = detach_weight;
    cfg.kl_direction = kl_direction_from_name(kl_direction);
    cfg.ce_on_adv = ce_on_adv;
    cfg.validate();
    return cfg;
}

py::dict eval_report_dict(const EvalReport& report) {
    py::dict out;
    out["dataset"] = report.dataset;
    out["clean_accuracy"] = report.clean_accuracy;
    py::list robust;
    for (const RobustEntry& entry : report.robust) {
        py::dict item;
        item["attack"] = entry.attack;
        item["epsilon"] = entry.epsilon;
        item["steps"] = entry.steps;
        item["accuracy"] = entry.accuracy;
        robust.append(item);
    }
    out["robust"] = robust;
    out["sample_count"] = report.sample_count;
    return out;
}

std::vector<AttackSpec> parse_attack_specs(const py::list& attacks) {
    std::vector<AttackSpec> specs;
    for (const auto& item : attacks) {
        py::dict d = item.cast<py::dict>();
        AttackSpec spec;
        spec.kind = attack_kind_from_name(
            d.contains("kind") ? d["kind"].cast<std::string>() : "pgd");
        const double eps = d["epsilon"].cast<double>();
        spec.config = attack_config(
            eps, d.contains("steps") ? d["steps"].cast<int>() : 20,
            d.contains("step_size") ? std::optional<double>(d["step_size"].cast<double>())
                                    : std::nullopt,
            d.contains("random_start") && d["random_start"].cast<bool>(), 0.0, 1.0);
        specs.push_back(spec);
    }
    return specs;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "confidence-aware adversarial fine-tuning for zero-shot dual encoders";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
    py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);

    py::class_<Dataset>(m, "Dataset")
        .def_property_readonly("name", [](const Dataset& d) { return d.name; })
        .def_property_readonly("x", [](const Dataset& d) { return numpy_from_tensor(d.x); })
        .def_property_readonly("y", [](const Dataset& d) { return numpy_from_labels(d.y); })
        .def_property_readonly(
            "prototypes",
            [](const Dataset& d) { return numpy_from_tensor(d.prototypes.vectors); })
        .def_property_readonly("class_names",
                               [](const Dataset& d) { return d.prototypes.names; })
        .def("__len__", [](const Dataset& d) { return d.size(); })
        .def("save", [](const Dataset& d, const std::string& path) { save_dataset(d, path); })
        .def_static("load", [](const std::string& path) { return load_dataset(path); });

    m.def(
        "generate_dataset",
        [](std::size_t num_classes, std::size_t input_dim, std::size_t samples_per_class,
           std::size_t embed_dim, double center_scale, double noise_sigma, std::uint64_t seed,
           const std::vector<std::size_t>& prototype_linkage) {
            SyntheticDatasetSpec spec;
            spec.num_classes = num_classes;
            spec.input_dim = input_dim;
            spec.samples_per_class = samples_per_class;
            spec.embed_dim = embed_dim;
            spec.center_scale = center_scale;
            spec.noise_sigma = noise_sigma;
            spec.seed = seed;
            spec.prototype_linkage = prototype_linkage;
            return generate_synthetic(spec);
        },
        py::arg("num_classes") = 8, py::arg("input_dim") = 64,
        py::arg("samples_per_class") = 200, py::arg("embed_dim") = 32,
        py::arg("center_scale") = 0.3, py::arg("noise_sigma") = 0.05, py::arg("seed") = 0,
        py::arg("prototype_linkage") = std::vector<std::size_t>{},
        "Gaussian cluster classification dataset with linked unit-norm prototypes");

    m.def(
        "transfer_dataset",
        [](const Dataset& base, std::uint64_t shift_seed) {
            Dataset transfer = generate_synthetic(transfer_variant(base.spec, shift_seed));
            transfer.name = base.name + "-transfer" + std::to_string(shift_seed);
            return transfer;
        },
        py::arg("dataset"), py::arg("shift_seed") = 1,
        "Same geometry family, unseen centers and prototypes");

    py::class_<DualEncoderModel>(m, "Model")
        .def_property_readonly("num_classes", &DualEncoderModel::num_classes)
        .def_property_readonly("temperature", &DualEncoderModel::temperature)
        .def(
            "predict",
            [](const DualEncoderModel& model, const py::array_t<double>& x, bool use_frozen) {
                return numpy_from_labels(predict(model, tensor_from_numpy(x), use_frozen));
            },
            py::arg("x"), py::arg("use_frozen") = false)
        .def(
            "encode",
            [](const DualEncoderModel& model, const py::array_t<double>& x, bool use_frozen) {
                NoGradGuard no_grad;
                const ImageEncoder& enc = use_frozen ? model.frozen() : model.tuned();
                return numpy_from_tensor(encode(enc, tensor_from_numpy(x)));
            },
            py::arg("x"), py::arg("use_frozen") = false)
        .def("snapshot_frozen", &DualEncoderModel::snapshot_frozen, py::arg("force") = false)
        .def("parameter_hash",
             [](const DualEncoderModel& model) { return model.tuned().parameter_hash(); })
        .def("frozen_parameter_hash",
             [](const DualEncoderModel& model) { return model.frozen().parameter_hash(); })
        .def("deep_copy", &DualEncoderModel::deep_copy)
        .def(
            "save",
            [](const DualEncoderModel& model, const std::string& path, std::uint64_t seed) {
                save_checkpoint(model, path, seed);
            },
            py::arg("path"), py::arg("seed") = 0)
        .def_static("load", [](const std::string& path) { return load_checkpoint(path); });

    m.def(
        "make_model",
        [](std::size_t input_dim, const std::vector<std::size_t>& hidden_dims,
           std::size_t embed_dim, std::size_t num_classes, double temperature,
           std::uint64_t seed, const py::object& prototypes) {
            ClassPrototypeSet protos;
            if (prototypes.is_none()) {
                protos = ClassPrototypeSet::make(num_classes, embed_dim, seed + 1);
            } else {
                Tensor vectors = tensor_from_numpy(prototypes.cast<py::array_t<double>>());
                protos.num_classes = vectors.rows();
                protos.embed_dim = vectors.cols();
                protos.vectors = vectors;
                for (std::size_t i = 0; i < protos.num_classes; ++i) {
                    protos.names.push_back("class_" + std::to_string(i));
                }
                protos.validate();
            }
            EncoderConfig cfg{input_dim, hidden_dims, embed_dim};
            return DualEncoderModel(ImageEncoder::random_init(cfg, seed), std::move(protos),
                                    temperature);
        },
        py::arg("input_dim") = 64, py::arg("hidden_dims") = std::vector<std::size_t>{128, 128},
        py::arg("embed_dim") = 32, py::arg("num_classes") = 8, py::arg("temperature") = 0.07,
        py::arg("seed") = 0, py::arg("prototypes") = py::none(),
        "Dual-encoder zero-shot classifier with a frozen snapshot of its own encoder");

    m.def(
        "model_for_dataset",
        [](const Dataset& dataset, const std::vector<std::size_t>& hidden_dims,
           double temperature, std::uint64_t seed) {
            EncoderConfig cfg{dataset.spec.input_dim, hidden_dims, dataset.spec.embed_dim};
            return DualEncoderModel(ImageEncoder::random_init(cfg, seed), dataset.prototypes,
                                    temperature);
        },
        py::arg("dataset"), py::arg("hidden_dims") = std::vector<std::size_t>{128, 128},
        py::arg("temperature") = 0.07, py::arg("seed") = 0,
        "Model whose classification head uses the dataset's prototype set");

    m.def(
        "attack",
        [](const DualEncoderModel& model, const py::array_t<double>& x,
           const py::array_t<std::int32_t>& y, const std::string& kind, double epsilon,
           int steps, std::optional<double> step_size, bool random_start, std::uint64_t seed) {
            AttackResult res =
                run_attack(attack_kind_from_name(kind), model, tensor_from_numpy(x),
                           labels_from_numpy(y),
                           attack_config(epsilon, steps, step_size, random_start, 0.0, 1.0),
                           seed);
            py::dict out;
            out["x_adv"] = numpy_from_tensor(res.x_adv);
            out["loss_trace"] = res.loss_trace;
            py::list success;
            for (std::uint8_t flag : res.success_mask) {
                success.append(flag != 0);
            }
            out["success"] = success;
            return out;
        },
        py::arg("model"), py::arg("x"), py::arg("y"), py::arg("kind") = "pgd",
        py::arg("epsilon") = 1.0 / 255.0, py::arg("steps") = 2,
        py::arg("step_size") = py::none(), py::arg("random_start") = false,
        py::arg("seed") = 0,
        "l-inf FGSM/PGD/CW attack against the tuned encoder; x_adv stays within epsilon");

    m.def(
        "total_loss",
        [](const DualEncoderModel& model, const py::array_t<double>& x_clean,
           const py::array_t<double>& x_adv, const py::array_t<std::int32_t>& y, double alpha,
           double beta, bool detach_weight, const std::string& kl_direction, bool ce_on_adv) {
            NoGradGuard no_grad;
            LossResult res = total_loss(
                model, tensor_from_numpy(x_clean), tensor_from_numpy(x_adv),
                labels_from_numpy(y),
                caw_config(alpha, beta, detach_weight, kl_direction, ce_on_adv));
            return breakdown_dict(res.breakdown);
        },
        py::arg("model"), py::arg("x_clean"), py::arg("x_adv"), py::arg("y"),
        py::arg("alpha") = 6.0, py::arg("beta") = 3.0, py::arg("detach_weight") = true,
        py::arg("kl_direction") = "adv_first", py::arg("ce_on_adv") = true,
        "Loss breakdown: ce, ca, reg, total, mean confidence weight");

    m.def(
        "fit",
        [](DualEncoderModel& model, const Dataset& dataset, double alpha, double beta,
           double learning_rate, double momentum, double weight_decay, std::size_t batch_size,
           std::size_t epochs, std::uint64_t seed, double epsilon, int attack_steps,
           std::optional<double> attack_step_size, bool detach_weight,
           const std::string& kl_direction, bool ce_on_adv) {
            TrainConfig cfg;
            cfg.loss = caw_config(alpha, beta, detach_weight, kl_direction, ce_on_adv);
            cfg.learning_rate = learning_rate;
            cfg.momentum = momentum;
            cfg.weight_decay = weight_decay;
            cfg.batch_size = batch_size;
            cfg.epochs = epochs;
            cfg.seed = seed;
            cfg.inner_attack =
                attack_config(epsilon, attack_steps, attack_step_size, false, 0.0, 1.0);
            FitResult result = fit(model, dataset, cfg);
            py::list records;
            for (const TrainLogRecord& record : result.records) {
                records.append(record_dict(record));
            }
            return records;
        },
        py::arg("model"), py::arg("dataset"), py::arg("alpha") = 6.0, py::arg("beta") = 3.0,
        py::arg("learning_rate") = 1e-4, py::arg("momentum") = 0.9,
        py::arg("weight_decay") = 0.0, py::arg("batch_size") = 128, py::arg("epochs") = 10,
        py::arg("seed") = 0, py::arg("epsilon") = 1.0 / 255.0, py::arg("attack_steps") = 2,
        py::arg("attack_step_size") = py::none(), py::arg("detach_weight") = true,
        py::arg("kl_direction") = "adv_first", py::arg("ce_on_adv") = true,
        "Adversarial fine-tuning: inner PGD on cross-entropy, outer SGD on the total loss");

    m.def(
        "clean_pretrain",
        [](DualEncoderModel& model, const Dataset& dataset, std::size_t epochs,
           double learning_rate, double momentum, std::size_t batch_size, std::uint64_t seed) {
            TrainConfig cfg;
            cfg.learning_rate = learning_rate;
            cfg.momentum = momentum;
            cfg.batch_size = batch_size;
            cfg.seed = seed;
            FitResult result = fit(model, dataset, clean_variant(cfg, epochs));
            py::list records;
            for (const TrainLogRecord& record : result.records) {
                records.append(record_dict(record));
            }
            return records;
        },
        py::arg("model"), py::arg("dataset"), py::arg("epochs") = 20,
        py::arg("learning_rate") = 1e-4, py::arg("momentum") = 0.9,
        py::arg("batch_size") = 128, py::arg("seed") = 0,
        "Standard cross-entropy training on clean inputs (no attack, no auxiliary terms)");

    m.def(
        "evaluate",
        [](const DualEncoderModel& model, const Dataset& dataset, const py::list& attacks,
           std::size_t batch_size, std::uint64_t seed) {
            return eval_report_dict(
                evaluate(model, dataset, parse_attack_specs(attacks), batch_size, seed));
        },
        py::arg("model"), py::arg("dataset"), py::arg("attacks") = py::list(),
        py::arg("batch_size") = 256, py::arg("seed") = 0,
        "Clean accuracy plus robust accuracy per attack spec "
        "({kind, epsilon, steps, step_size, random_start})");

    m.def(
        "run_ablation",
        [](const Dataset& train_set, const Dataset& eval_set,
           const std::vector<std::size_t>& hidden_dims, double temperature, double alpha,
           double beta, double learning_rate, double momentum, std::size_t batch_size,
           std::size_t epochs, std::size_t pretrain_epochs, std::uint64_t seed, double epsilon,
           int attack_steps, const py::list& eval_attacks) {
            EncoderConfig enc{train_set.spec.input_dim, hidden_dims,
                              train_set.spec.embed_dim};
            TrainConfig cfg;
            cfg.loss.alpha = alpha;
            cfg.loss.beta = beta;
            cfg.learning_rate = learning_rate;
            cfg.momentum = momentum;
            cfg.batch_size = batch_size;
            cfg.epochs = epochs;
            cfg.seed = seed;
            cfg.inner_attack = attack_config(epsilon, attack_steps, std::nullopt, false, 0, 1);
            AblationReport report = run_ablation(enc, temperature, cfg, pretrain_epochs,
                                                 train_set, eval_set,
                                                 parse_attack_specs(eval_attacks));
            py::list arms;
            for (const AblationArm& arm : report.arms) {
                py::dict item;
                item["name"] = arm.name;
                item["alpha"] = arm.alpha;
                item["beta"] = arm.beta;
                item["robust_accuracy"] = arm.robust_accuracy;
                item["clean_accuracy"] = arm.clean_accuracy;
                item["average"] = arm.average;
                item["report"] = eval_report_dict(arm.report);
                arms.append(item);
            }
            py::dict out;
            out["arms"] = arms;
            out["seed"] = report.seed;
            return out;
        },
        py::arg("train_set"), py::arg("eval_set"),
        py::arg("hidden_dims") = std::vector<std::size_t>{128, 128},
        py::arg("temperature") = 0.07, py::arg("alpha") = 6.0, py::arg("beta") = 3.0,
        py::arg("learning_rate") = 1e-4, py::arg("momentum") = 0.9,
        py::arg("batch_size") = 128, py::arg("epochs") = 10, py::arg("pretrain_epochs") = 20,
        py::arg("seed") = 0, py::arg("epsilon") = 1.0 / 255.0, py::arg("attack_steps") = 2,
        py::arg("eval_attacks") = py::list(),
        "Train the three loss-component arms from one shared snapshot and evaluate each");

    m.def(
        "run_gradcheck",
        [](std::size_t states, double h, double tolerance, std::uint64_t seed) {
            GradcheckOptions options;
            options.states = states;
            options.h = h;
            options.tolerance = tolerance;
            options.seed = seed;
            GradcheckReport report = run_gradcheck(options);
            py::dict out;
            out["passed"] = report.passed;
            out["max_rel_error"] = report.max_rel_error;
            py::list components;
            for (const GradcheckComponentResult& component : report.components) {
                py::dict item;
                item["component"] = component.component;
                item["max_rel_error"] = component.max_rel_error;
                item["passed"] = component.passed;
                components.append(item);
            }
            out["components"] = components;
            return out;
        },
        py::arg("states") = 100, py::arg("h") = 1e-5, py::arg("tolerance") = 1e-4,
        py::arg("seed") = 0,
        "Finite-difference verification of every loss component's gradient");

    // Direct op surface, mainly for cross-checking from Python.
    m.def("softmax", [](const py::array_t<double>& logits) {
        return numpy_from_tensor(softmax_rows(tensor_from_numpy(logits)));
    });
    m.def("kl_divergence", [](const py::array_t<double>& p, const py::array_t<double>& q) {
        return numpy_from_tensor(kl_divergence_rows(tensor_from_numpy(p), tensor_from_numpy(q)));
    });
    m.def("cross_entropy",
          [](const py::array_t<double>& logits, const py::array_t<std::int32_t>& y) {
              return cross_entropy_with_logits(tensor_from_numpy(logits), labels_from_numpy(y))
                  .item();
          });
    m.def("project_linf", [](const py::array_t<double>& x_adv, const py::array_t<double>& x,
                             double epsilon, double clamp_min, double clamp_max) {
        return numpy_from_tensor(project_linf(tensor_from_numpy(x_adv), tensor_from_numpy(x),
                                              epsilon, clamp_min, clamp_max));
    });

#ifdef CAW_VERSION
    m.attr("__version__") = CAW_VERSION;
#else
    m.attr("__version__") = "dev";
#endif
}
