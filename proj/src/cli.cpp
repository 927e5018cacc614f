#include "caw/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "caw/checkpoint.hpp"
#include "caw/config.hpp"
#include "caw/eval.hpp"
#include "caw/gradcheck.hpp"
#include "caw/log.hpp"
#include "caw/rng.hpp"

namespace caw::cli {

namespace {

namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;
constexpr int kExitGradcheck = 5;

struct CommonArgs {
    std::string config_path;
    bool json = false;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<double> eps;
    std::optional<int> steps;
    std::optional<double> step_size;
    std::optional<double> alpha;
    std::optional<double> beta;
    std::optional<std::size_t> epochs;
    std::optional<std::string> attack_kind;
    bool random_start = false;
};

void add_common_options(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON config file");
    cmd->add_flag("--json", args.json, "machine-readable JSON on stdout");
    cmd->add_option("--seed", args.seed, "override the run seed");
    cmd->add_option("--out", args.out_dir, "override the output directory");
    cmd->add_option("--eps", args.eps, "override the attack budget");
    cmd->add_option("--steps", args.steps, "override the attack step count");
    cmd->add_option("--step-size", args.step_size, "override the attack step size");
    cmd->add_option("--alpha", args.alpha, "override the confidence-aware weight");
    cmd->add_option("--beta", args.beta, "override the regularizer weight");
    cmd->add_option("--epochs", args.epochs, "override the training epochs");
    cmd->add_option("--attack", args.attack_kind, "attack kind: fgsm, pgd, cw");
    cmd->add_flag("--random-start", args.random_start, "random start inside the eps ball");
}

RunConfig resolve_config(const CommonArgs& args, const std::string& command) {
    RunConfig cfg =
        args.config_path.empty() ? default_config() : load_config(args.config_path);
    if (args.seed) {
        cfg.seed = *args.seed;
        cfg.train.seed = *args.seed;
        cfg.gradcheck.seed = *args.seed;
    }
    if (args.out_dir) {
        cfg.out_dir = *args.out_dir;
    }
    if (args.alpha) {
        cfg.train.loss.alpha = *args.alpha;
    }
    if (args.beta) {
        cfg.train.loss.beta = *args.beta;
    }
    if (args.epochs) {
        cfg.train.epochs = *args.epochs;
    }
    if (command == "train" || command == "ablate") {
        if (args.eps) {
            cfg.train.inner_attack.epsilon = *args.eps;
            cfg.train.inner_attack.step_size = *args.eps;
        }
        if (args.steps) {
            cfg.train.inner_attack.steps = *args.steps;
        }
        if (args.step_size) {
            cfg.train.inner_attack.step_size = *args.step_size;
        }
        if (args.random_start && command == "train") {
            cfg.train.inner_attack.random_start = true;
        }
    } else if (command == "eval") {
        if (args.eps || args.steps || args.step_size || args.attack_kind ||
            args.random_start) {
            AttackSpec spec = cfg.attack;
            if (args.attack_kind) {
                spec.kind = attack_kind_from_name(*args.attack_kind);
            }
            if (args.eps) {
                spec.config.epsilon = *args.eps;
                spec.config.step_size = *args.eps;
            }
            if (args.steps) {
                spec.config.steps = *args.steps;
            }
            if (args.step_size) {
                spec.config.step_size = *args.step_size;
            }
            spec.config.random_start = args.random_start;
            cfg.eval_attacks = {spec};
        }
    } else if (command == "attack") {
        if (args.attack_kind) {
            cfg.attack.kind = attack_kind_from_name(*args.attack_kind);
        }
        if (args.eps) {
            cfg.attack.config.epsilon = *args.eps;
            cfg.attack.config.step_size = *args.eps;
        }
        if (args.steps) {
            cfg.attack.config.steps = *args.steps;
        }
        if (args.step_size) {
            cfg.attack.config.step_size = *args.step_size;
        }
        if (args.random_start) {
            cfg.attack.config.random_start = true;
        }
    }
    cfg.validate();
    return cfg;
}

struct DataBundle {
    Dataset train;
    Dataset holdout;
    std::vector<Dataset> transfers;
};

DataBundle prepare_data(const RunConfig& cfg) {
    Dataset full = cfg.data_source == "file" ? load_dataset(cfg.data_path)
                                             : generate_synthetic(cfg.data);
    DataBundle bundle;
    const std::size_t n = full.size();
    const auto n_holdout =
        static_cast<std::size_t>(std::llround(cfg.holdout_fraction * static_cast<double>(n)));
    if (n_holdout == 0) {
        bundle.train = full;
        bundle.holdout = full;
        bundle.holdout.name = full.name + "-all";
    } else {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        Rng rng(cfg.seed ^ 0x5b117ULL);
        rng.shuffle(order);
        const std::size_t d = full.spec.input_dim;
        auto take = [&](std::size_t from, std::size_t count, const std::string& suffix) {
            Dataset part;
            part.name = full.name + suffix;
            part.prototypes = full.prototypes;
            part.spec = full.spec;
            std::vector<double> x(count * d);
            part.y.resize(count);
            for (std::size_t i = 0; i < count; ++i) {
                const std::size_t src = order[from + i];
                for (std::size_t j = 0; j < d; ++j) {
                    x[i * d + j] = full.x.at(src, j);
                }
                part.y[i] = full.y[src];
            }
            part.x = Tensor::from_data({count, d}, std::move(x));
            return part;
        };
        bundle.train = take(0, n - n_holdout, "-train");
        bundle.holdout = take(n - n_holdout, n_holdout, "-holdout");
    }
    if (cfg.data_source == "synthetic") {
        for (std::size_t k = 0; k < cfg.transfer_sets; ++k) {
            Dataset transfer = generate_synthetic(transfer_variant(cfg.data, k + 1));
            transfer.name = "transfer-" + std::to_string(k);
            bundle.transfers.push_back(std::move(transfer));
        }
    }
    return bundle;
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    out << content;
    if (!out) {
        throw IoError("failed writing '" + path + "'");
    }
}

void write_json_file(const std::string& path, const nlohmann::json& json) {
    write_text(path, json.dump(2) + "\n");
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
    fs::create_directories(cfg.out_dir);
    return (fs::path(cfg.out_dir) / name).string();
}

std::string checkpoint_input_path(const RunConfig& cfg) {
    return cfg.checkpoint_path.empty() ? (fs::path(cfg.out_dir) / "model.caw").string()
                                       : cfg.checkpoint_path;
}

void emit(const CommonArgs& args, const nlohmann::json& machine, const std::string& human) {
    if (args.json) {
        std::cout << machine.dump() << "\n";
    }
    std::cerr << human << "\n";
}

int cmd_train(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args, "train");
    const std::string digest = config_digest(cfg);
    DataBundle data = prepare_data(cfg);

    DualEncoderModel model(ImageEncoder::random_init(cfg.model, cfg.seed),
                           data.train.prototypes, cfg.temperature);
    std::vector<TrainLogRecord> records;
    OptimizerState final_opt = OptimizerState::for_model(model);

    if (cfg.train.epochs > 0) {
        if (cfg.pretrain_epochs > 0) {
            logging::info("clean pre-training for " + std::to_string(cfg.pretrain_epochs) +
                      " epochs");
            fit(model, data.train, clean_variant(cfg.train, cfg.pretrain_epochs));
        }
        model.snapshot_frozen(/*force=*/true);
        logging::info("adversarial fine-tuning for " + std::to_string(cfg.train.epochs) +
                  " epochs");
        FitResult result = fit(
            model, data.train, cfg.train,
            [&](const DualEncoderModel& m, const OptimizerState& opt, std::size_t epoch) {
                final_opt = opt;
                if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
                    char name[32];
                    std::snprintf(name, sizeof name, "ckpt-epoch-%04zu.caw", epoch);
                    save_checkpoint(m, out_path(cfg, name), cfg.seed, digest);
                }
            });
        records = std::move(result.records);
    }

    save_checkpoint(model, out_path(cfg, "model.caw"), cfg.seed, digest);
    save_optimizer(final_opt, out_path(cfg, "optimizer.caw"));

    std::string log_lines;
    log_lines += nlohmann::json{{"kind", "train_log"},
                                {"config_digest", digest},
                                {"seed", cfg.seed}}
                     .dump() +
                 "\n";
    for (const TrainLogRecord& record : records) {
        log_lines += to_json(record).dump() + "\n";
    }
    write_text(out_path(cfg, "train_log.jsonl"), log_lines);

    nlohmann::json run;
    run["kind"] = "train";
    run["config_digest"] = digest;
    run["seed"] = cfg.seed;
    run["config"] = config_to_json(cfg);
    run["steps"] = records.size();
    if (!records.empty()) {
        run["final"] = to_json(records.back());
    }
    run["artifacts"] = {{"checkpoint", out_path(cfg, "model.caw")},
                        {"optimizer", out_path(cfg, "optimizer.caw")},
                        {"train_log", out_path(cfg, "train_log.jsonl")}};
    write_json_file(out_path(cfg, "run.json"), run);

    emit(args, run,
         "train: " + std::to_string(records.size()) + " steps, checkpoint at " +
             out_path(cfg, "model.caw") + " (digest " + digest + ")");
    return kExitOk;
}

int cmd_eval(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args, "eval");
    const std::string digest = config_digest(cfg);
    logging::info("loading checkpoint " + checkpoint_input_path(cfg));
    DualEncoderModel model = load_checkpoint(checkpoint_input_path(cfg));
    DataBundle data = prepare_data(cfg);

    std::vector<EvalReport> reports;
    reports.push_back(evaluate(model, data.holdout, cfg.eval_attacks, cfg.eval_batch_size,
                               cfg.seed, digest));
    for (const Dataset& transfer : data.transfers) {
        reports.push_back(evaluate(model, transfer, cfg.eval_attacks, cfg.eval_batch_size,
                                   cfg.seed, digest));
    }

    nlohmann::json out;
    out["kind"] = "eval";
    out["config_digest"] = digest;
    out["seed"] = cfg.seed;
    out["reports"] = nlohmann::json::array();
    for (const EvalReport& report : reports) {
        out["reports"].push_back(to_json(report));
    }
    write_json_file(out_path(cfg, "eval_report.json"), out);
    write_text(out_path(cfg, "eval_report.csv"), reports_to_csv({{"model", reports}}));

    std::string human = "eval:";
    for (const EvalReport& report : reports) {
        human += " " + report.dataset + " clean=" + std::to_string(report.clean_accuracy);
    }
    emit(args, out, human);
    return kExitOk;
}

int cmd_attack(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args, "attack");
    const std::string digest = config_digest(cfg);
    DualEncoderModel model = load_checkpoint(checkpoint_input_path(cfg));
    DataBundle data = prepare_data(cfg);
    const Dataset& dataset = data.holdout;

    const std::size_t n = dataset.size();
    const std::size_t d = dataset.spec.input_dim;
    DualEncoderModel head(model.tuned().snapshot(true), dataset.prototypes,
                          model.temperature());
    head.restore_frozen(model.frozen().snapshot(false));

    std::string lines;
    lines += nlohmann::json{{"kind", "attack_run"},
                            {"attack", cfg.attack.label()},
                            {"config_digest", digest},
                            {"seed", cfg.seed}}
                 .dump() +
             "\n";
    std::size_t flipped = 0;
    Rng seed_stream(cfg.seed ^ 0xa77acULL);
    const std::size_t batch = cfg.eval_batch_size;
    for (std::size_t start = 0; start < n; start += batch) {
        const std::size_t b = std::min(batch, n - start);
        std::vector<double> xb(b * d);
        Labels yb(b);
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                xb[i * d + j] = dataset.x.at(start + i, j);
            }
            yb[i] = dataset.y[start + i];
        }
        Tensor x = Tensor::from_data({b, d}, std::move(xb));
        AttackResult res = run_attack(cfg.attack.kind, head, x, yb, cfg.attack.config,
                                      seed_stream.fork(start).next_u64());
        Labels clean_pred = predict(head, x);
        Labels adv_pred = predict(head, res.x_adv);
        for (std::size_t i = 0; i < b; ++i) {
            double linf = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                linf = std::max(linf, std::abs(res.x_adv.at(i, j) - x.at(i, j)));
            }
            flipped += res.success_mask[i];
            lines += nlohmann::json{{"index", start + i},
                                    {"label", yb[i]},
                                    {"clean_pred", clean_pred[i]},
                                    {"adv_pred", adv_pred[i]},
                                    {"success", res.success_mask[i] != 0},
                                    {"linf", linf}}
                         .dump() +
                     "\n";
        }
    }
    write_text(out_path(cfg, "attacks.jsonl"), lines);

    nlohmann::json summary;
    summary["kind"] = "attack";
    summary["config_digest"] = digest;
    summary["seed"] = cfg.seed;
    summary["attack"] = cfg.attack.label();
    summary["samples"] = n;
    summary["success_rate"] = n == 0 ? 0.0 : static_cast<double>(flipped) / n;
    write_json_file(out_path(cfg, "attack_summary.json"), summary);

    emit(args, summary,
         "attack " + cfg.attack.label() +
             ": success_rate=" + std::to_string(summary["success_rate"].get<double>()));
    return kExitOk;
}

int cmd_ablate(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args, "ablate");
    const std::string digest = config_digest(cfg);
    DataBundle data = prepare_data(cfg);

    logging::info("ablation: three arms, " + std::to_string(cfg.pretrain_epochs) +
                  " pre-training + " + std::to_string(cfg.train.epochs) +
                  " fine-tuning epochs each");
    AblationReport report = run_ablation(cfg.model, cfg.temperature, cfg.train,
                                         cfg.pretrain_epochs, data.train, data.holdout,
                                         cfg.eval_attacks, digest);
    nlohmann::json out = to_json(report);
    out["kind"] = "ablation";
    write_json_file(out_path(cfg, "ablation_report.json"), out);

    std::string csv = "arm,robust,clean,average\n";
    std::string human = "ablation:";
    char buffer[96];
    for (const AblationArm& arm : report.arms) {
        std::snprintf(buffer, sizeof buffer, "%s,%.2f,%.2f,%.2f\n", arm.name.c_str(),
                      arm.robust_accuracy * 100.0, arm.clean_accuracy * 100.0,
                      arm.average * 100.0);
        csv += buffer;
        std::snprintf(buffer, sizeof buffer, " %s robust=%.4f clean=%.4f", arm.name.c_str(),
                      arm.robust_accuracy, arm.clean_accuracy);
        human += buffer;
    }
    write_text(out_path(cfg, "ablation_report.csv"), csv);

    emit(args, out, human);
    return kExitOk;
}

int cmd_gradcheck(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args, "gradcheck");
    const std::string digest = config_digest(cfg);
    GradcheckReport report = run_gradcheck(cfg.gradcheck);

    nlohmann::json out;
    out["kind"] = "gradcheck";
    out["config_digest"] = digest;
    out["seed"] = cfg.seed;
    out["passed"] = report.passed;
    out["max_rel_error"] = report.max_rel_error;
    out["tolerance"] = cfg.gradcheck.tolerance;
    out["components"] = nlohmann::json::array();
    for (const GradcheckComponentResult& component : report.components) {
        out["components"].push_back({{"component", component.component},
                                     {"max_rel_error", component.max_rel_error},
                                     {"states", component.states},
                                     {"passed", component.passed}});
    }
    write_json_file(out_path(cfg, "gradcheck.json"), out);

    if (args.json) {
        std::cout << out.dump() << "\n";
    }
    for (const GradcheckComponentResult& component : report.components) {
        char line[128];
        std::snprintf(line, sizeof line, "%-26s max_rel_err=%.3e  %s",
                      component.component.c_str(), component.max_rel_error,
                      component.passed ? "ok" : "FAIL");
        std::cerr << line << "\n";
    }
    std::cerr << (report.passed ? "gradcheck passed" : "gradcheck FAILED") << "\n";
    return report.passed ? kExitOk : kExitGradcheck;
}

int dispatch(const std::string& command, const CommonArgs& args) {
    try {
        if (command == "train") {
            return cmd_train(args);
        }
        if (command == "eval") {
            return cmd_eval(args);
        }
        if (command == "attack") {
            return cmd_attack(args);
        }
        if (command == "ablate") {
            return cmd_ablate(args);
        }
        if (command == "gradcheck") {
            return cmd_gradcheck(args);
        }
        std::cerr << "unknown command '" << command << "'\n";
        return kExitConfig;
    } catch (const ConfigError& e) {
        if (args.json) {
            std::cout << nlohmann::json{{"error", e.what()}, {"exit_code", kExitConfig}}.dump()
                      << "\n";
        }
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericError& e) {
        if (args.json) {
            std::cout
                << nlohmann::json{{"error", e.what()}, {"exit_code", kExitNumeric}}.dump()
                << "\n";
        }
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const IoError& e) {
        if (args.json) {
            std::cout << nlohmann::json{{"error", e.what()}, {"exit_code", kExitIo}}.dump()
                      << "\n";
        }
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        if (args.json) {
            std::cout << nlohmann::json{{"error", e.what()}, {"exit_code", kExitError}}.dump()
                      << "\n";
        }
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
}

} // namespace

int run(int argc, char** argv) {
    CLI::App app{"confidence-aware adversarial fine-tuning for zero-shot classifiers"};
    app.require_subcommand(1);

    const char* commands[] = {"train", "eval", "attack", "ablate", "gradcheck"};
    const char* descriptions[] = {
        "clean pre-train, snapshot, adversarially fine-tune; writes checkpoint and logs",
        "clean and robust accuracy of a checkpoint on holdout and transfer sets",
        "run one attack over the holdout set; per-sample JSON lines",
        "train the three loss-component arms from a shared snapshot and compare",
        "finite-difference verification of every loss gradient"};
    std::vector<CommonArgs> args(5);
    for (int i = 0; i < 5; ++i) {
        add_common_options(app.add_subcommand(commands[i], descriptions[i]), args[i]);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitConfig;
    }

    for (int i = 0; i < 5; ++i) {
        if (app.get_subcommand(commands[i])->parsed()) {
            return dispatch(commands[i], args[i]);
        }
    }
    return kExitConfig;
}

} // namespace caw::cli
