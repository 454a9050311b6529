// Experiment harness: train / unlearn / sweep / baseline / report / flops /
// convert. Flags mirror the config-file fields; see configs/ for presets.

#include <algorithm>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dkvb/errors.hpp"
#include "dkvb/experiment.hpp"

using namespace dkvb;
using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    return s.substr(begin, s.find_last_not_of(" \t\r") - begin + 1);
}

// Expands an INI file ([section] key = value) into --section.key tokens.
// Boolean values turn flags on; explicit command-line flags win over the file.
std::vector<std::string> expand_config(const std::string& path,
                                       const std::vector<std::string>& given) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open config file");

    auto already_given = [&given](const std::string& name) {
        for (const auto& arg : given) {
            if (arg == name || arg.rfind(name + "=", 0) == 0) return true;
        }
        return false;
    };

    std::vector<std::string> tokens;
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line.substr(0, std::min(line.find('#'), line.find(';'))));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError(path + ":" + std::to_string(line_no) + ": unterminated section");
            }
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty()) {
            throw ConfigError(path + ":" + std::to_string(line_no) + ": empty key or value");
        }
        const std::string name = "--" + (section.empty() ? key : section + "." + key);
        if (already_given(name)) continue;
        if (value == "true" || value == "on" || value == "yes") {
            tokens.push_back(name);
        } else if (value == "false" || value == "off" || value == "no") {
            // flags default to off
        } else {
            tokens.push_back(name);
            tokens.push_back(value);
        }
    }
    return tokens;
}

// Pulls --config <file> (or --config=<file>) out of the raw args and splices
// the expanded file tokens in front, so explicit flags override the file.
std::vector<std::string> assemble_args(int argc, char** argv) {
    std::vector<std::string> rest;
    std::string config_path;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--config") {
            if (i + 1 >= argc) throw ConfigError("--config needs a file path");
            config_path = argv[++i];
        } else if (arg.rfind("--config=", 0) == 0) {
            config_path = arg.substr(9);
        } else {
            rest.push_back(arg);
        }
    }
    if (config_path.empty()) return rest;
    std::vector<std::string> args = expand_config(config_path, rest);
    args.insert(args.end(), rest.begin(), rest.end());
    return args;
}

struct CliOptions {
    ExperimentConfig config;
    std::string data_source = "synthetic";
    std::string value_init = "zeros";
    std::string normalization = "touch-count";
    std::string unlearn_method = "activations";
    std::string forget_mode = "best-learned";
    std::string kl_direction = "student-teacher";
    std::vector<std::uint32_t> forget_fixed;
    bool no_early_stop = false;
};

void finalize(CliOptions& opt) {
    auto& cfg = opt.config;
    if (opt.data_source == "synthetic") {
        cfg.data.kind = DataSourceConfig::Kind::Synthetic;
    } else if (opt.data_source == "emb1") {
        cfg.data.kind = DataSourceConfig::Kind::Emb1;
    } else {
        throw ConfigError("data.source must be synthetic or emb1");
    }
    cfg.bottleneck.value_init = value_init_from_string(opt.value_init);
    if (opt.normalization == "touch-count") {
        cfg.train.normalization = GradNormalization::TouchCount;
    } else if (opt.normalization == "batch-size") {
        cfg.train.normalization = GradNormalization::BatchSize;
    } else {
        throw ConfigError("train.normalization must be touch-count or batch-size");
    }
    cfg.unlearn.method = unlearn_method_from_string(opt.unlearn_method);
    if (opt.forget_mode == "best-learned") {
        cfg.forget.mode = ForgetSelection::Mode::BestLearned;
    } else if (opt.forget_mode == "random") {
        cfg.forget.mode = ForgetSelection::Mode::Random;
    } else if (opt.forget_mode == "fixed") {
        cfg.forget.mode = ForgetSelection::Mode::Fixed;
    } else {
        throw ConfigError("forget.mode must be best-learned, random or fixed");
    }
    cfg.forget.fixed_classes = opt.forget_fixed;
    cfg.baseline.stop.enabled = !opt.no_early_stop;
    if (opt.kl_direction == "student-teacher") {
        cfg.baseline.scrub.kl_direction = KlDirection::StudentTeacher;
    } else if (opt.kl_direction == "teacher-student") {
        cfg.baseline.scrub.kl_direction = KlDirection::TeacherStudent;
    } else {
        throw ConfigError("scrub.kl-direction must be student-teacher or teacher-student");
    }
}

void add_config_options(CLI::App& app, CliOptions& opt) {
    auto& cfg = opt.config;
    app.add_option("--data.source", opt.data_source, "synthetic | emb1");
    app.add_option("--data.train", cfg.data.train_path, "EMB1 training split");
    app.add_option("--data.test", cfg.data.test_path, "EMB1 test split");
    app.add_option("--data.classes", cfg.data.synthetic.num_classes);
    app.add_option("--data.dim", cfg.data.synthetic.dim);
    app.add_option("--data.train-per-class", cfg.data.synthetic.train_per_class);
    app.add_option("--data.test-per-class", cfg.data.synthetic.test_per_class);
    app.add_option("--data.mean-scale", cfg.data.synthetic.mean_scale);
    app.add_option("--data.stddev", cfg.data.synthetic.stddev);

    app.add_option("--bottleneck.codebooks", cfg.bottleneck.num_codebooks);
    app.add_option("--bottleneck.pairs", cfg.bottleneck.pairs_per_codebook);
    app.add_option("--bottleneck.top-k", cfg.bottleneck.top_k);
    app.add_option("--bottleneck.key-dim", cfg.bottleneck.key_dim);
    app.add_option("--bottleneck.value-init", opt.value_init, "zeros | gaussian | uniform");
    app.add_option("--bottleneck.value-init-scale", cfg.bottleneck.value_init_scale);
    app.add_option("--bottleneck.ema-decay", cfg.bottleneck.ema_decay);
    app.add_option("--bottleneck.ema-epsilon", cfg.bottleneck.ema_epsilon);
    app.add_option("--bottleneck.key-init-epochs", cfg.key_init_epochs);
    app.add_option("--bottleneck.key-init-batch", cfg.key_init_batch);

    app.add_option("--train.epochs", cfg.train.epochs);
    app.add_option("--train.batch", cfg.train.batch_size);
    app.add_option("--train.lr", cfg.train.learning_rate);
    app.add_option("--train.clip", cfg.train.grad_clip);
    app.add_option("--train.normalization", opt.normalization, "touch-count | batch-size");
    app.add_option("--train.workers", cfg.train.workers);

    app.add_option("--linear.epochs", cfg.linear_train.epochs);
    app.add_option("--linear.batch", cfg.linear_train.batch_size);
    app.add_option("--linear.lr", cfg.linear_train.learning_rate);
    app.add_option("--linear.clip", cfg.linear_train.grad_clip);

    app.add_option("--unlearn.method", opt.unlearn_method, "activations | examples");
    app.add_option("--unlearn.budget", cfg.unlearn.budget, "N_a or N_e");
    app.add_option("--unlearn.grid", cfg.unlearn.grid, "sweep budgets")->delimiter(',');
    app.add_flag("--unlearn.cached", cfg.unlearn.use_cached_traces,
                 "reuse final-epoch traces instead of a fresh forward pass");

    app.add_option("--forget.mode", opt.forget_mode, "best-learned | random | fixed");
    app.add_option("--forget.classes", opt.forget_fixed, "fixed forget class ids")
        ->delimiter(',');
    app.add_option("--forget.random-count", cfg.forget.random_count);

    app.add_option("--baseline.which", cfg.baseline.which,
                   "scrub | finetune | retrain | neggrad");
    app.add_option("--baseline.neggrad-beta", cfg.baseline.neggrad_beta);
    app.add_flag("--baseline.no-early-stop", opt.no_early_stop,
                 "run all epochs even after the forget set is unlearned");
    app.add_option("--scrub.msteps", cfg.baseline.scrub.msteps);
    app.add_option("--scrub.epochs", cfg.baseline.scrub.epochs);
    app.add_option("--scrub.lr", cfg.baseline.scrub.learning_rate);
    app.add_option("--scrub.forget-batch", cfg.baseline.scrub.forget_batch_size);
    app.add_option("--scrub.retain-batch", cfg.baseline.scrub.retain_batch_size);
    app.add_option("--scrub.alpha", cfg.baseline.scrub.alpha);
    app.add_option("--scrub.kl-direction", opt.kl_direction,
                   "student-teacher | teacher-student");

    app.add_option("--seeds", cfg.seeds, "seed list")->delimiter(',');
    app.add_option("--out", cfg.out_dir, "output directory (under $DKVB_OUT_ROOT if relative)");
}

int run(int argc, char** argv) {
    CLI::App app{"discrete key-value bottleneck unlearning harness"};
    app.require_subcommand(1);
    app.fallthrough();
    // consumed by assemble_args before parsing; listed here for --help
    std::string config_path_for_help;
    app.add_option("--config", config_path_for_help,
                   "INI config file with [section] key=value entries");

    CliOptions opt;
    add_config_options(app, opt);

    std::string model_kind = "dkvb";
    std::string checkpoint;
    std::uint64_t seed_override = 0;
    bool seed_given = false;
    std::string run_dir;
    std::string csv_in, emb_out;

    auto* train_cmd = app.add_subcommand("train", "train base model(s), write checkpoints");
    train_cmd->add_option("--model", model_kind, "dkvb | linear | both");

    auto* unlearn_cmd = app.add_subcommand("unlearn", "apply a masking method to a checkpoint");
    unlearn_cmd->add_option("--checkpoint", checkpoint)->required();
    unlearn_cmd->add_option("--seed", seed_override)->each([&](const std::string&) {
        seed_given = true;
    });

    auto* sweep_cmd = app.add_subcommand("sweep", "budget sweep with mask restore");
    sweep_cmd->add_option("--checkpoint", checkpoint)->required();

    auto* baseline_cmd = app.add_subcommand("baseline", "train + unlearn a linear-head baseline");
    baseline_cmd->add_option("--which", opt.config.baseline.which,
                             "scrub | finetune | retrain | neggrad");
    baseline_cmd->add_option("--seed", seed_override)->each([&](const std::string&) {
        seed_given = true;
    });

    auto* report_cmd = app.add_subcommand("report", "join reports into table CSVs");
    report_cmd->add_option("--run-dir", run_dir)->required();

    auto* flops_cmd = app.add_subcommand("flops", "ledger-only dry run");
    std::string flops_model = "linear";
    std::uint64_t flops_input_dim = 0, flops_classes = 0, flops_examples = 1;
    std::uint64_t flops_grad_examples = 0, flops_steps = 0;
    flops_cmd->add_option("--model", flops_model, "linear | dkvb");
    flops_cmd->add_option("--input-dim", flops_input_dim)->required();
    flops_cmd->add_option("--classes", flops_classes)->required();
    flops_cmd->add_option("--examples", flops_examples);
    flops_cmd->add_option("--grad-examples", flops_grad_examples);
    flops_cmd->add_option("--steps", flops_steps);

    auto* convert_cmd = app.add_subcommand("convert", "CSV (d0,...,dK,label) -> EMB1");
    convert_cmd->add_option("--input", csv_in)->required();
    convert_cmd->add_option("--output", emb_out)->required();

    try {
        std::vector<std::string> args = assemble_args(argc, argv);
        std::reverse(args.begin(), args.end());  // CLI11 consumes from the back
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;  // bad flags are config errors
    }
    finalize(opt);
    ExperimentConfig& cfg = opt.config;
    const std::uint64_t seed = seed_given ? seed_override : cfg.seeds.at(0);

    if (train_cmd->parsed()) {
        const auto result = cmd_train(cfg, model_kind);
        for (const auto& path : result.checkpoint_paths) {
            std::cout << "checkpoint " << path << "\n";
        }
        std::cout << "initial performance rows: " << result.rows.size() << "\n";
    } else if (unlearn_cmd->parsed()) {
        const auto result = cmd_unlearn(cfg, checkpoint, seed);
        std::cout << metrics_report_to_json(result.report);
        if (result.degenerate) {
            throw DegenerateModelError("all codebooks fully masked after unlearning");
        }
    } else if (sweep_cmd->parsed()) {
        const auto rows = cmd_sweep(cfg, checkpoint);
        std::cout << "sweep rows: " << rows.size() << " (written to " << cfg.out_dir << ")\n";
    } else if (baseline_cmd->parsed()) {
        const auto report = cmd_baseline(cfg, cfg.baseline.which, seed);
        std::cout << metrics_report_to_json(report);
    } else if (report_cmd->parsed()) {
        const auto tables = cmd_report(run_dir);
        std::cout << "table1 rows: " << tables.table1_rows.size()
                  << ", table3 rows: " << tables.table3_rows.size() << "\n";
    } else if (flops_cmd->parsed()) {
        FlopModelDescriptor desc;
        if (flops_model == "linear") {
            desc.kind = FlopModelDescriptor::Kind::Linear;
            desc.parameters = flops_classes * flops_input_dim + flops_classes;
        } else if (flops_model == "dkvb") {
            desc.kind = FlopModelDescriptor::Kind::Bottleneck;
            desc.input_dim = flops_input_dim;
            desc.key_dim = cfg.bottleneck.key_dim;
            desc.top_k = cfg.bottleneck.top_k;
            desc.value_dim = flops_classes;
            desc.unmasked_per_codebook.assign(cfg.bottleneck.num_codebooks,
                                              cfg.bottleneck.pairs_per_codebook);
        } else {
            throw ConfigError("flops: model must be linear or dkvb");
        }
        const std::uint64_t params =
            flops_model == "linear" ? desc.parameters
                                    : flops_classes * flops_input_dim + flops_classes;
        json j{{"per_example_forward", desc.per_example_forward()},
               {"forward", forward_flops(desc, flops_examples)},
               {"backward", backward_flops(params, flops_steps, flops_grad_examples)}};
        std::cout << j.dump(2) << "\n";
    } else if (convert_cmd->parsed()) {
        const LabeledEmbeddings data = load_csv_embeddings(csv_in);
        write_embeddings(emb_out, data);
        std::cout << "wrote " << emb_out << " (" << data.size() << " x " << data.dim() << ", "
                  << data.num_classes << " classes)\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const DegenerateModelError& e) {
        std::cerr << "degenerate model: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
