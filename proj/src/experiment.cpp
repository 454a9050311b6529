#include "dkvb/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dkvb/binio.hpp"
#include "dkvb/errors.hpp"
#include "dkvb/rng.hpp"

namespace dkvb {

namespace fs = std::filesystem;
using nlohmann::json;

void DataSourceConfig::validate() const {
    if (kind == Kind::Synthetic) {
        synthetic.validate();
    } else {
        if (train_path.empty() || test_path.empty()) {
            throw ConfigError("emb1 source needs train and test paths");
        }
    }
}

void ExperimentConfig::validate() const {
    data.validate();
    if (seeds.empty()) throw ConfigError("seed list is empty");
    if (out_dir.empty()) throw ConfigError("output directory is empty");
}

Dataset load_dataset(const DataSourceConfig& source, std::uint64_t run_seed) {
    source.validate();
    Dataset out;
    if (source.kind == DataSourceConfig::Kind::Synthetic) {
        SyntheticSpec spec = source.synthetic;
        spec.seed = run_seed;
        auto [train, test] = generate_synthetic(spec);
        out.train = std::move(train);
        out.test = std::move(test);
    } else {
        out.train = load_embeddings(source.train_path);
        out.test = load_embeddings(source.test_path);
        if (out.train.dim() != out.test.dim() ||
            out.train.num_classes != out.test.num_classes) {
            throw DataError("train/test EMB1 splits disagree on D or num_classes");
        }
    }
    return out;
}

std::vector<std::uint64_t> misclass_by_class(const BottleneckModel& model,
                                             const LabeledEmbeddings& test, unsigned workers) {
    return misclassification_counts(test.labels, predict_all(model, test, workers),
                                    test.num_classes);
}

std::vector<std::uint64_t> misclass_by_class(const LinearHead& head,
                                             const LabeledEmbeddings& test) {
    return misclassification_counts(test.labels, predict_all(head, test), test.num_classes);
}

std::set<std::uint32_t> choose_forget_classes(const ForgetSelection& mode,
                                              const std::vector<std::uint64_t>& misclass,
                                              std::uint32_t num_classes, std::uint64_t seed) {
    std::set<std::uint32_t> chosen;
    switch (mode.mode) {
        case ForgetSelection::Mode::BestLearned:
            chosen.insert(select_forget_class(misclass));
            break;
        case ForgetSelection::Mode::Random: {
            if (mode.random_count == 0 || mode.random_count > num_classes) {
                throw ConfigError("random forget selection: bad class count");
            }
            auto stream = rng::make_stream(seed, "forget-class");
            const auto picks = rng::sample_without_replacement(
                num_classes, mode.random_count, stream);
            for (std::size_t p : picks) chosen.insert(static_cast<std::uint32_t>(p));
            break;
        }
        case ForgetSelection::Mode::Fixed:
            if (mode.fixed_classes.empty()) {
                throw ConfigError("fixed forget selection: no classes given");
            }
            chosen.insert(mode.fixed_classes.begin(), mode.fixed_classes.end());
            break;
    }
    for (std::uint32_t c : chosen) {
        if (c >= num_classes) throw ConfigError("forget class out of range");
    }
    return chosen;
}

TrainedBottleneck train_bottleneck(const ExperimentConfig& config, std::uint64_t run_seed) {
    TrainedBottleneck out;
    out.dataset = load_dataset(config.data, run_seed);

    BottleneckConfig bc = config.bottleneck;
    bc.input_dim = static_cast<std::uint32_t>(out.dataset.train.dim());
    bc.value_dim = out.dataset.train.num_classes;
    bc.seed = run_seed;
    out.model = make_bottleneck_model(bc);
    key_init_ema(out.model, out.dataset.train, config.key_init_epochs, bc.ema_decay,
                 config.key_init_batch);

    TrainConfig tc = config.train;
    tc.seed = run_seed;
    out.train_result = train_values(out.model, out.dataset.train, tc, &out.dataset.test);
    return out;
}

TrainedLinear train_linear_base(const ExperimentConfig& config, std::uint64_t run_seed) {
    TrainedLinear out;
    out.dataset = load_dataset(config.data, run_seed);
    TrainConfig tc = config.linear_train;
    tc.seed = run_seed;
    const LinearHead init = make_linear_head(
        out.dataset.train.num_classes, static_cast<std::uint32_t>(out.dataset.train.dim()),
        run_seed);
    out.result = train_linear(init, out.dataset.train, tc);
    out.head = out.result.head;
    return out;
}

void write_text_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError(tmp + ": cannot open for writing");
        out << content;
        if (!out) throw DataError(tmp + ": write failed");
    }
    fs::rename(tmp, path);
}

std::string resolve_out_dir(const std::string& out_dir) {
    fs::path p(out_dir);
    if (p.is_relative()) {
        if (const char* root = std::getenv("DKVB_OUT_ROOT")) {
            p = fs::path(root) / p;
        }
    }
    fs::create_directories(p);
    return p.string();
}

namespace {

json ledger_to_json(const FlopLedger& ledger) {
    json phases = json::array();
    for (const auto& p : ledger.phases) {
        phases.push_back({{"phase", p.phase},
                          {"forward", p.forward},
                          {"backward", p.backward},
                          {"forward_examples", p.forward_examples},
                          {"per_example_forward", p.per_example_forward},
                          {"grad_examples", p.grad_examples},
                          {"optimizer_steps", p.optimizer_steps},
                          {"parameters", p.parameters}});
    }
    return {{"forward", ledger.forward_total()},
            {"backward", ledger.backward_total()},
            {"double_flops_per_mac", ledger.double_flops_per_mac},
            {"backward_rule", FlopLedger::backward_rule},
            {"phases", phases}};
}

FlopLedger ledger_from_json(const json& j) {
    FlopLedger ledger;
    ledger.double_flops_per_mac = j.value("double_flops_per_mac", false);
    for (const auto& p : j.at("phases")) {
        FlopPhase phase;
        phase.phase = p.at("phase").get<std::string>();
        phase.forward = p.at("forward").get<std::uint64_t>();
        phase.backward = p.at("backward").get<std::uint64_t>();
        phase.forward_examples = p.at("forward_examples").get<std::uint64_t>();
        phase.per_example_forward = p.at("per_example_forward").get<std::uint64_t>();
        phase.grad_examples = p.at("grad_examples").get<std::uint64_t>();
        phase.optimizer_steps = p.at("optimizer_steps").get<std::uint64_t>();
        phase.parameters = p.at("parameters").get<std::uint64_t>();
        ledger.phases.push_back(std::move(phase));
    }
    return ledger;
}

json quad_to_json(const AccuracyQuad& q) {
    return {{"train_retain", q.train_retain},
            {"train_forget", q.train_forget},
            {"test_retain", q.test_retain},
            {"test_forget", q.test_forget}};
}

AccuracyQuad quad_from_json(const json& j) {
    AccuracyQuad q;
    q.train_retain = j.at("train_retain").get<double>();
    q.train_forget = j.at("train_forget").get<double>();
    q.test_retain = j.at("test_retain").get<double>();
    q.test_forget = j.at("test_forget").get<double>();
    return q;
}

}  // namespace

std::string metrics_report_to_json(const MetricsReport& report) {
    json j{{"schema_version", 1},
           {"method", report.method},
           {"seeds", report.seeds},
           {"forget_classes", report.forget_classes},
           {"before", quad_to_json(report.before)},
           {"after", quad_to_json(report.after)},
           {"retain_test_delta_pct", report.retain_test_delta_pct},
           {"forget_test_delta_pct", report.forget_test_delta_pct},
           {"budget", report.budget},
           {"pairs_masked", report.pairs_masked},
           {"flops", ledger_to_json(report.ledger)}};
    return j.dump(2) + "\n";
}

MetricsReport metrics_report_from_json(const std::string& json_text) {
    const json j = json::parse(json_text);
    MetricsReport report;
    report.method = j.at("method").get<std::string>();
    report.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    report.forget_classes = j.at("forget_classes").get<std::vector<std::uint32_t>>();
    report.before = quad_from_json(j.at("before"));
    report.after = quad_from_json(j.at("after"));
    report.retain_test_delta_pct = j.at("retain_test_delta_pct").get<double>();
    report.forget_test_delta_pct = j.at("forget_test_delta_pct").get<double>();
    report.budget = j.at("budget").get<std::uint64_t>();
    report.pairs_masked = j.at("pairs_masked").get<std::uint64_t>();
    report.ledger = ledger_from_json(j.at("flops"));
    return report;
}

std::string unlearn_report_to_json(const UnlearnReport& report, const std::string& method) {
    json pairs = json::array();
    for (const auto& p : report.masked_pairs) {
        pairs.push_back({p.codebook, p.key});
    }
    json j{{"schema_version", 1},
           {"method", method},
           {"pairs_masked", report.pairs_masked},
           {"forward_examples_processed", report.forward_examples_processed},
           {"backward_flops", report.backward_flops},
           {"masked_pairs", pairs}};
    return j.dump(2) + "\n";
}

void save_linear_head(const std::string& path, const LinearHead& head) {
    binio::Writer out(path);
    out.write_magic("LINH");
    out.write_u32(1);
    out.write_u32(static_cast<std::uint32_t>(head.weight.rows()));
    out.write_u32(static_cast<std::uint32_t>(head.weight.cols()));
    out.write_raw(head.weight.data(), sizeof(double) * static_cast<std::size_t>(
                                          head.weight.rows() * head.weight.cols()));
    out.write_raw(head.bias.data(), sizeof(double) * static_cast<std::size_t>(head.bias.size()));
    out.close();
}

LinearHead load_linear_head(const std::string& path) {
    binio::Reader in(path);
    in.expect_magic("LINH");
    if (in.read_u32() != 1) throw DataError(path + ": unsupported head version");
    const std::uint32_t rows = in.read_u32();
    const std::uint32_t cols = in.read_u32();
    LinearHead head;
    head.weight.resize(rows, cols);
    in.read_raw(head.weight.data(), sizeof(double) * static_cast<std::size_t>(rows) * cols);
    head.bias.resize(rows);
    in.read_raw(head.bias.data(), sizeof(double) * rows);
    return head;
}

void save_traces(const std::string& path, const std::vector<SelectionTrace>& traces) {
    binio::Writer out(path);
    out.write_magic("TRC1");
    out.write_u64(traces.size());
    for (const auto& trace : traces) {
        out.write_u32(static_cast<std::uint32_t>(trace.per_codebook.size()));
        for (const auto& sel : trace.per_codebook) {
            out.write_u32(static_cast<std::uint32_t>(sel.size()));
            out.write_raw(sel.data(), sizeof(std::uint32_t) * sel.size());
        }
    }
    out.close();
}

std::vector<SelectionTrace> load_traces(const std::string& path) {
    binio::Reader in(path);
    in.expect_magic("TRC1");
    const std::uint64_t n = in.read_u64();
    std::vector<SelectionTrace> traces(n);
    for (auto& trace : traces) {
        trace.per_codebook.resize(in.read_u32());
        for (auto& sel : trace.per_codebook) {
            sel.resize(in.read_u32());
            in.read_raw(sel.data(), sizeof(std::uint32_t) * sel.size());
        }
    }
    return traces;
}

namespace {

std::string format_acc(double v) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(6);
    os << v;
    return os.str();
}

std::string metrics_jsonl(const std::vector<EpochMetrics>& metrics) {
    std::ostringstream os;
    for (const auto& em : metrics) {
        json j{{"epoch", em.epoch},
               {"train_loss", em.train_loss},
               {"train_acc", em.train_acc}};
        if (std::isnan(em.test_acc)) {
            j["test_acc"] = nullptr;
        } else {
            j["test_acc"] = em.test_acc;
        }
        if (!em.method.empty()) j["method"] = em.method;
        if (!em.phase.empty()) j["phase"] = em.phase;
        os << j.dump() << "\n";
    }
    return os.str();
}

double safe_eval(const BottleneckModel& model, const LabeledEmbeddings& data, unsigned workers) {
    return data.size() == 0 ? 0.0 : evaluate(model, data, workers);
}

double safe_eval(const LinearHead& head, const LabeledEmbeddings& data) {
    return data.size() == 0 ? 0.0 : evaluate(head, data);
}

InitialPerformance initial_perf_bottleneck(const TrainedBottleneck& tb,
                                           const DatasetBundle& bundle, std::uint64_t seed,
                                           unsigned workers) {
    InitialPerformance row;
    row.model = "dkvb";
    row.seed = seed;
    row.train = evaluate(tb.model, tb.dataset.train, workers);
    row.train_retain = safe_eval(tb.model, bundle.train_retain, workers);
    row.train_forget = safe_eval(tb.model, bundle.train_forget, workers);
    row.test = evaluate(tb.model, tb.dataset.test, workers);
    row.test_retain = safe_eval(tb.model, bundle.test_retain, workers);
    row.test_forget = safe_eval(tb.model, bundle.test_forget, workers);
    return row;
}

InitialPerformance initial_perf_linear(const TrainedLinear& tl, const DatasetBundle& bundle,
                                       std::uint64_t seed) {
    InitialPerformance row;
    row.model = "linear";
    row.seed = seed;
    row.train = evaluate(tl.head, tl.dataset.train);
    row.train_retain = safe_eval(tl.head, bundle.train_retain);
    row.train_forget = safe_eval(tl.head, bundle.train_forget);
    row.test = evaluate(tl.head, tl.dataset.test);
    row.test_retain = safe_eval(tl.head, bundle.test_retain);
    row.test_forget = safe_eval(tl.head, bundle.test_forget);
    return row;
}

FlopPhase bottleneck_train_phase(const BottleneckModel& model, const TrainCounts& counts) {
    FlopPhase phase;
    phase.phase = "train";
    phase.forward_examples = counts.forward_examples;
    phase.per_example_forward = describe(model).per_example_forward();
    phase.forward = phase.forward_examples * phase.per_example_forward;
    // sparse updates: gradient/update ops accumulated per touched coordinate
    phase.backward = counts.grad_coord_ops + counts.adam_coord_ops;
    phase.grad_examples = 0;
    phase.optimizer_steps = 0;
    phase.parameters = 0;
    return phase;
}

FlopPhase linear_train_phase(const LinearHead& head, const TrainCounts& counts,
                             const std::string& name) {
    FlopPhase phase;
    phase.phase = name;
    phase.parameters = head.parameter_count();
    phase.forward_examples = counts.forward_examples;
    phase.per_example_forward = phase.parameters;
    phase.forward = phase.forward_examples * phase.per_example_forward;
    phase.grad_examples = counts.grad_examples;
    phase.optimizer_steps = counts.optimizer_steps;
    phase.backward = backward_flops(phase.parameters, phase.optimizer_steps, phase.grad_examples);
    return phase;
}

}  // namespace

TrainCommandResult cmd_train(const ExperimentConfig& config, const std::string& model_kind) {
    config.validate();
    if (model_kind != "dkvb" && model_kind != "linear" && model_kind != "both") {
        throw ConfigError("train: model must be dkvb, linear or both");
    }
    const std::string out_dir = resolve_out_dir(config.out_dir);
    TrainCommandResult result;

    for (std::uint64_t seed : config.seeds) {
        if (model_kind == "dkvb" || model_kind == "both") {
            TrainedBottleneck tb = train_bottleneck(config, seed);
            const auto misclass = misclass_by_class(tb.model, tb.dataset.test,
                                                    config.train.workers);
            const auto forget = choose_forget_classes(config.forget, misclass,
                                                      tb.dataset.train.num_classes, seed);
            const auto bundle = split_by_classes(tb.dataset.train, tb.dataset.test, forget);
            result.rows.push_back(
                initial_perf_bottleneck(tb, bundle, seed, config.train.workers));

            const std::string ckpt = out_dir + "/checkpoint_seed" + std::to_string(seed) +
                                     ".dkvb";
            save_checkpoint(ckpt, tb.model);
            result.checkpoint_paths.push_back(ckpt);
            write_text_atomic(out_dir + "/metrics_train_seed" + std::to_string(seed) + ".jsonl",
                              metrics_jsonl(tb.train_result.metrics));
            save_traces(out_dir + "/traces_seed" + std::to_string(seed) + ".trc",
                        tb.train_result.final_epoch_traces);
            FlopLedger train_ledger;
            train_ledger.add_phase(bottleneck_train_phase(tb.model, tb.train_result.counts));
            write_text_atomic(out_dir + "/flops_train_seed" + std::to_string(seed) + ".json",
                              ledger_to_json(train_ledger).dump(2) + "\n");
        }
        if (model_kind == "linear" || model_kind == "both") {
            TrainedLinear tl = train_linear_base(config, seed);
            const auto misclass = misclass_by_class(tl.head, tl.dataset.test);
            const auto forget = choose_forget_classes(config.forget, misclass,
                                                      tl.dataset.train.num_classes, seed);
            const auto bundle = split_by_classes(tl.dataset.train, tl.dataset.test, forget);
            result.rows.push_back(initial_perf_linear(tl, bundle, seed));

            const std::string ckpt = out_dir + "/linear_seed" + std::to_string(seed) + ".linh";
            save_linear_head(ckpt, tl.head);
            result.checkpoint_paths.push_back(ckpt);
            write_text_atomic(out_dir + "/metrics_linear_seed" + std::to_string(seed) + ".jsonl",
                              metrics_jsonl(tl.result.metrics));
        }
    }

    std::ostringstream csv;
    csv << "model,seed,train,train_retain,train_forget,test,test_retain,test_forget\n";
    for (const auto& row : result.rows) {
        csv << row.model << ',' << row.seed << ',' << format_acc(row.train) << ','
            << format_acc(row.train_retain) << ',' << format_acc(row.train_forget) << ','
            << format_acc(row.test) << ',' << format_acc(row.test_retain) << ','
            << format_acc(row.test_forget) << "\n";
    }
    write_text_atomic(out_dir + "/initial_performance.csv", csv.str());
    return result;
}

namespace {

struct UnlearnOutcome {
    UnlearnReport report;
    FlopLedger ledger;
    AccuracyQuad before;
    AccuracyQuad after;
    bool trace_disjoint = false;
};

UnlearnOutcome apply_unlearning(BottleneckModel& model, const DatasetBundle& bundle,
                                const UnlearnSettings& settings, std::uint64_t budget,
                                std::uint64_t seed, unsigned workers,
                                const std::vector<SelectionTrace>* cached_forget_traces) {
    UnlearnOutcome out;
    out.before.train_retain = safe_eval(model, bundle.train_retain, workers);
    out.before.train_forget = safe_eval(model, bundle.train_forget, workers);
    out.before.test_retain = safe_eval(model, bundle.test_retain, workers);
    out.before.test_forget = safe_eval(model, bundle.test_forget, workers);

    const FlopModelDescriptor pre_desc = describe(model);

    std::vector<SelectionTrace> pre_traces;
    if (settings.method == UnlearnMethod::Activations) {
        pre_traces.resize(static_cast<std::size_t>(bundle.train_forget.size()));
        for (std::int64_t i = 0; i < bundle.train_forget.size(); ++i) {
            pre_traces[static_cast<std::size_t>(i)] =
                model.quantize(model.project_heads_f32(bundle.train_forget.features, i));
        }
        ActivationCounts counts;
        bool fresh_pass = true;
        if (cached_forget_traces) {
            counts = activations_from_traces(*cached_forget_traces);
            fresh_pass = false;
        } else {
            counts = record_activations(model, bundle.train_forget, workers);
        }
        out.report = unlearn_via_activations(model, counts, budget);

        FlopPhase record;
        record.phase = "record";
        record.forward_examples = fresh_pass ? counts.examples_processed : 0;
        record.per_example_forward = pre_desc.per_example_forward();
        record.forward = record.forward_examples * record.per_example_forward;
        out.ledger.add_phase(record);
    } else {
        out.report = unlearn_via_examples(model, bundle.train_forget, budget, seed, workers);
        FlopPhase record;
        record.phase = "record";
        record.forward_examples = out.report.forward_examples_processed;
        record.per_example_forward = pre_desc.per_example_forward();
        record.forward = record.forward_examples * record.per_example_forward;
        out.ledger.add_phase(record);
    }

    FlopPhase unlearn_phase;
    unlearn_phase.phase = "unlearn";  // pure mask mutation: no passes, no gradients
    out.ledger.add_phase(unlearn_phase);

    out.after.train_retain = safe_eval(model, bundle.train_retain, workers);
    out.after.train_forget = safe_eval(model, bundle.train_forget, workers);
    out.after.test_retain = safe_eval(model, bundle.test_retain, workers);
    out.after.test_forget = safe_eval(model, bundle.test_forget, workers);

    if (settings.method == UnlearnMethod::Activations && !pre_traces.empty()) {
        out.trace_disjoint = true;
        for (std::int64_t i = 0; i < bundle.train_forget.size() && out.trace_disjoint; ++i) {
            const SelectionTrace post =
                model.quantize(model.project_heads_f32(bundle.train_forget.features, i));
            const auto& pre = pre_traces[static_cast<std::size_t>(i)];
            for (std::size_t c = 0; c < pre.per_codebook.size(); ++c) {
                for (std::uint32_t m : post.per_codebook[c]) {
                    if (std::find(pre.per_codebook[c].begin(), pre.per_codebook[c].end(), m) !=
                        pre.per_codebook[c].end()) {
                        out.trace_disjoint = false;
                        break;
                    }
                }
                if (!out.trace_disjoint) break;
            }
        }
    }
    return out;
}

}  // namespace

UnlearnCommandResult cmd_unlearn(const ExperimentConfig& config, const std::string& checkpoint,
                                 std::uint64_t seed) {
    config.validate();
    if (!fs::exists(checkpoint)) throw DataError(checkpoint + ": checkpoint not found");
    const std::string out_dir = resolve_out_dir(config.out_dir);

    BottleneckModel model = load_checkpoint(checkpoint);
    Dataset dataset = load_dataset(config.data, seed);
    if (static_cast<std::uint32_t>(dataset.train.dim()) != model.config.input_dim ||
        dataset.train.num_classes != model.config.value_dim) {
        throw DataError("checkpoint shape does not match the dataset");
    }

    const auto misclass = misclass_by_class(model, dataset.test, config.train.workers);
    UnlearnCommandResult result;
    result.forget_classes = choose_forget_classes(config.forget, misclass,
                                                  dataset.train.num_classes, seed);
    const auto bundle = split_by_classes(dataset.train, dataset.test, result.forget_classes);
    if (bundle.train_forget.size() == 0) throw DataError("forget training split is empty");

    std::vector<SelectionTrace> cached;
    const std::vector<SelectionTrace>* cached_ptr = nullptr;
    if (config.unlearn.use_cached_traces &&
        config.unlearn.method == UnlearnMethod::Activations) {
        const std::string trace_path =
            out_dir + "/traces_seed" + std::to_string(seed) + ".trc";
        if (!fs::exists(trace_path)) {
            throw DataError(trace_path + ": cached traces not found; train with this out_dir");
        }
        const auto all = load_traces(trace_path);
        if (all.size() != static_cast<std::size_t>(dataset.train.size())) {
            throw DataError(trace_path + ": trace count does not match the training split");
        }
        for (std::size_t i = 0; i < all.size(); ++i) {
            if (result.forget_classes.count(dataset.train.labels[i])) cached.push_back(all[i]);
        }
        cached_ptr = &cached;
    }

    UnlearnOutcome outcome =
        apply_unlearning(model, bundle, config.unlearn, config.unlearn.budget, seed,
                         config.train.workers, cached_ptr);
    result.unlearn = outcome.report;
    result.trace_disjoint = outcome.trace_disjoint;
    result.degenerate = model.mask.all_masked();

    MetricsReport& report = result.report;
    report.method = "dkvb_via_" + to_string(config.unlearn.method);
    report.seeds = {seed};
    report.forget_classes.assign(result.forget_classes.begin(), result.forget_classes.end());
    report.before = outcome.before;
    report.after = outcome.after;
    report.retain_test_delta_pct = relative_change(outcome.before.test_retain,
                                                   outcome.after.test_retain);
    report.forget_test_delta_pct =
        outcome.before.test_forget > 0
            ? relative_change(outcome.before.test_forget, outcome.after.test_forget)
            : 0.0;
    report.ledger = outcome.ledger;
    report.budget = config.unlearn.budget;
    report.pairs_masked = outcome.report.pairs_masked;

    write_text_atomic(out_dir + "/report_" + report.method + "_seed" + std::to_string(seed) +
                          ".json",
                      metrics_report_to_json(report));
    write_text_atomic(out_dir + "/unlearn_" + report.method + "_seed" + std::to_string(seed) +
                          ".json",
                      unlearn_report_to_json(result.unlearn, report.method));
    return result;
}

std::vector<SweepRow> cmd_sweep(const ExperimentConfig& config, const std::string& checkpoint) {
    config.validate();
    if (config.unlearn.grid.empty()) throw ConfigError("sweep: empty budget grid");
    if (!fs::exists(checkpoint)) throw DataError(checkpoint + ": checkpoint not found");
    const std::string out_dir = resolve_out_dir(config.out_dir);

    BottleneckModel model = load_checkpoint(checkpoint);
    const MaskState saved_mask = model.mask;

    std::vector<SweepRow> rows;
    std::map<std::uint64_t, std::pair<double, double>> mean_acc;  // budget -> sums

    // the checkpoint's seed names the dataset it was trained on
    Dataset dataset = load_dataset(config.data, model.config.seed);
    const auto misclass = misclass_by_class(model, dataset.test, config.train.workers);

    for (std::uint64_t seed : config.seeds) {
        const auto forget = choose_forget_classes(config.forget, misclass,
                                                  dataset.train.num_classes, seed);
        const auto bundle = split_by_classes(dataset.train, dataset.test, forget);
        if (bundle.train_forget.size() == 0) throw DataError("forget training split is empty");

        for (std::uint64_t budget : config.unlearn.grid) {
            model.mask = saved_mask;  // restore between grid points
            UnlearnReport report;
            if (config.unlearn.method == UnlearnMethod::Activations) {
                const auto counts =
                    record_activations(model, bundle.train_forget, config.train.workers);
                report = unlearn_via_activations(model, counts, budget);
            } else {
                report = unlearn_via_examples(model, bundle.train_forget, budget, seed,
                                              config.train.workers);
            }
            SweepRow row;
            row.method = "dkvb_via_" + to_string(config.unlearn.method);
            row.seed = std::to_string(seed);
            row.budget = budget;
            row.retain_test_acc = safe_eval(model, bundle.test_retain, config.train.workers);
            row.forget_test_acc = safe_eval(model, bundle.test_forget, config.train.workers);
            row.pairs_masked = report.pairs_masked;
            rows.push_back(row);
            auto& sums = mean_acc[budget];
            sums.first += row.retain_test_acc;
            sums.second += row.forget_test_acc;
        }
    }
    model.mask = saved_mask;

    const double n_seeds = static_cast<double>(config.seeds.size());
    for (std::uint64_t budget : config.unlearn.grid) {
        SweepRow row;
        row.method = "dkvb_via_" + to_string(config.unlearn.method);
        row.seed = "mean";
        row.budget = budget;
        row.retain_test_acc = mean_acc[budget].first / n_seeds;
        row.forget_test_acc = mean_acc[budget].second / n_seeds;
        rows.push_back(row);
    }

    std::ostringstream csv;
    csv << "method,seed,budget,retain_test_acc,forget_test_acc,pairs_masked\n";
    for (const auto& row : rows) {
        csv << row.method << ',' << row.seed << ',' << row.budget << ','
            << format_acc(row.retain_test_acc) << ',' << format_acc(row.forget_test_acc) << ','
            << row.pairs_masked << "\n";
    }
    write_text_atomic(out_dir + "/sweep_" + to_string(config.unlearn.method) + ".csv", csv.str());
    return rows;
}

MetricsReport cmd_baseline(const ExperimentConfig& config, const std::string& which,
                           std::uint64_t seed) {
    config.validate();
    if (which != "scrub" && which != "finetune" && which != "retrain" && which != "neggrad") {
        throw ConfigError("unknown baseline '" + which + "'");
    }
    const std::string out_dir = resolve_out_dir(config.out_dir);

    TrainedLinear base = train_linear_base(config, seed);
    const auto misclass = misclass_by_class(base.head, base.dataset.test);
    const auto forget = choose_forget_classes(config.forget, misclass,
                                              base.dataset.train.num_classes, seed);
    const auto bundle = split_by_classes(base.dataset.train, base.dataset.test, forget);
    if (bundle.train_retain.size() == 0 || bundle.train_forget.size() == 0) {
        throw DataError("baseline: retain and forget splits must both be nonempty");
    }

    MetricsReport report;
    report.method = "linear_" + which;
    report.seeds = {seed};
    report.forget_classes.assign(forget.begin(), forget.end());
    report.before.train_retain = safe_eval(base.head, bundle.train_retain);
    report.before.train_forget = safe_eval(base.head, bundle.train_forget);
    report.before.test_retain = safe_eval(base.head, bundle.test_retain);
    report.before.test_forget = safe_eval(base.head, bundle.test_forget);

    TrainConfig opt = config.linear_train;
    opt.seed = seed;
    BaselineResult run;
    if (which == "scrub") {
        ScrubConfig sc = config.baseline.scrub;
        run = scrub_unlearn(base.head, bundle, sc, opt, config.baseline.stop);
    } else if (which == "finetune") {
        run = finetune_retain(base.head, bundle, opt, config.baseline.stop);
    } else if (which == "retrain") {
        run = retrain_scratch(bundle, opt, config.baseline.stop);
    } else {
        run = neggrad_plus(base.head, bundle, opt, config.baseline.neggrad_beta,
                           config.baseline.stop);
    }

    report.after.train_retain = safe_eval(run.head, bundle.train_retain);
    report.after.train_forget = safe_eval(run.head, bundle.train_forget);
    report.after.test_retain = safe_eval(run.head, bundle.test_retain);
    report.after.test_forget = safe_eval(run.head, bundle.test_forget);
    report.retain_test_delta_pct =
        relative_change(report.before.test_retain, report.after.test_retain);
    report.forget_test_delta_pct =
        report.before.test_forget > 0
            ? relative_change(report.before.test_forget, report.after.test_forget)
            : 0.0;

    report.ledger.add_phase(linear_train_phase(base.head, base.result.counts, "train"));
    report.ledger.add_phase(linear_train_phase(run.head, run.counts, "unlearn"));

    write_text_atomic(out_dir + "/report_" + report.method + "_seed" + std::to_string(seed) +
                          ".json",
                      metrics_report_to_json(report));
    write_text_atomic(out_dir + "/metrics_" + report.method + "_seed" + std::to_string(seed) +
                          ".jsonl",
                      metrics_jsonl(run.metrics));
    return report;
}

ReportTables cmd_report(const std::string& run_dir) {
    const fs::path dir(run_dir);
    if (!fs::exists(dir)) throw DataError(run_dir + ": run directory not found");

    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("report_", 0) == 0 && entry.path().extension() == ".json") {
            files.push_back(entry.path().string());
        }
    }
    if (files.empty()) throw DataError(run_dir + ": no report_*.json files");
    std::sort(files.begin(), files.end());

    ReportTables tables;
    std::ostringstream t1, t3;
    t1 << "method,seed,retain_delta_pct,forget_delta_pct\n";
    t3 << "method,seed,forward_flops,backward_flops\n";
    for (const auto& file : files) {
        std::ifstream in(file);
        std::stringstream buf;
        buf << in.rdbuf();
        const MetricsReport report = metrics_report_from_json(buf.str());
        std::uint64_t unlearn_fwd = 0, unlearn_bwd = 0;
        for (const auto& p : report.ledger.phases) {
            if (p.phase != "train") {  // unlearning-procedure cost only
                unlearn_fwd += p.forward;
                unlearn_bwd += p.backward;
            }
        }
        const std::string seed_text =
            report.seeds.empty() ? "" : std::to_string(report.seeds.front());
        {
            std::ostringstream row;
            row << report.method << ',' << seed_text << ','
                << format_acc(report.retain_test_delta_pct) << ','
                << format_acc(report.forget_test_delta_pct);
            tables.table1_rows.push_back(row.str());
            t1 << row.str() << "\n";
        }
        {
            std::ostringstream row;
            row << report.method << ',' << seed_text << ',' << unlearn_fwd << ',' << unlearn_bwd;
            tables.table3_rows.push_back(row.str());
            t3 << row.str() << "\n";
        }
    }
    write_text_atomic((dir / "table1.csv").string(), t1.str());
    write_text_atomic((dir / "table3.csv").string(), t3.str());
    return tables;
}

}  // namespace dkvb
