#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dkvb/baselines.hpp"
#include "dkvb/bottleneck.hpp"
#include "dkvb/data.hpp"
#include "dkvb/evaluation.hpp"
#include "dkvb/training.hpp"
#include "dkvb/unlearning.hpp"

namespace dkvb {

struct DataSourceConfig {
    enum class Kind : std::uint32_t { Synthetic = 0, Emb1 = 1 } kind = Kind::Synthetic;
    SyntheticSpec synthetic;
    std::string train_path;
    std::string test_path;

    void validate() const;
};

struct ForgetSelection {
    enum class Mode : std::uint32_t { BestLearned = 0, Random = 1, Fixed = 2 } mode =
        Mode::BestLearned;
    std::vector<std::uint32_t> fixed_classes;
    std::uint32_t random_count = 1;
};

struct UnlearnSettings {
    UnlearnMethod method = UnlearnMethod::Activations;
    std::uint64_t budget = 0;
    std::vector<std::uint64_t> grid;
    bool use_cached_traces = false;  // reuse final-epoch traces instead of a fresh pass
};

struct BaselineSettings {
    std::string which = "scrub";  // scrub|finetune|retrain|neggrad
    ScrubConfig scrub;
    double neggrad_beta = 0.95;
    StopRule stop;
};

struct ExperimentConfig {
    DataSourceConfig data;
    BottleneckConfig bottleneck;      // value_dim/input_dim resolved from data
    std::uint32_t key_init_epochs = 10;
    std::uint32_t key_init_batch = 256;
    TrainConfig train;                // value-code training
    TrainConfig linear_train;         // baseline base-model training
    UnlearnSettings unlearn;
    BaselineSettings baseline;
    ForgetSelection forget;
    std::vector<std::uint64_t> seeds = {1};
    std::string out_dir = "runs";

    void validate() const;
};

struct Dataset {
    LabeledEmbeddings train;
    LabeledEmbeddings test;
};

// Loads EMB1 splits or draws the synthetic set. For synthetic data the run
// seed replaces the spec seed, so different seeds give fresh replicates.
Dataset load_dataset(const DataSourceConfig& source, std::uint64_t run_seed);

// Per-class misclassification tallies of a trained model on the test split.
std::vector<std::uint64_t> misclass_by_class(const BottleneckModel& model,
                                             const LabeledEmbeddings& test, unsigned workers = 1);
std::vector<std::uint64_t> misclass_by_class(const LinearHead& head,
                                             const LabeledEmbeddings& test);

std::set<std::uint32_t> choose_forget_classes(const ForgetSelection& mode,
                                              const std::vector<std::uint64_t>& misclass,
                                              std::uint32_t num_classes, std::uint64_t seed);

struct TrainedBottleneck {
    BottleneckModel model;
    TrainResult train_result;
    Dataset dataset;
};

// Key init followed by value training, all seeded by run_seed.
TrainedBottleneck train_bottleneck(const ExperimentConfig& config, std::uint64_t run_seed);

struct TrainedLinear {
    LinearHead head;
    BaselineResult result;
    Dataset dataset;
};

TrainedLinear train_linear_base(const ExperimentConfig& config, std::uint64_t run_seed);

// Six-cell accuracy row (full/retain/forget x train/test).
struct InitialPerformance {
    std::string model;
    std::uint64_t seed = 0;
    double train = 0, train_retain = 0, train_forget = 0;
    double test = 0, test_retain = 0, test_forget = 0;
};

// Command outcomes (also written to out_dir as CSV/JSON).
struct TrainCommandResult {
    std::vector<InitialPerformance> rows;
    std::vector<std::string> checkpoint_paths;
};

TrainCommandResult cmd_train(const ExperimentConfig& config, const std::string& model_kind);

struct UnlearnCommandResult {
    MetricsReport report;
    UnlearnReport unlearn;
    std::set<std::uint32_t> forget_classes;
    bool trace_disjoint = false;
    bool degenerate = false;  // every codebook fully masked afterwards
};

UnlearnCommandResult cmd_unlearn(const ExperimentConfig& config, const std::string& checkpoint,
                                 std::uint64_t seed);

struct SweepRow {
    std::string method;
    std::string seed;  // number or "mean"
    std::uint64_t budget = 0;
    double retain_test_acc = 0;
    double forget_test_acc = 0;
    std::uint64_t pairs_masked = 0;
};

std::vector<SweepRow> cmd_sweep(const ExperimentConfig& config, const std::string& checkpoint);

MetricsReport cmd_baseline(const ExperimentConfig& config, const std::string& which,
                           std::uint64_t seed);

struct ReportTables {
    std::vector<std::string> table1_rows;  // method,retain_delta_pct,forget_delta_pct
    std::vector<std::string> table3_rows;  // method,forward_flops,backward_flops
};

ReportTables cmd_report(const std::string& run_dir);

// Serialization helpers shared by commands and tests.
std::string metrics_report_to_json(const MetricsReport& report);
MetricsReport metrics_report_from_json(const std::string& json_text);
std::string unlearn_report_to_json(const UnlearnReport& report, const std::string& method);
void write_text_atomic(const std::string& path, const std::string& content);

void save_linear_head(const std::string& path, const LinearHead& head);
LinearHead load_linear_head(const std::string& path);

void save_traces(const std::string& path, const std::vector<SelectionTrace>& traces);
std::vector<SelectionTrace> load_traces(const std::string& path);

// Applies DKVB_OUT_ROOT to relative output directories.
std::string resolve_out_dir(const std::string& out_dir);

}  // namespace dkvb
