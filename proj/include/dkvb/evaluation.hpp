#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dkvb/baselines.hpp"
#include "dkvb/bottleneck.hpp"
#include "dkvb/data.hpp"
#include "dkvb/training.hpp"

namespace dkvb {

// Analytic per-example forward cost under the one-FLOP-per-MAC convention.
struct FlopModelDescriptor {
    enum class Kind : std::uint32_t { Linear = 0, Bottleneck = 1 } kind = Kind::Linear;
    // linear
    std::uint64_t parameters = 0;  // P = K*D + K
    // bottleneck
    std::uint64_t input_dim = 0;
    std::uint64_t key_dim = 0;
    std::uint64_t top_k = 0;
    std::uint64_t value_dim = 0;
    std::vector<std::uint64_t> unmasked_per_codebook;

    std::uint64_t per_example_forward() const;
};

FlopModelDescriptor describe(const LinearHead& head);
FlopModelDescriptor describe(const BottleneckModel& model);

std::uint64_t forward_flops(const FlopModelDescriptor& desc, std::uint64_t n_examples);

// Gradient ops cost P per gradient example; each Adam step costs 18P.
std::uint64_t backward_flops(std::uint64_t parameters, std::uint64_t steps,
                             std::uint64_t grad_examples);

struct FlopPhase {
    std::string phase;  // train | unlearn | record
    std::uint64_t forward = 0;
    std::uint64_t backward = 0;
    // raw counts the entry can be recomputed from
    std::uint64_t forward_examples = 0;
    std::uint64_t per_example_forward = 0;
    std::uint64_t grad_examples = 0;
    std::uint64_t optimizer_steps = 0;
    std::uint64_t parameters = 0;
};

struct FlopLedger {
    std::vector<FlopPhase> phases;
    // Convention notes carried into reports.
    bool double_flops_per_mac = false;  // optional x2 toggle
    static constexpr const char* backward_rule = "grad_examples*P + steps*18*P";

    void add_phase(FlopPhase phase);
    std::uint64_t forward_total() const;
    std::uint64_t backward_total() const;
    std::uint64_t total() const { return forward_total() + backward_total(); }

    // Rebuild every phase from its raw counts; must equal the live entries.
    FlopLedger replay() const;
};

// (after - before) / before * 100; before must be nonzero.
double relative_change(double before, double after);

struct AccuracyQuad {
    double train_retain = 0;
    double train_forget = 0;
    double test_retain = 0;
    double test_forget = 0;
};

// One experiment's outcome: accuracies around the unlearning step, their
// relative changes, and the cost ledger.
struct MetricsReport {
    std::string method;
    std::vector<std::uint64_t> seeds;
    std::vector<std::uint32_t> forget_classes;
    AccuracyQuad before;
    AccuracyQuad after;
    double retain_test_delta_pct = 0;
    double forget_test_delta_pct = 0;
    FlopLedger ledger;
    std::uint64_t budget = 0;
    std::uint64_t pairs_masked = 0;
};

std::vector<std::uint64_t> misclassification_counts(const std::vector<std::uint32_t>& labels,
                                                    const std::vector<std::uint32_t>& predictions,
                                                    std::uint32_t num_classes);

// One-feature logistic regression fitted by full-batch gradient descent on the
// binary cross-entropy; the attacker for class membership inference.
struct LossAttacker {
    double weight = 0.0;
    double bias = 0.0;
    double feature_mean = 0.0;
    double feature_scale = 1.0;

    double probability(double loss) const;
};

LossAttacker fit_loss_attacker(const std::vector<double>& member_losses,
                               const std::vector<double>& nonmember_losses,
                               std::uint32_t iterations = 500, double lr = 0.5);

double attacker_accuracy(const LossAttacker& attacker, const std::vector<double>& member_losses,
                         const std::vector<double>& nonmember_losses);

// Fits on validation losses (forget labeled 1, held-out 0), reports accuracy
// on test losses. Defense succeeds near 50%.
double cmia_evaluate(const std::vector<double>& forget_val, const std::vector<double>& heldout_val,
                     const std::vector<double>& forget_test,
                     const std::vector<double>& heldout_test);

enum class ParityStatistic : std::uint32_t { Mean = 0, Median = 1 };

// Smallest budget on the grid minimizing |stat(forget_val losses) -
// stat(heldout_val losses)| after applying `apply_budget` to a fresh copy.
// apply_budget(model, budget) masks pairs; the mask is restored between
// budgets by the caller-provided snapshot inside this function.
std::uint64_t parity_search(const BottleneckModel& model,
                            const std::function<void(BottleneckModel&, std::uint64_t)>& apply_budget,
                            const std::vector<std::uint64_t>& budget_grid,
                            const LabeledEmbeddings& forget_val,
                            const LabeledEmbeddings& heldout_val,
                            ParityStatistic stat = ParityStatistic::Mean);

// Per-example CE losses of a model on a dataset.
std::vector<double> example_losses(const BottleneckModel& model, const LabeledEmbeddings& data);
std::vector<double> example_losses(const LinearHead& head, const LabeledEmbeddings& data);

}  // namespace dkvb
