#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dkvb/bottleneck.hpp"
#include "dkvb/data.hpp"

namespace dkvb {

enum class GradNormalization : std::uint32_t {
    TouchCount = 0,  // divide a slot's batch gradient by its touch count
    BatchSize = 1,   // divide by the batch size instead
};

struct TrainConfig {
    std::uint32_t epochs = 20;
    std::uint32_t batch_size = 256;
    double learning_rate = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double grad_clip = 0.0;  // global L2 threshold; 0 disables
    GradNormalization normalization = GradNormalization::TouchCount;
    std::uint64_t seed = 1;
    unsigned workers = 1;

    void validate() const;
};

// Stable softmax cross-entropy: loss = -log p[label], grad = p - onehot(label).
std::pair<double, Eigen::VectorXd> softmax_ce(const Eigen::VectorXd& logits, std::uint32_t label);

struct EpochMetrics {
    std::uint32_t epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double test_acc = 0.0;  // NaN when no test split supplied
    std::string method;     // empty for plain training
    std::string phase;      // max|min for distillation baselines
};

// Adam moments kept only for value slots that have received a gradient.
struct SparseAdamState {
    struct Slot {
        Eigen::VectorXd m;
        Eigen::VectorXd v;
        std::uint64_t step = 0;
    };
    std::map<PairIndex, Slot> slots;
};

// Raw counts a FLOP ledger can be rebuilt from.
struct TrainCounts {
    std::uint64_t forward_examples = 0;
    std::uint64_t grad_examples = 0;
    std::uint64_t optimizer_steps = 0;
    std::uint64_t grad_coord_ops = 0;  // value coordinates receiving gradients
    std::uint64_t adam_coord_ops = 0;  // 18 * coordinates updated per step
};

struct TrainResult {
    std::vector<EpochMetrics> metrics;
    TrainCounts counts;
    // Final-epoch selection traces in dataset order; reusable for activation
    // recording since keys and mask do not move during value training.
    std::vector<SelectionTrace> final_epoch_traces;
};

// Cross-entropy training of the value codes under the average-pooling head.
// Only slots appearing in a batch's traces are touched.
TrainResult train_values(BottleneckModel& model, const LabeledEmbeddings& data,
                         const TrainConfig& cfg, const LabeledEmbeddings* test = nullptr);

double evaluate(const BottleneckModel& model, const LabeledEmbeddings& data,
                unsigned workers = 1);

std::vector<std::uint32_t> predict_all(const BottleneckModel& model,
                                       const LabeledEmbeddings& data, unsigned workers = 1);

// Seeded example order for one epoch; exposed so audits can replay training.
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint32_t epoch, std::size_t n);

}  // namespace dkvb
