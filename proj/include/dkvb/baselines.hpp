#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "dkvb/data.hpp"
#include "dkvb/training.hpp"

namespace dkvb {

// Frozen backbone + one trainable linear layer.
struct LinearHead {
    RowMatrixXd weight;     // K x D
    Eigen::VectorXd bias;   // K

    std::uint32_t classes() const { return static_cast<std::uint32_t>(weight.rows()); }
    std::uint64_t parameter_count() const {
        return static_cast<std::uint64_t>(weight.rows()) * weight.cols() +
               static_cast<std::uint64_t>(bias.size());
    }
    Eigen::VectorXd logits(const RowMatrixXf& features, std::int64_t row) const;
    std::uint32_t predict(const RowMatrixXf& features, std::int64_t row) const;
};

// Entries iid N(0, 1/D); bias zero.
LinearHead make_linear_head(std::uint32_t classes, std::uint32_t dim, std::uint64_t seed);

enum class KlDirection : std::uint32_t { StudentTeacher = 0, TeacherStudent = 1 };

struct ScrubConfig {
    std::uint32_t msteps = 3;  // epochs 1..msteps run a max-step first
    std::uint32_t epochs = 10;
    double learning_rate = 0.001;
    std::uint32_t forget_batch_size = 256;
    std::uint32_t retain_batch_size = 256;
    double alpha = 1.0;  // weight on the retain-task CE term
    KlDirection kl_direction = KlDirection::StudentTeacher;

    void validate() const;
};

struct BaselineResult {
    LinearHead head;
    std::vector<EpochMetrics> metrics;
    TrainCounts counts;
    std::uint32_t epochs_run = 0;
    bool stopped_early = false;
};

// KL(softmax(p) || softmax(q)), computed in log space.
double kl_divergence(const Eigen::VectorXd& p_logits, const Eigen::VectorXd& q_logits);

// Gradient of the chosen-direction KL with respect to the student logits.
Eigen::VectorXd kl_grad_student(const Eigen::VectorXd& student_logits,
                                const Eigen::VectorXd& teacher_logits, KlDirection direction);

// Plain cross-entropy training of the head with Adam.
BaselineResult train_linear(const LinearHead& head, const LabeledEmbeddings& data,
                            const TrainConfig& cfg);

double evaluate(const LinearHead& head, const LabeledEmbeddings& data);
std::vector<std::uint32_t> predict_all(const LinearHead& head, const LabeledEmbeddings& data);

// Halt once forget test accuracy hits 0% or moves < 0.1 points absolute over
// three epochs.
struct StopRule {
    bool enabled = true;
    double plateau_delta = 0.001;
    std::uint32_t plateau_epochs = 3;
};

// Distillation unlearning: ascend KL to the teacher on forget data for the
// first msteps epochs, always descend KL + alpha*CE on retain data.
BaselineResult scrub_unlearn(const LinearHead& teacher, const DatasetBundle& bundle,
                             const ScrubConfig& cfg, const TrainConfig& opt,
                             const StopRule& stop = {});

// Continue CE training on the retain split only.
BaselineResult finetune_retain(const LinearHead& head, const DatasetBundle& bundle,
                               const TrainConfig& cfg, const StopRule& stop = {});

// Fresh seeded head trained on the retain split only.
BaselineResult retrain_scratch(const DatasetBundle& bundle, const TrainConfig& cfg,
                               const StopRule& stop = {});

// Joint objective beta*CE(retain) - (1-beta)*CE(forget) over interleaved
// retain/forget batches. beta = 1 takes the finetune path exactly.
BaselineResult neggrad_plus(const LinearHead& head, const DatasetBundle& bundle,
                            const TrainConfig& cfg, double beta, const StopRule& stop = {});

}  // namespace dkvb
