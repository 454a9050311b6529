#include "dkvb/evaluation.hpp"

#include <algorithm>
#include <cmath>

#include "dkvb/errors.hpp"

namespace dkvb {

std::uint64_t FlopModelDescriptor::per_example_forward() const {
    if (kind == Kind::Linear) return parameters;
    // projection MACs + distance MACs over unmasked keys + value averaging adds
    std::uint64_t flops = static_cast<std::uint64_t>(unmasked_per_codebook.size()) * key_dim *
                          input_dim;
    std::uint64_t nonempty = 0;
    for (std::uint64_t unmasked : unmasked_per_codebook) {
        flops += unmasked * key_dim;
        if (unmasked > 0) {
            flops += std::min(top_k, unmasked) * value_dim;  // summing selected values
            ++nonempty;
        }
    }
    flops += nonempty * value_dim;  // combining codebook outputs
    return flops;
}

FlopModelDescriptor describe(const LinearHead& head) {
    FlopModelDescriptor desc;
    desc.kind = FlopModelDescriptor::Kind::Linear;
    desc.parameters = head.parameter_count();
    return desc;
}

FlopModelDescriptor describe(const BottleneckModel& model) {
    FlopModelDescriptor desc;
    desc.kind = FlopModelDescriptor::Kind::Bottleneck;
    desc.input_dim = model.config.input_dim;
    desc.key_dim = model.config.key_dim;
    desc.top_k = model.config.top_k;
    desc.value_dim = model.config.value_dim;
    desc.unmasked_per_codebook.resize(model.config.num_codebooks);
    for (std::uint32_t c = 0; c < model.config.num_codebooks; ++c) {
        desc.unmasked_per_codebook[c] =
            model.config.pairs_per_codebook - model.mask.masked_per_codebook[c];
    }
    return desc;
}

std::uint64_t forward_flops(const FlopModelDescriptor& desc, std::uint64_t n_examples) {
    return desc.per_example_forward() * n_examples;
}

std::uint64_t backward_flops(std::uint64_t parameters, std::uint64_t steps,
                             std::uint64_t grad_examples) {
    return grad_examples * parameters + steps * 18ull * parameters;
}

void FlopLedger::add_phase(FlopPhase phase) { phases.push_back(std::move(phase)); }

std::uint64_t FlopLedger::forward_total() const {
    std::uint64_t t = 0;
    for (const auto& p : phases) t += p.forward;
    return t;
}

std::uint64_t FlopLedger::backward_total() const {
    std::uint64_t t = 0;
    for (const auto& p : phases) t += p.backward;
    return t;
}

FlopLedger FlopLedger::replay() const {
    FlopLedger out;
    out.double_flops_per_mac = double_flops_per_mac;
    for (const auto& p : phases) {
        FlopPhase r = p;
        r.forward = p.forward_examples * p.per_example_forward;
        r.backward = backward_flops(p.parameters, p.optimizer_steps, p.grad_examples);
        if (double_flops_per_mac) {
            r.forward *= 2;
            r.backward *= 2;
        }
        out.phases.push_back(std::move(r));
    }
    return out;
}

double relative_change(double before, double after) {
    if (before == 0.0) throw ConfigError("relative_change: baseline accuracy is zero");
    return (after - before) / before * 100.0;
}

std::vector<std::uint64_t> misclassification_counts(const std::vector<std::uint32_t>& labels,
                                                    const std::vector<std::uint32_t>& predictions,
                                                    std::uint32_t num_classes) {
    if (labels.size() != predictions.size()) {
        throw DataError("misclassification_counts: size mismatch");
    }
    std::vector<std::uint64_t> counts(num_classes, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) throw DataError("misclassification_counts: bad label");
        if (predictions[i] != labels[i]) ++counts[labels[i]];
    }
    return counts;
}

double LossAttacker::probability(double loss) const {
    const double z = weight * (loss - feature_mean) / feature_scale + bias;
    // stable sigmoid
    if (z >= 0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

LossAttacker fit_loss_attacker(const std::vector<double>& member_losses,
                               const std::vector<double>& nonmember_losses,
                               std::uint32_t iterations, double lr) {
    if (member_losses.empty() || nonmember_losses.empty()) {
        throw DataError("fit_loss_attacker: empty loss sets");
    }
    LossAttacker attacker;
    const std::size_t n = member_losses.size() + nonmember_losses.size();

    double mean = 0.0;
    for (double x : member_losses) mean += x;
    for (double x : nonmember_losses) mean += x;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double x : member_losses) var += (x - mean) * (x - mean);
    for (double x : nonmember_losses) var += (x - mean) * (x - mean);
    var /= static_cast<double>(n);
    attacker.feature_mean = mean;
    attacker.feature_scale = var > 0 ? std::sqrt(var) : 1.0;

    for (std::uint32_t it = 0; it < iterations; ++it) {
        double gw = 0.0, gb = 0.0;
        for (double x : member_losses) {
            const double p = attacker.probability(x);
            const double err = p - 1.0;
            gw += err * (x - attacker.feature_mean) / attacker.feature_scale;
            gb += err;
        }
        for (double x : nonmember_losses) {
            const double p = attacker.probability(x);
            gw += p * (x - attacker.feature_mean) / attacker.feature_scale;
            gb += p;
        }
        attacker.weight -= lr * gw / static_cast<double>(n);
        attacker.bias -= lr * gb / static_cast<double>(n);
    }
    return attacker;
}

double attacker_accuracy(const LossAttacker& attacker, const std::vector<double>& member_losses,
                         const std::vector<double>& nonmember_losses) {
    if (member_losses.empty() || nonmember_losses.empty()) {
        throw DataError("attacker_accuracy: empty loss sets");
    }
    std::uint64_t correct = 0;
    for (double x : member_losses) correct += attacker.probability(x) >= 0.5;
    for (double x : nonmember_losses) correct += attacker.probability(x) < 0.5;
    return static_cast<double>(correct) /
           static_cast<double>(member_losses.size() + nonmember_losses.size());
}

double cmia_evaluate(const std::vector<double>& forget_val, const std::vector<double>& heldout_val,
                     const std::vector<double>& forget_test,
                     const std::vector<double>& heldout_test) {
    const LossAttacker attacker = fit_loss_attacker(forget_val, heldout_val);
    return attacker_accuracy(attacker, forget_test, heldout_test);
}

namespace {

double loss_statistic(std::vector<double> losses, ParityStatistic stat) {
    if (losses.empty()) throw DataError("parity_search: empty loss set");
    if (stat == ParityStatistic::Mean) {
        double sum = 0.0;
        for (double x : losses) sum += x;
        return sum / static_cast<double>(losses.size());
    }
    std::sort(losses.begin(), losses.end());
    const std::size_t n = losses.size();
    return n % 2 ? losses[n / 2] : 0.5 * (losses[n / 2 - 1] + losses[n / 2]);
}

}  // namespace

std::uint64_t parity_search(
    const BottleneckModel& model,
    const std::function<void(BottleneckModel&, std::uint64_t)>& apply_budget,
    const std::vector<std::uint64_t>& budget_grid, const LabeledEmbeddings& forget_val,
    const LabeledEmbeddings& heldout_val, ParityStatistic stat) {
    if (budget_grid.empty()) throw ConfigError("parity_search: empty budget grid");

    double best_gap = 0.0;
    std::uint64_t best_budget = 0;
    bool first = true;
    for (std::uint64_t budget : budget_grid) {
        BottleneckModel probe = model;
        apply_budget(probe, budget);
        const double gap =
            std::abs(loss_statistic(example_losses(probe, forget_val), stat) -
                     loss_statistic(example_losses(probe, heldout_val), stat));
        if (first || gap < best_gap || (gap == best_gap && budget < best_budget)) {
            best_gap = gap;
            best_budget = budget;
            first = false;
        }
    }
    return best_budget;
}

std::vector<double> example_losses(const BottleneckModel& model, const LabeledEmbeddings& data) {
    if (data.size() == 0) throw DataError("example_losses: empty dataset");
    std::vector<double> losses(static_cast<std::size_t>(data.size()));
    for (std::int64_t i = 0; i < data.size(); ++i) {
        const ForwardResult fr = model.forward(data.features, i);
        losses[static_cast<std::size_t>(i)] =
            softmax_ce(fr.logits, data.labels[static_cast<std::size_t>(i)]).first;
    }
    return losses;
}

std::vector<double> example_losses(const LinearHead& head, const LabeledEmbeddings& data) {
    if (data.size() == 0) throw DataError("example_losses: empty dataset");
    std::vector<double> losses(static_cast<std::size_t>(data.size()));
    for (std::int64_t i = 0; i < data.size(); ++i) {
        losses[static_cast<std::size_t>(i)] =
            softmax_ce(head.logits(data.features, i), data.labels[static_cast<std::size_t>(i)])
                .first;
    }
    return losses;
}

}  // namespace dkvb
