#include "dkvb/training.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "dkvb/errors.hpp"
#include "dkvb/rng.hpp"
#include "parallel.hpp"

namespace dkvb {

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning rate must be positive");
    if (grad_clip < 0.0) throw ConfigError("train: grad clip must be >= 0");
}

std::pair<double, Eigen::VectorXd> softmax_ce(const Eigen::VectorXd& logits,
                                              std::uint32_t label) {
    if (static_cast<Eigen::Index>(label) >= logits.size()) {
        throw DataError("softmax_ce: label out of range");
    }
    const double max_logit = logits.maxCoeff();
    Eigen::VectorXd p = (logits.array() - max_logit).exp();
    const double z = p.sum();
    p /= z;
    const double loss = -(logits[label] - max_logit - std::log(z));
    p[label] -= 1.0;
    return {loss, std::move(p)};
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint32_t epoch, std::size_t n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto stream = rng::make_stream(seed, "train-order", epoch);
    rng::shuffle(order, stream);
    return order;
}

namespace {

struct ExampleGrad {
    double loss = 0.0;
    bool correct = false;
    bool degenerate = false;
    Eigen::VectorXd grad_logits;
    SelectionTrace trace;
};

struct SlotGrad {
    Eigen::VectorXd sum;
    std::uint32_t touches = 0;
};

}  // namespace

TrainResult train_values(BottleneckModel& model, const LabeledEmbeddings& data,
                         const TrainConfig& cfg, const LabeledEmbeddings* test) {
    cfg.validate();
    if (cfg.epochs == 0) throw ConfigError("train_values: epochs must be positive");
    data.validate();
    if (!model.keys_frozen) throw ConfigError("train_values: keys must be initialized first");
    if (model.config.value_dim != data.num_classes) {
        throw ConfigError("train_values: value_dim must equal num_classes");
    }

    const std::size_t n = static_cast<std::size_t>(data.size());
    const std::uint32_t value_dim = model.config.value_dim;
    TrainResult result;
    SparseAdamState adam;

    std::vector<ExampleGrad> per_example(n);

    for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<std::size_t> order = epoch_order(cfg.seed, epoch, n);
        double epoch_loss = 0.0;
        std::uint64_t epoch_correct = 0;
        std::uint64_t degenerate_examples = 0;

        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t stop = std::min(n, start + cfg.batch_size);
            const std::size_t batch = stop - start;

            detail::parallel_for(batch, cfg.workers, [&](std::size_t b) {
                const std::size_t idx = order[start + b];
                ExampleGrad& eg = per_example[b];
                ForwardResult fr = model.forward(data.features, static_cast<std::int64_t>(idx));
                eg.degenerate = fr.degenerate;
                eg.trace = std::move(fr.trace);
                if (eg.degenerate) {
                    eg.loss = 0.0;
                    eg.correct = false;
                    eg.grad_logits.resize(0);
                    return;
                }
                const std::uint32_t label = data.labels[idx];
                auto [loss, grad] = softmax_ce(fr.logits, label);
                eg.loss = loss;
                eg.correct = model.predict(fr) == label;
                eg.grad_logits = std::move(grad);
            });
            result.counts.forward_examples += batch;

            // Merge per-example gradients in example order; worker-independent.
            std::map<PairIndex, SlotGrad> batch_grads;
            for (std::size_t b = 0; b < batch; ++b) {
                const ExampleGrad& eg = per_example[b];
                if (eg.degenerate) {
                    ++degenerate_examples;
                    continue;
                }
                epoch_loss += eg.loss;
                epoch_correct += eg.correct ? 1 : 0;
                result.counts.grad_examples += 1;

                std::uint32_t nonempty = 0;
                for (const auto& sel : eg.trace.per_codebook) nonempty += !sel.empty();
                for (std::uint32_t c = 0; c < eg.trace.per_codebook.size(); ++c) {
                    const auto& sel = eg.trace.per_codebook[c];
                    if (sel.empty()) continue;
                    const double scale = 1.0 / (static_cast<double>(nonempty) *
                                                static_cast<double>(sel.size()));
                    for (std::uint32_t m : sel) {
                        auto [it, inserted] =
                            batch_grads.try_emplace(PairIndex{c, m});
                        if (inserted) it->second.sum = Eigen::VectorXd::Zero(value_dim);
                        it->second.sum += scale * eg.grad_logits;
                        it->second.touches += 1;
                        result.counts.grad_coord_ops += value_dim;
                    }
                }
            }
            if (epoch + 1 == cfg.epochs) {
                result.final_epoch_traces.resize(n);
                for (std::size_t b = 0; b < batch; ++b) {
                    result.final_epoch_traces[order[start + b]] = per_example[b].trace;
                }
            }
            if (batch_grads.empty()) continue;

            for (auto& [pair, sg] : batch_grads) {
                const double denom = cfg.normalization == GradNormalization::TouchCount
                                         ? static_cast<double>(sg.touches)
                                         : static_cast<double>(batch);
                sg.sum /= denom;
            }

            if (cfg.grad_clip > 0.0) {
                double sq = 0.0;
                for (const auto& [pair, sg] : batch_grads) sq += sg.sum.squaredNorm();
                const double norm = std::sqrt(sq);
                if (norm > cfg.grad_clip) {
                    const double scale = cfg.grad_clip / norm;
                    for (auto& [pair, sg] : batch_grads) sg.sum *= scale;
                }
            }

            for (auto& [pair, sg] : batch_grads) {
                auto [it, inserted] = adam.slots.try_emplace(pair);
                auto& slot = it->second;
                if (inserted) {
                    slot.m = Eigen::VectorXd::Zero(value_dim);
                    slot.v = Eigen::VectorXd::Zero(value_dim);
                }
                slot.step += 1;
                slot.m = cfg.beta1 * slot.m + (1.0 - cfg.beta1) * sg.sum;
                slot.v = cfg.beta2 * slot.v + (1.0 - cfg.beta2) * sg.sum.cwiseProduct(sg.sum);
                const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(slot.step));
                const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(slot.step));
                Eigen::ArrayXd m_hat = slot.m.array() / bc1;
                Eigen::ArrayXd v_hat = slot.v.array() / bc2;
                model.values[pair.codebook].row(pair.key) -=
                    (cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon))
                        .matrix()
                        .transpose();
                result.counts.adam_coord_ops += 18ull * value_dim;
            }
            result.counts.optimizer_steps += 1;
        }

        if (degenerate_examples == n) {
            throw DegenerateModelError("train_values: every example hit a fully masked model");
        }

        EpochMetrics em;
        em.epoch = epoch;
        const double counted = static_cast<double>(n - degenerate_examples);
        em.train_loss = counted > 0 ? epoch_loss / counted : 0.0;
        em.train_acc = static_cast<double>(epoch_correct) / static_cast<double>(n);
        em.test_acc = test ? evaluate(model, *test, cfg.workers)
                           : std::numeric_limits<double>::quiet_NaN();
        result.metrics.push_back(em);
    }
    return result;
}

std::vector<std::uint32_t> predict_all(const BottleneckModel& model,
                                       const LabeledEmbeddings& data, unsigned workers) {
    const std::size_t n = static_cast<std::size_t>(data.size());
    std::vector<std::uint32_t> preds(n);
    detail::parallel_for(n, workers, [&](std::size_t i) {
        preds[i] = model.predict(model.forward(data.features, static_cast<std::int64_t>(i)));
    });
    return preds;
}

double evaluate(const BottleneckModel& model, const LabeledEmbeddings& data, unsigned workers) {
    if (data.size() == 0) throw DataError("evaluate: empty dataset");
    const auto preds = predict_all(model, data, workers);
    std::uint64_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        correct += preds[i] == data.labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

}  // namespace dkvb
