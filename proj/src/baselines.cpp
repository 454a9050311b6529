#include "dkvb/baselines.hpp"

#include <cmath>
#include <limits>

#include "dkvb/errors.hpp"
#include "dkvb/rng.hpp"

namespace dkvb {

Eigen::VectorXd LinearHead::logits(const RowMatrixXf& features, std::int64_t row) const {
    return weight * features.row(row).transpose().cast<double>() + bias;
}

std::uint32_t LinearHead::predict(const RowMatrixXf& features, std::int64_t row) const {
    const Eigen::VectorXd z = logits(features, row);
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < z.size(); ++k) {
        if (z[k] > z[best]) best = k;
    }
    return static_cast<std::uint32_t>(best);
}

LinearHead make_linear_head(std::uint32_t classes, std::uint32_t dim, std::uint64_t seed) {
    if (classes == 0 || dim == 0) throw ConfigError("linear head: classes and dim must be positive");
    LinearHead head;
    head.weight.resize(classes, dim);
    head.bias = Eigen::VectorXd::Zero(classes);
    auto stream = rng::make_stream(seed, "linear-head");
    const double stddev = 1.0 / std::sqrt(static_cast<double>(dim));
    for (std::int64_t i = 0; i < head.weight.rows(); ++i) {
        for (std::int64_t j = 0; j < head.weight.cols(); ++j) {
            head.weight(i, j) = stddev * stream.next_normal();
        }
    }
    return head;
}

void ScrubConfig::validate() const {
    if (msteps > epochs) throw ConfigError("scrub: msteps must be <= epochs");
    if (epochs == 0) throw ConfigError("scrub: epochs must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("scrub: learning rate must be positive");
    if (forget_batch_size == 0 || retain_batch_size == 0) {
        throw ConfigError("scrub: batch sizes must be positive");
    }
    if (alpha < 0.0) throw ConfigError("scrub: alpha must be >= 0");
}

namespace {

Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits) {
    const double max_logit = logits.maxCoeff();
    const Eigen::ArrayXd shifted = logits.array() - max_logit;
    const double lse = std::log(shifted.exp().sum());
    return (shifted - lse).matrix();
}

}  // namespace

double kl_divergence(const Eigen::VectorXd& p_logits, const Eigen::VectorXd& q_logits) {
    const Eigen::VectorXd lp = log_softmax(p_logits);
    const Eigen::VectorXd lq = log_softmax(q_logits);
    return (lp.array().exp() * (lp - lq).array()).sum();
}

Eigen::VectorXd kl_grad_student(const Eigen::VectorXd& student_logits,
                                const Eigen::VectorXd& teacher_logits, KlDirection direction) {
    if (direction == KlDirection::StudentTeacher) {
        // d/dz KL(s||t) = p_s * (log p_s - log p_t - KL)
        const Eigen::VectorXd ls = log_softmax(student_logits);
        const Eigen::VectorXd lt = log_softmax(teacher_logits);
        const Eigen::ArrayXd ps = ls.array().exp();
        const double kl = (ps * (ls - lt).array()).sum();
        return (ps * ((ls - lt).array() - kl)).matrix();
    }
    // d/dz KL(t||s) = p_s - p_t
    return (log_softmax(student_logits).array().exp() -
            log_softmax(teacher_logits).array().exp())
        .matrix();
}

namespace {

struct DenseAdam {
    RowMatrixXd m_w, v_w;
    Eigen::VectorXd m_b, v_b;
    std::uint64_t step = 0;

    void init(const LinearHead& head) {
        m_w = RowMatrixXd::Zero(head.weight.rows(), head.weight.cols());
        v_w = m_w;
        m_b = Eigen::VectorXd::Zero(head.bias.size());
        v_b = m_b;
    }

    void apply(LinearHead& head, RowMatrixXd& g_w, Eigen::VectorXd& g_b,
               const TrainConfig& cfg, double lr) {
        if (cfg.grad_clip > 0.0) {
            const double norm = std::sqrt(g_w.squaredNorm() + g_b.squaredNorm());
            if (norm > cfg.grad_clip) {
                const double scale = cfg.grad_clip / norm;
                g_w *= scale;
                g_b *= scale;
            }
        }
        step += 1;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        m_w = cfg.beta1 * m_w + (1.0 - cfg.beta1) * g_w;
        v_w = cfg.beta2 * v_w + (1.0 - cfg.beta2) * g_w.cwiseProduct(g_w);
        m_b = cfg.beta1 * m_b + (1.0 - cfg.beta1) * g_b;
        v_b = cfg.beta2 * v_b + (1.0 - cfg.beta2) * g_b.cwiseProduct(g_b);
        head.weight.array() -=
            lr * (m_w.array() / bc1) / ((v_w.array() / bc2).sqrt() + cfg.adam_epsilon);
        head.bias.array() -=
            lr * (m_b.array() / bc1) / ((v_b.array() / bc2).sqrt() + cfg.adam_epsilon);
    }
};

bool should_stop(const StopRule& stop, const std::vector<double>& forget_acc_history) {
    if (!stop.enabled || forget_acc_history.empty()) return false;
    if (forget_acc_history.back() == 0.0) return true;
    if (forget_acc_history.size() < stop.plateau_epochs + 1) return false;
    const std::size_t from = forget_acc_history.size() - (stop.plateau_epochs + 1);
    double lo = forget_acc_history[from];
    double hi = lo;
    for (std::size_t i = from; i < forget_acc_history.size(); ++i) {
        lo = std::min(lo, forget_acc_history[i]);
        hi = std::max(hi, forget_acc_history[i]);
    }
    return hi - lo < stop.plateau_delta;
}

// One shared CE/Adam loop so finetune, retrain and the beta=1 NegGrad+ limit
// are bit-identical by construction.
BaselineResult fit_ce(LinearHead head, const LabeledEmbeddings& data, const TrainConfig& cfg,
                      const std::string& method, const LabeledEmbeddings* forget_test,
                      const StopRule& stop) {
    cfg.validate();
    data.validate();
    if (head.weight.cols() != data.dim()) throw ConfigError("fit_ce: dimension mismatch");

    BaselineResult result;
    DenseAdam adam;
    adam.init(head);
    const std::size_t n = static_cast<std::size_t>(data.size());
    RowMatrixXd g_w(head.weight.rows(), head.weight.cols());
    Eigen::VectorXd g_b(head.bias.size());
    std::vector<double> forget_history;

    for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = epoch_order(cfg.seed, epoch, n);
        double epoch_loss = 0.0;
        std::uint64_t correct = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t stop_at = std::min(n, start + cfg.batch_size);
            const double batch = static_cast<double>(stop_at - start);
            g_w.setZero();
            g_b.setZero();
            for (std::size_t i = start; i < stop_at; ++i) {
                const std::int64_t row = static_cast<std::int64_t>(order[i]);
                const std::uint32_t label = data.labels[order[i]];
                const Eigen::VectorXd z = head.logits(data.features, row);
                auto [loss, grad] = softmax_ce(z, label);
                epoch_loss += loss;
                correct += head.predict(data.features, row) == label;
                g_w += grad * data.features.row(row).cast<double>();
                g_b += grad;
            }
            g_w /= batch;
            g_b /= batch;
            adam.apply(head, g_w, g_b, cfg, cfg.learning_rate);
            result.counts.forward_examples += stop_at - start;
            result.counts.grad_examples += stop_at - start;
            result.counts.optimizer_steps += 1;
        }

        EpochMetrics em;
        em.epoch = epoch;
        em.method = method;
        em.train_loss = epoch_loss / static_cast<double>(n);
        em.train_acc = static_cast<double>(correct) / static_cast<double>(n);
        em.test_acc = std::numeric_limits<double>::quiet_NaN();
        result.metrics.push_back(em);
        result.epochs_run = epoch + 1;

        if (forget_test && forget_test->size() > 0) {
            forget_history.push_back(evaluate(head, *forget_test));
            if (should_stop(stop, forget_history)) {
                result.stopped_early = result.epochs_run < cfg.epochs;
                break;
            }
        }
    }
    result.head = std::move(head);
    return result;
}

}  // namespace

BaselineResult train_linear(const LinearHead& head, const LabeledEmbeddings& data,
                            const TrainConfig& cfg) {
    StopRule no_stop;
    no_stop.enabled = false;
    return fit_ce(head, data, cfg, "linear", nullptr, no_stop);
}

double evaluate(const LinearHead& head, const LabeledEmbeddings& data) {
    if (data.size() == 0) throw DataError("evaluate: empty dataset");
    std::uint64_t correct = 0;
    for (std::int64_t i = 0; i < data.size(); ++i) {
        correct += head.predict(data.features, i) == data.labels[static_cast<std::size_t>(i)];
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<std::uint32_t> predict_all(const LinearHead& head, const LabeledEmbeddings& data) {
    std::vector<std::uint32_t> preds(static_cast<std::size_t>(data.size()));
    for (std::int64_t i = 0; i < data.size(); ++i) {
        preds[static_cast<std::size_t>(i)] = head.predict(data.features, i);
    }
    return preds;
}

BaselineResult scrub_unlearn(const LinearHead& teacher, const DatasetBundle& bundle,
                             const ScrubConfig& cfg, const TrainConfig& opt,
                             const StopRule& stop) {
    cfg.validate();
    if (bundle.train_retain.size() == 0 || bundle.train_forget.size() == 0) {
        throw DataError("scrub: retain and forget training splits must be nonempty");
    }

    BaselineResult result;
    LinearHead student = teacher;
    DenseAdam adam;
    adam.init(student);
    RowMatrixXd g_w(student.weight.rows(), student.weight.cols());
    Eigen::VectorXd g_b(student.bias.size());
    std::vector<double> forget_history;

    const std::size_t n_forget = static_cast<std::size_t>(bundle.train_forget.size());
    const std::size_t n_retain = static_cast<std::size_t>(bundle.train_retain.size());

    for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const bool do_max = epoch < cfg.msteps;
        if (do_max) {
            // max-step: ascend KL(student, teacher) on the forget set
            auto stream = rng::make_stream(opt.seed, "scrub-max-order", epoch);
            std::vector<std::size_t> order(n_forget);
            for (std::size_t i = 0; i < n_forget; ++i) order[i] = i;
            rng::shuffle(order, stream);
            double kl_sum = 0.0;
            for (std::size_t start = 0; start < n_forget; start += cfg.forget_batch_size) {
                const std::size_t stop_at = std::min(n_forget, start + cfg.forget_batch_size);
                g_w.setZero();
                g_b.setZero();
                for (std::size_t i = start; i < stop_at; ++i) {
                    const std::int64_t row = static_cast<std::int64_t>(order[i]);
                    const Eigen::VectorXd zs = student.logits(bundle.train_forget.features, row);
                    const Eigen::VectorXd zt = teacher.logits(bundle.train_forget.features, row);
                    kl_sum += kl_divergence(zs, zt);
                    const Eigen::VectorXd g = -kl_grad_student(zs, zt, cfg.kl_direction);
                    g_w += g * bundle.train_forget.features.row(row).cast<double>();
                    g_b += g;
                }
                const double batch = static_cast<double>(stop_at - start);
                g_w /= batch;
                g_b /= batch;
                adam.apply(student, g_w, g_b, opt, cfg.learning_rate);
                result.counts.forward_examples += stop_at - start;
                result.counts.grad_examples += stop_at - start;
                result.counts.optimizer_steps += 1;
            }
            EpochMetrics em;
            em.epoch = epoch;
            em.method = "scrub";
            em.phase = "max";
            em.train_loss = kl_sum / static_cast<double>(n_forget);
            em.train_acc = evaluate(student, bundle.train_forget);
            em.test_acc = bundle.test_forget.size() > 0
                              ? evaluate(student, bundle.test_forget)
                              : std::numeric_limits<double>::quiet_NaN();
            result.metrics.push_back(em);
        }

        // min-step: descend KL + alpha*CE on the retain set
        {
            auto stream = rng::make_stream(opt.seed, "scrub-min-order", epoch);
            std::vector<std::size_t> order(n_retain);
            for (std::size_t i = 0; i < n_retain; ++i) order[i] = i;
            rng::shuffle(order, stream);
            double loss_sum = 0.0;
            for (std::size_t start = 0; start < n_retain; start += cfg.retain_batch_size) {
                const std::size_t stop_at = std::min(n_retain, start + cfg.retain_batch_size);
                g_w.setZero();
                g_b.setZero();
                for (std::size_t i = start; i < stop_at; ++i) {
                    const std::int64_t row = static_cast<std::int64_t>(order[i]);
                    const std::uint32_t label = bundle.train_retain.labels[order[i]];
                    const Eigen::VectorXd zs = student.logits(bundle.train_retain.features, row);
                    const Eigen::VectorXd zt = teacher.logits(bundle.train_retain.features, row);
                    auto [ce, ce_grad] = softmax_ce(zs, label);
                    loss_sum += kl_divergence(zs, zt) + cfg.alpha * ce;
                    const Eigen::VectorXd g =
                        kl_grad_student(zs, zt, cfg.kl_direction) + cfg.alpha * ce_grad;
                    g_w += g * bundle.train_retain.features.row(row).cast<double>();
                    g_b += g;
                }
                const double batch = static_cast<double>(stop_at - start);
                g_w /= batch;
                g_b /= batch;
                adam.apply(student, g_w, g_b, opt, cfg.learning_rate);
                result.counts.forward_examples += stop_at - start;
                result.counts.grad_examples += stop_at - start;
                result.counts.optimizer_steps += 1;
            }
            EpochMetrics em;
            em.epoch = epoch;
            em.method = "scrub";
            em.phase = "min";
            em.train_loss = loss_sum / static_cast<double>(n_retain);
            em.train_acc = evaluate(student, bundle.train_retain);
            em.test_acc = bundle.test_retain.size() > 0
                              ? evaluate(student, bundle.test_retain)
                              : std::numeric_limits<double>::quiet_NaN();
            result.metrics.push_back(em);
        }
        result.epochs_run = epoch + 1;

        if (bundle.test_forget.size() > 0) {
            forget_history.push_back(evaluate(student, bundle.test_forget));
            if (should_stop(stop, forget_history)) {
                result.stopped_early = result.epochs_run < cfg.epochs;
                break;
            }
        }
    }
    result.head = std::move(student);
    return result;
}

BaselineResult finetune_retain(const LinearHead& head, const DatasetBundle& bundle,
                               const TrainConfig& cfg, const StopRule& stop) {
    if (bundle.train_retain.size() == 0) throw DataError("finetune: empty retain split");
    return fit_ce(head, bundle.train_retain, cfg, "finetune",
                  bundle.test_forget.size() > 0 ? &bundle.test_forget : nullptr, stop);
}

BaselineResult retrain_scratch(const DatasetBundle& bundle, const TrainConfig& cfg,
                               const StopRule& stop) {
    if (bundle.train_retain.size() == 0) throw DataError("retrain: empty retain split");
    LinearHead head = make_linear_head(bundle.train_retain.num_classes,
                                       static_cast<std::uint32_t>(bundle.train_retain.dim()),
                                       cfg.seed);
    auto result = fit_ce(head, bundle.train_retain, cfg, "retrain",
                         bundle.test_forget.size() > 0 ? &bundle.test_forget : nullptr, stop);
    return result;
}

BaselineResult neggrad_plus(const LinearHead& head, const DatasetBundle& bundle,
                            const TrainConfig& cfg, double beta, const StopRule& stop) {
    if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("neggrad: beta must be in (0,1]");
    if (bundle.train_retain.size() == 0 || bundle.train_forget.size() == 0) {
        throw DataError("neggrad: retain and forget training splits must be nonempty");
    }
    if (beta == 1.0) {
        // exact finetune limit
        auto result = fit_ce(head, bundle.train_retain, cfg, "neggrad",
                             bundle.test_forget.size() > 0 ? &bundle.test_forget : nullptr, stop);
        return result;
    }
    cfg.validate();

    BaselineResult result;
    LinearHead student = head;
    DenseAdam adam;
    adam.init(student);
    RowMatrixXd g_w(student.weight.rows(), student.weight.cols());
    RowMatrixXd g_w_forget(student.weight.rows(), student.weight.cols());
    Eigen::VectorXd g_b(student.bias.size());
    Eigen::VectorXd g_b_forget(student.bias.size());
    std::vector<double> forget_history;

    const std::size_t n_retain = static_cast<std::size_t>(bundle.train_retain.size());
    const std::size_t n_forget = static_cast<std::size_t>(bundle.train_forget.size());

    for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto retain_order = epoch_order(cfg.seed, epoch, n_retain);
        auto forget_stream = rng::make_stream(cfg.seed, "neggrad-forget-order", epoch);
        std::vector<std::size_t> forget_order(n_forget);
        for (std::size_t i = 0; i < n_forget; ++i) forget_order[i] = i;
        rng::shuffle(forget_order, forget_stream);
        std::size_t forget_cursor = 0;

        double epoch_loss = 0.0;
        std::uint64_t correct = 0;
        for (std::size_t start = 0; start < n_retain; start += cfg.batch_size) {
            const std::size_t stop_at = std::min(n_retain, start + cfg.batch_size);
            g_w.setZero();
            g_b.setZero();
            g_w_forget.setZero();
            g_b_forget.setZero();

            for (std::size_t i = start; i < stop_at; ++i) {
                const std::int64_t row = static_cast<std::int64_t>(retain_order[i]);
                const std::uint32_t label = bundle.train_retain.labels[retain_order[i]];
                const Eigen::VectorXd z = student.logits(bundle.train_retain.features, row);
                auto [loss, grad] = softmax_ce(z, label);
                epoch_loss += beta * loss;
                correct += student.predict(bundle.train_retain.features, row) == label;
                g_w += grad * bundle.train_retain.features.row(row).cast<double>();
                g_b += grad;
            }
            const std::size_t retain_batch = stop_at - start;
            g_w /= static_cast<double>(retain_batch);
            g_b /= static_cast<double>(retain_batch);

            // matching forget batch, cycling through the shuffled forget split
            const std::size_t forget_batch = std::min<std::size_t>(cfg.batch_size, n_forget);
            for (std::size_t i = 0; i < forget_batch; ++i) {
                const std::size_t pick = forget_order[forget_cursor];
                forget_cursor = (forget_cursor + 1) % n_forget;
                const std::int64_t row = static_cast<std::int64_t>(pick);
                const std::uint32_t label = bundle.train_forget.labels[pick];
                const Eigen::VectorXd z = student.logits(bundle.train_forget.features, row);
                auto [loss, grad] = softmax_ce(z, label);
                epoch_loss -= (1.0 - beta) * loss;
                g_w_forget += grad * bundle.train_forget.features.row(row).cast<double>();
                g_b_forget += grad;
            }
            g_w_forget /= static_cast<double>(forget_batch);
            g_b_forget /= static_cast<double>(forget_batch);

            g_w = beta * g_w - (1.0 - beta) * g_w_forget;
            g_b = beta * g_b - (1.0 - beta) * g_b_forget;
            adam.apply(student, g_w, g_b, cfg, cfg.learning_rate);
            result.counts.forward_examples += retain_batch + forget_batch;
            result.counts.grad_examples += retain_batch + forget_batch;
            result.counts.optimizer_steps += 1;
        }

        EpochMetrics em;
        em.epoch = epoch;
        em.method = "neggrad";
        em.train_loss = epoch_loss / static_cast<double>(n_retain);
        em.train_acc = static_cast<double>(correct) / static_cast<double>(n_retain);
        em.test_acc = bundle.test_retain.size() > 0
                          ? evaluate(student, bundle.test_retain)
                          : std::numeric_limits<double>::quiet_NaN();
        result.metrics.push_back(em);
        result.epochs_run = epoch + 1;

        if (bundle.test_forget.size() > 0) {
            forget_history.push_back(evaluate(student, bundle.test_forget));
            if (should_stop(stop, forget_history)) {
                result.stopped_early = result.epochs_run < cfg.epochs;
                break;
            }
        }
    }
    result.head = std::move(student);
    return result;
}

}  // namespace dkvb
