#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <set>

#include "dkvb/data.hpp"
#include "dkvb/errors.hpp"
#include "dkvb/evaluation.hpp"
#include "dkvb/rng.hpp"
#include "dkvb/training.hpp"

using namespace dkvb;

namespace {

SyntheticSpec desk_spec(std::uint64_t seed) {
    SyntheticSpec spec;
    spec.num_classes = 5;
    spec.dim = 16;
    spec.train_per_class = 30;
    spec.test_per_class = 10;
    spec.stddev = 0.4;
    spec.seed = seed;
    return spec;
}

BottleneckModel small_trained_model(const LabeledEmbeddings& train, std::uint64_t seed) {
    BottleneckConfig cfg;
    cfg.num_codebooks = 4;
    cfg.pairs_per_codebook = 32;
    cfg.top_k = 2;
    cfg.key_dim = 4;
    cfg.value_dim = train.num_classes;
    cfg.input_dim = static_cast<std::uint32_t>(train.dim());
    cfg.value_init = ValueInit::Gaussian;
    cfg.seed = seed;
    BottleneckModel model = make_bottleneck_model(cfg);
    key_init_ema(model, train, 3, 0.9, 64);
    return model;
}

double mean_loss(const BottleneckModel& model, const LabeledEmbeddings& data) {
    const auto losses = example_losses(model, data);
    double sum = 0.0;
    for (double x : losses) sum += x;
    return sum / static_cast<double>(losses.size());
}

}  // namespace

TEST_CASE("softmax_ce: symmetric case, stability, label checks") {
    Eigen::VectorXd logits(2);
    logits << 0, 0;
    auto [loss, grad] = softmax_ce(logits, 0);
    CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(grad[0] == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(grad[1] == doctest::Approx(0.5).epsilon(1e-12));

    logits << 1000, 0;
    auto [big_loss, big_grad] = softmax_ce(logits, 0);
    CHECK(std::isfinite(big_loss));
    CHECK(big_loss == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(std::isfinite(big_grad[1]));

    CHECK_THROWS_AS(softmax_ce(logits, 2), DataError);
}

TEST_CASE("softmax_ce gradient matches central finite differences") {
    auto stream = rng::make_stream(13, "ce-fd");
    const double h = 1e-6;
    for (int trial = 0; trial < 50; ++trial) {
        const int k = 2 + static_cast<int>(stream.next_below(6));
        Eigen::VectorXd logits(k);
        for (int j = 0; j < k; ++j) logits[j] = 3.0 * stream.next_normal();
        const auto label = static_cast<std::uint32_t>(stream.next_below(k));
        const auto [loss, grad] = softmax_ce(logits, label);
        for (int j = 0; j < k; ++j) {
            Eigen::VectorXd up = logits, down = logits;
            up[j] += h;
            down[j] -= h;
            const double fd =
                (softmax_ce(up, label).first - softmax_ce(down, label).first) / (2 * h);
            CHECK(std::abs(fd - grad[j]) < 1e-6 + 1e-6 * std::abs(grad[j]));
        }
    }
}

TEST_CASE("value gradients match central finite differences on 100 random slots") {
    auto [train, test] = generate_synthetic(desk_spec(3));
    BottleneckModel model = small_trained_model(train, 3);
    // partial masking makes some codebooks drop out, exercising the C_eff factor
    model.apply_mask({{0, 0}, {0, 1}, {0, 2}});

    auto stream = rng::make_stream(14, "value-fd");
    const double h = 1e-5;
    int checked = 0;
    while (checked < 100) {
        const std::int64_t row = static_cast<std::int64_t>(stream.next_below(
            static_cast<std::uint64_t>(train.size())));
        const ForwardResult fr = model.forward(train.features, row);
        REQUIRE_FALSE(fr.degenerate);
        const std::uint32_t label = train.labels[static_cast<std::size_t>(row)];
        const auto [loss, grad_logits] = softmax_ce(fr.logits, label);

        std::uint32_t nonempty = 0;
        for (const auto& sel : fr.trace.per_codebook) nonempty += !sel.empty();

        // one selected slot and occasionally an unselected one
        const std::uint32_t c = static_cast<std::uint32_t>(stream.next_below(4));
        const auto& sel = fr.trace.per_codebook[c];
        std::uint32_t m;
        bool selected;
        if (!sel.empty() && stream.next_below(5) != 0) {
            m = sel[static_cast<std::size_t>(stream.next_below(sel.size()))];
            selected = true;
        } else {
            m = static_cast<std::uint32_t>(stream.next_below(32));
            selected = !sel.empty() && std::find(sel.begin(), sel.end(), m) != sel.end();
        }
        const std::uint32_t coord = static_cast<std::uint32_t>(
            stream.next_below(model.config.value_dim));

        const double analytic =
            selected ? grad_logits[coord] / (static_cast<double>(nonempty) *
                                             static_cast<double>(sel.size()))
                     : 0.0;

        BottleneckModel probe = model;
        probe.values[c](m, coord) += h;
        const double up = softmax_ce(probe.forward(train.features, row).logits, label).first;
        probe.values[c](m, coord) -= 2 * h;
        const double down = softmax_ce(probe.forward(train.features, row).logits, label).first;
        const double fd = (up - down) / (2 * h);
        CHECK(std::abs(fd - analytic) < 1e-6 + 1e-4 * std::abs(analytic));
        ++checked;
    }
}

TEST_CASE("one single-example batch applies exactly grad_logits to the selected slot") {
    // C=1, top_k=1: the chain-rule factor is 1, so the accumulated gradient is
    // grad_logits itself. With zero Adam state, m_hat == g and v_hat == g^2,
    // making the first update -lr * g / (|g| + eps).
    LabeledEmbeddings data;
    data.features.resize(1, 2);
    data.features << 1.0f, 0.0f;
    data.labels = {1};
    data.num_classes = 2;

    BottleneckConfig cfg;
    cfg.num_codebooks = 1;
    cfg.pairs_per_codebook = 2;
    cfg.top_k = 1;
    cfg.key_dim = 2;
    cfg.value_dim = 2;
    cfg.input_dim = 2;
    cfg.seed = 4;
    BottleneckModel model = make_bottleneck_model(cfg);
    model.projection = RowMatrixXd::Identity(2, 2);
    model.keys[0] << 1.0, 0.0, -5.0, -5.0;
    model.keys_frozen = true;

    const ForwardResult fr = model.forward(data.features, 0);
    REQUIRE(fr.trace.per_codebook[0] == std::vector<std::uint32_t>{0});
    const auto [loss, g] = softmax_ce(fr.logits, 1);

    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 1;
    tc.learning_rate = 0.01;
    tc.seed = 4;
    const RowMatrixXd before = model.values[0];
    train_values(model, data, tc);
    for (int j = 0; j < 2; ++j) {
        const double expected = -tc.learning_rate * g[j] / (std::abs(g[j]) + tc.adam_epsilon);
        CHECK(model.values[0](0, j) - before(0, j) == doctest::Approx(expected).epsilon(1e-9));
        CHECK(model.values[0](1, j) == before(1, j));  // untouched slot, bit-exact
    }
}

TEST_CASE("slots outside the traces keep their initialization bit-exactly") {
    auto [train, test] = generate_synthetic(desk_spec(5));
    BottleneckModel model = small_trained_model(train, 5);
    const std::vector<RowMatrixXd> init_values = model.values;

    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 32;
    tc.learning_rate = 0.05;
    tc.seed = 5;
    const TrainResult result = train_values(model, train, tc);

    // union of all traces ever seen = union over both epochs; recompute from
    // the frozen quantizer (it does not move during value training)
    std::set<std::pair<std::uint32_t, std::uint32_t>> touched;
    for (std::int64_t i = 0; i < train.size(); ++i) {
        const SelectionTrace trace =
            model.quantize(model.project_heads_f32(train.features, i));
        for (std::uint32_t c = 0; c < trace.per_codebook.size(); ++c) {
            for (std::uint32_t m : trace.per_codebook[c]) touched.insert({c, m});
        }
    }
    for (std::uint32_t c = 0; c < model.config.num_codebooks; ++c) {
        for (std::uint32_t m = 0; m < model.config.pairs_per_codebook; ++m) {
            if (touched.count({c, m})) continue;
            for (std::uint32_t j = 0; j < model.config.value_dim; ++j) {
                CHECK(model.values[c](m, j) == init_values[c](m, j));
            }
        }
    }
}

TEST_CASE("a training batch changes exactly the slots in its traces") {
    auto [train, test] = generate_synthetic(desk_spec(6));
    BottleneckModel model = small_trained_model(train, 6);

    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = static_cast<std::uint32_t>(train.size());  // one batch
    tc.learning_rate = 0.05;
    tc.seed = 6;

    const BottleneckModel before = model;
    const TrainResult result = train_values(model, train, tc);

    std::set<std::pair<std::uint32_t, std::uint32_t>> traced;
    for (const auto& trace : result.final_epoch_traces) {
        for (std::uint32_t c = 0; c < trace.per_codebook.size(); ++c) {
            for (std::uint32_t m : trace.per_codebook[c]) traced.insert({c, m});
        }
    }
    std::set<std::pair<std::uint32_t, std::uint32_t>> changed;
    for (std::uint32_t c = 0; c < model.config.num_codebooks; ++c) {
        for (std::uint32_t m = 0; m < model.config.pairs_per_codebook; ++m) {
            if (std::memcmp(model.values[c].row(m).data(), before.values[c].row(m).data(),
                            sizeof(double) * model.config.value_dim) != 0) {
                changed.insert({c, m});
            }
        }
    }
    CHECK(changed == traced);
}

TEST_CASE("train_values leaves keys, projection and mask bit-unchanged") {
    auto [train, test] = generate_synthetic(desk_spec(7));
    BottleneckModel model = small_trained_model(train, 7);
    model.apply_mask({{1, 5}});
    const BottleneckModel before = model;

    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 25;
    tc.learning_rate = 0.05;
    tc.seed = 7;
    train_values(model, train, tc);

    CHECK(std::memcmp(model.projection.data(), before.projection.data(),
                      sizeof(double) * static_cast<std::size_t>(model.projection.size())) == 0);
    for (std::uint32_t c = 0; c < model.config.num_codebooks; ++c) {
        CHECK(std::memcmp(model.keys[c].data(), before.keys[c].data(),
                          sizeof(double) * static_cast<std::size_t>(model.keys[c].size())) == 0);
        CHECK(model.mask.excluded[c] == before.mask.excluded[c]);
    }
}

TEST_CASE("training is deterministic across runs and worker counts") {
    auto [train, test] = generate_synthetic(desk_spec(8));

    auto run = [&](unsigned workers) {
        BottleneckModel model = small_trained_model(train, 8);
        TrainConfig tc;
        tc.epochs = 3;
        tc.batch_size = 20;
        tc.learning_rate = 0.05;
        tc.seed = 8;
        tc.workers = workers;
        train_values(model, train, tc);
        return model;
    };

    const BottleneckModel a = run(1);
    const BottleneckModel b = run(1);
    const BottleneckModel c = run(4);
    CHECK(models_identical(a, b));
    CHECK(models_identical(a, c));
}

TEST_CASE("loss decreases over the first epoch on the separable task") {
    auto [train, test] = generate_synthetic(desk_spec(9));
    BottleneckModel model = small_trained_model(train, 9);
    const double before = mean_loss(model, train);
    REQUIRE(std::isfinite(before));

    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 30;
    tc.learning_rate = 0.05;
    tc.seed = 9;
    const TrainResult result = train_values(model, train, tc);
    const double after = mean_loss(model, train);
    CHECK(std::isfinite(after));
    CHECK(after < before);
    CHECK(std::isfinite(result.metrics.at(0).train_loss));
}

TEST_CASE("batch-size normalization divides by the batch, not slot touches") {
    // two identical examples in one batch touch the same slot twice; under
    // touch-count normalization the averaged gradient equals one example's,
    // under batch-size normalization it is the same here (2 touches / 2), so
    // distinguish with a batch where a second example misses the slot
    LabeledEmbeddings data;
    data.features.resize(2, 2);
    data.features << 1.0f, 0.0f, -1.0f, 0.0f;
    data.labels = {1, 0};
    data.num_classes = 2;

    BottleneckConfig cfg;
    cfg.num_codebooks = 1;
    cfg.pairs_per_codebook = 2;
    cfg.top_k = 1;
    cfg.key_dim = 2;
    cfg.value_dim = 2;
    cfg.input_dim = 2;
    cfg.seed = 12;
    auto build = [&] {
        BottleneckModel model = make_bottleneck_model(cfg);
        model.projection = RowMatrixXd::Identity(2, 2);
        model.keys[0] << 1.0, 0.0, -1.0, 0.0;  // example 0 -> key 0, example 1 -> key 1
        model.keys_frozen = true;
        return model;
    };

    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 2;
    tc.learning_rate = 0.01;
    tc.seed = 12;

    BottleneckModel by_touch = build();
    tc.normalization = GradNormalization::TouchCount;
    train_values(by_touch, data, tc);

    BottleneckModel by_batch = build();
    tc.normalization = GradNormalization::BatchSize;
    train_values(by_batch, data, tc);

    // each slot is touched once but the batch has two examples, so the raw
    // gradients differ by 2x; Adam's sign structure keeps the first update
    // equal in magnitude, so compare the second epoch instead
    tc.epochs = 2;
    BottleneckModel touch2 = build();
    tc.normalization = GradNormalization::TouchCount;
    train_values(touch2, data, tc);
    BottleneckModel batch2 = build();
    tc.normalization = GradNormalization::BatchSize;
    train_values(batch2, data, tc);
    CHECK(std::memcmp(touch2.values[0].data(), batch2.values[0].data(),
                      sizeof(double) * 4) != 0);
}

TEST_CASE("evaluate: exact fraction with low-index tie breaking") {
    // hand-built single-codebook model: key 0 carries logits favoring class 0,
    // key 1 favors class 2; three 1-D examples land on keys 0, 0, 1
    LabeledEmbeddings data;
    data.features.resize(3, 1);
    data.features << 0.0f, 0.2f, 10.0f;
    data.labels = {0, 1, 2};
    data.num_classes = 3;

    BottleneckConfig cfg;
    cfg.num_codebooks = 1;
    cfg.pairs_per_codebook = 2;
    cfg.top_k = 1;
    cfg.key_dim = 1;
    cfg.value_dim = 3;
    cfg.input_dim = 1;
    cfg.seed = 11;
    BottleneckModel model = make_bottleneck_model(cfg);
    model.projection(0, 0) = 1.0;
    model.keys[0] << 0.0, 10.0;
    model.values[0] << 5, 0, 0, 0, 0, 7;
    model.keys_frozen = true;

    // predictions: 0, 0, 2 against labels 0, 1, 2 -> 2/3
    CHECK(evaluate(model, data) == doctest::Approx(2.0 / 3.0));

    SUBCASE("all correct and all wrong bounds") {
        data.labels = {0, 0, 2};
        CHECK(evaluate(model, data) == doctest::Approx(1.0));
        data.labels = {1, 1, 0};
        CHECK(evaluate(model, data) == doctest::Approx(0.0));
    }
    SUBCASE("zero logits break ties to class 0") {
        model.values[0].setZero();
        data.labels = {0, 0, 0};
        CHECK(evaluate(model, data) == doctest::Approx(1.0));
    }
    SUBCASE("empty data is an error") {
        LabeledEmbeddings empty;
        empty.features.resize(0, 1);
        empty.num_classes = 1;
        CHECK_THROWS_AS(evaluate(model, empty), DataError);
    }
}
