#include "dkvb/bottleneck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "dkvb/binio.hpp"
#include "dkvb/errors.hpp"
#include "dkvb/rng.hpp"

namespace dkvb {

ValueInit value_init_from_string(const std::string& name) {
    if (name == "zeros") return ValueInit::Zeros;
    if (name == "gaussian") return ValueInit::Gaussian;
    if (name == "uniform") return ValueInit::Uniform;
    throw ConfigError("unknown value init '" + name + "' (zeros|gaussian|uniform)");
}

std::string to_string(ValueInit init) {
    switch (init) {
        case ValueInit::Zeros: return "zeros";
        case ValueInit::Gaussian: return "gaussian";
        case ValueInit::Uniform: return "uniform";
    }
    return "?";
}

void BottleneckConfig::validate() const {
    if (num_codebooks == 0 || pairs_per_codebook == 0 || top_k == 0 || key_dim == 0) {
        throw ConfigError("bottleneck: codebooks, pairs, top_k, key_dim must be positive");
    }
    if (top_k > pairs_per_codebook) {
        throw ConfigError("bottleneck: top_k must be <= pairs per codebook");
    }
    if (value_dim == 0 || input_dim == 0) {
        throw ConfigError("bottleneck: value_dim and input_dim must be positive");
    }
    if (!(ema_decay > 0.0 && ema_decay < 1.0)) {
        throw ConfigError("bottleneck: ema_decay must be in (0,1)");
    }
    if (!(ema_epsilon > 0.0)) throw ConfigError("bottleneck: ema_epsilon must be positive");
}

void MaskState::reset(std::uint32_t num_codebooks, std::uint32_t pairs_per_codebook) {
    excluded.assign(num_codebooks, std::vector<std::uint8_t>(pairs_per_codebook, 0));
    masked_per_codebook.assign(num_codebooks, 0);
    masked_total = 0;
}

bool MaskState::set(std::uint32_t c, std::uint32_t m) {
    if (excluded[c][m]) return false;
    excluded[c][m] = 1;
    ++masked_per_codebook[c];
    ++masked_total;
    return true;
}

bool MaskState::codebook_fully_masked(std::uint32_t c) const {
    return masked_per_codebook[c] == excluded[c].size();
}

bool MaskState::all_masked() const {
    for (std::uint32_t c = 0; c < excluded.size(); ++c) {
        if (!codebook_fully_masked(c)) return false;
    }
    return !excluded.empty();
}

RowMatrixXd init_projection(const BottleneckConfig& config) {
    config.validate();
    auto stream = rng::make_stream(config.seed, "projection");
    const double stddev = 1.0 / std::sqrt(static_cast<double>(config.input_dim));
    RowMatrixXd proj(config.head_rows(), config.input_dim);
    for (std::int64_t i = 0; i < proj.rows(); ++i) {
        for (std::int64_t j = 0; j < proj.cols(); ++j) {
            proj(i, j) = stddev * stream.next_normal();
        }
    }
    return proj;
}

BottleneckModel make_bottleneck_model(const BottleneckConfig& config) {
    config.validate();
    BottleneckModel model;
    model.config = config;
    model.projection = init_projection(config);
    const std::uint32_t C = config.num_codebooks;
    const std::uint32_t M = config.pairs_per_codebook;
    model.keys.assign(C, RowMatrixXd::Zero(M, config.key_dim));
    model.ema_counts.assign(C, Eigen::VectorXd::Ones(M));
    model.ema_sums.assign(C, RowMatrixXd::Zero(M, config.key_dim));
    model.values.assign(C, RowMatrixXd::Zero(M, config.value_dim));
    if (config.value_init != ValueInit::Zeros) {
        for (std::uint32_t c = 0; c < C; ++c) {
            auto stream = rng::make_stream(config.seed, "values", c);
            auto& v = model.values[c];
            for (std::int64_t i = 0; i < v.rows(); ++i) {
                for (std::int64_t j = 0; j < v.cols(); ++j) {
                    v(i, j) = config.value_init == ValueInit::Gaussian
                                  ? config.value_init_scale * stream.next_normal()
                                  : config.value_init_scale * (2.0 * stream.next_double() - 1.0);
                }
            }
        }
    }
    model.mask.reset(C, M);
    return model;
}

RowMatrixXd BottleneckModel::project_heads(Eigen::Ref<const Eigen::VectorXd> z) const {
    if (z.size() != projection.cols()) {
        throw DataError("project_heads: input dimension " + std::to_string(z.size()) +
                        " != " + std::to_string(projection.cols()));
    }
    Eigen::VectorXd flat = projection * z;
    return Eigen::Map<const RowMatrixXd>(flat.data(), config.num_codebooks, config.key_dim);
}

RowMatrixXd BottleneckModel::project_heads_f32(const RowMatrixXf& features,
                                               std::int64_t row) const {
    Eigen::VectorXd z = features.row(row).transpose().cast<double>();
    return project_heads(z);
}

namespace {

// Ordered fixed-capacity buffer of (distance, index), ascending by distance
// then index.
struct TopK {
    std::vector<std::pair<double, std::uint32_t>> best;
    std::size_t capacity;

    explicit TopK(std::size_t k) : capacity(k) { best.reserve(k + 1); }

    void offer(double dist, std::uint32_t index) {
        if (best.size() == capacity &&
            !(dist < best.back().first ||
              (dist == best.back().first && index < best.back().second))) {
            return;
        }
        auto pos = std::upper_bound(best.begin(), best.end(), std::make_pair(dist, index));
        best.insert(pos, {dist, index});
        if (best.size() > capacity) best.pop_back();
    }
};

}  // namespace

SelectionTrace BottleneckModel::quantize(const RowMatrixXd& heads) const {
    SelectionTrace trace;
    trace.per_codebook.resize(config.num_codebooks);
    for (std::uint32_t c = 0; c < config.num_codebooks; ++c) {
        const auto& cb_keys = keys[c];
        const auto& excluded = mask.excluded[c];
        TopK top(config.top_k);
        for (std::uint32_t m = 0; m < config.pairs_per_codebook; ++m) {
            if (excluded[m]) continue;  // masked: distance treated as +inf
            double dist = 0.0;
            for (std::uint32_t j = 0; j < config.key_dim; ++j) {
                const double diff = cb_keys(m, j) - heads(c, j);
                dist += diff * diff;
            }
            top.offer(dist, m);
        }
        auto& sel = trace.per_codebook[c];
        sel.reserve(top.best.size());
        for (const auto& [dist, index] : top.best) sel.push_back(index);
    }
    return trace;
}

ForwardResult BottleneckModel::forward(const RowMatrixXf& features, std::int64_t row) const {
    ForwardResult fr;
    const RowMatrixXd heads = project_heads_f32(features, row);
    fr.trace = quantize(heads);
    fr.logits = Eigen::VectorXd::Zero(config.value_dim);

    std::uint32_t nonempty = 0;
    Eigen::VectorXd codebook_out(config.value_dim);
    for (std::uint32_t c = 0; c < config.num_codebooks; ++c) {
        const auto& sel = fr.trace.per_codebook[c];
        if (sel.empty()) continue;
        codebook_out.setZero();
        for (std::uint32_t m : sel) {
            codebook_out += values[c].row(m).transpose();
        }
        codebook_out /= static_cast<double>(sel.size());
        fr.logits += codebook_out;
        ++nonempty;
    }
    if (nonempty == 0) {
        fr.degenerate = true;  // zero logits, flagged
        return fr;
    }
    fr.logits /= static_cast<double>(nonempty);
    return fr;
}

std::uint32_t BottleneckModel::predict(const ForwardResult& fr) const {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < fr.logits.size(); ++k) {
        if (fr.logits[k] > fr.logits[best]) best = k;
    }
    return static_cast<std::uint32_t>(best);
}

void BottleneckModel::apply_mask(const std::vector<PairIndex>& pairs) {
    for (const auto& p : pairs) {
        if (p.codebook >= config.num_codebooks || p.key >= config.pairs_per_codebook) {
            throw ConfigError("apply_mask: pair (" + std::to_string(p.codebook) + "," +
                              std::to_string(p.key) + ") out of range");
        }
    }
    for (const auto& p : pairs) mask.set(p.codebook, p.key);
}

void key_init_ema(BottleneckModel& model, const LabeledEmbeddings& data, std::uint32_t epochs,
                  double decay, std::uint32_t batch_size) {
    data.validate();
    if (model.keys_frozen) throw ConfigError("key_init_ema: keys already frozen");
    if (!(decay > 0.0 && decay < 1.0)) throw ConfigError("key_init_ema: decay must be in (0,1)");
    if (batch_size == 0) throw ConfigError("key_init_ema: batch size must be positive");
    if (data.dim() != model.projection.cols()) {
        throw DataError("key_init_ema: data dimension mismatch");
    }

    const std::uint32_t C = model.config.num_codebooks;
    const std::uint32_t M = model.config.pairs_per_codebook;
    const std::uint32_t kd = model.config.key_dim;
    const std::size_t n = static_cast<std::size_t>(data.size());
    const double eps = model.config.ema_epsilon;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto shuffle_stream = rng::make_stream(model.config.seed, "key-init-order", 0);
    rng::shuffle(order, shuffle_stream);

    // Seed keys with heads of the leading examples of the stream.
    for (std::size_t m = 0; m < M; ++m) {
        const RowMatrixXd heads =
            model.project_heads_f32(data.features, static_cast<std::int64_t>(order[m % n]));
        for (std::uint32_t c = 0; c < C; ++c) {
            model.keys[c].row(static_cast<std::int64_t>(m)) = heads.row(c);
            model.ema_sums[c].row(static_cast<std::int64_t>(m)) = heads.row(c);
            model.ema_counts[c][static_cast<std::int64_t>(m)] = 1.0;
        }
    }

    std::vector<Eigen::VectorXd> batch_counts(C, Eigen::VectorXd(M));
    std::vector<RowMatrixXd> batch_sums(C, RowMatrixXd(M, kd));

    for (std::uint32_t epoch = 0; epoch < epochs; ++epoch) {
        if (epoch > 0) {
            auto epoch_stream = rng::make_stream(model.config.seed, "key-init-order", epoch);
            rng::shuffle(order, epoch_stream);
        }
        for (std::size_t start = 0; start < n; start += batch_size) {
            const std::size_t stop = std::min(n, start + batch_size);
            for (std::uint32_t c = 0; c < C; ++c) {
                batch_counts[c].setZero();
                batch_sums[c].setZero();
            }
            for (std::size_t i = start; i < stop; ++i) {
                const RowMatrixXd heads =
                    model.project_heads_f32(data.features, static_cast<std::int64_t>(order[i]));
                for (std::uint32_t c = 0; c < C; ++c) {
                    // single nearest key, ties to the lower index
                    std::uint32_t best = 0;
                    double best_dist = std::numeric_limits<double>::infinity();
                    for (std::uint32_t m = 0; m < M; ++m) {
                        double dist = 0.0;
                        for (std::uint32_t j = 0; j < kd; ++j) {
                            const double diff = model.keys[c](m, j) - heads(c, j);
                            dist += diff * diff;
                        }
                        if (dist < best_dist) {
                            best_dist = dist;
                            best = m;
                        }
                    }
                    batch_counts[c][best] += 1.0;
                    batch_sums[c].row(best) += heads.row(c);
                }
            }
            for (std::uint32_t c = 0; c < C; ++c) {
                model.ema_counts[c] = decay * model.ema_counts[c] + (1.0 - decay) * batch_counts[c];
                model.ema_sums[c] = decay * model.ema_sums[c] + (1.0 - decay) * batch_sums[c];
                for (std::uint32_t m = 0; m < M; ++m) {
                    const double denom = std::max(model.ema_counts[c][m], eps);
                    model.keys[c].row(m) = model.ema_sums[c].row(m) / denom;
                }
            }
        }
    }
    model.keys_frozen = true;
}

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void write_matrix(binio::Writer& out, const RowMatrixXd& m) {
    out.write_u32(static_cast<std::uint32_t>(m.rows()));
    out.write_u32(static_cast<std::uint32_t>(m.cols()));
    out.write_raw(m.data(), sizeof(double) * static_cast<std::size_t>(m.rows() * m.cols()));
}

RowMatrixXd read_matrix(binio::Reader& in) {
    const std::uint32_t rows = in.read_u32();
    const std::uint32_t cols = in.read_u32();
    RowMatrixXd m(rows, cols);
    in.read_raw(m.data(), sizeof(double) * static_cast<std::size_t>(rows) * cols);
    return m;
}

void write_vector(binio::Writer& out, const Eigen::VectorXd& v) {
    out.write_u32(static_cast<std::uint32_t>(v.size()));
    out.write_raw(v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
}

Eigen::VectorXd read_vector(binio::Reader& in) {
    const std::uint32_t n = in.read_u32();
    Eigen::VectorXd v(n);
    in.read_raw(v.data(), sizeof(double) * n);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const BottleneckModel& model) {
    binio::Writer out(path);
    out.write_magic("DKVB");
    out.write_u32(kCheckpointVersion);
    const auto& cfg = model.config;
    out.write_u32(cfg.num_codebooks);
    out.write_u32(cfg.pairs_per_codebook);
    out.write_u32(cfg.top_k);
    out.write_u32(cfg.key_dim);
    out.write_u32(cfg.value_dim);
    out.write_u32(cfg.input_dim);
    out.write_u32(static_cast<std::uint32_t>(cfg.value_init));
    out.write_f64(cfg.value_init_scale);
    out.write_f64(cfg.ema_decay);
    out.write_f64(cfg.ema_epsilon);
    out.write_u64(cfg.seed);
    out.write_u32(model.keys_frozen ? 1 : 0);
    write_matrix(out, model.projection);
    for (const auto& m : model.keys) write_matrix(out, m);
    for (const auto& v : model.ema_counts) write_vector(out, v);
    for (const auto& m : model.ema_sums) write_matrix(out, m);
    for (const auto& m : model.values) write_matrix(out, m);
    for (const auto& row : model.mask.excluded) {
        out.write_raw(row.data(), row.size());
    }
    out.close();
}

BottleneckModel load_checkpoint(const std::string& path) {
    binio::Reader in(path);
    in.expect_magic("DKVB");
    const std::uint32_t version = in.read_u32();
    if (version != kCheckpointVersion) {
        throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
    }
    BottleneckModel model;
    auto& cfg = model.config;
    cfg.num_codebooks = in.read_u32();
    cfg.pairs_per_codebook = in.read_u32();
    cfg.top_k = in.read_u32();
    cfg.key_dim = in.read_u32();
    cfg.value_dim = in.read_u32();
    cfg.input_dim = in.read_u32();
    cfg.value_init = static_cast<ValueInit>(in.read_u32());
    cfg.value_init_scale = in.read_f64();
    cfg.ema_decay = in.read_f64();
    cfg.ema_epsilon = in.read_f64();
    cfg.seed = in.read_u64();
    cfg.validate();
    model.keys_frozen = in.read_u32() != 0;

    model.projection = read_matrix(in);
    if (model.projection.rows() != cfg.head_rows() ||
        model.projection.cols() != cfg.input_dim) {
        throw DataError(path + ": projection shape mismatch");
    }
    const std::uint32_t C = cfg.num_codebooks;
    model.keys.reserve(C);
    for (std::uint32_t c = 0; c < C; ++c) model.keys.push_back(read_matrix(in));
    model.ema_counts.reserve(C);
    for (std::uint32_t c = 0; c < C; ++c) model.ema_counts.push_back(read_vector(in));
    model.ema_sums.reserve(C);
    for (std::uint32_t c = 0; c < C; ++c) model.ema_sums.push_back(read_matrix(in));
    model.values.reserve(C);
    for (std::uint32_t c = 0; c < C; ++c) model.values.push_back(read_matrix(in));
    for (std::uint32_t c = 0; c < C; ++c) {
        if (model.keys[c].rows() != cfg.pairs_per_codebook ||
            model.keys[c].cols() != cfg.key_dim ||
            model.values[c].rows() != cfg.pairs_per_codebook ||
            model.values[c].cols() != cfg.value_dim) {
            throw DataError(path + ": codebook shape mismatch");
        }
    }
    model.mask.reset(C, cfg.pairs_per_codebook);
    for (std::uint32_t c = 0; c < C; ++c) {
        in.read_raw(model.mask.excluded[c].data(), cfg.pairs_per_codebook);
        std::uint32_t count = 0;
        for (std::uint8_t b : model.mask.excluded[c]) count += (b != 0);
        model.mask.masked_per_codebook[c] = count;
        model.mask.masked_total += count;
    }
    if (!in.at_eof()) {
        throw DataError(path + ": trailing bytes at offset " + std::to_string(in.offset()));
    }
    return model;
}

namespace {

bool matrices_identical(const RowMatrixXd& a, const RowMatrixXd& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    return std::memcmp(a.data(), b.data(),
                       sizeof(double) * static_cast<std::size_t>(a.rows() * a.cols())) == 0;
}

}  // namespace

bool models_identical(const BottleneckModel& a, const BottleneckModel& b) {
    const auto& x = a.config;
    const auto& y = b.config;
    if (x.num_codebooks != y.num_codebooks || x.pairs_per_codebook != y.pairs_per_codebook ||
        x.top_k != y.top_k || x.key_dim != y.key_dim || x.value_dim != y.value_dim ||
        x.input_dim != y.input_dim || x.value_init != y.value_init ||
        x.value_init_scale != y.value_init_scale || x.ema_decay != y.ema_decay ||
        x.ema_epsilon != y.ema_epsilon || x.seed != y.seed) {
        return false;
    }
    if (a.keys_frozen != b.keys_frozen) return false;
    if (!matrices_identical(a.projection, b.projection)) return false;
    const std::uint32_t C = a.config.num_codebooks;
    for (std::uint32_t c = 0; c < C; ++c) {
        if (!matrices_identical(a.keys[c], b.keys[c])) return false;
        if (!matrices_identical(a.ema_sums[c], b.ema_sums[c])) return false;
        if (!matrices_identical(a.values[c], b.values[c])) return false;
        if (std::memcmp(a.ema_counts[c].data(), b.ema_counts[c].data(),
                        sizeof(double) * a.ema_counts[c].size()) != 0) {
            return false;
        }
        if (a.mask.excluded[c] != b.mask.excluded[c]) return false;
    }
    return true;
}

}  // namespace dkvb
