#include "dkvb/data.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "dkvb/binio.hpp"
#include "dkvb/errors.hpp"
#include "dkvb/rng.hpp"

namespace dkvb {

void LabeledEmbeddings::validate() const {
    if (features.rows() <= 0 || features.cols() <= 0) {
        throw DataError("embeddings are empty");
    }
    if (static_cast<std::int64_t>(labels.size()) != features.rows()) {
        throw DataError("label count does not match feature rows");
    }
    if (num_classes == 0) throw DataError("num_classes must be positive");
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) {
            throw DataError("label out of range at example " + std::to_string(i));
        }
    }
    if (!features.allFinite()) throw DataError("non-finite feature value");
}

void SyntheticSpec::validate() const {
    if (num_classes == 0 || dim == 0 || train_per_class == 0 || test_per_class == 0) {
        throw ConfigError("synthetic spec: all counts must be positive");
    }
    if (!(stddev >= 0.0) || !std::isfinite(stddev) || !std::isfinite(mean_scale)) {
        throw ConfigError("synthetic spec: stddev must be >= 0 and finite");
    }
}

LabeledEmbeddings load_embeddings(const std::string& path) {
    binio::Reader in(path);
    in.expect_magic("EMB1");
    const std::uint32_t n = in.read_u32();
    const std::uint32_t d = in.read_u32();
    const std::uint32_t num_classes = in.read_u32();
    if (n == 0 || d == 0 || num_classes == 0) {
        throw DataError(path + ": zero N/D/num_classes in header");
    }

    LabeledEmbeddings out;
    out.num_classes = num_classes;
    out.features.resize(n, d);
    for (std::uint32_t i = 0; i < n; ++i) {
        for (std::uint32_t j = 0; j < d; ++j) {
            const std::uint64_t at = in.offset();
            const float v = in.read_f32();
            if (!std::isfinite(v)) {
                throw DataError(path + ": non-finite feature at byte offset " +
                                std::to_string(at));
            }
            out.features(i, j) = v;
        }
    }
    out.labels.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint64_t at = in.offset();
        const std::uint32_t label = in.read_u32();
        if (label >= num_classes) {
            throw DataError(path + ": label out of range (" + std::to_string(label) +
                            " >= " + std::to_string(num_classes) + ") at byte offset " +
                            std::to_string(at));
        }
        out.labels[i] = label;
    }
    if (!in.at_eof()) {
        throw DataError(path + ": trailing bytes after payload at byte offset " +
                        std::to_string(in.offset()));
    }
    return out;
}

void write_embeddings(const std::string& path, const LabeledEmbeddings& data) {
    data.validate();
    binio::Writer out(path);
    out.write_magic("EMB1");
    out.write_u32(static_cast<std::uint32_t>(data.features.rows()));
    out.write_u32(static_cast<std::uint32_t>(data.features.cols()));
    out.write_u32(data.num_classes);
    out.write_raw(data.features.data(), sizeof(float) * static_cast<std::size_t>(
                                            data.features.rows() * data.features.cols()));
    out.write_raw(data.labels.data(), sizeof(std::uint32_t) * data.labels.size());
    out.close();
}

LabeledEmbeddings load_csv_embeddings(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path + ": cannot open for reading");

    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    std::size_t dim = 0;
    {
        std::stringstream header(line);
        std::string cell;
        bool saw_label = false;
        while (std::getline(header, cell, ',')) {
            if (cell == "label") {
                saw_label = true;
            } else if (!saw_label) {
                ++dim;
            } else {
                throw DataError(path + ": columns after label in header");
            }
        }
        if (!saw_label || dim == 0) {
            throw DataError(path + ": header must be d0,...,dK,label");
        }
    }

    std::vector<float> values;
    std::vector<std::uint32_t> labels;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream row(line);
        std::string cell;
        for (std::size_t j = 0; j < dim; ++j) {
            if (!std::getline(row, cell, ',')) {
                throw DataError(path + ": line " + std::to_string(line_no) + ": too few columns");
            }
            try {
                values.push_back(std::stof(cell));
            } catch (const std::exception&) {
                throw DataError(path + ": line " + std::to_string(line_no) +
                                ": bad feature value '" + cell + "'");
            }
        }
        if (!std::getline(row, cell, ',')) {
            throw DataError(path + ": line " + std::to_string(line_no) + ": missing label");
        }
        long long label = -1;
        try {
            label = std::stoll(cell);
        } catch (const std::exception&) {
            label = -1;
        }
        if (label < 0) {
            throw DataError(path + ": line " + std::to_string(line_no) + ": bad label '" +
                            cell + "'");
        }
        labels.push_back(static_cast<std::uint32_t>(label));
    }
    if (labels.empty()) throw DataError(path + ": no data rows");

    LabeledEmbeddings out;
    out.features.resize(static_cast<std::int64_t>(labels.size()), static_cast<std::int64_t>(dim));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (std::size_t j = 0; j < dim; ++j) {
            out.features(static_cast<std::int64_t>(i), static_cast<std::int64_t>(j)) =
                values[i * dim + j];
        }
    }
    out.labels = std::move(labels);
    std::uint32_t max_label = 0;
    for (std::uint32_t l : out.labels) max_label = std::max(max_label, l);
    out.num_classes = max_label + 1;
    out.validate();
    return out;
}

namespace {

Eigen::VectorXd class_mean(const SyntheticSpec& spec, std::uint32_t cls) {
    auto stream = rng::make_stream(spec.seed, "class-mean", cls);
    Eigen::VectorXd mu(spec.dim);
    for (std::uint32_t j = 0; j < spec.dim; ++j) {
        mu[j] = spec.mean_scale * stream.next_normal();
    }
    return mu;
}

LabeledEmbeddings generate_split(const SyntheticSpec& spec, std::string_view split_tag,
                                 std::uint32_t per_class) {
    LabeledEmbeddings out;
    out.num_classes = spec.num_classes;
    const std::int64_t n = static_cast<std::int64_t>(spec.num_classes) * per_class;
    out.features.resize(n, spec.dim);
    out.labels.resize(static_cast<std::size_t>(n));

    std::int64_t row = 0;
    for (std::uint32_t c = 0; c < spec.num_classes; ++c) {
        const Eigen::VectorXd mu = class_mean(spec, c);
        auto noise = rng::make_stream(spec.seed, split_tag, c);
        for (std::uint32_t i = 0; i < per_class; ++i, ++row) {
            for (std::uint32_t j = 0; j < spec.dim; ++j) {
                out.features(row, j) =
                    static_cast<float>(mu[j] + spec.stddev * noise.next_normal());
            }
            out.labels[static_cast<std::size_t>(row)] = c;
        }
    }
    return out;
}

LabeledEmbeddings take_rows(const LabeledEmbeddings& src, const std::vector<std::int64_t>& rows,
                            std::uint32_t num_classes) {
    LabeledEmbeddings out;
    out.num_classes = num_classes;
    out.features.resize(static_cast<std::int64_t>(rows.size()), src.features.cols());
    out.labels.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.features.row(static_cast<std::int64_t>(i)) = src.features.row(rows[i]);
        out.labels[i] = src.labels[static_cast<std::size_t>(rows[i])];
    }
    return out;
}

}  // namespace

std::pair<LabeledEmbeddings, LabeledEmbeddings> generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    return {generate_split(spec, "train", spec.train_per_class),
            generate_split(spec, "test", spec.test_per_class)};
}

DatasetBundle split_by_classes(const LabeledEmbeddings& train, const LabeledEmbeddings& test,
                               const std::set<std::uint32_t>& forget_classes) {
    train.validate();
    test.validate();
    if (forget_classes.empty()) throw ConfigError("forget class set is empty");
    for (std::uint32_t c : forget_classes) {
        if (c >= train.num_classes) {
            throw ConfigError("unknown forget class id " + std::to_string(c));
        }
    }

    DatasetBundle bundle;
    bundle.forget_classes = forget_classes;
    auto partition = [&](const LabeledEmbeddings& src, LabeledEmbeddings& retain,
                         LabeledEmbeddings& forget) {
        std::vector<std::int64_t> retain_rows, forget_rows;
        for (std::int64_t i = 0; i < src.size(); ++i) {
            if (forget_classes.count(src.labels[static_cast<std::size_t>(i)])) {
                forget_rows.push_back(i);
            } else {
                retain_rows.push_back(i);
            }
        }
        retain = take_rows(src, retain_rows, src.num_classes);
        forget = take_rows(src, forget_rows, src.num_classes);
    };
    partition(train, bundle.train_retain, bundle.train_forget);
    partition(test, bundle.test_retain, bundle.test_forget);
    return bundle;
}

std::uint32_t select_forget_class(const std::vector<std::uint64_t>& misclass_counts) {
    if (misclass_counts.empty()) throw DataError("misclassification counts are empty");
    std::uint32_t best = 0;
    for (std::uint32_t c = 1; c < misclass_counts.size(); ++c) {
        if (misclass_counts[c] < misclass_counts[best]) best = c;
    }
    return best;
}

}  // namespace dkvb
