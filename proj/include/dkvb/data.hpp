#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

namespace dkvb {

using RowMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Frozen encoder outputs with integer class labels. The only input the core
// ever sees; images and backbones live upstream of this type.
struct LabeledEmbeddings {
    RowMatrixXf features;               // N x D
    std::vector<std::uint32_t> labels;  // N
    std::uint32_t num_classes = 0;

    std::int64_t size() const { return features.rows(); }
    std::int64_t dim() const { return features.cols(); }

    // Throws DataError on shape/label/finiteness violations.
    void validate() const;
};

// Retain/forget partition of a train/test pair.
struct DatasetBundle {
    LabeledEmbeddings train_retain;
    LabeledEmbeddings train_forget;
    LabeledEmbeddings test_retain;
    LabeledEmbeddings test_forget;
    std::set<std::uint32_t> forget_classes;
};

// Class-conditional Gaussian blobs: a desk-scale stand-in for frozen-backbone
// features. Class mean coordinates are N(0, mean_scale^2) drawn from a stream
// keyed by class id, so adding classes never perturbs existing means.
struct SyntheticSpec {
    std::uint32_t num_classes = 10;
    std::uint32_t dim = 64;
    std::uint32_t train_per_class = 200;
    std::uint32_t test_per_class = 50;
    double mean_scale = 1.0;
    double stddev = 0.5;
    std::uint64_t seed = 1;

    void validate() const;
};

// EMB1 container: magic "EMB1", u32 N, u32 D, u32 num_classes,
// N*D float32 row-major features, N u32 labels. Little-endian.
LabeledEmbeddings load_embeddings(const std::string& path);
void write_embeddings(const std::string& path, const LabeledEmbeddings& data);

// CSV import with header d0,...,dK,label. num_classes = max label + 1.
LabeledEmbeddings load_csv_embeddings(const std::string& path);

std::pair<LabeledEmbeddings, LabeledEmbeddings> generate_synthetic(const SyntheticSpec& spec);

DatasetBundle split_by_classes(const LabeledEmbeddings& train, const LabeledEmbeddings& test,
                               const std::set<std::uint32_t>& forget_classes);

// Argmin over per-class misclassification counts, ties to the lowest class id.
std::uint32_t select_forget_class(const std::vector<std::uint64_t>& misclass_counts);

}  // namespace dkvb
