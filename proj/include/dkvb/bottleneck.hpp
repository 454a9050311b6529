#pragma once

#include <Eigen/Core>
#include <compare>
#include <cstdint>
#include <string>
#include <vector>

#include "dkvb/data.hpp"

namespace dkvb {

enum class ValueInit : std::uint32_t { Zeros = 0, Gaussian = 1, Uniform = 2 };

ValueInit value_init_from_string(const std::string& name);
std::string to_string(ValueInit init);

struct BottleneckConfig {
    std::uint32_t num_codebooks = 256;
    std::uint32_t pairs_per_codebook = 4096;
    std::uint32_t top_k = 1;
    std::uint32_t key_dim = 8;
    std::uint32_t value_dim = 0;  // = num_classes under the average-pooling head
    std::uint32_t input_dim = 0;
    ValueInit value_init = ValueInit::Zeros;
    double value_init_scale = 0.1;  // gaussian stddev / uniform half-range
    double ema_decay = 0.99;
    double ema_epsilon = 1e-5;
    std::uint64_t seed = 1;

    std::uint32_t head_rows() const { return num_codebooks * key_dim; }
    void validate() const;  // throws ConfigError
};

// (codebook, key) address of one key-value pair.
struct PairIndex {
    std::uint32_t codebook = 0;
    std::uint32_t key = 0;
    auto operator<=>(const PairIndex&) const = default;
};

// Excluded pairs. Unlearning only ever sets bits; restoring a model to an
// earlier point is done by assigning a saved MaskState wholesale.
struct MaskState {
    std::vector<std::vector<std::uint8_t>> excluded;  // C x M
    std::vector<std::uint32_t> masked_per_codebook;
    std::uint64_t masked_total = 0;

    void reset(std::uint32_t num_codebooks, std::uint32_t pairs_per_codebook);
    bool is_masked(std::uint32_t c, std::uint32_t m) const {
        return excluded[c][m] != 0;
    }
    // Returns true if the bit was newly set.
    bool set(std::uint32_t c, std::uint32_t m);
    bool codebook_fully_masked(std::uint32_t c) const;
    bool all_masked() const;
};

// Per-example record of which (codebook, key) pairs fed the decoder.
// per_codebook[c] holds the ordered top-k key indices of codebook c.
struct SelectionTrace {
    std::vector<std::vector<std::uint32_t>> per_codebook;
};

struct ForwardResult {
    Eigen::VectorXd logits;
    SelectionTrace trace;
    bool degenerate = false;  // every codebook fully masked
};

struct BottleneckModel {
    BottleneckConfig config;
    RowMatrixXd projection;                 // (C*key_dim) x D, frozen
    std::vector<RowMatrixXd> keys;          // C of M x key_dim, frozen after init
    std::vector<Eigen::VectorXd> ema_counts;  // C of M
    std::vector<RowMatrixXd> ema_sums;      // C of M x key_dim
    bool keys_frozen = false;
    std::vector<RowMatrixXd> values;        // C of M x value_dim, learnable
    MaskState mask;

    // Heads of one example: row c is the key_dim-slice c of projection * z.
    RowMatrixXd project_heads(Eigen::Ref<const Eigen::VectorXd> z) const;
    RowMatrixXd project_heads_f32(const RowMatrixXf& features, std::int64_t row) const;

    // Top-k nearest unmasked keys per codebook by squared Euclidean distance;
    // ties break to the lower key index. A fully masked codebook yields an
    // empty selection.
    SelectionTrace quantize(const RowMatrixXd& heads) const;

    // Average selected values per codebook, then average codebook outputs over
    // codebooks with a nonempty selection.
    ForwardResult forward(const RowMatrixXf& features, std::int64_t row) const;

    // argmax with ties to the lowest class id
    std::uint32_t predict(const ForwardResult& fr) const;

    void apply_mask(const std::vector<PairIndex>& pairs);

    std::uint64_t trainable_parameters() const {
        return static_cast<std::uint64_t>(config.num_codebooks) * config.pairs_per_codebook *
               config.value_dim;
    }
};

// Projection entries are iid N(0, 1/D), drawn deterministically from the seed.
RowMatrixXd init_projection(const BottleneckConfig& config);

// Fresh model: projection drawn, values initialized, keys all-zero and not
// yet frozen (key_init_ema places them).
BottleneckModel make_bottleneck_model(const BottleneckConfig& config);

// Clustering-style key placement. Initial keys are heads sampled from the
// first batches of the seeded data stream; every batch then assigns each head
// to its single nearest key and folds counts/sums into the EMA accumulators.
// Keys are frozen afterwards.
void key_init_ema(BottleneckModel& model, const LabeledEmbeddings& data, std::uint32_t epochs,
                  double decay, std::uint32_t batch_size = 256);

// Checkpoint: magic "DKVB", u32 version, config, projection, keys, EMA state,
// values, mask. Bit-exact round trip.
void save_checkpoint(const std::string& path, const BottleneckModel& model);
BottleneckModel load_checkpoint(const std::string& path);

bool models_identical(const BottleneckModel& a, const BottleneckModel& b);

}  // namespace dkvb
