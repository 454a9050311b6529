#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "dkvb/bottleneck.hpp"
#include "dkvb/data.hpp"

namespace dkvb {

// Selection frequencies accumulated over a dataset's forward passes.
struct ActivationCounts {
    std::map<PairIndex, std::uint64_t> counts;
    std::uint64_t examples_processed = 0;

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (const auto& [pair, n] : counts) t += n;
        return t;
    }
};

struct UnlearnReport {
    std::uint64_t pairs_masked = 0;
    std::uint64_t forward_examples_processed = 0;
    std::uint64_t backward_flops = 0;  // both methods are forward-only
    std::vector<PairIndex> masked_pairs;  // mask delta, sorted
};

// Forward every example and count each selected pair. The model is unchanged.
ActivationCounts record_activations(const BottleneckModel& model, const LabeledEmbeddings& data,
                                    unsigned workers = 1);

// Same aggregation from traces cached during the final training epoch; spends
// no forward passes.
ActivationCounts activations_from_traces(const std::vector<SelectionTrace>& traces);

// Mask the top-N_a most frequently selected pairs. Sort order: count
// descending, then codebook and key ascending.
UnlearnReport unlearn_via_activations(BottleneckModel& model, const ActivationCounts& counts,
                                      std::uint64_t top_n);

// Draw N_e forget examples without replacement (seeded) and mask the union of
// all pairs they select.
UnlearnReport unlearn_via_examples(BottleneckModel& model, const LabeledEmbeddings& forget_train,
                                   std::uint64_t num_examples, std::uint64_t seed,
                                   unsigned workers = 1);

enum class UnlearnMethod : std::uint32_t { Activations = 0, Examples = 1 };

UnlearnMethod unlearn_method_from_string(const std::string& name);
std::string to_string(UnlearnMethod method);

// Pooled multi-class unlearning: applies the chosen method to the forget
// training data of every forget class at once.
UnlearnReport unlearn_multi(BottleneckModel& model, const DatasetBundle& bundle,
                            UnlearnMethod method, std::uint64_t budget, std::uint64_t seed = 0,
                            unsigned workers = 1);

}  // namespace dkvb
