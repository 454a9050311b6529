#include "dkvb/unlearning.hpp"

#include <algorithm>
#include <set>

#include "dkvb/errors.hpp"
#include "dkvb/rng.hpp"
#include "parallel.hpp"

namespace dkvb {

UnlearnMethod unlearn_method_from_string(const std::string& name) {
    if (name == "activations") return UnlearnMethod::Activations;
    if (name == "examples") return UnlearnMethod::Examples;
    throw ConfigError("unknown unlearning method '" + name + "' (activations|examples)");
}

std::string to_string(UnlearnMethod method) {
    return method == UnlearnMethod::Activations ? "activations" : "examples";
}

ActivationCounts record_activations(const BottleneckModel& model, const LabeledEmbeddings& data,
                                    unsigned workers) {
    if (data.size() == 0) throw DataError("record_activations: empty dataset");
    const std::size_t n = static_cast<std::size_t>(data.size());
    std::vector<SelectionTrace> traces(n);
    detail::parallel_for(n, workers, [&](std::size_t i) {
        traces[i] = model.quantize(model.project_heads_f32(data.features,
                                                           static_cast<std::int64_t>(i)));
    });
    ActivationCounts out = activations_from_traces(traces);
    return out;
}

ActivationCounts activations_from_traces(const std::vector<SelectionTrace>& traces) {
    if (traces.empty()) throw DataError("activations_from_traces: no traces");
    ActivationCounts out;
    out.examples_processed = traces.size();
    for (const auto& trace : traces) {
        for (std::uint32_t c = 0; c < trace.per_codebook.size(); ++c) {
            for (std::uint32_t m : trace.per_codebook[c]) {
                ++out.counts[PairIndex{c, m}];
            }
        }
    }
    return out;
}

namespace {

// Sets the bits and reports only newly masked pairs, sorted.
std::vector<PairIndex> mask_delta(BottleneckModel& model, const std::vector<PairIndex>& pairs) {
    for (const auto& p : pairs) {
        if (p.codebook >= model.config.num_codebooks ||
            p.key >= model.config.pairs_per_codebook) {
            throw ConfigError("unlearn: pair out of range");
        }
    }
    std::vector<PairIndex> delta;
    for (const auto& p : pairs) {
        if (model.mask.set(p.codebook, p.key)) delta.push_back(p);
    }
    std::sort(delta.begin(), delta.end());
    return delta;
}

}  // namespace

UnlearnReport unlearn_via_activations(BottleneckModel& model, const ActivationCounts& counts,
                                      std::uint64_t top_n) {
    std::vector<std::pair<std::uint64_t, PairIndex>> ranked;
    ranked.reserve(counts.counts.size());
    for (const auto& [pair, n] : counts.counts) ranked.emplace_back(n, pair);
    // count descending; map order already gives (codebook, key) ascending
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });

    UnlearnReport report;
    report.forward_examples_processed = counts.examples_processed;
    const std::uint64_t take = std::min<std::uint64_t>(top_n, ranked.size());
    std::vector<PairIndex> pairs;
    pairs.reserve(take);
    for (std::uint64_t i = 0; i < take; ++i) pairs.push_back(ranked[i].second);
    report.masked_pairs = mask_delta(model, pairs);
    report.pairs_masked = report.masked_pairs.size();
    return report;
}

UnlearnReport unlearn_via_examples(BottleneckModel& model, const LabeledEmbeddings& forget_train,
                                   std::uint64_t num_examples, std::uint64_t seed,
                                   unsigned workers) {
    const std::size_t n = static_cast<std::size_t>(forget_train.size());
    if (num_examples > n) {
        throw DataError("unlearn_via_examples: N_e exceeds forget set size");
    }
    UnlearnReport report;
    if (num_examples == 0) return report;

    auto stream = rng::make_stream(seed, "unlearn-examples");
    const std::vector<std::size_t> picked =
        rng::sample_without_replacement(n, static_cast<std::size_t>(num_examples), stream);

    std::vector<SelectionTrace> traces(picked.size());
    detail::parallel_for(picked.size(), workers, [&](std::size_t i) {
        traces[i] = model.quantize(model.project_heads_f32(
            forget_train.features, static_cast<std::int64_t>(picked[i])));
    });

    std::set<PairIndex> flagged;
    for (const auto& trace : traces) {
        for (std::uint32_t c = 0; c < trace.per_codebook.size(); ++c) {
            for (std::uint32_t m : trace.per_codebook[c]) flagged.insert(PairIndex{c, m});
        }
    }
    report.masked_pairs = mask_delta(model, {flagged.begin(), flagged.end()});
    report.pairs_masked = report.masked_pairs.size();
    report.forward_examples_processed = num_examples;
    return report;
}

UnlearnReport unlearn_multi(BottleneckModel& model, const DatasetBundle& bundle,
                            UnlearnMethod method, std::uint64_t budget, std::uint64_t seed,
                            unsigned workers) {
    if (bundle.train_forget.size() == 0) {
        throw DataError("unlearn_multi: empty forget training split");
    }
    if (method == UnlearnMethod::Activations) {
        const ActivationCounts counts = record_activations(model, bundle.train_forget, workers);
        return unlearn_via_activations(model, counts, budget);
    }
    return unlearn_via_examples(model, bundle.train_forget, budget, seed, workers);
}

}  // namespace dkvb
