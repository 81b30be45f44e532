#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "xmodal/config.hpp"
#include "xmodal/encoders.hpp"
#include "xmodal/midi.hpp"

namespace xmodal {

/// Structured pool: which corpus items sit in the pool, which of them are
/// queried, and each query's hard / semi-hard negative lists (pool-local
/// ids). Reusable across checkpoints; embeddings live in EvalPool.
struct PoolStructure {
    std::vector<int> item_idx; // corpus indices
    std::vector<int> queries;  // pool-local ids, sampled with replacement
    std::vector<std::vector<int>> hard;
    std::vector<std::vector<int>> semihard;
    PoolSpec spec;
    std::uint64_t seed = 0;
};

/// Builds the pool over the given candidate corpus items. Whole pieces are
/// pulled in (grouped by composer) so the negative quotas are satisfiable;
/// an unsatisfiable quota is rejected naming the deficient category.
PoolStructure build_pool_structure(const Corpus& corpus, const std::vector<int>& candidates,
                                   const PoolSpec& spec, std::uint64_t seed);

struct EvalPool {
    PoolStructure structure;
    // L2-normalized embeddings, pool-local order
    std::vector<std::vector<double>> audio_emb;
    std::vector<std::vector<double>> midi_emb;
};

using ItemTransform = std::function<CorpusItem(const CorpusItem&, int pool_idx)>;
using DescriptorOverride =
    std::function<ItemDescriptors(const Model&, const CorpusItem&, int pool_idx)>;

/// Embeds every pool item on both sides (eval mode). `transform` perturbs
/// items before descriptor computation and encoding; `override_desc`
/// replaces the descriptors that would normally be computed.
EvalPool embed_pool(Model& model, const Corpus& corpus, const PoolStructure& structure,
                    const ItemTransform& transform = nullptr,
                    const DescriptorOverride& override_desc = nullptr);

// ---- metrics ----------------------------------------------------------------

/// 1-based rank of the true item under descending similarity, ties broken
/// by stable index order.
int rank_of(const std::vector<double>& similarities, int true_index);
int recall_at_k(const std::vector<double>& similarities, int true_index, int k);
double mrr(const std::vector<double>& similarities, int true_index);
double s_metric(double r10_am, double r10_ma);

double cosine(const std::vector<double>& a, const std::vector<double>& b);
void l2_normalize(std::vector<double>& v);

struct RetrievalReport {
    std::string arm;
    std::uint64_t seed = 0;
    std::string config_hash;
    PoolSpec pool;
    double s = 0;
    double r1_am = 0, r10_am = 0, mrr_am = 0;
    double r1_ma = 0, r10_ma = 0, mrr_ma = 0;
    double hardneg = 0;

    std::string to_json() const;
    static RetrievalReport from_json(const std::string& text);
};

/// Fraction of queries whose true match outranks every one of their hard
/// negatives, averaged over the two retrieval directions.
double hard_negative_accuracy(const EvalPool& pool);

/// Full canonical metric set over an embedded pool (Test 12 payload).
RetrievalReport scoreboard_metrics(const EvalPool& pool);

/// Convenience: embed + score.
RetrievalReport scoreboard(Model& model, const Corpus& corpus, const PoolStructure& structure);

} // namespace xmodal
