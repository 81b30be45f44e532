#pragma once

#include <memory>
#include <string>
#include <vector>

#include "xmodal/checkpoint.hpp"
#include "xmodal/config.hpp"
#include "xmodal/encoders.hpp"
#include "xmodal/retrieval.hpp"

namespace xmodal {

struct EpochRecord {
    int epoch = 0;
    double total = 0, invariance = 0, variance = 0, covariance = 0, auxiliary = 0;
    double lr_mult = 0; // multiplier at the last step of the epoch
    double val_s = -1;  // -1 when this epoch was not evaluated
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    double best_s = -1;
    int best_epoch = -1;
    bool aborted = false;
    std::string abort_reason;
    std::vector<std::string> notes;

    std::string to_jsonl() const;
};

struct TrainResult {
    std::shared_ptr<Model> model; // final weights (post-training)
    Checkpoint best;              // checkpoint with the highest validation S
    Checkpoint last;
    TrainHistory history;
    Corpus corpus;                 // the generated corpus, for downstream eval
    PoolStructure val_pool;        // fixed held-out pool used for best-epoch S
};

/// Indices of items whose pieces fall in the train / validation split.
/// Validation holds out the last ceil(val_fraction * n_pieces) pieces.
std::vector<int> train_item_indices(const Corpus& corpus, double val_fraction);
std::vector<int> val_item_indices(const Corpus& corpus, double val_fraction);

/// Full deterministic training run: corpus generation, batching, VICReg (or
/// third-tower) optimization with AdamW + schedule, periodic validation S,
/// best/last checkpointing. A non-finite loss aborts with the last good
/// checkpoint retained. A preloaded corpus (from gen-data output) skips the
/// in-memory generation; the two paths produce identical corpora.
TrainResult train(const TrainConfig& config, const Corpus* preloaded = nullptr);

struct MultiSeedSummary {
    std::vector<std::uint64_t> seeds;
    std::vector<double> best_s;
    double mean = 0, sd = 0, min = 0, max = 0;
};

MultiSeedSummary multi_seed(const TrainConfig& config, const std::vector<std::uint64_t>& seeds);

/// Sample statistics used in the multi-seed contract: mean, n-1 standard
/// deviation and min-max range.
void summary_stats(const std::vector<double>& values, double& mean, double& sd, double& lo,
                   double& hi);

} // namespace xmodal
