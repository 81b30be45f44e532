#include "xmodal/training.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "xmodal/losses.hpp"
#include "xmodal/optim.hpp"
#include "xmodal/rng.hpp"

namespace xmodal {

using nlohmann::json;

namespace {

int n_val_pieces(int n_pieces, double val_fraction) {
    return std::min(n_pieces - 1,
                    std::max(1, static_cast<int>(std::ceil(val_fraction * n_pieces))));
}

} // namespace

std::vector<int> train_item_indices(const Corpus& corpus, double val_fraction) {
    const int cut = corpus.config.n_pieces - n_val_pieces(corpus.config.n_pieces, val_fraction);
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(corpus.items.size()); ++i)
        if (corpus.items[static_cast<std::size_t>(i)].piece_id < cut) out.push_back(i);
    return out;
}

std::vector<int> val_item_indices(const Corpus& corpus, double val_fraction) {
    const int cut = corpus.config.n_pieces - n_val_pieces(corpus.config.n_pieces, val_fraction);
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(corpus.items.size()); ++i)
        if (corpus.items[static_cast<std::size_t>(i)].piece_id >= cut) out.push_back(i);
    return out;
}

namespace {

// Train-time descriptor controls for the parameter-matched arms. Noise and
// shuffle are drawn per step from the given rng.
void apply_descriptor_control(std::vector<ItemDescriptors>& descs, DescriptorControl control,
                              Rng& rng) {
    if (control == DescriptorControl::None) return;
    auto for_each_side = [&](auto&& fn) {
        for (auto& d : descs) {
            if (d.audio) fn(*d.audio);
            if (d.midi) fn(*d.midi);
            if (d.t3) fn(*d.t3);
        }
    };
    switch (control) {
        case DescriptorControl::Zero:
            for_each_side([](DescriptorTensor& d) {
                std::fill(d.values.begin(), d.values.end(), 0.0);
            });
            break;
        case DescriptorControl::Random:
            for_each_side([&](DescriptorTensor& d) {
                for (auto& v : d.values) v = rng.normal();
            });
            break;
        case DescriptorControl::Shuffle: {
            // permute descriptor streams across the batch, per side
            const int b = static_cast<int>(descs.size());
            std::vector<int> perm(static_cast<std::size_t>(b));
            for (int i = 0; i < b; ++i) perm[static_cast<std::size_t>(i)] = i;
            rng.shuffle(perm);
            std::vector<ItemDescriptors> copy = descs;
            for (int i = 0; i < b; ++i) {
                const int src = perm[static_cast<std::size_t>(i)];
                if (descs[static_cast<std::size_t>(i)].audio && copy[static_cast<std::size_t>(src)].audio)
                    descs[static_cast<std::size_t>(i)].audio = copy[static_cast<std::size_t>(src)].audio;
                if (descs[static_cast<std::size_t>(i)].midi && copy[static_cast<std::size_t>(src)].midi)
                    descs[static_cast<std::size_t>(i)].midi = copy[static_cast<std::size_t>(src)].midi;
                if (descs[static_cast<std::size_t>(i)].t3 && copy[static_cast<std::size_t>(src)].t3)
                    descs[static_cast<std::size_t>(i)].t3 = copy[static_cast<std::size_t>(src)].t3;
            }
            break;
        }
        case DescriptorControl::None: break;
    }
}

} // namespace

TrainResult train(const TrainConfig& config, const Corpus* preloaded) {
    const std::string cfg_json = train_config_to_json(config);
    const std::uint64_t cfg_hash = config_hash(config);

    TrainResult result;
    result.corpus = preloaded ? *preloaded
                              : generate_corpus(config.corpus, sub_seed(config.seed, "corpus"));
    const auto train_idx = train_item_indices(result.corpus, config.val_piece_fraction);
    const auto val_idx = val_item_indices(result.corpus, config.val_piece_fraction);
    if (static_cast<int>(train_idx.size()) < config.batch_size)
        throw std::invalid_argument("train: corpus too small for one batch");

    auto model = std::make_shared<Model>(config.resolved_arm(), config.corpus.spectral,
                                         config.corpus.sample_rate, config.segment_samples(),
                                         sub_seed(config.seed, "init"));
    result.model = model;
    result.val_pool = build_pool_structure(result.corpus, val_idx, config.pool,
                                           sub_seed(config.seed, "pool"));

    AdamWState opt;
    opt.base_lr = config.base_lr;
    opt.weight_decay = config.weight_decay;

    const int steps_per_epoch = static_cast<int>(train_idx.size()) / config.batch_size;
    Rng dropout_rng(sub_seed(config.seed, "dropout"));
    Rng control_rng(sub_seed(config.seed, "control"));

    auto snapshot = [&]() { return model->to_checkpoint(cfg_hash, cfg_json); };
    result.best = snapshot();
    result.last = result.best;
    Checkpoint last_good = result.best;

    auto evaluate = [&]() { return scoreboard(*model, result.corpus, result.val_pool).s; };

    long long global_step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        auto order = train_idx;
        Rng shuffle_rng(sub_seed(config.seed, "batching", static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        EpochRecord rec;
        rec.epoch = epoch;
        int batches = 0;
        bool aborted = false;
        for (int b = 0; b + config.batch_size <= static_cast<int>(order.size());
             b += config.batch_size) {
            const double lr_mult =
                lr_at(config.schedule, global_step, steps_per_epoch, config.epochs);

            std::vector<ItemDescriptors> descs;
            std::vector<const CorpusItem*> items;
            for (int i = 0; i < config.batch_size; ++i) {
                const auto& item =
                    result.corpus.items[static_cast<std::size_t>(order[static_cast<std::size_t>(b + i)])];
                items.push_back(&item);
                descs.push_back(model->compute_descriptors(item));
            }
            apply_descriptor_control(descs, config.descriptor_control, control_rng);

            std::vector<TensorPtr> pooled_a, pooled_m, pooled_d;
            TensorPtr aux;
            for (int i = 0; i < config.batch_size; ++i) {
                const auto& d = descs[static_cast<std::size_t>(i)];
                auto ea = model->encode_audio(items[static_cast<std::size_t>(i)]->audio,
                                              d.audio ? &*d.audio : nullptr, true, &dropout_rng);
                auto em = model->encode_midi(items[static_cast<std::size_t>(i)]->midi,
                                             d.midi ? &*d.midi : nullptr, true, &dropout_rng);
                pooled_a.push_back(ea.pooled);
                pooled_m.push_back(em.pooled);
                if (ea.aux) aux = aux ? add(aux, ea.aux) : ea.aux;
                if (em.aux) aux = aux ? add(aux, em.aux) : em.aux;
                if (d.t3) pooled_d.push_back(
                    model->encode_third_tower(*d.t3, true, &dropout_rng).pooled);
            }
            auto za = model->project_audio(stack_rows(pooled_a), true);
            auto zm = model->project_midi(stack_rows(pooled_m), true);

            LossBreakdown loss;
            const auto& t3 = model->config().t3;
            if (t3.enabled) {
                auto zd = model->project_t3(stack_rows(pooled_d), true);
                loss = third_tower_loss(za, zm, zd, t3.alpha, t3.beta, config.vicreg,
                                        t3.include_main);
            } else {
                loss = vicreg(za, zm, config.vicreg);
            }
            if (aux) loss = with_auxiliary(loss, scale(aux, model->config().moe.aux_coef));

            if (!std::isfinite(loss.total_value())) {
                result.history.aborted = true;
                result.history.abort_reason = "non-finite loss at epoch " +
                                              std::to_string(epoch) + " step " +
                                              std::to_string(global_step);
                aborted = true;
                break;
            }

            for (auto& p : model->parameters()) p->zero_grad();
            backward(loss.total);
            auto step_res = adamw_step(opt, model->parameters(), lr_mult);
            if (!step_res.applied)
                result.history.notes.push_back("step " + std::to_string(global_step) +
                                               " skipped: " + step_res.note);

            rec.total += loss.total_value();
            rec.invariance += loss.invariance_value();
            rec.variance += loss.variance_value();
            rec.covariance += loss.covariance_value();
            rec.auxiliary += loss.auxiliary_value();
            rec.lr_mult = lr_mult;
            batches++;
            global_step++;
        }
        if (aborted) break;
        if (batches > 0) {
            rec.total /= batches;
            rec.invariance /= batches;
            rec.variance /= batches;
            rec.covariance /= batches;
            rec.auxiliary /= batches;
        }

        const bool eval_now = config.eval_every_epochs > 0 &&
                              ((epoch + 1) % config.eval_every_epochs == 0 ||
                               epoch + 1 == config.epochs);
        if (eval_now) {
            rec.val_s = evaluate();
            if (rec.val_s > result.history.best_s) {
                result.history.best_s = rec.val_s;
                result.history.best_epoch = epoch;
                result.best = snapshot();
            }
        }
        result.history.epochs.push_back(rec);
        last_good = snapshot();
    }

    result.last = result.history.aborted ? last_good : snapshot();
    if (result.history.best_epoch < 0) {
        result.best = result.last;
        result.history.best_epoch = config.epochs > 0 ? config.epochs - 1 : 0;
        if (!result.history.aborted && config.epochs == 0) result.history.best_s = -1;
    }
    return result;
}

std::string TrainHistory::to_jsonl() const {
    std::string out;
    for (const auto& e : epochs) {
        json j = {{"epoch", e.epoch},        {"total", e.total},
                  {"invariance", e.invariance}, {"variance", e.variance},
                  {"covariance", e.covariance}, {"auxiliary", e.auxiliary},
                  {"lr_mult", e.lr_mult}};
        if (e.val_s >= 0) j["val_s"] = e.val_s;
        out += j.dump() + "\n";
    }
    json tail = {{"best_s", best_s}, {"best_epoch", best_epoch}, {"aborted", aborted}};
    if (!abort_reason.empty()) tail["abort_reason"] = abort_reason;
    if (!notes.empty()) tail["notes"] = notes;
    out += tail.dump() + "\n";
    return out;
}

void summary_stats(const std::vector<double>& values, double& mean, double& sd, double& lo,
                   double& hi) {
    if (values.empty()) throw std::invalid_argument("summary_stats: empty sample");
    mean = 0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    sd = 0;
    if (values.size() > 1) {
        for (double v : values) sd += (v - mean) * (v - mean);
        sd = std::sqrt(sd / static_cast<double>(values.size() - 1));
    }
    lo = *std::min_element(values.begin(), values.end());
    hi = *std::max_element(values.begin(), values.end());
}

MultiSeedSummary multi_seed(const TrainConfig& config, const std::vector<std::uint64_t>& seeds) {
    if (seeds.size() < 2) throw std::invalid_argument("multi_seed: need at least 2 seeds");
    MultiSeedSummary out;
    out.seeds = seeds;
    for (auto s : seeds) {
        TrainConfig c = config;
        c.seed = s;
        auto res = train(c);
        out.best_s.push_back(res.history.best_s);
    }
    summary_stats(out.best_s, out.mean, out.sd, out.min, out.max);
    return out;
}

} // namespace xmodal
