#include "xmodal/retrieval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <map>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "xmodal/rng.hpp"

namespace xmodal {

using nlohmann::json;

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

int worker_threads() {
    const char* env = std::getenv("XMODAL_THREADS");
    int n = 1;
    if (env) n = std::max(1, std::atoi(env));
    return std::min<int>(n, std::max(1u, std::thread::hardware_concurrency()));
}

void parallel_for(int n, const std::function<void(int)>& fn) {
    const int threads = std::min(worker_threads(), n);
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            NoGradGuard ng;
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& th : pool) th.join();
}

} // namespace

PoolStructure build_pool_structure(const Corpus& corpus, const std::vector<int>& candidates,
                                   const PoolSpec& spec, std::uint64_t seed) {
    require(spec.size > 0 && spec.n_queries > 0, "build_pool: empty pool spec");
    require(static_cast<int>(candidates.size()) >= spec.size,
            "build_pool: only " + std::to_string(candidates.size()) +
                " candidate items for pool size " + std::to_string(spec.size));

    // group candidates by piece, pieces by composer
    std::map<int, std::vector<int>> by_piece;
    std::map<int, int> piece_composer;
    for (int idx : candidates) {
        const auto& it = corpus.items[static_cast<std::size_t>(idx)];
        by_piece[it.piece_id].push_back(idx);
        piece_composer[it.piece_id] = it.composer_id;
    }
    std::map<int, std::vector<int>> composer_pieces;
    for (const auto& [piece, comp] : piece_composer) composer_pieces[comp].push_back(piece);

    Rng rng(sub_seed(seed, "pool"));
    std::vector<int> composers;
    for (const auto& [comp, pieces] : composer_pieces) composers.push_back(comp);
    rng.shuffle(composers);

    // fill the pool with whole pieces, composer by composer, so hard and
    // semi-hard quotas stay satisfiable
    PoolStructure ps;
    ps.spec = spec;
    ps.seed = seed;
    for (int comp : composers) {
        auto pieces = composer_pieces[comp];
        rng.shuffle(pieces);
        for (int piece : pieces) {
            auto items = by_piece[piece];
            rng.shuffle(items);
            for (int idx : items) {
                if (static_cast<int>(ps.item_idx.size()) >= spec.size) break;
                ps.item_idx.push_back(idx);
            }
            if (static_cast<int>(ps.item_idx.size()) >= spec.size) break;
        }
        if (static_cast<int>(ps.item_idx.size()) >= spec.size) break;
    }
    require(static_cast<int>(ps.item_idx.size()) == spec.size,
            "build_pool: candidates cannot fill the pool");

    // pool-local structure lookups
    const int n = spec.size;
    std::vector<int> piece_of(static_cast<std::size_t>(n)), comp_of(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto& it = corpus.items[static_cast<std::size_t>(ps.item_idx[static_cast<std::size_t>(i)])];
        piece_of[static_cast<std::size_t>(i)] = it.piece_id;
        comp_of[static_cast<std::size_t>(i)] = it.composer_id;
    }

    bool any_hard_ok = false, any_semi_ok = false;
    std::vector<int> eligible;
    std::vector<std::vector<int>> hard_pool(static_cast<std::size_t>(n)),
        semi_pool(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            if (piece_of[static_cast<std::size_t>(j)] == piece_of[static_cast<std::size_t>(i)])
                hard_pool[static_cast<std::size_t>(i)].push_back(j);
            else if (comp_of[static_cast<std::size_t>(j)] == comp_of[static_cast<std::size_t>(i)])
                semi_pool[static_cast<std::size_t>(i)].push_back(j);
        }
        const bool hard_ok =
            static_cast<int>(hard_pool[static_cast<std::size_t>(i)].size()) >= spec.n_hard;
        const bool semi_ok =
            static_cast<int>(semi_pool[static_cast<std::size_t>(i)].size()) >= spec.n_semihard;
        any_hard_ok = any_hard_ok || hard_ok;
        any_semi_ok = any_semi_ok || semi_ok;
        if (hard_ok && semi_ok) eligible.push_back(i);
    }
    if (eligible.empty()) {
        if (!any_hard_ok)
            throw std::invalid_argument(
                "build_pool: hard-negative quota unsatisfiable (no piece contributes " +
                std::to_string(spec.n_hard + 1) + " pool items)");
        throw std::invalid_argument(
            "build_pool: semi-hard quota unsatisfiable (need " +
            std::to_string(spec.n_semihard) + " same-composer different-piece items)");
    }

    for (int q = 0; q < spec.n_queries; ++q) {
        const int item = eligible[static_cast<std::size_t>(rng.below(eligible.size()))];
        ps.queries.push_back(item);
        auto hp = hard_pool[static_cast<std::size_t>(item)];
        rng.shuffle(hp);
        hp.resize(static_cast<std::size_t>(spec.n_hard));
        ps.hard.push_back(std::move(hp));
        auto sp = semi_pool[static_cast<std::size_t>(item)];
        rng.shuffle(sp);
        sp.resize(static_cast<std::size_t>(spec.n_semihard));
        ps.semihard.push_back(std::move(sp));
    }
    return ps;
}

void l2_normalize(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n > 0.0)
        for (double& x : v) x /= n;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size(), "cosine: dim mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

EvalPool embed_pool(Model& model, const Corpus& corpus, const PoolStructure& structure,
                    const ItemTransform& transform, const DescriptorOverride& override_desc) {
    EvalPool pool;
    pool.structure = structure;
    const int n = static_cast<int>(structure.item_idx.size());
    pool.audio_emb.resize(static_cast<std::size_t>(n));
    pool.midi_emb.resize(static_cast<std::size_t>(n));
    parallel_for(n, [&](int i) {
        CorpusItem item = corpus.items[static_cast<std::size_t>(
            structure.item_idx[static_cast<std::size_t>(i)])];
        if (transform) item = transform(item, i);
        ItemDescriptors descs = override_desc ? override_desc(model, item, i)
                                              : model.compute_descriptors(item);
        auto za = model.embed_audio_eval(item.audio, descs.audio ? &*descs.audio : nullptr);
        auto zm = model.embed_midi_eval(item.midi, descs.midi ? &*descs.midi : nullptr);
        l2_normalize(za);
        l2_normalize(zm);
        pool.audio_emb[static_cast<std::size_t>(i)] = std::move(za);
        pool.midi_emb[static_cast<std::size_t>(i)] = std::move(zm);
    });
    return pool;
}

int rank_of(const std::vector<double>& similarities, int true_index) {
    require(true_index >= 0 && true_index < static_cast<int>(similarities.size()),
            "rank_of: true index out of range");
    const double st = similarities[static_cast<std::size_t>(true_index)];
    int rank = 1;
    for (int j = 0; j < static_cast<int>(similarities.size()); ++j) {
        if (j == true_index) continue;
        const double sj = similarities[static_cast<std::size_t>(j)];
        if (sj > st || (sj == st && j < true_index)) rank++;
    }
    return rank;
}

int recall_at_k(const std::vector<double>& similarities, int true_index, int k) {
    require(k >= 1 && k <= static_cast<int>(similarities.size()),
            "recall_at_k: k out of range for pool size " + std::to_string(similarities.size()));
    return rank_of(similarities, true_index) <= k ? 1 : 0;
}

double mrr(const std::vector<double>& similarities, int true_index) {
    return 1.0 / rank_of(similarities, true_index);
}

double s_metric(double r10_am, double r10_ma) {
    require(r10_am >= 0.0 && r10_am <= 1.0 && r10_ma >= 0.0 && r10_ma <= 1.0,
            "s_metric: recalls must be in [0, 1]");
    return std::min(r10_am, r10_ma);
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

} // namespace

double hard_negative_accuracy(const EvalPool& pool) {
    const auto& ps = pool.structure;
    require(!ps.queries.empty(), "hard_negative_accuracy: no queries");
    if (ps.spec.n_hard == 0) return 1.0; // vacuous: nothing to outrank
    double acc = 0.0;
    for (std::size_t q = 0; q < ps.queries.size(); ++q) {
        const int i = ps.queries[q];
        for (int dir = 0; dir < 2; ++dir) {
            const auto& query = dir == 0 ? pool.audio_emb[static_cast<std::size_t>(i)]
                                         : pool.midi_emb[static_cast<std::size_t>(i)];
            const auto& side = dir == 0 ? pool.midi_emb : pool.audio_emb;
            const double s_true = dot(query, side[static_cast<std::size_t>(i)]);
            bool beats_all = true;
            for (int h : ps.hard[q])
                if (dot(query, side[static_cast<std::size_t>(h)]) >= s_true) {
                    beats_all = false;
                    break;
                }
            acc += beats_all ? 0.5 : 0.0;
        }
    }
    return acc / static_cast<double>(ps.queries.size());
}

RetrievalReport scoreboard_metrics(const EvalPool& pool) {
    const auto& ps = pool.structure;
    const int n = static_cast<int>(ps.item_idx.size());
    const int k10 = std::min(10, n);
    RetrievalReport rep;
    rep.pool = ps.spec;
    double r1a = 0, r10a = 0, ma = 0, r1m = 0, r10m = 0, mm = 0;
    for (std::size_t q = 0; q < ps.queries.size(); ++q) {
        const int i = ps.queries[q];
        std::vector<double> sims_am(static_cast<std::size_t>(n)), sims_ma(static_cast<std::size_t>(n));
        for (int j = 0; j < n; ++j) {
            sims_am[static_cast<std::size_t>(j)] =
                dot(pool.audio_emb[static_cast<std::size_t>(i)],
                    pool.midi_emb[static_cast<std::size_t>(j)]);
            sims_ma[static_cast<std::size_t>(j)] =
                dot(pool.midi_emb[static_cast<std::size_t>(i)],
                    pool.audio_emb[static_cast<std::size_t>(j)]);
        }
        r1a += recall_at_k(sims_am, i, 1);
        r10a += recall_at_k(sims_am, i, k10);
        ma += mrr(sims_am, i);
        r1m += recall_at_k(sims_ma, i, 1);
        r10m += recall_at_k(sims_ma, i, k10);
        mm += mrr(sims_ma, i);
    }
    const double nq = static_cast<double>(ps.queries.size());
    rep.r1_am = r1a / nq;
    rep.r10_am = r10a / nq;
    rep.mrr_am = ma / nq;
    rep.r1_ma = r1m / nq;
    rep.r10_ma = r10m / nq;
    rep.mrr_ma = mm / nq;
    rep.s = s_metric(rep.r10_am, rep.r10_ma);
    rep.hardneg = hard_negative_accuracy(pool);
    return rep;
}

RetrievalReport scoreboard(Model& model, const Corpus& corpus, const PoolStructure& structure) {
    return scoreboard_metrics(embed_pool(model, corpus, structure));
}

std::string RetrievalReport::to_json() const {
    json j = {{"schema_version", 1},
              {"arm", arm},
              {"seed", seed},
              {"config_hash", config_hash},
              {"pool",
               {{"size", pool.size},
                {"n_queries", pool.n_queries},
                {"n_hard", pool.n_hard},
                {"n_semihard", pool.n_semihard}}},
              {"metrics",
               {{"s", s},
                {"r1_am", r1_am},
                {"r10_am", r10_am},
                {"mrr_am", mrr_am},
                {"r1_ma", r1_ma},
                {"r10_ma", r10_ma},
                {"mrr_ma", mrr_ma},
                {"hardneg", hardneg}}}};
    return j.dump(2);
}

RetrievalReport RetrievalReport::from_json(const std::string& text) {
    json j = json::parse(text);
    if (!j.contains("schema_version") || j.at("schema_version").get<int>() != 1)
        throw std::invalid_argument("retrieval report: unsupported schema version");
    RetrievalReport r;
    r.arm = j.at("arm").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    const json& p = j.at("pool");
    r.pool.size = p.at("size").get<int>();
    r.pool.n_queries = p.at("n_queries").get<int>();
    r.pool.n_hard = p.at("n_hard").get<int>();
    r.pool.n_semihard = p.at("n_semihard").get<int>();
    const json& m = j.at("metrics");
    r.s = m.at("s").get<double>();
    r.r1_am = m.at("r1_am").get<double>();
    r.r10_am = m.at("r10_am").get<double>();
    r.mrr_am = m.at("mrr_am").get<double>();
    r.r1_ma = m.at("r1_ma").get<double>();
    r.r10_ma = m.at("r10_ma").get<double>();
    r.mrr_ma = m.at("mrr_ma").get<double>();
    r.hardneg = m.at("hardneg").get<double>();
    return r;
}

} // namespace xmodal
