#include "xmodal/validation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "xmodal/rng.hpp"

namespace xmodal {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

} // namespace

std::string ablation_mode_name(AblationMode m) {
    switch (m) {
        case AblationMode::Zero: return "zero";
        case AblationMode::Noise: return "noise";
        case AblationMode::Shuffle: return "shuffle";
    }
    return "?";
}

std::string ablation_side_name(AblationSide s) {
    return s == AblationSide::Audio ? "audio" : "midi";
}

AblationResult ablate(Model& model, const Corpus& corpus, const PoolStructure& pool,
                      const AblationSpec& spec) {
    const auto& cfg = model.config();
    const auto& side = spec.side == AblationSide::Audio ? cfg.audio_inject : cfg.midi_inject;
    if (side.mech == Mechanism::None)
        throw std::invalid_argument("ablate: arm " + cfg.name + " has no " +
                                    ablation_side_name(spec.side) + "-side descriptor path");

    AblationResult res;
    res.s_normal = scoreboard(model, corpus, pool).s;

    const int n = static_cast<int>(pool.item_idx.size());
    // precompute the normal descriptors once; noise statistics and the
    // shuffle permutation come from the evaluation batch itself
    std::vector<ItemDescriptors> normal(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        normal[static_cast<std::size_t>(i)] = model.compute_descriptors(
            corpus.items[static_cast<std::size_t>(pool.item_idx[static_cast<std::size_t>(i)])]);

    auto target_of = [&](ItemDescriptors& d) -> std::optional<DescriptorTensor>& {
        return spec.side == AblationSide::Audio ? d.audio : d.midi;
    };

    std::vector<ItemDescriptors> ablated = normal;
    switch (spec.mode) {
        case AblationMode::Zero:
            for (auto& d : ablated) {
                auto& t = target_of(d);
                std::fill(t->values.begin(), t->values.end(), 0.0);
            }
            break;
        case AblationMode::Noise: {
            // per-dimension moments over all frames of the evaluation batch
            const int dims = target_of(ablated[0])->dims;
            std::vector<double> mu(static_cast<std::size_t>(dims), 0.0),
                m2(static_cast<std::size_t>(dims), 0.0);
            long long count = 0;
            for (auto& d : ablated) {
                auto& t = target_of(d);
                for (int f = 0; f < t->frames; ++f)
                    for (int k = 0; k < dims; ++k) mu[static_cast<std::size_t>(k)] += t->at(f, k);
                count += t->frames;
            }
            for (auto& v : mu) v /= static_cast<double>(count);
            for (auto& d : ablated) {
                auto& t = target_of(d);
                for (int f = 0; f < t->frames; ++f)
                    for (int k = 0; k < dims; ++k) {
                        const double c = t->at(f, k) - mu[static_cast<std::size_t>(k)];
                        m2[static_cast<std::size_t>(k)] += c * c;
                    }
            }
            for (auto& v : m2) v = std::sqrt(v / static_cast<double>(count));
            Rng rng(sub_seed(spec.seed, "ablate_noise"));
            for (auto& d : ablated) {
                auto& t = target_of(d);
                for (int f = 0; f < t->frames; ++f)
                    for (int k = 0; k < dims; ++k)
                        t->at(f, k) = mu[static_cast<std::size_t>(k)] +
                                      m2[static_cast<std::size_t>(k)] * rng.normal();
            }
            break;
        }
        case AblationMode::Shuffle: {
            Rng rng(sub_seed(spec.seed, "ablate_shuffle"));
            std::vector<int> perm(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
            rng.shuffle(perm);
            for (int i = 0; i < n; ++i)
                target_of(ablated[static_cast<std::size_t>(i)]) =
                    target_of(normal[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
            break;
        }
    }

    auto override_desc = [&](const Model&, const CorpusItem&, int pool_idx) {
        return ablated[static_cast<std::size_t>(pool_idx)];
    };
    res.s_ablated = scoreboard_metrics(embed_pool(model, corpus, pool, nullptr, override_desc)).s;
    res.delta = res.s_ablated - res.s_normal;
    return res;
}

std::vector<DescriptorControl> param_matched_controls(const ArmConfig& arm) {
    if (arm.audio_inject.mech == Mechanism::None && arm.midi_inject.mech == Mechanism::None &&
        !arm.t3.enabled)
        throw std::invalid_argument("param_matched_controls: arm " + arm.name +
                                    " has no descriptor path");
    return {DescriptorControl::Zero, DescriptorControl::Random, DescriptorControl::Shuffle};
}

TranspositionResult transposition_sweep(Model& model, const Corpus& corpus,
                                        const PoolStructure& pool, const std::vector<int>& ks) {
    require(std::find(ks.begin(), ks.end(), 0) != ks.end(),
            "transposition_sweep: ks must include 0");
    TranspositionResult res;
    res.ks = ks;
    double s0 = -1, sp3 = -1, sm3 = -1;
    for (int k : ks) {
        auto tf = [k](const CorpusItem& item, int) {
            CorpusItem out = item;
            out.midi = transpose(item.midi, k);
            return out;
        };
        const double s = scoreboard_metrics(embed_pool(model, corpus, pool, tf)).s;
        res.s_values.push_back(s);
        if (k == 0) s0 = s;
        if (k == 3) sp3 = s;
        if (k == -3) sm3 = s;
    }
    if (s0 > 0 && sp3 >= 0 && sm3 >= 0) res.retention = 0.5 * (sp3 + sm3) / s0;
    return res;
}

// ---- CKA / RSA -----------------------------------------------------------------

namespace {

// column-centered copy as a flat row-major matrix
std::vector<double> centered(const std::vector<std::vector<double>>& x, int& n, int& p) {
    n = static_cast<int>(x.size());
    require(n >= 2, "cka/rsa: need at least 2 samples");
    p = static_cast<int>(x[0].size());
    for (const auto& row : x)
        require(static_cast<int>(row.size()) == p, "cka/rsa: ragged input matrix");
    std::vector<double> out(static_cast<std::size_t>(n) * p);
    for (int j = 0; j < p; ++j) {
        double mu = 0;
        for (int i = 0; i < n; ++i) mu += x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        mu /= n;
        for (int i = 0; i < n; ++i)
            out[static_cast<std::size_t>(i) * p + j] =
                x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] - mu;
    }
    return out;
}

double frob_sq_of_product(const std::vector<double>& a, int n, int pa, const std::vector<double>& b,
                          int pb) {
    // ||B^T A||_F^2 with A [n, pa], B [n, pb]
    double acc = 0;
    for (int i = 0; i < pb; ++i)
        for (int j = 0; j < pa; ++j) {
            double s = 0;
            for (int r = 0; r < n; ++r)
                s += b[static_cast<std::size_t>(r) * pb + i] * a[static_cast<std::size_t>(r) * pa + j];
            acc += s * s;
        }
    return acc;
}

} // namespace

double cka(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& y) {
    int n = 0, p = 0, n2 = 0, q = 0;
    auto xc = centered(x, n, p);
    auto yc = centered(y, n2, q);
    require(n == n2, "cka: sample count mismatch");
    const double xx = frob_sq_of_product(xc, n, p, xc, p);
    const double yy = frob_sq_of_product(yc, n, q, yc, q);
    require(xx > 0.0 && yy > 0.0, "cka: zero-variance input");
    const double xy = frob_sq_of_product(xc, n, p, yc, q);
    return xy / (std::sqrt(xx) * std::sqrt(yy));
}

namespace {

std::vector<double> upper_distances(const std::vector<std::vector<double>>& x) {
    const int n = static_cast<int>(x.size());
    std::vector<double> d;
    d.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < x[static_cast<std::size_t>(i)].size(); ++k) {
                const double v = x[static_cast<std::size_t>(i)][k] - x[static_cast<std::size_t>(j)][k];
                s += v * v;
            }
            d.push_back(std::sqrt(s));
        }
    return d;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const int n = static_cast<int>(a.size());
    double ma = 0, mb = 0;
    for (int i = 0; i < n; ++i) {
        ma += a[static_cast<std::size_t>(i)];
        mb += b[static_cast<std::size_t>(i)];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (int i = 0; i < n; ++i) {
        const double da = a[static_cast<std::size_t>(i)] - ma;
        const double db = b[static_cast<std::size_t>(i)] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    require(saa > 0.0 && sbb > 0.0, "rsa: degenerate (constant) distance matrix");
    return sab / std::sqrt(saa * sbb);
}

} // namespace

double rsa(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& y) {
    require(x.size() == y.size(), "rsa: sample count mismatch");
    require(x.size() >= 3, "rsa: need at least 3 samples");
    return pearson(upper_distances(x), upper_distances(y));
}

CkaReport cka_matrix(Model& model, const Corpus& corpus, const std::vector<int>& item_indices) {
    require(!item_indices.empty(), "cka_matrix: no items");
    const int n = static_cast<int>(item_indices.size());
    const int la = model.config().audio.layers;
    const int lm = model.config().midi.layers;

    // activations[layer][sample] = pooled tap
    std::vector<std::vector<std::vector<double>>> a_act(static_cast<std::size_t>(la)),
        m_act(static_cast<std::size_t>(lm));
    for (auto& v : a_act) v.resize(static_cast<std::size_t>(n));
    for (auto& v : m_act) v.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto& item = corpus.items[static_cast<std::size_t>(item_indices[static_cast<std::size_t>(i)])];
        auto descs = model.compute_descriptors(item);
        auto at = model.audio_layer_taps_eval(item.audio, descs.audio ? &*descs.audio : nullptr);
        auto mt = model.midi_layer_taps_eval(item.midi, descs.midi ? &*descs.midi : nullptr);
        require(static_cast<int>(at.size()) == la && static_cast<int>(mt.size()) == lm,
                "cka_matrix: tap count mismatch");
        for (int l = 0; l < la; ++l) a_act[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)] = at[static_cast<std::size_t>(l)];
        for (int l = 0; l < lm; ++l) m_act[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)] = mt[static_cast<std::size_t>(l)];
    }

    CkaReport rep;
    rep.audio_layers = la;
    rep.midi_layers = lm;
    rep.matrix.resize(static_cast<std::size_t>(la) * lm);
    rep.rsa_matrix.resize(static_cast<std::size_t>(la) * lm);
    double csum = 0, rsum = 0;
    for (int i = 0; i < la; ++i)
        for (int j = 0; j < lm; ++j) {
            const double c = cka(a_act[static_cast<std::size_t>(i)], m_act[static_cast<std::size_t>(j)]);
            const double r = rsa(a_act[static_cast<std::size_t>(i)], m_act[static_cast<std::size_t>(j)]);
            rep.matrix[static_cast<std::size_t>(i) * lm + j] = c;
            rep.rsa_matrix[static_cast<std::size_t>(i) * lm + j] = r;
            csum += c;
            rsum += r;
        }
    rep.cka_mean = csum / (la * lm);
    rep.rsa_mean = rsum / (la * lm);
    return rep;
}

// ---- band sensitivity -------------------------------------------------------------

BandSensitivity band_sensitivity(Model& model, const Corpus& corpus,
                                 const std::vector<int>& item_indices, double eps) {
    const auto& inj = model.config().audio_inject;
    if (inj.mech == Mechanism::None || *inj.desc != DescriptorKind::A4)
        throw std::invalid_argument("band_sensitivity: arm " + model.config().name +
                                    " has no A4 audio path");
    require(!item_indices.empty(), "band_sensitivity: no items");

    BandSensitivity out;
    out.eps = eps;
    out.delta_pos.assign(8, 0.0);
    out.delta_neg.assign(8, 0.0);
    out.max_abs_r.assign(8, 0.0);

    const int n = static_cast<int>(item_indices.size());
    std::vector<DescriptorTensor> descs(static_cast<std::size_t>(n));
    std::vector<std::vector<double>> base(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto& item = corpus.items[static_cast<std::size_t>(item_indices[static_cast<std::size_t>(i)])];
        descs[static_cast<std::size_t>(i)] = a4_descriptor(item.audio, model.spectral());
        base[static_cast<std::size_t>(i)] =
            model.embed_audio_eval(item.audio, &descs[static_cast<std::size_t>(i)]);
    }

    for (int b = 0; b < 8; ++b) {
        for (int sign = 0; sign < 2; ++sign) {
            const double e = sign == 0 ? eps : -eps;
            double acc = 0;
            for (int i = 0; i < n; ++i) {
                const auto& item =
                    corpus.items[static_cast<std::size_t>(item_indices[static_cast<std::size_t>(i)])];
                DescriptorTensor d = descs[static_cast<std::size_t>(i)];
                for (int f = 0; f < d.frames; ++f) d.at(f, b) += e;
                auto z = model.embed_audio_eval(item.audio, &d);
                double s = 0;
                for (std::size_t k = 0; k < z.size(); ++k) {
                    const double v = z[k] - base[static_cast<std::size_t>(i)][k];
                    s += v * v;
                }
                acc += std::sqrt(s);
            }
            (sign == 0 ? out.delta_pos : out.delta_neg)[static_cast<std::size_t>(b)] = acc / n;
        }

        // linear readout check: band mean value vs each embedding dimension
        std::vector<double> band_mean(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const auto& d = descs[static_cast<std::size_t>(i)];
            double m = 0;
            for (int f = 0; f < d.frames; ++f) m += d.at(f, b);
            band_mean[static_cast<std::size_t>(i)] = m / d.frames;
        }
        const int dim = static_cast<int>(base[0].size());
        double best = 0;
        for (int k = 0; k < dim; ++k) {
            std::vector<double> zk(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) zk[static_cast<std::size_t>(i)] = base[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
            double ma = 0, mb = 0;
            for (int i = 0; i < n; ++i) {
                ma += band_mean[static_cast<std::size_t>(i)];
                mb += zk[static_cast<std::size_t>(i)];
            }
            ma /= n;
            mb /= n;
            double sab = 0, saa = 0, sbb = 0;
            for (int i = 0; i < n; ++i) {
                const double da = band_mean[static_cast<std::size_t>(i)] - ma;
                const double db = zk[static_cast<std::size_t>(i)] - mb;
                sab += da * db;
                saa += da * da;
                sbb += db * db;
            }
            if (saa > 0 && sbb > 0) best = std::max(best, std::fabs(sab / std::sqrt(saa * sbb)));
        }
        out.max_abs_r[static_cast<std::size_t>(b)] = best;
    }
    return out;
}

// ---- linear probes -------------------------------------------------------------------

namespace {

// SPD solve via Cholesky; a is n x n row-major, b is n x m.
std::vector<double> cholesky_solve(std::vector<double> a, std::vector<double> b, int n, int m) {
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a[static_cast<std::size_t>(i) * n + j];
            for (int k = 0; k < j; ++k)
                s -= a[static_cast<std::size_t>(i) * n + k] * a[static_cast<std::size_t>(j) * n + k];
            if (i == j) {
                require(s > 0.0, "cholesky: matrix not positive definite");
                a[static_cast<std::size_t>(i) * n + j] = std::sqrt(s);
            } else {
                a[static_cast<std::size_t>(i) * n + j] = s / a[static_cast<std::size_t>(j) * n + j];
            }
        }
    }
    // forward then backward substitution, column by column of b
    for (int c = 0; c < m; ++c) {
        for (int i = 0; i < n; ++i) {
            double s = b[static_cast<std::size_t>(i) * m + c];
            for (int k = 0; k < i; ++k)
                s -= a[static_cast<std::size_t>(i) * n + k] * b[static_cast<std::size_t>(k) * m + c];
            b[static_cast<std::size_t>(i) * m + c] = s / a[static_cast<std::size_t>(i) * n + i];
        }
        for (int i = n - 1; i >= 0; --i) {
            double s = b[static_cast<std::size_t>(i) * m + c];
            for (int k = i + 1; k < n; ++k)
                s -= a[static_cast<std::size_t>(k) * n + i] * b[static_cast<std::size_t>(k) * m + c];
            b[static_cast<std::size_t>(i) * m + c] = s / a[static_cast<std::size_t>(i) * n + i];
        }
    }
    return b;
}

} // namespace

ProbeResult linear_probe(const std::vector<std::vector<double>>& embeddings,
                         const std::vector<std::vector<double>>& targets, double lambda) {
    require(lambda > 0.0, "linear_probe: ridge lambda must be positive");
    require(embeddings.size() == targets.size(), "linear_probe: sample count mismatch");
    const int n = static_cast<int>(embeddings.size());
    require(n >= 5, "linear_probe: too few samples");
    const int d = static_cast<int>(embeddings[0].size());
    const int t = static_cast<int>(targets[0].size());
    const int n_train = (n * 4) / 5;
    const int n_test = n - n_train;
    require(n_train > d, "linear_probe: need more train samples than embedding dims");

    // means on the train split
    std::vector<double> mx(static_cast<std::size_t>(d), 0.0), my(static_cast<std::size_t>(t), 0.0);
    for (int i = 0; i < n_train; ++i)
        for (int j = 0; j < d; ++j) mx[static_cast<std::size_t>(j)] += embeddings[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    for (auto& v : mx) v /= n_train;
    for (int i = 0; i < n_train; ++i)
        for (int j = 0; j < t; ++j) my[static_cast<std::size_t>(j)] += targets[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    for (auto& v : my) v /= n_train;

    ProbeResult res;
    std::vector<char> keep(static_cast<std::size_t>(t), 1);
    for (int j = 0; j < t; ++j) {
        double var = 0;
        for (int i = 0; i < n_train; ++i) {
            const double v = targets[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] - my[static_cast<std::size_t>(j)];
            var += v * v;
        }
        if (var <= 0.0) {
            keep[static_cast<std::size_t>(j)] = 0;
            res.excluded_dims.push_back(j);
        }
    }

    // XtX + lambda I and XtY over centered train data
    std::vector<double> xtx(static_cast<std::size_t>(d) * d, 0.0),
        xty(static_cast<std::size_t>(d) * t, 0.0);
    for (int i = 0; i < n_train; ++i) {
        for (int a = 0; a < d; ++a) {
            const double xa = embeddings[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] - mx[static_cast<std::size_t>(a)];
            for (int b2 = 0; b2 < d; ++b2)
                xtx[static_cast<std::size_t>(a) * d + b2] +=
                    xa * (embeddings[static_cast<std::size_t>(i)][static_cast<std::size_t>(b2)] - mx[static_cast<std::size_t>(b2)]);
            for (int j = 0; j < t; ++j)
                xty[static_cast<std::size_t>(a) * t + j] +=
                    xa * (targets[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] - my[static_cast<std::size_t>(j)]);
        }
    }
    for (int a = 0; a < d; ++a) xtx[static_cast<std::size_t>(a) * d + a] += lambda;
    auto w = cholesky_solve(std::move(xtx), std::move(xty), d, t); // [d, t]

    // held-out R^2 per kept dim
    double r2_sum = 0;
    int r2_count = 0;
    for (int j = 0; j < t; ++j) {
        if (!keep[static_cast<std::size_t>(j)]) continue;
        double y_mean = 0;
        for (int i = n_train; i < n; ++i) y_mean += targets[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        y_mean /= n_test;
        double sse = 0, sst = 0;
        for (int i = n_train; i < n; ++i) {
            double pred = my[static_cast<std::size_t>(j)];
            for (int a = 0; a < d; ++a)
                pred += (embeddings[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] - mx[static_cast<std::size_t>(a)]) *
                        w[static_cast<std::size_t>(a) * t + j];
            const double y = targets[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            sse += (y - pred) * (y - pred);
            sst += (y - y_mean) * (y - y_mean);
        }
        if (sst <= 0.0) continue; // degenerate on the test slice as well
        r2_sum += 1.0 - sse / sst;
        r2_count++;
    }
    require(r2_count > 0, "linear_probe: all target dims degenerate");
    res.r2 = r2_sum / r2_count;
    return res;
}

std::string probe_target_name(ProbeTarget t) {
    switch (t) {
        case ProbeTarget::PitchHistogram: return "pitch_histogram";
        case ProbeTarget::IntervalHistogram: return "interval_histogram";
        case ProbeTarget::Chroma: return "chroma";
        case ProbeTarget::Centroid: return "centroid";
    }
    return "?";
}

int probe_target_dims(ProbeTarget t) {
    switch (t) {
        case ProbeTarget::PitchHistogram: return 128;
        case ProbeTarget::IntervalHistogram: return 25;
        case ProbeTarget::Chroma: return 12;
        case ProbeTarget::Centroid: return 1;
    }
    return 0;
}

std::vector<double> probe_target_values(const CorpusItem& item, ProbeTarget target,
                                        const SpectralConfig& spectral) {
    switch (target) {
        case ProbeTarget::PitchHistogram: {
            std::vector<double> h(128, 0.0);
            int count = 0;
            for (int i = 0; i < item.midi.size(); ++i)
                if (item.midi.is_valid(i)) {
                    h[static_cast<std::size_t>(item.midi.events[static_cast<std::size_t>(i)].pitch)] += 1.0;
                    count++;
                }
            if (count > 0)
                for (auto& v : h) v /= count;
            return h;
        }
        case ProbeTarget::IntervalHistogram: {
            std::vector<double> h(25, 0.0);
            std::vector<int> p;
            for (int i = 0; i < item.midi.size(); ++i)
                if (item.midi.is_valid(i)) p.push_back(item.midi.events[static_cast<std::size_t>(i)].pitch);
            int count = 0;
            for (std::size_t i = 1; i < p.size(); ++i) {
                const int iv = std::clamp(p[i] - p[i - 1], -12, 12);
                h[static_cast<std::size_t>(iv + 12)] += 1.0;
                count++;
            }
            if (count > 0)
                for (auto& v : h) v /= count;
            return h;
        }
        case ProbeTarget::Chroma: {
            int frames = 0;
            auto c = chroma(item.audio, spectral, frames);
            std::vector<double> mean(12, 0.0);
            for (int f = 0; f < frames; ++f)
                for (int k = 0; k < 12; ++k) mean[static_cast<std::size_t>(k)] += c[static_cast<std::size_t>(f) * 12 + k];
            for (auto& v : mean) v /= std::max(1, frames);
            return mean;
        }
        case ProbeTarget::Centroid: {
            double m = 0;
            int count = 0;
            for (int i = 0; i < item.midi.size(); ++i)
                if (item.midi.is_valid(i)) {
                    m += item.midi.events[static_cast<std::size_t>(i)].pitch;
                    count++;
                }
            return {count > 0 ? m / (127.0 * count) : 0.0};
        }
    }
    return {};
}

ProbeResult run_probe(Model& model, const Corpus& corpus, const std::vector<int>& item_indices,
                      ProbeSource source, ProbeTarget target, double lambda) {
    std::vector<std::vector<double>> emb, tgt;
    for (int idx : item_indices) {
        const auto& item = corpus.items[static_cast<std::size_t>(idx)];
        auto descs = model.compute_descriptors(item);
        if (source == ProbeSource::AudioEmbedding)
            emb.push_back(model.embed_audio_eval(item.audio, descs.audio ? &*descs.audio : nullptr));
        else
            emb.push_back(model.embed_midi_eval(item.midi, descs.midi ? &*descs.midi : nullptr));
        tgt.push_back(probe_target_values(item, target, model.spectral()));
    }
    return linear_probe(emb, tgt, lambda);
}

// ---- invariance suite -------------------------------------------------------------------

std::vector<InvarianceRow> invariance_suite(Model& model, const Corpus& corpus,
                                            const PoolStructure& pool, std::uint64_t seed) {
    std::vector<InvarianceRow> rows;
    const double s_clean = scoreboard(model, corpus, pool).s;
    rows.push_back({"clean", "-", s_clean});

    auto eval_with = [&](const ItemTransform& tf) {
        return scoreboard_metrics(embed_pool(model, corpus, pool, tf)).s;
    };

    // temporal shift: +-8.3% of the segment, worst case of the two directions
    {
        const int shift = static_cast<int>(0.083 * model.segment_samples());
        double worst = 1.0;
        for (int dir : {+1, -1}) {
            const int d = dir * shift;
            worst = std::min(worst, eval_with([d](const CorpusItem& item, int) {
                return temporal_shift(item, d);
            }));
        }
        rows.push_back({"temporal_shift", "+-" + std::to_string(shift) + "samp", worst});
    }

    for (double factor : {0.5, 0.8, 1.2, 1.5}) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%.1fx", factor);
        rows.push_back({"velocity_scale", buf, eval_with([factor](const CorpusItem& item, int) {
                            CorpusItem out = item;
                            out.midi = scale_velocity(item.midi, factor);
                            return out;
                        })});
    }

    for (int st : {-12, +12}) {
        rows.push_back({"octave_transpose", (st > 0 ? "+" : "") + std::to_string(st) + "st",
                        eval_with([st](const CorpusItem& item, int) {
                            CorpusItem out = item;
                            out.midi = transpose(item.midi, st);
                            return out;
                        })});
    }

    for (double snr : {40.0, 30.0, 20.0, 10.0, 5.0}) {
        const auto level_seed = sub_seed(seed, "noise", static_cast<std::uint64_t>(snr));
        rows.push_back(
            {"audio_noise", std::to_string(static_cast<int>(snr)) + "dB",
             eval_with([snr, level_seed](const CorpusItem& item, int pool_idx) {
                 CorpusItem out = item;
                 out.audio = add_noise_snr(item.audio, snr,
                                           sub_seed(level_seed, "item",
                                                    static_cast<std::uint64_t>(pool_idx)));
                 return out;
             })});
    }
    return rows;
}

// ---- cosine alignment / export -------------------------------------------------------------

CosineAlignment cosine_alignment(Model& model, const Corpus& corpus,
                                 const std::vector<int>& item_indices) {
    require(item_indices.size() >= 2, "cosine_alignment: need at least 2 pairs");
    CosineAlignment out;
    out.histogram.assign(50, 0);
    std::vector<double> cosines;
    for (int idx : item_indices) {
        const auto& item = corpus.items[static_cast<std::size_t>(idx)];
        auto descs = model.compute_descriptors(item);
        auto za = model.embed_audio_eval(item.audio, descs.audio ? &*descs.audio : nullptr);
        auto zm = model.embed_midi_eval(item.midi, descs.midi ? &*descs.midi : nullptr);
        cosines.push_back(cosine(za, zm));
    }
    double mean = 0;
    for (double c : cosines) mean += c;
    mean /= static_cast<double>(cosines.size());
    double var = 0;
    for (double c : cosines) var += (c - mean) * (c - mean);
    out.mean = mean;
    out.std = cosines.size() > 1 ? std::sqrt(var / static_cast<double>(cosines.size() - 1)) : 0.0;
    for (double c : cosines) {
        int bin = static_cast<int>(std::floor((c + 1.0) * 25.0));
        bin = std::clamp(bin, 0, 49);
        out.histogram[static_cast<std::size_t>(bin)]++;
    }
    return out;
}

void export_embeddings(Model& model, const Corpus& corpus, int n, const std::string& path) {
    require(n >= 0 && n <= static_cast<int>(corpus.items.size()),
            "export_embeddings: n out of range");
    std::ofstream os(path);
    if (!os) throw std::runtime_error("export_embeddings: cannot open " + path);
    const int d = model.config().embed_dim;
    os << "modality,piece_id,segment_index";
    for (int k = 0; k < d; ++k) os << ",e" << k;
    os << "\n";
    char buf[64];
    for (int i = 0; i < n; ++i) {
        const auto& item = corpus.items[static_cast<std::size_t>(i)];
        auto descs = model.compute_descriptors(item);
        auto za = model.embed_audio_eval(item.audio, descs.audio ? &*descs.audio : nullptr);
        auto zm = model.embed_midi_eval(item.midi, descs.midi ? &*descs.midi : nullptr);
        for (int side = 0; side < 2; ++side) {
            const auto& z = side == 0 ? za : zm;
            os << (side == 0 ? "audio" : "midi") << ',' << item.piece_id << ','
               << item.segment_index;
            for (double v : z) {
                std::snprintf(buf, sizeof(buf), "%.17g", v);
                os << ',' << buf;
            }
            os << "\n";
        }
    }
}

// ---- effect sizes ----------------------------------------------------------------------

namespace {

double gammaln(double x) {
    static const double cof[6] = {76.18009172947146,  -86.50532032941677, 24.01409824083091,
                                  -1.231739572450155, 0.1208650973866179e-2, -0.5395239384953e-5};
    double y = x, tmp = x + 5.5;
    tmp -= (x + 0.5) * std::log(tmp);
    double ser = 1.000000000190015;
    for (int j = 0; j < 6; ++j) ser += cof[j] / ++y;
    return -tmp + std::log(2.5066282746310005 * ser / x);
}

double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 200;
    constexpr double kEps = 3e-12, kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

double betai(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double bt =
        std::exp(gammaln(a + b) - gammaln(a) - gammaln(b) + a * std::log(x) + b * std::log(1.0 - x));
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

} // namespace

double student_t_two_sided_p(double t, double dof) {
    require(dof > 0, "student_t: dof must be positive");
    return betai(0.5 * dof, 0.5, dof / (dof + t * t));
}

EffectSize effect_size(double mean_a, double sd_a, int n_a, double mean_b, double sd_b, int n_b) {
    require(sd_a > 0 && sd_b > 0, "effect_size: standard deviations must be positive");
    require(n_a >= 2 && n_b >= 2, "effect_size: need n >= 2 per group");
    EffectSize out;
    const double pooled = std::sqrt((sd_a * sd_a + sd_b * sd_b) / 2.0);
    out.cohen_d = (mean_a - mean_b) / pooled;
    const double va = sd_a * sd_a / n_a, vb = sd_b * sd_b / n_b;
    out.welch_t = (mean_a - mean_b) / std::sqrt(va + vb);
    out.dof = (va + vb) * (va + vb) /
              (va * va / (n_a - 1) + vb * vb / (n_b - 1));
    out.p = student_t_two_sided_p(out.welch_t, out.dof);
    return out;
}

} // namespace xmodal
