#include "xmodal/losses.hpp"

#include <stdexcept>

namespace xmodal {

namespace {

constexpr double kVarEps = 1e-4;

struct BranchTerms {
    TensorPtr var_hinge; // scalar
    TensorPtr cov_offdiag;
};

BranchTerms branch_terms(const TensorPtr& z) {
    const int b = z->shape[0];
    const int d = z->shape[1];
    auto centered = sub_row_broadcast(z, mean_axis0(z));
    auto var = scale(sum_axis0(square(centered)), 1.0 / (b - 1));
    auto std_dev = sqrt_eps(var, kVarEps);
    auto hinge = mean_all(relu(add_scalar(scale(std_dev, -1.0), 1.0)));
    auto cov = scale(matmul(transpose(centered), centered), 1.0 / (b - 1));
    auto cov_term = scale(sum_sq_offdiag(cov), 1.0 / d);
    return {hinge, cov_term};
}

} // namespace

LossBreakdown vicreg(const TensorPtr& z_a, const TensorPtr& z_m, const VicregWeights& w) {
    if (z_a->shape.size() != 2 || z_a->shape != z_m->shape)
        throw std::invalid_argument("vicreg: embeddings must share a [B, D] shape, got " +
                                    shape_str(z_a->shape) + " vs " + shape_str(z_m->shape));
    if (z_a->shape[0] < 2)
        throw std::invalid_argument("vicreg: batch size " + std::to_string(z_a->shape[0]) +
                                    " too small, variance/covariance need B >= 2");

    LossBreakdown out;
    out.invariance = mean_all(square(sub(z_a, z_m)));
    auto ta = branch_terms(z_a);
    auto tm = branch_terms(z_m);
    out.variance = scale(add(ta.var_hinge, tm.var_hinge), 0.5);
    out.covariance = add(ta.cov_offdiag, tm.cov_offdiag);
    out.total = add(add(scale(out.invariance, w.lambda_inv), scale(out.variance, w.lambda_var)),
                    scale(out.covariance, w.lambda_cov));
    return out;
}

LossBreakdown third_tower_loss(const TensorPtr& z_a, const TensorPtr& z_m, const TensorPtr& z_d,
                               double alpha, double beta, const VicregWeights& w,
                               bool include_main) {
    auto l_ad = vicreg(z_a, z_d, w);
    auto l_md = vicreg(z_m, z_d, w);

    LossBreakdown out;
    auto mix = [&](const TensorPtr& main, const TensorPtr& ad, const TensorPtr& md) {
        auto aux_sum = add(scale(ad, alpha), scale(md, beta));
        return main ? add(main, aux_sum) : aux_sum;
    };
    if (include_main) {
        auto l_am = vicreg(z_a, z_m, w);
        out.invariance = mix(l_am.invariance, l_ad.invariance, l_md.invariance);
        out.variance = mix(l_am.variance, l_ad.variance, l_md.variance);
        out.covariance = mix(l_am.covariance, l_ad.covariance, l_md.covariance);
        out.total = mix(l_am.total, l_ad.total, l_md.total);
    } else {
        out.invariance = mix(nullptr, l_ad.invariance, l_md.invariance);
        out.variance = mix(nullptr, l_ad.variance, l_md.variance);
        out.covariance = mix(nullptr, l_ad.covariance, l_md.covariance);
        out.total = mix(nullptr, l_ad.total, l_md.total);
    }
    return out;
}

LossBreakdown with_auxiliary(LossBreakdown base, const TensorPtr& aux) {
    if (!aux) return base;
    base.auxiliary = aux;
    base.total = add(base.total, aux);
    return base;
}

} // namespace xmodal
