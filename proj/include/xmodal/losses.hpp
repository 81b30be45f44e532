#pragma once

#include "xmodal/tensor.hpp"

namespace xmodal {

struct VicregWeights {
    double lambda_inv = 10.0;
    double lambda_var = 10.0;
    double lambda_cov = 1.0;
};

/// Weighted loss with the graph nodes of each component kept alive so
/// callers can differentiate any of them.
struct LossBreakdown {
    TensorPtr total;
    TensorPtr invariance;
    TensorPtr variance;
    TensorPtr covariance;
    TensorPtr auxiliary; // null unless a caller attached extra terms

    double total_value() const { return total->item(); }
    double invariance_value() const { return invariance->item(); }
    double variance_value() const { return variance->item(); }
    double covariance_value() const { return covariance->item(); }
    double auxiliary_value() const { return auxiliary ? auxiliary->item() : 0.0; }
};

/// VICReg over a batch of matched pairs, both [B, D] with B >= 2:
/// invariance = MSE over matched rows; variance = hinge on the per-dimension
/// std (unbiased, eps 1e-4 inside the sqrt), averaged over the two branches;
/// covariance = sum of squared off-diagonal 1/(B-1) covariance entries / D,
/// summed over branches.
LossBreakdown vicreg(const TensorPtr& z_a, const TensorPtr& z_m, const VicregWeights& w = {});

/// VICReg(z_a, z_m) + alpha VICReg(z_a, z_d) + beta VICReg(z_m, z_d).
/// With include_main = false only the two descriptor terms remain (the
/// anchor wiring).
LossBreakdown third_tower_loss(const TensorPtr& z_a, const TensorPtr& z_m, const TensorPtr& z_d,
                               double alpha, double beta, const VicregWeights& w = {},
                               bool include_main = true);

/// Attach an auxiliary term (already scaled) to a breakdown's total.
LossBreakdown with_auxiliary(LossBreakdown base, const TensorPtr& aux);

} // namespace xmodal
