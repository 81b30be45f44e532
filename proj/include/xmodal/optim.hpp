#pragma once

#include <string>
#include <vector>

#include "xmodal/tensor.hpp"

namespace xmodal {

/// Decoupled-weight-decay Adam. Moments are kept per parameter tensor in
/// registration order; decay is applied to the parameter directly, never
/// folded into the gradient.
struct AdamWState {
    long long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double base_lr = 3e-4;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

struct AdamWStepResult {
    bool applied = true;   // false when a non-finite gradient aborted the step
    std::string note;
};

/// One update over all params with lr = state.base_lr * lr_multiplier.
/// Any NaN/Inf gradient aborts the whole step and leaves params untouched.
AdamWStepResult adamw_step(AdamWState& state, const std::vector<TensorPtr>& params,
                           double lr_multiplier);

enum class ScheduleKind { Cosine, CosineTail, Trapezoidal };

struct LrSchedule {
    ScheduleKind kind = ScheduleKind::Cosine;
    int warmup_steps = 500;
    int ref_epochs = 30;      // cosine reference period
    double floor_frac = 0.10; // cosine_tail plateau
    double tail_frac = 0.02;  // end-of-run multiplier
    double hold_frac = 0.7;   // trapezoidal: fraction of total steps before decay begins
};

ScheduleKind schedule_kind_from(const std::string& s);
std::string schedule_kind_name(ScheduleKind k);

/// Multiplier in (0, 1]: linear warmup, then the kind-specific decay.
/// cosine_tail clamps at floor_frac after the reference period and decays
/// linearly to tail_frac across the final epoch.
double lr_at(const LrSchedule& s, long long step, int steps_per_epoch, int total_epochs);

} // namespace xmodal
