#include "xmodal/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace xmodal {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

AdamWStepResult adamw_step(AdamWState& state, const std::vector<TensorPtr>& params,
                           double lr_multiplier) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i]->size(), 0.0);
            state.v[i].assign(params[i]->size(), 0.0);
        }
    }
    if (state.m.size() != params.size())
        throw std::invalid_argument("adamw_step: parameter count changed since first step");

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (p->grad.size() != p->data.size())
            throw std::invalid_argument("adamw_step: missing gradient for parameter " +
                                        std::to_string(i));
        if (state.m[i].size() != p->size())
            throw std::invalid_argument("adamw_step: moment shape mismatch for parameter " +
                                        std::to_string(i));
        for (double g : p->grad)
            if (!std::isfinite(g)) return {false, "non-finite gradient in parameter " +
                                                      std::to_string(i)};
    }

    state.step++;
    const double lr = state.base_lr * lr_multiplier;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < p->data.size(); ++j) {
            const double g = p->grad[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p->data[j] -= lr * state.weight_decay * p->data[j];
            p->data[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
    return {};
}

ScheduleKind schedule_kind_from(const std::string& s) {
    if (s == "cosine") return ScheduleKind::Cosine;
    if (s == "cosine_tail") return ScheduleKind::CosineTail;
    if (s == "trapezoidal") return ScheduleKind::Trapezoidal;
    throw std::invalid_argument("unknown schedule kind: " + s);
}

std::string schedule_kind_name(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::Cosine: return "cosine";
        case ScheduleKind::CosineTail: return "cosine_tail";
        case ScheduleKind::Trapezoidal: return "trapezoidal";
    }
    return "?";
}

double lr_at(const LrSchedule& s, long long step, int steps_per_epoch, int total_epochs) {
    if (step < 0) throw std::invalid_argument("lr_at: negative step");
    const double lo = std::max(s.tail_frac, 1e-8);
    if (s.warmup_steps > 0 && step < s.warmup_steps) {
        const double w = static_cast<double>(step) / s.warmup_steps;
        return std::clamp(w, lo, 1.0);
    }
    const long long total_steps =
        static_cast<long long>(steps_per_epoch) * std::max(total_epochs, 1);

    double mult = 1.0;
    switch (s.kind) {
        case ScheduleKind::Cosine:
        case ScheduleKind::CosineTail: {
            const long long ref_steps =
                static_cast<long long>(steps_per_epoch) * std::max(s.ref_epochs, 1);
            double progress = 1.0;
            if (ref_steps > s.warmup_steps)
                progress = static_cast<double>(step - s.warmup_steps) /
                           static_cast<double>(ref_steps - s.warmup_steps);
            progress = std::clamp(progress, 0.0, 1.0);
            mult = 0.5 * (1.0 + std::cos(kPi * progress));
            if (s.kind == ScheduleKind::CosineTail) {
                mult = std::max(mult, s.floor_frac);
                const long long final_start = total_steps - steps_per_epoch;
                if (step >= final_start && total_epochs > 0) {
                    // linear ramp from the floor down to tail_frac at the last step
                    const double t =
                        steps_per_epoch > 1
                            ? static_cast<double>(step - final_start) / (steps_per_epoch - 1)
                            : 1.0;
                    mult = s.floor_frac + (s.tail_frac - s.floor_frac) * std::clamp(t, 0.0, 1.0);
                }
            }
            break;
        }
        case ScheduleKind::Trapezoidal: {
            const long long hold_end =
                static_cast<long long>(std::llround(s.hold_frac * static_cast<double>(total_steps)));
            if (step < hold_end) {
                mult = 1.0;
            } else if (total_steps - 1 <= hold_end) {
                mult = s.tail_frac;
            } else {
                const double t = static_cast<double>(step - hold_end) /
                                 static_cast<double>(total_steps - 1 - hold_end);
                mult = 1.0 + (s.tail_frac - 1.0) * std::clamp(t, 0.0, 1.0);
            }
            break;
        }
    }
    return std::clamp(mult, lo, 1.0);
}

} // namespace xmodal
