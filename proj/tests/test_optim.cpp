#include <doctest.h>

#include <cmath>

#include "xmodal/optim.hpp"

using namespace xmodal;

TEST_CASE("adamw: zero gradient and zero decay leave params unchanged") {
    AdamWState st;
    st.weight_decay = 0.0;
    auto p = make_tensor({1.5, -0.3}, {2}, true);
    p->zero_grad();
    auto res = adamw_step(st, {p}, 1.0);
    CHECK(res.applied);
    CHECK(p->data[0] == doctest::Approx(1.5));
    CHECK(p->data[1] == doctest::Approx(-0.3));
}

TEST_CASE("adamw: first step moves by about lr, by bias correction") {
    AdamWState st;
    st.base_lr = 0.1;
    st.weight_decay = 0.0;
    auto p = make_tensor({1.0}, {1}, true);
    p->ensure_grad();
    p->grad[0] = 1.0;
    adamw_step(st, {p}, 1.0);
    CHECK(p->data[0] == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("adamw: pure decoupled decay branch") {
    AdamWState st;
    st.base_lr = 0.1;
    st.weight_decay = 0.01;
    auto p = make_tensor({1.0}, {1}, true);
    p->zero_grad();
    adamw_step(st, {p}, 1.0);
    CHECK(p->data[0] == doctest::Approx(0.999));
}

TEST_CASE("adamw: non-finite gradient aborts the step") {
    AdamWState st;
    auto p = make_tensor({1.0}, {1}, true);
    p->ensure_grad();
    p->grad[0] = std::nan("");
    auto res = adamw_step(st, {p}, 1.0);
    CHECK_FALSE(res.applied);
    CHECK(p->data[0] == 1.0);
    CHECK(st.step == 0);
}

TEST_CASE("lr_at: linear warmup hits 0.5 at half warmup") {
    LrSchedule s;
    s.kind = ScheduleKind::Cosine;
    s.warmup_steps = 500;
    s.ref_epochs = 30;
    CHECK(lr_at(s, 250, 100, 60) == doctest::Approx(0.5));
}

TEST_CASE("lr_at: cosine_tail sits exactly on the floor between ref period and final epoch") {
    LrSchedule s;
    s.kind = ScheduleKind::CosineTail;
    s.warmup_steps = 10;
    s.ref_epochs = 30;
    s.floor_frac = 0.10;
    s.tail_frac = 0.02;
    const int spe = 100, epochs = 60;
    // far past the 30-epoch reference, well before the final epoch
    CHECK(lr_at(s, 40 * spe, spe, epochs) == doctest::Approx(0.10));
    // very last step of the last epoch
    CHECK(lr_at(s, static_cast<long long>(epochs) * spe - 1, spe, epochs) ==
          doctest::Approx(0.02));
}

TEST_CASE("lr_at: trapezoidal warms up, holds at 1, then decays linearly") {
    LrSchedule s;
    s.kind = ScheduleKind::Trapezoidal;
    s.warmup_steps = 50;
    s.hold_frac = 0.5;
    s.tail_frac = 0.02;
    const int spe = 100, epochs = 10;
    CHECK(lr_at(s, 25, spe, epochs) == doctest::Approx(0.5));
    CHECK(lr_at(s, 300, spe, epochs) == doctest::Approx(1.0));
    CHECK(lr_at(s, 999, spe, epochs) == doctest::Approx(0.02));
    const double mid = lr_at(s, 750, spe, epochs);
    CHECK(mid < 1.0);
    CHECK(mid > 0.02);
}

TEST_CASE("lr_at: bounded by [tail_frac, 1] and piecewise continuous") {
    for (auto kind : {ScheduleKind::Cosine, ScheduleKind::CosineTail, ScheduleKind::Trapezoidal}) {
        LrSchedule s;
        s.kind = kind;
        s.warmup_steps = 37;
        s.ref_epochs = 5;
        s.floor_frac = 0.1;
        s.tail_frac = 0.02;
        const int spe = 50, epochs = 8;
        double prev = -1;
        for (long long step = 0; step < static_cast<long long>(spe) * epochs; ++step) {
            const double m = lr_at(s, step, spe, epochs);
            CHECK(m <= 1.0);
            CHECK(m >= s.tail_frac);
            if (prev >= 0) CHECK(std::fabs(m - prev) < 0.06); // no jumps
            prev = m;
        }
    }
}
