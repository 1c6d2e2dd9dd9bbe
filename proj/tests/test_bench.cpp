#include <cmath>

#include "doctest.h"
#include "vqt/bench.hpp"

TEST_SUITE("bench") {

TEST_CASE("temporal flop counts and exact ratios") {
    const auto plan96 = vqt::plan_pathways(96);
    const auto dense = vqt::flops_temporal(vqt::CostVariant::dense, 96, 196, 768);
    const auto mptn = vqt::flops_temporal(vqt::CostVariant::mptn, 96, 196, 768, &plan96);
    // ratio is exactly 49/96 in integer arithmetic
    CHECK(mptn * 96 == dense * 49);

    const auto plan8 = vqt::plan_pathways(8);
    const auto dense8 = vqt::flops_temporal(vqt::CostVariant::dense, 8, 16, 32);
    const auto sta8 = vqt::flops_temporal(vqt::CostVariant::sta, 8, 16, 32, &plan8);
    CHECK(sta8 * 8 == dense8 * 3);  // single pathway budget 3 of 8

    // full-budget single pathway has ratio exactly 1
    vqt::PathwayPlan full;
    full.clip_len = 8;
    full.budgets = {8};
    CHECK(vqt::flops_temporal(vqt::CostVariant::mptn, 8, 16, 32, &full) == dense8);

    CHECK_THROWS_AS((void)vqt::flops_temporal(vqt::CostVariant::mptn, 8, 16, 32), vqt::ContractError);
}

TEST_CASE("jl error bound closed forms and monotonicity") {
    CHECK(vqt::jl_error_bound(96, 768) == doctest::Approx(std::sqrt(8.0 * std::log(96.0) / 768.0)));
    CHECK(vqt::jl_error_bound(96, 768) == doctest::Approx(0.2181).epsilon(1e-3));
    // d = 32 ln T makes the bound exactly 1/2
    for (double t : {8.0, 96.0, 300.0})
        CHECK(vqt::jl_error_bound(t, 32.0 * std::log(t)) == doctest::Approx(0.5));
    // T = e with d = 8 gives exactly 1
    CHECK(vqt::jl_error_bound(std::exp(1.0), 8.0) == doctest::Approx(1.0));

    double prev = 0;
    for (double t : {4.0, 16.0, 64.0, 256.0}) {
        const double eps = vqt::jl_error_bound(t, 128.0);
        CHECK(eps > prev);
        prev = eps;
    }
    CHECK(vqt::jl_error_bound(96, 1536) < vqt::jl_error_bound(96, 768));
    CHECK_THROWS_AS((void)vqt::jl_error_bound(1.5, 8.0), vqt::ContractError);
}

TEST_CASE("scaling study contracts and smoke run") {
    CHECK_THROWS_AS((void)vqt::scaling_study<float>({8}, 2, 1), vqt::ContractError);
    CHECK_THROWS_AS((void)vqt::scaling_study<float>({8, 16}, 2, 1), vqt::ContractError);

    const auto result = vqt::scaling_study<float>({8, 16, 32}, 3, 7);
    CHECK(result.reports.size() == 6);
    for (const auto& r : result.reports) {
        CHECK(r.wall_nanos > 0);
        CHECK(r.flops > 0);
    }
    CHECK(result.dense_slope > 0.5);
    CHECK(std::isfinite(result.mptn_slope));
}

}  // TEST_SUITE
