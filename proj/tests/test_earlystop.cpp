#include <doctest.h>

#include "oracles.hpp"
#include "pivot/earlystop.hpp"
#include "pivot/common.hpp"

#include <cmath>
#include <random>
#include <vector>

using namespace pivot;

namespace {

double logistic(double e) { return 0.9 / (1.0 + std::exp(-(e - 500.0) / 80.0)); }

std::vector<double> noisy_logistic(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.005);
    std::vector<double> m;
    for (int e = 1; e <= 1000; ++e) m.push_back(logistic(e) + noise(rng));
    return m;
}

double residual_of(const std::vector<double>& coef, const std::vector<double>& x, const std::vector<double>& y) {
    double r = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = oracle::polyval(coef, x[i]) - y[i];
        r += d * d;
    }
    return r;
}

} // namespace

TEST_CASE("constant series fits to its value") {
    const std::vector<double> m(200, 0.5);
    const auto fit = fit_poly(m, 10);
    REQUIRE(fit.coefficients.size() == 11);
    CHECK(std::abs(fit.coefficients[0] - 0.5) < 1e-8);
    for (std::size_t i = 1; i < fit.coefficients.size(); ++i) CHECK(std::abs(fit.coefficients[i]) < 1e-8);
    CHECK(optimal_epoch(fit, 1, 200) == 1);
}

TEST_CASE("degree 10 reproduces a cubic at every sample") {
    const auto cubic = [](double e) { return 0.1 + 2e-3 * e - 3e-6 * e * e + 1.5e-9 * e * e * e; };
    std::vector<double> m;
    for (int e = 1; e <= 1000; ++e) m.push_back(cubic(e));
    const auto fit = fit_poly(m, 10);
    for (int e = 1; e <= 1000; ++e) CHECK(std::abs(fit.value(e) - cubic(e)) < 1e-6);
}

TEST_CASE("degree 10 residual is no worse than the degree 3 oracle fit") {
    const auto m = noisy_logistic(3);
    std::vector<double> x;
    for (int e = 1; e <= 1000; ++e) x.push_back((e - 1.0) / 999.0);
    const auto c3 = oracle::polyfit_normal(x, m, 3);
    CHECK(fit_residual(fit_poly(m, 10), m) <= residual_of(c3, x, m));
    CHECK(fit_residual(fit_poly(m, 10), m) <= fit_residual(fit_poly(m, 3), m) + 1e-12);
}

TEST_CASE("too few points") {
    const std::vector<double> m(10, 0.1);
    CHECK_THROWS_AS(fit_poly(m, 10), ValidationError);
    CHECK_NOTHROW(fit_poly(std::vector<double>(11, 0.1), 10));
}

TEST_CASE("optimal epoch") {
    SUBCASE("square has its steepest slope at the end") {
        std::vector<double> m;
        for (int e = 1; e <= 300; ++e) {
            const double x = (e - 1.0) / 299.0;
            m.push_back(x * x);
        }
        CHECK(optimal_epoch(fit_poly(m, 10), 1, 300) == 300);
    }
    SUBCASE("noise-free logistic lands near the oracle inflection") {
        std::vector<double> m;
        for (int e = 1; e <= 1000; ++e) m.push_back(logistic(e));
        const double oracle_e = oracle::steepest_epoch(logistic, 1, 1000);
        CHECK(std::abs(oracle_e - 500.0) < 0.5);
        const int e = optimal_epoch(fit_poly(m, 10), 1, 1000);
        CHECK(e >= 450);
        CHECK(e <= 550);
    }
    SUBCASE("affine rescaling of the metric does not move it") {
        const auto m = noisy_logistic(11);
        std::vector<double> scaled;
        for (double v : m) scaled.push_back(3.0 * v - 0.7);
        CHECK(optimal_epoch(fit_poly(m, 10), 1, 1000) == optimal_epoch(fit_poly(scaled, 10), 1, 1000));
    }
}

TEST_CASE("saturation") {
    SUBCASE("strictly increasing never saturates") {
        std::vector<double> m;
        for (int e = 1; e <= 120; ++e) m.push_back(e * 1e-3);
        CHECK(saturation_epoch(m, 50) == 120);
    }
    SUBCASE("flat from epoch 100") {
        std::vector<double> m;
        for (int e = 1; e <= 300; ++e) m.push_back(std::min(e, 100) * 1e-3);
        CHECK(saturation_epoch(m, 50) == 100);
    }
    SUBCASE("a window that ends early does not count") {
        std::vector<double> m;
        for (int e = 1; e <= 120; ++e) m.push_back(std::min(e, 100) * 1e-3);
        CHECK(saturation_epoch(m, 50) == 120);
    }
    SUBCASE("random walks agree with the brute-force scan") {
        std::mt19937_64 rng(21);
        std::normal_distribution<double> step(0.002, 0.01);
        for (int c = 0; c < 20; ++c) {
            std::vector<double> m{0.1};
            for (int e = 2; e <= 400; ++e) m.push_back(m.back() + step(rng));
            for (int patience : {1, 5, 50}) CHECK(saturation_epoch(m, patience) == oracle::saturation_scan(m, patience));
        }
    }
    CHECK_THROWS_AS(saturation_epoch(std::vector<double>{0.1}, 0), ValidationError);
}

TEST_CASE("checkpoint selection") {
    const std::vector<int> every50{50, 100, 150, 200};
    CHECK(select_checkpoint(150, every50) == 150);
    CHECK(select_checkpoint(130, every50) == 150);
    CHECK(select_checkpoint(125, std::vector<int>{100, 150}) == 100);
    CHECK(select_checkpoint(1, every50) == 50);
    CHECK_THROWS_AS(select_checkpoint(10, std::vector<int>{}), ValidationError);
}

TEST_CASE("stop analysis is a pure function of its inputs") {
    const auto m = noisy_logistic(5);
    const std::vector<int> saved{50, 100, 500, 1000};
    const auto a = analyze_stop(m, 10, 50, saved);
    const auto b = analyze_stop(m, 10, 50, saved);
    CHECK(to_json(a).dump() == to_json(b).dump());
    CHECK(a.selected_checkpoint == 500);
    CHECK(a.e_star >= 1);
    CHECK(a.e_star <= 1000);
}
