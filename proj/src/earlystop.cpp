#include "pivot/earlystop.hpp"

#include "pivot/common.hpp"
#include "pivot/fileio.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdlib>

namespace pivot {

double PolyFit::value(double epoch) const {
    const double x = to_x(epoch);
    double acc = 0.0;
    for (auto it = coefficients.rbegin(); it != coefficients.rend(); ++it) acc = acc * x + *it;
    return acc;
}

double PolyFit::derivative(double epoch) const {
    const double x = to_x(epoch);
    double acc = 0.0;
    for (std::size_t i = coefficients.size(); i-- > 1;) acc = acc * x + static_cast<double>(i) * coefficients[i];
    return acc;
}

PolyFit fit_poly(std::span<const double> metric, std::size_t degree) {
    const std::size_t n = metric.size();
    if (n < degree + 1) {
        throw ValidationError("fit_poly: degree " + std::to_string(degree) + " needs at least " +
                              std::to_string(degree + 1) + " points, got " + std::to_string(n));
    }
    PolyFit fit;
    fit.offset = 1.0;
    fit.scale = n > 1 ? static_cast<double>(n - 1) : 1.0;
    for (double m : metric) {
        if (!std::isfinite(m)) throw ValidationError("fit_poly: non-finite metric value");
        fit.value_scale = std::max(fit.value_scale, std::abs(m));
    }

    Eigen::MatrixXd V(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(degree + 1));
    Eigen::VectorXd y(static_cast<Eigen::Index>(n));
    for (std::size_t r = 0; r < n; ++r) {
        const double x = fit.to_x(static_cast<double>(r + 1));
        double p = 1.0;
        for (std::size_t c = 0; c <= degree; ++c) {
            V(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = p;
            p *= x;
        }
        y(static_cast<Eigen::Index>(r)) = metric[r];
    }
    const Eigen::VectorXd a = V.householderQr().solve(y);
    fit.coefficients.assign(a.data(), a.data() + a.size());
    return fit;
}

double fit_residual(const PolyFit& fit, std::span<const double> metric) {
    double s = 0.0;
    for (std::size_t i = 0; i < metric.size(); ++i) {
        const double r = fit.value(static_cast<double>(i + 1)) - metric[i];
        s += r * r;
    }
    return s;
}

int optimal_epoch(const PolyFit& fit, int first, int last) {
    if (last < first) throw ValidationError("optimal_epoch: empty epoch range");
    // Derivatives this close count as equal, so flat fits resolve to the earliest epoch.
    const double tol = 1e-9 * fit.value_scale;
    int best = first;
    double best_d = fit.derivative(first);
    for (int e = first + 1; e <= last; ++e) {
        const double d = fit.derivative(e);
        if (d > best_d + tol) {
            best = e;
            best_d = d;
        }
    }
    return best;
}

int saturation_epoch(std::span<const double> metric, int patience) {
    if (patience < 1) throw ValidationError("saturation_epoch: patience must be at least 1");
    if (metric.empty()) throw ValidationError("saturation_epoch: empty series");
    const auto n = static_cast<std::ptrdiff_t>(metric.size());
    const std::ptrdiff_t p = patience;
    int found = static_cast<int>(n);
    for (std::ptrdiff_t t = 0; t + p < n; ++t) {
        const double mt = metric[static_cast<std::size_t>(t)];
        bool improved = false;
        for (std::ptrdiff_t j = t + 1; j <= t + p; ++j) {
            if (metric[static_cast<std::size_t>(j)] > mt) {
                improved = true;
                break;
            }
        }
        if (!improved) {
            found = static_cast<int>(t + 1);
            break;
        }
    }
    return found;
}

int select_checkpoint(int e_star, std::span<const int> saved) {
    if (saved.empty()) throw ValidationError("select_checkpoint: no saved checkpoints");
    int best = saved.front();
    for (int s : saved) {
        const int ds = std::abs(s - e_star);
        const int db = std::abs(best - e_star);
        if (ds < db || (ds == db && s < best)) best = s;
    }
    return best;
}

StopAnalysis analyze_stop(std::span<const double> metric, std::size_t degree, int patience,
                          std::span<const int> saved_epochs) {
    StopAnalysis s;
    s.fit = fit_poly(metric, degree);
    s.e_star = optimal_epoch(s.fit, 1, static_cast<int>(metric.size()));
    s.saturation = saturation_epoch(metric, patience);
    s.selected_checkpoint = saved_epochs.empty() ? s.e_star : select_checkpoint(s.e_star, saved_epochs);
    return s;
}

nlohmann::json to_json(const StopAnalysis& s) {
    return {{"coefficients", s.fit.coefficients},
            {"degree", s.fit.degree()},
            {"domain_transform", {{"x", "(epoch - offset) / scale"}, {"offset", s.fit.offset}, {"scale", s.fit.scale}}},
            {"e_star", s.e_star},
            {"saturation_epoch", s.saturation},
            {"selected_checkpoint_epoch", s.selected_checkpoint}};
}

void save_stop_analysis(const std::filesystem::path& path, const StopAnalysis& s) {
    write_file_atomic(path, to_json(s).dump(2) + "\n");
}

} // namespace pivot
