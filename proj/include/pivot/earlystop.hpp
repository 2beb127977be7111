#pragma once

// Early-stopping analysis of a per-epoch accuracy series: polynomial fit,
// steepest-ascent epoch, plateau detection, nearest saved checkpoint.

#include <json.hpp>

#include <filesystem>
#include <span>
#include <vector>

namespace pivot {

/// Polynomial in the rescaled variable x = (e - offset) / scale, which maps
/// epochs [1, |M|] onto [0, 1].
struct PolyFit {
    std::vector<double> coefficients; // a_0 .. a_n in x
    double offset = 1.0;
    double scale = 1.0;
    double value_scale = 1.0;         // max |m_e|, used for tie tolerance

    std::size_t degree() const { return coefficients.empty() ? 0 : coefficients.size() - 1; }
    double to_x(double epoch) const { return (epoch - offset) / scale; }
    double value(double epoch) const;
    /// dp/dx; a positive multiple of dp/de, so its argmax is the same.
    double derivative(double epoch) const;
};

/// Least-squares fit of m_e (e = 1..|M|) via Householder QR.
PolyFit fit_poly(std::span<const double> metric, std::size_t degree);

/// Sum of squared residuals of the fit at the sample epochs.
double fit_residual(const PolyFit& fit, std::span<const double> metric);

/// Argmax of p' over the integer epochs first..last, ties to the earliest.
int optimal_epoch(const PolyFit& fit, int first, int last);

/// First epoch t whose next `patience` values never exceed m_t; the last
/// epoch if no such t has a full window after it.
int saturation_epoch(std::span<const double> metric, int patience);

/// Saved epoch nearest to e_star, ties to the earlier one.
int select_checkpoint(int e_star, std::span<const int> saved);

struct StopAnalysis {
    PolyFit fit;
    int e_star = 1;
    int saturation = 1;
    int selected_checkpoint = 1;
};

StopAnalysis analyze_stop(std::span<const double> metric, std::size_t degree, int patience,
                          std::span<const int> saved_epochs);

nlohmann::json to_json(const StopAnalysis& s);
void save_stop_analysis(const std::filesystem::path& path, const StopAnalysis& s);

} // namespace pivot
