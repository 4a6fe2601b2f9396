#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

namespace nfuse {

struct PairedComparison {
    std::vector<double> deltas;       // b - a per pair
    std::optional<double> p_value;    // two-sided; nullopt when undefined (n < 2)
};

// Two-sided Wilcoxon signed-rank test over paired values. Zero deltas are
// dropped; ties get average ranks; the p-value uses the normal approximation
// with tie correction and continuity correction. Conventions: all deltas
// zero => p = 1; fewer than two pairs => not applicable.
inline PairedComparison wilcoxon_signed_rank(const std::vector<double>& a,
                                             const std::vector<double>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("wilcoxon_signed_rank: mismatched pair counts");
    PairedComparison out;
    out.deltas.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out.deltas[i] = b[i] - a[i];
    if (a.size() < 2) {
        out.p_value = std::nullopt;
        return out;
    }
    std::vector<double> nonzero;
    for (double d : out.deltas)
        if (d != 0.0) nonzero.push_back(d);
    if (nonzero.empty()) {
        out.p_value = 1.0;
        return out;
    }
    std::size_t n = nonzero.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return std::abs(nonzero[x]) < std::abs(nonzero[y]);
    });
    std::vector<double> rank(n);
    double tie_adjust = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && std::abs(nonzero[order[j]]) == std::abs(nonzero[order[i]])) ++j;
        double avg = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
        for (std::size_t k = i; k < j; ++k) rank[order[k]] = avg;
        double t = static_cast<double>(j - i);
        tie_adjust += t * t * t - t;
        i = j;
    }
    double w_plus = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        if (nonzero[i] > 0.0) w_plus += rank[i];
    double nn = static_cast<double>(n);
    double mean = nn * (nn + 1.0) / 4.0;
    double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_adjust / 48.0;
    if (var <= 0.0) {
        out.p_value = 1.0;
        return out;
    }
    double diff = std::abs(w_plus - mean);
    double z = std::max(0.0, diff - 0.5) / std::sqrt(var);  // continuity correction
    double p = std::erfc(z / std::sqrt(2.0));               // two-sided
    out.p_value = std::min(1.0, p);
    return out;
}

}  // namespace nfuse
