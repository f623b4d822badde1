#ifndef LOCSEG_ENGINE_GRADIENT_CHECK_HPP
#define LOCSEG_ENGINE_GRADIENT_CHECK_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "locseg/engine/parameter_store.hpp"
#include "locseg/engine/rng.hpp"

namespace locseg {

struct GradientCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Coordinates probed per parameter tensor; tensors at or below this size are checked exhaustively.
  std::size_t samples_per_tensor = 16;
  // Denominator floor for the relative error, so zero gradients compare absolutely.
  double scale_floor = 1e-7;
  std::uint64_t seed = 0;
  // Optional signature of the piecewise-linear region (e.g. a hash of ReLU on/off states).
  // Probes whose +-step points leave the current region straddle a kink and are skipped;
  // a replacement coordinate is drawn instead.
  std::function<std::uint64_t()> region;
  std::size_t max_redraws = 64;
};

struct ParameterCheck {
  std::string name;
  std::size_t checked = 0;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t skipped_nonsmooth = 0;
  std::size_t refined = 0;  // checked with a step below options.step
};

struct GradientCheckReport {
  std::vector<ParameterCheck> parameters;
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_nonsmooth = 0;
  std::size_t refined = 0;
  bool passed = false;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares analytic gradients against central differences for every parameter tensor.
/// `loss` evaluates the objective at the store's current values; `gradient` fills the
/// store's grad tensors (after zeroing them) for the same objective. Analytic gradients are
/// snapshotted first, so `loss` may itself touch the grad tensors.
inline GradientCheckReport gradient_check(ParameterStore<double>& store,
                                          const std::function<double()>& loss,
                                          const std::function<void()>& gradient,
                                          const GradientCheckOptions& options = {}) {
  store.zero_grad();
  gradient();
  std::vector<std::vector<double>> analytic;
  for (const auto& p : store) analytic.emplace_back(p.grad.values().begin(), p.grad.values().end());
  GradientCheckReport report;
  std::size_t index = 0;
  CounterRng rng(options.seed, Purpose::test, 0x67c);
  for (auto& p : store) {
    const std::vector<double>& grad = analytic[index++];
    ParameterCheck pc;
    pc.name = p.name;
    std::vector<std::size_t> coords;
    const std::size_t n = p.value.size();
    if (n <= options.samples_per_tensor) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < options.samples_per_tensor; ++i) coords.push_back(rng.below(n));
      // Always include the coordinate with the largest analytic gradient.
      coords.push_back(static_cast<std::size_t>(
          std::max_element(grad.begin(), grad.end(), [](double a, double b) { return std::abs(a) < std::abs(b); }) -
          grad.begin()));
    }
    const std::uint64_t base_region = options.region ? options.region() : 0;
    std::size_t redraws = 0;
    for (std::size_t c = 0; c < coords.size(); ++c) {
      const std::size_t i = coords[c];
      const double saved = p.value[i];
      double step = options.step, up = 0.0, down = 0.0;
      bool smooth = false;
      // Shrink the step (up to 100x) before giving up on a coordinate near a kink.
      for (int attempt = 0; attempt < (options.region ? 3 : 1) && !smooth; ++attempt, step /= 10.0) {
        p.value[i] = saved + step;
        up = loss();
        smooth = !options.region || options.region() == base_region;
        p.value[i] = saved - step;
        down = loss();
        smooth = smooth && (!options.region || options.region() == base_region);
        p.value[i] = saved;
        if (smooth) break;
      }
      if (!smooth) {
        ++pc.skipped_nonsmooth;
        if (n > options.samples_per_tensor && redraws++ < options.max_redraws) coords.push_back(rng.below(n));
        continue;
      }
      if (step < options.step) ++pc.refined;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(grad[i], numeric, options.scale_floor);
      if (pc.checked++ == 0 || err > pc.max_relative_error) {
        pc.max_relative_error = err;
        pc.worst_index = i;
        pc.analytic = grad[i];
        pc.numeric = numeric;
      }
    }
    report.checked += pc.checked;
    report.skipped_nonsmooth += pc.skipped_nonsmooth;
    report.refined += pc.refined;
    report.max_relative_error = std::max(report.max_relative_error, pc.max_relative_error);
    report.parameters.push_back(pc);
  }
  report.passed = report.max_relative_error <= options.tolerance;
  return report;
}

}  // namespace locseg

#endif  // LOCSEG_ENGINE_GRADIENT_CHECK_HPP
