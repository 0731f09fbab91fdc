// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of reverse-mode gradients.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "moce/tensor.hpp"

namespace moce::ad {

struct GradCheckOptions {
  double step = 1e-4;
  double rel_tol = 1e-4;
  // 0 checks every coordinate; otherwise a seeded random subset per input.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
  // A coordinate that misses rel_tol at `step` but meets it at step/10 or
  // step/100 straddles a kink (ReLU, top-k switch) or sits where truncation
  // error dominates; it is reported instead of scored. A wrong derivative
  // misses at every step. A coordinate sitting exactly on a kink, where the
  // one-sided derivatives differ and autodiff returns one of them, is
  // reported the same way.
  bool refine_kinks = true;
  // A coordinate that misses rel_tol while |ad - fd| is within the rounding
  // noise of central differences, 64 * eps * max(|f|, 1) / step, is reported
  // instead of scored.
  bool skip_unresolvable = true;
  // The check fails when more than this fraction of coordinates is skipped.
  double max_skipped_fraction = 0.25;
};

struct GradCheckReport {
  bool pass = true;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_ad = 0.0;
  double worst_fd = 0.0;
  std::size_t skipped_kink = 0;  // passed only at a finer step
  std::size_t skipped_unresolvable = 0;  // within rounding noise
};

/// Compares autodiff gradients of the scalar `f` against central differences
/// on every requires_grad tensor in `inputs`. `f` must read the inputs'
/// current values each time it is called.
inline GradCheckReport finite_diff_check(
    const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
    const GradCheckOptions& opt = {}) {
  for (auto& t : inputs) t.zero_grad();
  {
    Tape<double> tape;
    Tensor<double> loss = f();
    tape.backward(loss);
  }
  const double f0 = f().item();
  const double resolution =
      64.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(f0), 1.0) / opt.step;
  GradCheckReport rep;
  std::mt19937_64 rng(opt.seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k];
    const std::size_t n = t.numel();
    std::vector<double> ad(n, 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), ad.begin());
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (opt.max_coords_per_input != 0 && n > opt.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_input);
    }
    auto vals = t.mutable_values();
    auto central = [&](std::size_t i, double h) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = f().item();
      vals[i] = orig - h;
      const double fm = f().item();
      vals[i] = orig;
      return (fp - fm) / (2.0 * h);
    };
    auto one_sided = [&](std::size_t i, double h) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = f().item();
      vals[i] = orig - h;
      const double fm = f().item();
      vals[i] = orig;
      return std::pair{(fp - f0) / h, (f0 - fm) / h};
    };
    auto rel = [](double a, double b) { return std::abs(a - b) / (std::abs(a) + std::abs(b) + 1e-12); };
    for (std::size_t i : coords) {
      const double fd = central(i, opt.step);
      const double err = rel(ad[i], fd);
      if (!(err < opt.rel_tol)) {
        if (opt.skip_unresolvable && std::abs(ad[i] - fd) <= resolution) {
          ++rep.skipped_unresolvable;
          continue;
        }
        if (opt.refine_kinks) {
          const double e10 = rel(ad[i], central(i, opt.step / 10.0));
          const double e100 = rel(ad[i], central(i, opt.step / 100.0));
          if (std::min(e10, e100) < opt.rel_tol) {
            ++rep.skipped_kink;
            continue;
          }
          const auto [right, left] = one_sided(i, opt.step / 100.0);
          if (rel(left, right) > 100.0 * opt.rel_tol &&
              std::min(rel(ad[i], left), rel(ad[i], right)) < 100.0 * opt.rel_tol) {
            ++rep.skipped_kink;
            continue;
          }
        }
      }
      ++rep.coords_checked;
      if (!(err <= rep.max_rel_error)) {
        rep.max_rel_error = std::isnan(err) ? INFINITY : err;
        rep.worst_input = k;
        rep.worst_index = i;
        rep.worst_ad = ad[i];
        rep.worst_fd = fd;
      }
    }
    t.zero_grad();
  }
  const std::size_t skipped = rep.skipped_kink + rep.skipped_unresolvable;
  const std::size_t total = rep.coords_checked + skipped;
  rep.pass = rep.max_rel_error < opt.rel_tol &&
             double(skipped) <= opt.max_skipped_fraction * double(total);
  return rep;
}

}  // namespace moce::ad
