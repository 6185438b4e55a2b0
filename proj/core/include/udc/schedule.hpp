#pragma once

#include <cmath>
#include <string>

#include "udc/error.hpp"

namespace udc {

enum class ScheduleKind { constant, linear, cosine, exponential };

ScheduleKind schedule_kind_from_string(const std::string& s);
std::string to_string(ScheduleKind k);

/// Annealed hyperparameter: value(0)=start, value(total_steps)=end,
/// monotone in between. Steps past the end clamp to the end value.
struct Schedule {
  ScheduleKind kind = ScheduleKind::constant;
  double start = 0.0;
  double end = 0.0;
  int64_t total_steps = 1;

  static Schedule constant(double v) { return {ScheduleKind::constant, v, v, 1}; }

  double value(int64_t step) const {
    if (kind == ScheduleKind::constant) return start;
    if (total_steps <= 0) return end;
    double t = static_cast<double>(step) / static_cast<double>(total_steps);
    t = std::min(1.0, std::max(0.0, t));
    switch (kind) {
      case ScheduleKind::linear:
        return start + (end - start) * t;
      case ScheduleKind::cosine:
        return start + (end - start) * 0.5 * (1.0 - std::cos(M_PI * t));
      case ScheduleKind::exponential: {
        if (start * end <= 0.0) {
          throw DomainError("exponential schedule requires same-sign nonzero endpoints");
        }
        return start * std::pow(end / start, t);
      }
      default:
        return start;
    }
  }
};

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "constant") return ScheduleKind::constant;
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  if (s == "exponential") return ScheduleKind::exponential;
  throw DomainError("unknown schedule kind '" + s + "'");
}

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::cosine: return "cosine";
    case ScheduleKind::exponential: return "exponential";
  }
  return "?";
}

}  // namespace udc
