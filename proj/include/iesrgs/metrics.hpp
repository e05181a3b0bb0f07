#pragma once

#include <cmath>
#include <limits>
#include <string>

#include "iesrgs/image.hpp"
#include "iesrgs/io.hpp"
#include "iesrgs/ssim.hpp"

namespace iesrgs {

/// 10 log10(1 / MSE) with peak 1.0; +infinity for identical images.
inline double psnr(const ImageBuffer& a, const ImageBuffer& b) {
  IESRGS_EXPECTS(a.same_shape(b), "psnr operands must match");
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

/// Mean SSIM, the same implementation as the D-SSIM loss.
inline double ssim_metric(const ImageBuffer& a, const ImageBuffer& b, const SsimSettings& s = {}) {
  IESRGS_EXPECTS(a.same_shape(b), "ssim operands must match");
  return ssim(a, b, s);
}

/// Metric value for reports: "inf" for the identical-image sentinel,
/// otherwise enough digits to round-trip.
inline std::string metric_string(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "";
  return detail::format_double(v);
}

inline double parse_metric(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::stod(s);
}

}  // namespace iesrgs
