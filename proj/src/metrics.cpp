#include "mskl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mskl/error.hpp"

namespace mskl::metrics {

PredictionRecord make_record(std::vector<double> softmax, std::size_t actual) {
  if (softmax.empty()) throw ValidationError("prediction record needs a non-empty softmax");
  const auto best = static_cast<std::size_t>(
      std::distance(softmax.begin(), std::max_element(softmax.begin(), softmax.end())));
  return PredictionRecord{std::move(softmax), best, actual};
}

void validate_record(const PredictionRecord& r) {
  if (r.softmax.empty()) throw ValidationError("prediction record has an empty softmax");
  if (r.predicted >= r.softmax.size() || r.actual >= r.softmax.size()) {
    throw ValidationError("prediction record class index out of range");
  }
  const double total = std::accumulate(r.softmax.begin(), r.softmax.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9) {
    throw ValidationError("prediction record softmax sums to " + std::to_string(total));
  }
}

void TrustConfig::validate() const {
  if (!(reward > 0.0) || !(penalty > 0.0) || !(bandwidth > 0.0)) {
    throw ValidationError("trust exponents and bandwidth factor must be positive");
  }
}

double qa_trust(const PredictionRecord& record, const TrustConfig& config) {
  const double c = record.confidence();
  return record.correct() ? std::pow(c, config.reward) : std::pow(1.0 - c, config.penalty);
}

std::vector<double> conditional_trust(std::span<const PredictionRecord> records,
                                      const std::function<bool(const PredictionRecord&)>& condition,
                                      const TrustConfig& config) {
  std::vector<double> out;
  for (const PredictionRecord& r : records) {
    if (condition(r)) out.push_back(std::pow(r.confidence(), config.reward));
  }
  return out;
}

double DensityCurve::integral() const {
  double acc = 0.0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    acc += 0.5 * (density[i] + density[i - 1]) * (grid[i] - grid[i - 1]);
  }
  return acc;
}

double DensityCurve::first_moment() const {
  double acc = 0.0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    acc += 0.5 * (grid[i] * density[i] + grid[i - 1] * density[i - 1]) * (grid[i] - grid[i - 1]);
  }
  return acc;
}

DensityCurve trust_density(std::span<const double> values, const TrustConfig& config) {
  if (values.empty()) throw ValidationError("trust_density: need at least one value");
  config.validate();
  DensityCurve curve;
  const double n = static_cast<double>(values.size());
  curve.bandwidth = config.bandwidth / std::sqrt(n);
  const double h = curve.bandwidth;
  const double norm = 1.0 / (n * h * std::sqrt(2.0 * 3.14159265358979323846));
  curve.grid.resize(kDensityGridPoints);
  curve.density.resize(kDensityGridPoints);
  const double step = (kDensityGridHi - kDensityGridLo) / static_cast<double>(kDensityGridPoints - 1);
  for (std::size_t i = 0; i < kDensityGridPoints; ++i) {
    const double x = kDensityGridLo + step * static_cast<double>(i);
    double acc = 0.0;
    for (double v : values) {
      const double z = (x - v) / h;
      acc += std::exp(-0.5 * z * z);
    }
    curve.grid[i] = x;
    curve.density[i] = acc * norm;
  }
  return curve;
}

std::optional<double> nts(std::span<const double> values) {
  if (values.empty()) return std::nullopt;
  return std::clamp(mean(values), 0.0, 1.0);
}

const TrustCondition* TrustReport::find(const std::string& name) const {
  for (const TrustCondition& c : conditions) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

TrustReport trust_report(std::span<const PredictionRecord> records,
                         std::span<const std::string> class_names, const TrustConfig& config) {
  config.validate();
  TrustReport report;
  for (int truth = 1; truth >= 0; --truth) {
    for (std::size_t c = 0; c < class_names.size(); ++c) {
      TrustCondition cond;
      cond.name = std::string(truth ? "true_" : "false_") + class_names[c];
      cond.values = conditional_trust(
          records,
          [&](const PredictionRecord& r) { return r.actual == c && r.correct() == (truth == 1); },
          config);
      cond.score = nts(cond.values);
      if (!cond.values.empty()) {
        cond.density = trust_density(cond.values, config);
        const double smoothed = cond.density->first_moment();
        if (std::abs(smoothed - *cond.score) > 1e-3) cond.smoothed_score = smoothed;
      }
      report.conditions.push_back(std::move(cond));
    }
  }
  return report;
}

double micro_accuracy(std::span<const PredictionRecord> records) {
  if (records.empty()) throw ValidationError("micro_accuracy: no records");
  const auto correct = std::count_if(records.begin(), records.end(),
                                     [](const PredictionRecord& r) { return r.correct(); });
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ValidationError("roc_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks (1-based) over tie groups.
  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] != 0) {
        rank_sum_pos += midrank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("roc_auc: both classes must be present");
  const double np = static_cast<double>(n_pos);
  const double u = rank_sum_pos - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

std::optional<double> binary_auc(std::span<const PredictionRecord> records) {
  std::vector<double> scores;
  std::vector<int> labels;
  bool has_pos = false, has_neg = false;
  for (const PredictionRecord& r : records) {
    if (r.softmax.size() != 2) return std::nullopt;
    scores.push_back(r.softmax[1]);
    labels.push_back(r.actual == 1 ? 1 : 0);
    (r.actual == 1 ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg) return std::nullopt;
  return roc_auc(scores, labels);
}

double quantile_linear(std::vector<double> values, double p) {
  if (values.empty()) throw ValidationError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = p * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

TukeyResult tukey_filter(std::span<const double> values, double k) {
  TukeyResult out;
  if (values.size() < 4) {
    out.kept.assign(values.begin(), values.end());
    out.kept_index.resize(values.size());
    std::iota(out.kept_index.begin(), out.kept_index.end(), std::size_t{0});
    out.lower_fence = -std::numeric_limits<double>::infinity();
    out.upper_fence = std::numeric_limits<double>::infinity();
    return out;
  }
  const std::vector<double> v(values.begin(), values.end());
  const double q1 = quantile_linear(v, 0.25);
  const double q3 = quantile_linear(v, 0.75);
  const double iqr = q3 - q1;
  out.lower_fence = q1 - k * iqr;
  out.upper_fence = q3 + k * iqr;
  out.filtered = true;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] >= out.lower_fence && values[i] <= out.upper_fence) {
      out.kept.push_back(values[i]);
      out.kept_index.push_back(i);
    } else {
      out.removed.push_back(values[i]);
      out.removed_index.push_back(i);
    }
  }
  return out;
}

double mean(std::span<const double> values) {
  if (values.empty()) throw ValidationError("mean of an empty sample");
  double acc = 0.0;
  for (double v : values) acc += v;
  return acc / static_cast<double>(values.size());
}

double stddev(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  const double m = mean(values);
  double acc = 0.0;
  for (double v : values) acc += (v - m) * (v - m);
  return std::sqrt(acc / static_cast<double>(values.size() - 1));
}

}  // namespace mskl::metrics
