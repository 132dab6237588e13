#include "ialgca/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "ialgca/common.hpp"

namespace ialgca {

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
  if (num_classes < 1) throw ContractError(cat("confusion matrix needs K >= 1, got ", num_classes));
  counts_.assign(static_cast<size_t>(k_) * k_, 0);
}

void ConfusionMatrix::add(int truth, int predicted, int64_t count) {
  if (truth < 0 || truth >= k_ || predicted < 0 || predicted >= k_)
    throw ContractError(cat("confusion add(", truth, ",", predicted, ") out of range for K=", k_));
  if (count < 0) throw ContractError("confusion counts must be non-negative");
  counts_[static_cast<size_t>(truth) * k_ + predicted] += count;
}

int64_t ConfusionMatrix::at(int truth, int predicted) const {
  return counts_[static_cast<size_t>(truth) * k_ + predicted];
}

int64_t ConfusionMatrix::total() const {
  int64_t s = 0;
  for (int64_t c : counts_) s += c;
  return s;
}

int64_t ConfusionMatrix::diagonal() const {
  int64_t s = 0;
  for (int i = 0; i < k_; ++i) s += at(i, i);
  return s;
}

int64_t ConfusionMatrix::row_sum(int truth) const {
  int64_t s = 0;
  for (int j = 0; j < k_; ++j) s += at(truth, j);
  return s;
}

EvalReport make_report(int num_classes, const std::vector<PredRecord>& records) {
  EvalReport rep;
  rep.confusion = ConfusionMatrix(num_classes);
  for (const auto& r : records) rep.confusion.add(r.truth, r.predicted);

  rep.recalls.assign(static_cast<size_t>(num_classes),
                     std::numeric_limits<double>::quiet_NaN());
  double recall_sum = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    int64_t n = rep.confusion.row_sum(c);
    if (n == 0) continue;
    rep.recalls[static_cast<size_t>(c)] =
        static_cast<double>(rep.confusion.at(c, c)) / static_cast<double>(n);
    recall_sum += rep.recalls[static_cast<size_t>(c)];
    ++present;
  }
  rep.uar = present ? recall_sum / present : 0.0;
  int64_t total = rep.confusion.total();
  rep.war = total ? static_cast<double>(rep.confusion.diagonal()) / static_cast<double>(total)
                  : 0.0;

  auto fold_bin = [&](IntensityBin& bin, double lo, double hi) {
    int64_t n = 0, hit = 0;
    for (const auto& r : records) {
      if (!r.intensity) continue;
      double a = *r.intensity;
      if (a <= lo || a > hi) continue;  // excludes neutral (intensity 0)
      ++n;
      if (r.truth == r.predicted) ++hit;
    }
    if (n) {
      bin.valid = true;
      bin.count = n;
      bin.war = static_cast<double>(hit) / static_cast<double>(n);
    }
  };
  fold_bin(rep.low_bin, 0.0, 0.3);
  fold_bin(rep.high_bin, 0.3, 1.0);
  return rep;
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  char buf[64];
  int k = confusion.num_classes();
  os << "samples: " << confusion.total() << "\n";
  std::snprintf(buf, sizeof(buf), "UAR: %.4f\nWAR: %.4f\n", uar, war);
  os << buf;
  if (low_bin.valid) {
    std::snprintf(buf, sizeof(buf), "low-intensity WAR  (0,0.3]: %.4f  (n=%lld)\n", low_bin.war,
                  static_cast<long long>(low_bin.count));
    os << buf;
  }
  if (high_bin.valid) {
    std::snprintf(buf, sizeof(buf), "high-intensity WAR (0.3,1]: %.4f  (n=%lld)\n", high_bin.war,
                  static_cast<long long>(high_bin.count));
    os << buf;
  }
  os << "per-class recall:";
  for (int c = 0; c < k; ++c) {
    if (std::isnan(recalls[static_cast<size_t>(c)]))
      os << "  -";
    else {
      std::snprintf(buf, sizeof(buf), " %.4f", recalls[static_cast<size_t>(c)]);
      os << buf;
    }
  }
  os << "\nconfusion (rows = truth):\n";
  for (int t = 0; t < k; ++t) {
    for (int p = 0; p < k; ++p) {
      std::snprintf(buf, sizeof(buf), "%6lld", static_cast<long long>(confusion.at(t, p)));
      os << buf;
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace ialgca
