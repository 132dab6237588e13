#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ialgca {

class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int num_classes);

  void add(int truth, int predicted, int64_t count = 1);
  int64_t at(int truth, int predicted) const;
  int num_classes() const { return k_; }
  int64_t total() const;
  int64_t diagonal() const;
  int64_t row_sum(int truth) const;

 private:
  int k_ = 0;
  std::vector<int64_t> counts_;
};

struct IntensityBin {
  double war = 0.0;
  int64_t count = 0;
  bool valid = false;
};

struct EvalReport {
  double uar = 0.0;
  double war = 0.0;
  std::vector<double> recalls;  // NaN for classes with no samples
  ConfusionMatrix confusion;
  IntensityBin low_bin;   // intensity in (0, 0.3]
  IntensityBin high_bin;  // intensity in (0.3, 1]

  std::string to_text() const;
};

struct PredRecord {
  int truth = 0;
  int predicted = 0;
  std::optional<double> intensity;
};

// UAR = mean recall over classes with at least one sample; WAR = accuracy.
// Intensity bins cover non-neutral clips only (neutral has intensity 0).
EvalReport make_report(int num_classes, const std::vector<PredRecord>& records);

}  // namespace ialgca
