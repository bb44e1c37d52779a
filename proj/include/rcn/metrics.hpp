#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace rcn {

/// counts[true][predicted].
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t c) : classes(c), counts(c * c, 0) {}

  std::size_t& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }
  void add(std::size_t truth, std::size_t pred);
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  std::size_t total() const;
  std::size_t row_sum(std::size_t c) const;
  std::size_t col_sum(std::size_t c) const;

  bool operator==(const ConfusionMatrix&) const = default;
};

/// Mean per-class recall. Throws DataError on a class with no samples unless
/// skip_empty, in which case such classes are left out of the mean.
double compute_uar(const ConfusionMatrix& cm, bool skip_empty = false);

/// Per-class F1; zero where precision + recall is zero or undefined.
std::vector<double> per_class_f1(const ConfusionMatrix& cm, std::vector<std::string>* warnings = nullptr);
double compute_uf1(const ConfusionMatrix& cm, std::vector<std::string>* warnings = nullptr);

}  // namespace rcn
