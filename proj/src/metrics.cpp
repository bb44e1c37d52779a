#include "rcn/metrics.hpp"

#include <numeric>

#include "rcn/error.hpp"

namespace rcn {

void ConfusionMatrix::add(std::size_t truth, std::size_t pred) {
  if (truth >= classes || pred >= classes) throw DataError("confusion matrix index out of range");
  ++at(truth, pred);
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.classes != classes) throw ShapeError("confusion matrices differ in class count");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  return *this;
}

std::size_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

std::size_t ConfusionMatrix::row_sum(std::size_t c) const {
  std::size_t s = 0;
  for (std::size_t j = 0; j < classes; ++j) s += at(c, j);
  return s;
}

std::size_t ConfusionMatrix::col_sum(std::size_t c) const {
  std::size_t s = 0;
  for (std::size_t i = 0; i < classes; ++i) s += at(i, c);
  return s;
}

double compute_uar(const ConfusionMatrix& cm, bool skip_empty) {
  double acc = 0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < cm.classes; ++c) {
    const std::size_t n = cm.row_sum(c);
    if (n == 0) {
      if (skip_empty) continue;
      throw DataError("UAR undefined: class " + std::to_string(c) + " has no samples");
    }
    acc += double(cm.at(c, c)) / double(n);
    ++used;
  }
  if (used == 0) throw DataError("UAR undefined: no class has samples");
  return acc / double(used);
}

std::vector<double> per_class_f1(const ConfusionMatrix& cm, std::vector<std::string>* warnings) {
  std::vector<double> f1(cm.classes, 0.0);
  for (std::size_t c = 0; c < cm.classes; ++c) {
    const double tp = double(cm.at(c, c));
    const double predicted = double(cm.col_sum(c)), actual = double(cm.row_sum(c));
    if (tp == 0) {
      if (warnings) warnings->push_back("class " + std::to_string(c) + ": no true positives, F1 set to 0");
      continue;
    }
    const double p = tp / predicted, r = tp / actual;
    f1[c] = 2 * p * r / (p + r);
  }
  return f1;
}

double compute_uf1(const ConfusionMatrix& cm, std::vector<std::string>* warnings) {
  const auto f1 = per_class_f1(cm, warnings);
  if (f1.empty()) return 0;
  return std::accumulate(f1.begin(), f1.end(), 0.0) / double(f1.size());
}

}  // namespace rcn
