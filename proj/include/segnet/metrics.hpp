#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace segnet {

/// K x K pixel counts; entry (p, t) counts pixels predicted p whose truth is t.
struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::uint64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes) : k(classes), counts(classes * classes, 0) {}

  std::uint64_t at(std::size_t pred, std::size_t truth) const { return counts[pred * k + truth]; }
  std::uint64_t& at(std::size_t pred, std::size_t truth) { return counts[pred * k + truth]; }

  std::uint64_t row_sum(std::size_t pred) const {
    std::uint64_t s = 0;
    for (std::size_t t = 0; t < k; ++t) s += at(pred, t);
    return s;
  }
  std::uint64_t col_sum(std::size_t truth) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < k; ++p) s += at(p, truth);
    return s;
  }
  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
  std::uint64_t trace() const {
    std::uint64_t s = 0;
    for (std::size_t c = 0; c < k; ++c) s += at(c, c);
    return s;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.k != k) throw std::invalid_argument("confusion matrices of different class counts");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    return *this;
  }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                                 std::size_t k) {
  if (pred.size() != truth.size())
    throw std::invalid_argument("confusion: prediction has " + std::to_string(pred.size()) +
                                " pixels, truth has " + std::to_string(truth.size()));
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= k || truth[i] >= k)
      throw std::invalid_argument("confusion: class id out of range at pixel " + std::to_string(i));
    ++cm.at(pred[i], truth[i]);
  }
  return cm;
}

/// IoU_c = cm[c][c] / (row_c + col_c - cm[c][c]); empty when the union is empty.
inline std::optional<double> iou(const ConfusionMatrix& cm, std::size_t c) {
  const std::uint64_t inter = cm.at(c, c);
  const std::uint64_t uni = cm.row_sum(c) + cm.col_sum(c) - inter;
  if (uni == 0) return std::nullopt;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Mean of defined values; classes with an undefined rate are listed in `excluded`.
struct MeanRate {
  double value = 0;  // 0 when nothing is defined
  std::size_t defined = 0;
  std::vector<std::size_t> excluded;
};

inline MeanRate mean_iou(const ConfusionMatrix& cm, bool foreground_only = true) {
  MeanRate r;
  double acc = 0;
  for (std::size_t c = foreground_only ? 1 : 0; c < cm.k; ++c) {
    if (auto v = iou(cm, c)) {
      acc += *v;
      ++r.defined;
    } else {
      r.excluded.push_back(c);
    }
  }
  if (r.defined > 0) r.value = acc / static_cast<double>(r.defined);
  return r;
}

/// trace / total
inline double pixel_accuracy(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw std::invalid_argument("pixel_accuracy: empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

/// Per-image precision of class c, defined when c was predicted somewhere in that image.
inline std::optional<double> precision(const ConfusionMatrix& cm, std::size_t c) {
  const std::uint64_t row = cm.row_sum(c);
  if (row == 0) return std::nullopt;
  return static_cast<double>(cm.at(c, c)) / static_cast<double>(row);
}

inline std::optional<double> recall(const ConfusionMatrix& cm, std::size_t c) {
  const std::uint64_t col = cm.col_sum(c);
  if (col == 0) return std::nullopt;
  return static_cast<double>(cm.at(c, c)) / static_cast<double>(col);
}

/// Mean of the per-image precisions of class c over the images where it is defined.
inline std::optional<double> average_precision(std::span<const ConfusionMatrix> per_image, std::size_t c) {
  double acc = 0;
  std::size_t n = 0;
  for (const auto& cm : per_image) {
    if (auto p = precision(cm, c)) {
      acc += *p;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return acc / static_cast<double>(n);
}

/// Mean AP over foreground classes 1..K-1 with a defined AP.
inline MeanRate mean_average_precision(std::span<const ConfusionMatrix> per_image) {
  MeanRate r;
  if (per_image.empty()) return r;
  double acc = 0;
  for (std::size_t c = 1; c < per_image.front().k; ++c) {
    if (auto ap = average_precision(per_image, c)) {
      acc += *ap;
      ++r.defined;
    } else {
      r.excluded.push_back(c);
    }
  }
  if (r.defined > 0) r.value = acc / static_cast<double>(r.defined);
  return r;
}

struct MetricsReport {
  ConfusionMatrix cm;  // summed over images
  std::vector<std::optional<double>> iou;
  std::vector<std::optional<double>> ap;
  MeanRate mean_iou;       // foreground classes
  MeanRate mean_iou_all;   // background included
  MeanRate map;
  double accuracy = 0;
  std::size_t images = 0;
};

inline MetricsReport make_report(std::span<const ConfusionMatrix> per_image) {
  if (per_image.empty()) throw std::invalid_argument("make_report: no images");
  MetricsReport r;
  r.cm = ConfusionMatrix(per_image.front().k);
  for (const auto& cm : per_image) r.cm += cm;
  r.images = per_image.size();
  for (std::size_t c = 0; c < r.cm.k; ++c) {
    r.iou.push_back(segnet::iou(r.cm, c));
    r.ap.push_back(average_precision(per_image, c));
  }
  r.mean_iou = segnet::mean_iou(r.cm, true);
  r.mean_iou_all = segnet::mean_iou(r.cm, false);
  r.map = mean_average_precision(per_image);
  r.accuracy = pixel_accuracy(r.cm);
  return r;
}

inline std::vector<std::string> class_labels(std::size_t k) {
  static const char* kNames[] = {"Background", "Thi", "Thin", "Dash", "Arrow", "Numer"};
  std::vector<std::string> out;
  for (std::size_t c = 0; c < k; ++c) out.push_back(k == 6 ? kNames[c] : "c" + std::to_string(c));
  return out;
}

/// Row-normalized rates; rows with no pixels have no rates.
inline std::vector<std::vector<std::optional<double>>> row_normalized(const ConfusionMatrix& cm) {
  std::vector<std::vector<std::optional<double>>> out(cm.k, std::vector<std::optional<double>>(cm.k));
  for (std::size_t p = 0; p < cm.k; ++p) {
    const std::uint64_t row = cm.row_sum(p);
    if (row == 0) continue;
    for (std::size_t t = 0; t < cm.k; ++t)
      out[p][t] = static_cast<double>(cm.at(p, t)) / static_cast<double>(row);
  }
  return out;
}

namespace detail {
inline std::string rate4(std::optional<double> v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}
}  // namespace detail

struct RenderedConfusion {
  std::string text;
  std::string csv;
};

/// Rows are predictions, columns are truth; zero rows render as dashes.
inline RenderedConfusion render_confusion(const ConfusionMatrix& cm) {
  const auto labels = class_labels(cm.k);
  const auto rates = row_normalized(cm);
  RenderedConfusion out;
  std::ostringstream text, csv;
  char cell[64];
  std::snprintf(cell, sizeof cell, "%-12s", "pred\\true");
  text << cell;
  csv << "pred\\true";
  for (const auto& l : labels) {
    std::snprintf(cell, sizeof cell, "%11s", l.c_str());
    text << cell;
    csv << ',' << l;
  }
  text << '\n';
  csv << '\n';
  for (std::size_t p = 0; p < cm.k; ++p) {
    std::snprintf(cell, sizeof cell, "%-12s", labels[p].c_str());
    text << cell;
    csv << labels[p];
    for (std::size_t t = 0; t < cm.k; ++t) {
      const std::string v = detail::rate4(rates[p][t]);
      std::snprintf(cell, sizeof cell, "%11s", v.c_str());
      text << cell;
      csv << ',' << v;
    }
    text << '\n';
    csv << '\n';
  }
  out.text = text.str();
  out.csv = csv.str();
  return out;
}

}  // namespace segnet
