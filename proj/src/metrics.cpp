#include "swarmfuse/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "swarmfuse/errors.hpp"

namespace swarmfuse::metrics {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string percent(std::optional<double> v) {
  if (!v || std::isnan(*v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *v);
  return buf;
}
}  // namespace

std::uint64_t Confusion::total() const {
  std::uint64_t n = 0;
  for (auto v : counts) n += v;
  return n;
}

Confusion& Confusion::operator+=(const Confusion& other) {
  if (other.classes != classes) throw DimensionError("confusion matrices of different class counts");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  return *this;
}

Confusion confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                    std::span<const std::uint8_t> mask, int classes) {
  if (pred.size() != truth.size() || mask.size() != truth.size()) {
    throw DimensionError("confusion: pred " + std::to_string(pred.size()) + ", truth " + std::to_string(truth.size()) +
                         ", mask " + std::to_string(mask.size()));
  }
  Confusion c(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!mask[i]) continue;
    if (truth[i] >= classes || pred[i] >= classes) throw DimensionError("confusion: label out of range");
    ++c.counts[static_cast<std::size_t>(truth[i]) * classes + pred[i]];
  }
  return c;
}

std::vector<std::optional<double>> iou_per_class(const Confusion& c) {
  std::vector<std::optional<double>> out(static_cast<std::size_t>(c.classes));
  for (int k = 0; k < c.classes; ++k) {
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < c.classes; ++j) {
      row += c.at(k, j);
      col += c.at(j, k);
    }
    const std::uint64_t tp = c.at(k, k);
    const std::uint64_t uni = row + col - tp;
    if (uni > 0) out[static_cast<std::size_t>(k)] = static_cast<double>(tp) / static_cast<double>(uni);
  }
  return out;
}

double mean_iou(const Confusion& c) {
  double s = 0.0;
  int n = 0;
  for (const auto& v : iou_per_class(c)) {
    if (v) {
      s += *v;
      ++n;
    }
  }
  return n ? s / n : kNaN;
}

double mean_accuracy(const Confusion& c) {
  double s = 0.0;
  int n = 0;
  for (int k = 0; k < c.classes; ++k) {
    std::uint64_t row = 0;
    for (int j = 0; j < c.classes; ++j) row += c.at(k, j);
    if (row == 0) continue;
    s += static_cast<double>(c.at(k, k)) / static_cast<double>(row);
    ++n;
  }
  return n ? s / n : kNaN;
}

std::vector<std::uint8_t> argmax_labels(const Tensor& logits) {
  if (logits.rank() != 4 || logits.dim(0) != 1) throw DimensionError("argmax_labels expects [1, C, H, W]");
  const std::size_t c = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  const auto v = logits.data();
  std::vector<std::uint8_t> out(plane, 0);
  for (std::size_t p = 0; p < plane; ++p) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (v[k * plane + p] > v[best * plane + p]) best = k;
    }
    out[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

double Counts::rate() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : kNaN; }

Counts correspondence_counts(std::span<const std::int32_t> predicted, std::span<const std::uint16_t> truth,
                             std::span<const std::uint8_t> cell_mask) {
  if (predicted.size() != truth.size() || (!cell_mask.empty() && cell_mask.size() != truth.size())) {
    throw DimensionError("correspondence_accuracy: size mismatch");
  }
  Counts c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!cell_mask.empty() && !cell_mask[i]) continue;
    ++c.total;
    if (predicted[i] == truth[i]) ++c.correct;
  }
  return c;
}

double correspondence_accuracy(std::span<const std::int32_t> predicted, std::span<const std::uint16_t> truth,
                               std::span<const std::uint8_t> cell_mask) {
  return correspondence_counts(predicted, truth, cell_mask).rate();
}

ResultRow make_row(const std::string& method, const Confusion& c) {
  return {method, mean_accuracy(c), mean_iou(c), iou_per_class(c)};
}

std::vector<std::string> default_class_names(int classes) {
  static const std::vector<std::string> kNames{"Road", "Building", "Bus", "Car", "Truck"};
  std::vector<std::string> out;
  for (int k = 0; k < classes; ++k) {
    out.push_back(k < static_cast<int>(kNames.size()) ? kNames[static_cast<std::size_t>(k)] : "Class" + std::to_string(k));
  }
  return out;
}

std::string format_table(std::span<const ResultRow> rows, std::span<const std::string> class_names) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"Method", "Mean Acc", "Mean IoU"};
  for (const auto& n : class_names) header.push_back(n + " IoU");
  cells.push_back(header);
  for (const auto& r : rows) {
    std::vector<std::string> line{r.method, percent(r.mean_accuracy), percent(r.mean_iou)};
    for (std::size_t k = 0; k < class_names.size(); ++k) {
      line.push_back(percent(k < r.class_iou.size() ? r.class_iou[k] : std::nullopt));
    }
    cells.push_back(line);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  }
  std::ostringstream out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      const auto& s = cells[r][i];
      if (i == 0) {
        out << s << std::string(width[i] - s.size(), ' ');
      } else {
        out << "  " << std::string(width[i] - s.size(), ' ') << s;
      }
    }
    out << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      out << std::string(total - 2, '-') << '\n';
    }
  }
  return out.str();
}

std::string format_csv(std::span<const ResultRow> rows, std::span<const std::string> class_names) {
  std::ostringstream out;
  out << "method,mean_accuracy,mean_iou";
  for (const auto& n : class_names) out << ',' << n << "_iou";
  out << '\n';
  for (const auto& r : rows) {
    out << r.method << ',' << percent(r.mean_accuracy) << ',' << percent(r.mean_iou);
    for (std::size_t k = 0; k < class_names.size(); ++k) {
      out << ',' << percent(k < r.class_iou.size() ? r.class_iou[k] : std::nullopt);
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace swarmfuse::metrics
