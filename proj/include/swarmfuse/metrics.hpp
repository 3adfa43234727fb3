#pragma once

// Segmentation and correspondence scores restricted to a region mask.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "swarmfuse/tensor.hpp"

namespace swarmfuse::metrics {

struct Confusion {
  int classes = 0;
  std::vector<std::uint64_t> counts;  // [truth][pred]

  Confusion() = default;
  explicit Confusion(int c) : classes(c), counts(static_cast<std::size_t>(c) * c, 0) {}
  std::uint64_t at(int truth, int pred) const { return counts[static_cast<std::size_t>(truth) * classes + pred]; }
  std::uint64_t total() const;
  Confusion& operator+=(const Confusion& other);
  bool operator==(const Confusion&) const = default;
};

/// counts[t][p] over pixels where mask != 0. Labels must be < classes.
Confusion confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                    std::span<const std::uint8_t> mask, int classes);

/// TP / (TP + FP + FN); nullopt for a class absent from both prediction and truth.
std::vector<std::optional<double>> iou_per_class(const Confusion& c);
/// Mean over the defined per-class IoUs; NaN when none is defined.
double mean_iou(const Confusion& c);
/// Mean per-class recall over classes present in the truth; NaN when none is.
double mean_accuracy(const Confusion& c);

/// Per-pixel argmax over axis 1 of [1, C, H, W] logits (ties -> lowest class).
std::vector<std::uint8_t> argmax_labels(const Tensor& logits);

/// Fraction of cells whose predicted channel equals the ground truth,
/// optionally only over cells with mask != 0. NaN for an empty selection.
double correspondence_accuracy(std::span<const std::int32_t> predicted, std::span<const std::uint16_t> truth,
                               std::span<const std::uint8_t> cell_mask = {});

struct Counts {
  std::uint64_t correct = 0;
  std::uint64_t total = 0;
  double rate() const;
  Counts& operator+=(const Counts& o) {
    correct += o.correct;
    total += o.total;
    return *this;
  }
};
Counts correspondence_counts(std::span<const std::int32_t> predicted, std::span<const std::uint16_t> truth,
                             std::span<const std::uint8_t> cell_mask = {});

struct ResultRow {
  std::string method;
  double mean_accuracy = 0.0;
  double mean_iou = 0.0;
  std::vector<std::optional<double>> class_iou;
};

ResultRow make_row(const std::string& method, const Confusion& c);

std::vector<std::string> default_class_names(int classes);

/// Aligned plain-text table, percentages with two decimals, "-" for undefined.
std::string format_table(std::span<const ResultRow> rows, std::span<const std::string> class_names);
/// Comma-separated equivalent with a header row.
std::string format_csv(std::span<const ResultRow> rows, std::span<const std::string> class_names);

}  // namespace swarmfuse::metrics
