#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "dynser/common.hpp"

namespace dynser {

using ConfusionMatrix = std::vector<std::vector<std::int64_t>>;

// cell (i, j) counts samples with truth i predicted j.
inline ConfusionMatrix confusion_matrix(const std::vector<int>& preds,
                                        const std::vector<int>& labels,
                                        int n_classes) {
  if (preds.size() != labels.size()) {
    throw ParameterError("confusion_matrix: " + std::to_string(preds.size()) +
                         " predictions vs " + std::to_string(labels.size()) +
                         " labels");
  }
  ConfusionMatrix cm(n_classes, std::vector<std::int64_t>(n_classes, 0));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes || preds[i] < 0 ||
        preds[i] >= n_classes) {
      throw DataError("confusion_matrix: class id out of range at sample " +
                      std::to_string(i));
    }
    ++cm[labels[i]][preds[i]];
  }
  return cm;
}

struct MetricsReport {
  ConfusionMatrix confusion;
  std::vector<std::int64_t> support;       // row sums
  std::vector<double> precision, recall, f1;
  std::vector<int> zero_division_classes;  // classes where a rate was forced to 0
  double macro_f1 = 0.0;
  double ua = 0.0;  // macro-averaged recall
  double wa = 0.0;  // overall accuracy
};

// Per-class precision/recall/F1 from the confusion matrix, with UA as the
// unweighted mean of recalls and WA as trace/total. Zero denominators score
// 0 and flag the class instead of producing NaN.
inline MetricsReport compute_metrics(const ConfusionMatrix& cm) {
  const std::size_t n = cm.size();
  if (n == 0) throw ParameterError("compute_metrics: empty matrix");
  for (const auto& row : cm) {
    if (row.size() != n) throw ParameterError("compute_metrics: matrix not square");
    for (auto v : row) {
      if (v < 0) throw ParameterError("compute_metrics: negative count");
    }
  }
  std::int64_t total = 0, trace = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) total += cm[i][j];
    trace += cm[i][i];
  }
  if (total == 0) {
    throw ProtocolError("compute_metrics: all-zero confusion matrix");
  }

  MetricsReport r;
  r.confusion = cm;
  r.support.resize(n);
  r.precision.resize(n);
  r.recall.resize(n);
  r.f1.resize(n);
  double recall_sum = 0.0, f1_sum = 0.0;
  for (std::size_t o = 0; o < n; ++o) {
    const double tp = static_cast<double>(cm[o][o]);
    std::int64_t row = 0, col = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row += cm[o][j];
      col += cm[j][o];
    }
    r.support[o] = row;
    const double fp = static_cast<double>(col) - tp;
    const double fn = static_cast<double>(row) - tp;
    bool flagged = false;
    if (tp + fp > 0) {
      r.precision[o] = tp / (tp + fp);
    } else {
      r.precision[o] = 0.0;
      flagged = true;
    }
    if (tp + fn > 0) {
      r.recall[o] = tp / (tp + fn);
    } else {
      r.recall[o] = 0.0;
      flagged = true;
    }
    if (r.precision[o] + r.recall[o] > 0) {
      r.f1[o] = 2.0 * r.precision[o] * r.recall[o] /
                (r.precision[o] + r.recall[o]);
    } else {
      r.f1[o] = 0.0;
      flagged = true;
    }
    if (flagged) r.zero_division_classes.push_back(static_cast<int>(o));
    recall_sum += r.recall[o];
    f1_sum += r.f1[o];
  }
  r.ua = recall_sum / static_cast<double>(n);
  r.wa = static_cast<double>(trace) / static_cast<double>(total);
  r.macro_f1 = f1_sum / static_cast<double>(n);
  return r;
}

inline std::string render_confusion(const ConfusionMatrix& cm,
                                    const std::vector<std::string>& names) {
  std::ostringstream os;
  std::size_t w = 9;
  for (const auto& nm : names) w = std::max(w, nm.size() + 2);
  os << std::setw(static_cast<int>(w)) << "truth\\pred";
  for (std::size_t j = 0; j < cm.size(); ++j) {
    os << std::setw(static_cast<int>(w)) << (j < names.size() ? names[j] : "?");
  }
  os << "\n";
  for (std::size_t i = 0; i < cm.size(); ++i) {
    os << std::setw(static_cast<int>(w)) << (i < names.size() ? names[i] : "?");
    for (std::size_t j = 0; j < cm.size(); ++j) {
      os << std::setw(static_cast<int>(w)) << cm[i][j];
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace dynser
