// Evaluation suite: confusion matrix, top-k accuracy, per-class and macro
// precision/recall/F1, one-vs-rest ROC-AUC, and the bundled report.
#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fpc/common.hpp"
#include "fpc/model.hpp"
#include "fpc/train.hpp"

namespace fpc {

struct ConfusionMatrix {
  int k = 0;
  std::vector<long long> counts;  // rows = true class, cols = predicted

  explicit ConfusionMatrix(int classes = 0)
      : k(classes), counts(static_cast<std::size_t>(classes) * classes, 0) {}

  long long& at(int truth, int pred) {
    return counts[static_cast<std::size_t>(truth) * k + pred];
  }
  long long at(int truth, int pred) const {
    return counts[static_cast<std::size_t>(truth) * k + pred];
  }
  long long trace() const {
    long long t = 0;
    for (int i = 0; i < k; ++i) t += at(i, i);
    return t;
  }
  long long total() const {
    long long t = 0;
    for (long long c : counts) t += c;
    return t;
  }
  long long row_sum(int truth) const {
    long long t = 0;
    for (int j = 0; j < k; ++j) t += at(truth, j);
    return t;
  }
  long long col_sum(int pred) const {
    long long t = 0;
    for (int i = 0; i < k; ++i) t += at(i, pred);
    return t;
  }
};

inline ConfusionMatrix confusion_matrix(const std::vector<int>& truth,
                                        const std::vector<int>& pred, int k) {
  if (truth.size() != pred.size())
    throw data_error("confusion_matrix: label vectors differ in length");
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= k || pred[i] < 0 || pred[i] >= k)
      throw data_error("confusion_matrix: label out of range at row " + std::to_string(i));
    ++cm.at(truth[i], pred[i]);
  }
  return cm;
}

// Fraction of rows whose true class is among the k highest probabilities;
// ties resolved toward the lower class index.
inline double topk_accuracy(const std::vector<std::vector<double>>& probs,
                            const std::vector<int>& truth, int k) {
  if (probs.size() != truth.size())
    throw data_error("topk_accuracy: size mismatch");
  if (probs.empty()) return 0.0;
  const int classes = static_cast<int>(probs.front().size());
  if (k > classes) throw usage_error("topk_accuracy: k exceeds class count");
  std::size_t hits = 0;
  std::vector<int> idx(static_cast<std::size_t>(classes));
  for (std::size_t r = 0; r < probs.size(); ++r) {
    for (int j = 0; j < classes; ++j) idx[static_cast<std::size_t>(j)] = j;
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
      return probs[r][static_cast<std::size_t>(a)] != probs[r][static_cast<std::size_t>(b)]
                 ? probs[r][static_cast<std::size_t>(a)] > probs[r][static_cast<std::size_t>(b)]
                 : a < b;
    });
    for (int j = 0; j < k; ++j)
      if (idx[static_cast<std::size_t>(j)] == truth[r]) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / static_cast<double>(probs.size());
}

// 2PR/(P+R), the combiner for aggregate scores; 0 when both are 0.
inline double f1_score(double precision, double recall) {
  const double denom = precision + recall;
  return denom > 0 ? 2.0 * precision * recall / denom : 0.0;
}

struct ClassMetrics {
  double precision = 0, recall = 0, f1 = 0;
  long long support = 0;
};

struct PRF1 {
  std::vector<ClassMetrics> per_class;
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
  // Harmonic combination of the macro precision and recall; published
  // aggregate F1 values for this task follow this convention.
  double f1_harmonic = 0;
};

// Per class: P = TP/(TP+FP), R = TP/(TP+FN); empty denominators give 0.
inline PRF1 precision_recall_f1(const ConfusionMatrix& cm) {
  PRF1 out;
  out.per_class.resize(static_cast<std::size_t>(cm.k));
  for (int c = 0; c < cm.k; ++c) {
    const long long tp = cm.at(c, c);
    const long long fp = cm.col_sum(c) - tp;
    const long long fn = cm.row_sum(c) - tp;
    ClassMetrics& m = out.per_class[static_cast<std::size_t>(c)];
    m.support = cm.row_sum(c);
    m.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    m.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    m.f1 = f1_score(m.precision, m.recall);
    out.macro_precision += m.precision;
    out.macro_recall += m.recall;
    out.macro_f1 += m.f1;
  }
  if (cm.k > 0) {
    out.macro_precision /= cm.k;
    out.macro_recall /= cm.k;
    out.macro_f1 /= cm.k;
  }
  out.f1_harmonic = f1_score(out.macro_precision, out.macro_recall);
  return out;
}

// One-vs-rest AUC by the rank-sum (pairwise ranking) formula with mid-rank
// ties: P(pos score > neg score) + P(tie)/2. Classes without both a
// positive and a negative sample report no value.
inline std::vector<std::optional<double>> roc_auc(
    const std::vector<std::vector<double>>& probs, const std::vector<int>& truth,
    int classes) {
  std::vector<std::optional<double>> out(static_cast<std::size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    std::vector<std::pair<double, bool>> scored;  // (score, is_positive)
    scored.reserve(probs.size());
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const bool pos = truth[i] == c;
      n_pos += pos;
      scored.emplace_back(probs[i][static_cast<std::size_t>(c)], pos);
    }
    const std::size_t n_neg = scored.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) continue;
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    double rank_sum_pos = 0;
    std::size_t i = 0;
    while (i < scored.size()) {
      std::size_t j = i;
      while (j < scored.size() && scored[j].first == scored[i].first) ++j;
      const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
      for (std::size_t t = i; t < j; ++t)
        if (scored[t].second) rank_sum_pos += mid_rank;
      i = j;
    }
    const double auc = (rank_sum_pos - static_cast<double>(n_pos) *
                                           (static_cast<double>(n_pos) + 1.0) / 2.0) /
                       (static_cast<double>(n_pos) * static_cast<double>(n_neg));
    out[static_cast<std::size_t>(c)] = auc;
  }
  return out;
}

// ROC curve points for CSV export: one (fpr, tpr) pair per threshold.
struct RocPoint {
  double threshold, fpr, tpr;
};

inline std::vector<RocPoint> roc_curve(const std::vector<std::vector<double>>& probs,
                                       const std::vector<int>& truth, int cls) {
  std::vector<std::pair<double, bool>> scored;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool pos = truth[i] == cls;
    n_pos += pos;
    scored.emplace_back(probs[i][static_cast<std::size_t>(cls)], pos);
  }
  const std::size_t n_neg = scored.size() - n_pos;
  std::vector<RocPoint> pts;
  if (n_pos == 0 || n_neg == 0) return pts;
  std::sort(scored.begin(), scored.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  pts.push_back({std::nextafter(scored.front().first, 2.0), 0.0, 0.0});
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < scored.size()) {
    std::size_t j = i;
    while (j < scored.size() && scored[j].first == scored[i].first) ++j;
    for (std::size_t t = i; t < j; ++t) scored[t].second ? ++tp : ++fp;
    pts.push_back({scored[i].first, static_cast<double>(fp) / static_cast<double>(n_neg),
                   static_cast<double>(tp) / static_cast<double>(n_pos)});
    i = j;
  }
  return pts;
}

struct MetricsReport {
  double top1 = 0, top2 = 0;
  ConfusionMatrix cm;
  PRF1 prf;
  std::vector<std::optional<double>> auc;
  std::vector<std::string> labels;
};

inline MetricsReport make_report(const std::vector<std::vector<double>>& probs,
                                 const std::vector<int>& truth,
                                 const std::vector<std::string>& labels) {
  if (probs.empty()) throw data_error("report: empty evaluation set");
  const int k = static_cast<int>(labels.size());
  std::vector<int> pred(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (probs[i][static_cast<std::size_t>(j)] > probs[i][static_cast<std::size_t>(best)])
        best = j;
    pred[i] = best;
  }
  MetricsReport r;
  r.labels = labels;
  r.cm = confusion_matrix(truth, pred, k);
  r.top1 = topk_accuracy(probs, truth, 1);
  r.top2 = k >= 2 ? topk_accuracy(probs, truth, 2) : 1.0;
  r.prf = precision_recall_f1(r.cm);
  r.auc = roc_auc(probs, truth, k);
  return r;
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["top1"] = r.top1;
  j["top2"] = r.top2;
  j["per_class"] = nlohmann::json::array();
  for (int c = 0; c < r.cm.k; ++c) {
    const auto& m = r.prf.per_class[static_cast<std::size_t>(c)];
    nlohmann::json e;
    e["label"] = r.labels[static_cast<std::size_t>(c)];
    e["support"] = m.support;
    e["precision"] = m.precision;
    e["recall"] = m.recall;
    e["f1"] = m.f1;
    if (r.auc[static_cast<std::size_t>(c)])
      e["auc"] = *r.auc[static_cast<std::size_t>(c)];
    else
      e["auc"] = nullptr;
    j["per_class"].push_back(e);
  }
  j["macro"] = {{"precision", r.prf.macro_precision},
                {"recall", r.prf.macro_recall},
                {"f1", r.prf.macro_f1},
                {"f1_harmonic", r.prf.f1_harmonic}};
  j["auc"] = nlohmann::json::array();
  for (const auto& a : r.auc)
    j["auc"].push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
  j["confusion_matrix"] = nlohmann::json::array();
  for (int i = 0; i < r.cm.k; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < r.cm.k; ++c) row.push_back(r.cm.at(i, c));
    j["confusion_matrix"].push_back(row);
  }
  return j;
}

inline std::string report_to_table(const MetricsReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "top-1 " << r.top1 << "  top-2 " << r.top2 << "\n\n";
  os << std::left << std::setw(8) << "class" << std::right << std::setw(9) << "support"
     << std::setw(11) << "precision" << std::setw(9) << "recall" << std::setw(9) << "f1"
     << std::setw(9) << "auc" << "\n";
  for (int c = 0; c < r.cm.k; ++c) {
    const auto& m = r.prf.per_class[static_cast<std::size_t>(c)];
    os << std::left << std::setw(8) << r.labels[static_cast<std::size_t>(c)] << std::right
       << std::setw(9) << m.support << std::setw(11) << m.precision << std::setw(9)
       << m.recall << std::setw(9) << m.f1;
    if (r.auc[static_cast<std::size_t>(c)])
      os << std::setw(9) << *r.auc[static_cast<std::size_t>(c)];
    else
      os << std::setw(9) << "-";
    os << "\n";
  }
  os << std::left << std::setw(8) << "macro" << std::right << std::setw(9) << r.cm.total()
     << std::setw(11) << r.prf.macro_precision << std::setw(9) << r.prf.macro_recall
     << std::setw(9) << r.prf.macro_f1 << std::setw(9) << "-" << "\n";
  os << "\naggregate f1 (harmonic of macro P/R): " << r.prf.f1_harmonic << "\n";
  os << "\nconfusion matrix (rows = true, cols = predicted):\n";
  for (int i = 0; i < r.cm.k; ++i) {
    os << std::left << std::setw(8) << r.labels[static_cast<std::size_t>(i)] << std::right;
    for (int c = 0; c < r.cm.k; ++c) os << std::setw(7) << r.cm.at(i, c);
    os << "\n";
  }
  return os.str();
}

// Single eval pass over a sample set; probabilities come back as doubles
// for the metric kernels.
template <class T>
std::vector<std::vector<double>> predict_probs(Model<T>& model,
                                               const std::vector<Sample<T>>& samples,
                                               int batch_size = 32) {
  std::vector<std::vector<double>> probs;
  probs.reserve(samples.size());
  const int res = model.input_resolution();
  const int ch = model.input_channels();
  const int k = model.config.num_classes;
  for (std::size_t start = 0; start < samples.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t bk = std::min(static_cast<std::size_t>(batch_size),
                                    samples.size() - start);
    Tensor<T> batch({static_cast<int>(bk), ch, res, res});
    for (std::size_t i = 0; i < bk; ++i)
      std::copy(samples[start + i].image.data(),
                samples[start + i].image.data() + samples[start + i].image.numel(),
                batch.mut() + static_cast<std::int64_t>(i) * samples[start + i].image.numel());
    Tensor<T> p = model.forward(batch);
    for (std::size_t i = 0; i < bk; ++i) {
      std::vector<double> row(static_cast<std::size_t>(k));
      for (int j = 0; j < k; ++j)
        row[static_cast<std::size_t>(j)] = static_cast<double>(p.at({static_cast<int>(i), j}));
      probs.push_back(std::move(row));
    }
  }
  return probs;
}

template <class T>
MetricsReport evaluate_model(Model<T>& model, const std::vector<Sample<T>>& samples,
                             const std::vector<std::string>& labels) {
  if (samples.empty()) throw data_error("evaluate_model: empty test set");
  std::vector<int> truth(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) truth[i] = samples[i].label;
  return make_report(predict_probs(model, samples), truth, labels);
}

}  // namespace fpc
