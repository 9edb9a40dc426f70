#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "fpc/metrics.hpp"
#include "fpc/rng.hpp"

using namespace fpc;
using Catch::Approx;

namespace {

// Brute-force top-k: count strictly-better classes and equal classes with
// a lower index; the true class is in the top k iff that count is < k.
bool topk_hit_oracle(const std::vector<double>& row, int truth, int k) {
  int better = 0;
  for (int j = 0; j < static_cast<int>(row.size()); ++j) {
    if (j == truth) continue;
    if (row[static_cast<std::size_t>(j)] > row[static_cast<std::size_t>(truth)] ||
        (row[static_cast<std::size_t>(j)] == row[static_cast<std::size_t>(truth)] && j < truth))
      ++better;
  }
  return better < k;
}

// Pairwise-counting AUC oracle.
double auc_oracle(const std::vector<double>& pos, const std::vector<double>& neg) {
  double wins = 0;
  for (double p : pos)
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

}  // namespace

TEST_CASE("confusion matrix") {
  SECTION("perfect predictions give a diagonal matrix") {
    std::vector<int> t{0, 1, 2, 2, 1};
    auto cm = confusion_matrix(t, t, 3);
    CHECK(cm.trace() == 5);
    CHECK(cm.total() == 5);
  }

  SECTION("hand-counted 2x2 case") {
    auto cm = confusion_matrix({0, 0, 1}, {0, 1, 1}, 2);
    CHECK(cm.at(0, 0) == 1);
    CHECK(cm.at(0, 1) == 1);
    CHECK(cm.at(1, 0) == 0);
    CHECK(cm.at(1, 1) == 1);
  }

  SECTION("out-of-range labels are rejected") {
    CHECK_THROWS_AS(confusion_matrix({0, 3}, {0, 1}, 3), data_error);
    CHECK_THROWS_AS(confusion_matrix({0, 1}, {-1, 1}, 3), data_error);
  }

  SECTION("trace over total equals top-1 accuracy on 1000 random pairs") {
    RngStream rng = RngStream::make(31, "cm-acc", 0);
    std::vector<int> truth(1000), pred(1000);
    std::vector<std::vector<double>> probs(1000, std::vector<double>(6, 0.0));
    for (int i = 0; i < 1000; ++i) {
      truth[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(6));
      pred[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(6));
      probs[static_cast<std::size_t>(i)][static_cast<std::size_t>(
          pred[static_cast<std::size_t>(i)])] = 1.0;
    }
    auto cm = confusion_matrix(truth, pred, 6);
    const double acc = topk_accuracy(probs, truth, 1);
    CHECK(static_cast<double>(cm.trace()) / static_cast<double>(cm.total()) == acc);
  }
}

TEST_CASE("top-k accuracy") {
  SECTION("k equal to the class count is always 1") {
    RngStream rng = RngStream::make(33, "topk-full", 0);
    std::vector<std::vector<double>> probs(50, std::vector<double>(4));
    std::vector<int> truth(50);
    for (auto& row : probs)
      for (auto& v : row) v = rng.uniform();
    for (auto& t : truth) t = static_cast<int>(rng.below(4));
    CHECK(topk_accuracy(probs, truth, 4) == 1.0);
  }

  SECTION("frozen [0.5,0.3,0.2] row with true class 1") {
    std::vector<std::vector<double>> probs{{0.5, 0.3, 0.2}};
    std::vector<int> truth{1};
    CHECK(topk_accuracy(probs, truth, 1) == 0.0);
    CHECK(topk_accuracy(probs, truth, 2) == 1.0);
  }

  SECTION("matches the brute-force oracle exactly on random rows") {
    RngStream rng = RngStream::make(35, "topk-oracle", 0);
    std::vector<std::vector<double>> probs(200, std::vector<double>(6));
    std::vector<int> truth(200);
    for (int i = 0; i < 200; ++i) {
      for (auto& v : probs[static_cast<std::size_t>(i)])
        v = std::round(rng.uniform() * 10.0) / 10.0;  // force ties
      truth[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(6));
    }
    for (int k = 1; k <= 6; ++k) {
      double hits = 0;
      for (int i = 0; i < 200; ++i)
        hits += topk_hit_oracle(probs[static_cast<std::size_t>(i)],
                                truth[static_cast<std::size_t>(i)], k);
      CHECK(topk_accuracy(probs, truth, k) == hits / 200.0);
    }
  }

  SECTION("top-(k+1) accuracy never drops below top-k") {
    RngStream rng = RngStream::make(37, "topk-mono", 0);
    std::vector<std::vector<double>> probs(100, std::vector<double>(5));
    std::vector<int> truth(100);
    for (int i = 0; i < 100; ++i) {
      for (auto& v : probs[static_cast<std::size_t>(i)]) v = rng.uniform();
      truth[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(5));
    }
    for (int k = 1; k < 5; ++k)
      CHECK(topk_accuracy(probs, truth, k + 1) >= topk_accuracy(probs, truth, k));
  }
}

TEST_CASE("precision, recall, F1") {
  SECTION("published aggregate pairs reproduce their F1 within 5e-4") {
    CHECK(std::abs(f1_score(0.9529, 0.9625) - 0.9576) < 5e-4);
    CHECK(std::abs(f1_score(0.9484, 0.9586) - 0.9534) < 5e-4);
  }

  SECTION("diagonal confusion matrix scores 1 everywhere") {
    ConfusionMatrix cm(3);
    cm.at(0, 0) = 5;
    cm.at(1, 1) = 2;
    cm.at(2, 2) = 7;
    auto prf = precision_recall_f1(cm);
    for (const auto& m : prf.per_class) {
      CHECK(m.precision == 1.0);
      CHECK(m.recall == 1.0);
      CHECK(m.f1 == 1.0);
    }
    CHECK(prf.macro_f1 == 1.0);
    CHECK(prf.f1_harmonic == 1.0);
  }

  SECTION("empty denominators give zero, not NaN") {
    // Class 1 never predicted and never true; class 2 never predicted.
    ConfusionMatrix cm(3);
    cm.at(0, 0) = 4;
    cm.at(2, 0) = 2;
    auto prf = precision_recall_f1(cm);
    CHECK(prf.per_class[1].precision == 0.0);
    CHECK(prf.per_class[1].recall == 0.0);
    CHECK(prf.per_class[1].f1 == 0.0);
    CHECK(prf.per_class[2].precision == 0.0);
    CHECK(std::isfinite(prf.macro_f1));
  }

  SECTION("per-class F1 lies between min and max of P and R when both positive") {
    RngStream rng = RngStream::make(39, "f1-bound", 0);
    for (int t = 0; t < 200; ++t) {
      ConfusionMatrix cm(3);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) cm.at(i, j) = static_cast<long long>(rng.below(20)) + 1;
      auto prf = precision_recall_f1(cm);
      for (const auto& m : prf.per_class) {
        if (m.precision > 0 && m.recall > 0) {
          CHECK(m.f1 >= std::min(m.precision, m.recall) - 1e-12);
          CHECK(m.f1 <= std::max(m.precision, m.recall) + 1e-12);
        }
      }
    }
  }

  SECTION("macro metrics are invariant under class permutation") {
    RngStream rng = RngStream::make(41, "macro-perm", 0);
    std::vector<int> truth(300), pred(300);
    for (int i = 0; i < 300; ++i) {
      truth[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(4));
      pred[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(4));
    }
    auto base = precision_recall_f1(confusion_matrix(truth, pred, 4));
    const int perm[4] = {2, 0, 3, 1};
    std::vector<int> truth_p(300), pred_p(300);
    for (int i = 0; i < 300; ++i) {
      truth_p[static_cast<std::size_t>(i)] = perm[truth[static_cast<std::size_t>(i)]];
      pred_p[static_cast<std::size_t>(i)] = perm[pred[static_cast<std::size_t>(i)]];
    }
    auto permuted = precision_recall_f1(confusion_matrix(truth_p, pred_p, 4));
    CHECK(permuted.macro_precision == Approx(base.macro_precision).margin(1e-12));
    CHECK(permuted.macro_recall == Approx(base.macro_recall).margin(1e-12));
    CHECK(permuted.macro_f1 == Approx(base.macro_f1).margin(1e-12));
    for (int c = 0; c < 4; ++c)
      CHECK(permuted.per_class[static_cast<std::size_t>(perm[c])].f1 ==
            Approx(base.per_class[static_cast<std::size_t>(c)].f1).margin(1e-12));
  }
}

TEST_CASE("one-vs-rest ROC AUC") {
  auto two_class = [](const std::vector<double>& pos, const std::vector<double>& neg) {
    std::vector<std::vector<double>> probs;
    std::vector<int> truth;
    for (double p : pos) {
      probs.push_back({p, 1 - p});
      truth.push_back(0);
    }
    for (double n : neg) {
      probs.push_back({n, 1 - n});
      truth.push_back(1);
    }
    return roc_auc(probs, truth, 2)[0].value();
  };

  SECTION("perfect separation gives 1") {
    CHECK(two_class({0.9, 0.8}, {0.3, 0.7}) == 1.0);
  }

  SECTION("a single tied pair gives 0.5") {
    CHECK(two_class({0.6}, {0.6}) == 0.5);
  }

  SECTION("one positive between two negatives gives 0.5") {
    CHECK(two_class({0.4}, {0.7, 0.2}) == 0.5);
  }

  SECTION("matches the pairwise-counting oracle on random data") {
    RngStream rng = RngStream::make(43, "auc-oracle", 0);
    for (int t = 0; t < 100; ++t) {
      std::vector<double> pos, neg;
      const int np = 1 + static_cast<int>(rng.below(8));
      const int nn = 1 + static_cast<int>(rng.below(8));
      for (int i = 0; i < np; ++i) pos.push_back(std::round(rng.uniform() * 5.0) / 5.0);
      for (int i = 0; i < nn; ++i) neg.push_back(std::round(rng.uniform() * 5.0) / 5.0);
      CHECK(two_class(pos, neg) == Approx(auc_oracle(pos, neg)).margin(1e-12));
    }
  }

  SECTION("AUC is invariant under strictly increasing score transforms") {
    RngStream rng = RngStream::make(45, "auc-mono", 0);
    std::vector<std::vector<double>> probs;
    std::vector<int> truth;
    for (int i = 0; i < 60; ++i) {
      const double s = rng.uniform();
      probs.push_back({s, 1 - s});
      truth.push_back(static_cast<int>(rng.below(2)));
    }
    const double base = roc_auc(probs, truth, 2)[0].value();
    for (auto& row : probs) row[0] = std::atan(7.0 * row[0]) + row[0] * row[0] * 0.1;
    CHECK(roc_auc(probs, truth, 2)[0].value() == Approx(base).margin(1e-12));
  }

  SECTION("degenerate classes report no value") {
    std::vector<std::vector<double>> probs{{0.2, 0.8}, {0.9, 0.1}};
    std::vector<int> truth{0, 0};  // class 1 has no positives
    auto auc = roc_auc(probs, truth, 2);
    CHECK(auc[0].has_value() == false);  // no negatives for class 0 either
    CHECK(auc[1].has_value() == false);
  }
}

TEST_CASE("bundled report") {
  SECTION("fields match an independent recomputation on random predictions") {
    RngStream rng = RngStream::make(47, "report", 0);
    const int n = 50, k = 6;
    std::vector<std::vector<double>> probs(n, std::vector<double>(k));
    std::vector<int> truth(n);
    for (int i = 0; i < n; ++i) {
      double z = 0;
      for (auto& v : probs[static_cast<std::size_t>(i)]) z += (v = rng.uniform() + 1e-3);
      for (auto& v : probs[static_cast<std::size_t>(i)]) v /= z;
      truth[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(k));
    }
    MetricsReport r = make_report(probs, truth, default_labels());

    CHECK(r.top1 == topk_accuracy(probs, truth, 1));
    CHECK(r.top2 == topk_accuracy(probs, truth, 2));
    CHECK(static_cast<double>(r.cm.trace()) / static_cast<double>(r.cm.total()) == r.top1);
    auto prf = precision_recall_f1(r.cm);
    CHECK(r.prf.macro_f1 == prf.macro_f1);
    auto auc = roc_auc(probs, truth, k);
    for (int c = 0; c < k; ++c) {
      REQUIRE(r.auc[static_cast<std::size_t>(c)].has_value() ==
              auc[static_cast<std::size_t>(c)].has_value());
      if (auc[static_cast<std::size_t>(c)])
        CHECK(*r.auc[static_cast<std::size_t>(c)] == *auc[static_cast<std::size_t>(c)]);
    }

    nlohmann::json j = report_to_json(r);
    CHECK(j["top1"] == r.top1);
    CHECK(j["per_class"].size() == 6);
    CHECK(j["confusion_matrix"].size() == 6);
    CHECK(j["macro"].contains("f1_harmonic"));
    CHECK(report_to_table(r).find("confusion matrix") != std::string::npos);
  }

  SECTION("empty evaluation set is rejected") {
    CHECK_THROWS_AS(make_report({}, {}, default_labels()), data_error);
  }

  SECTION("roc curve endpoints") {
    std::vector<std::vector<double>> probs{{0.9, 0.1}, {0.4, 0.6}, {0.7, 0.3}};
    std::vector<int> truth{0, 1, 1};
    auto pts = roc_curve(probs, truth, 0);
    REQUIRE(pts.size() >= 2);
    CHECK(pts.front().fpr == 0.0);
    CHECK(pts.front().tpr == 0.0);
    CHECK(pts.back().fpr == 1.0);
    CHECK(pts.back().tpr == 1.0);
  }
}
