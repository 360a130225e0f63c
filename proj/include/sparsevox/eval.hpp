#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sparsevox/common.hpp"

namespace sparsevox {

// ---------------------------------------------------------------------------
// Binary confusion counts for the signal class (label != 0 is signal).
// ---------------------------------------------------------------------------

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

inline void to_json(nlohmann::json& j, const ConfusionCounts& c) {
  j = {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"tn", c.tn}};
}
inline void from_json(const nlohmann::json& j, ConfusionCounts& c) {
  j.at("tp").get_to(c.tp);
  j.at("fp").get_to(c.fp);
  j.at("fn").get_to(c.fn);
  j.at("tn").get_to(c.tn);
}

inline ConfusionCounts confusion(const std::vector<std::uint8_t>& pred,
                                 const std::vector<std::uint8_t>& truth) {
  if (pred.size() != truth.size())
    throw DataError("prediction and truth lengths differ");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    if (p && t) ++c.tp;
    else if (p && !t) ++c.fp;
    else if (!p && t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Metrics. Empty-denominator convention: 1.0 when both prediction and truth
// sets are empty, 0.0 otherwise. For binary counts, f1 of the signal class
// equals the Dice coefficient identically.
// ---------------------------------------------------------------------------

namespace detail {
inline double ratio_or(std::uint64_t num, std::uint64_t den,
                       bool both_empty) {
  if (den == 0) return both_empty ? 1.0 : 0.0;
  return static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace detail

inline double dice(const ConfusionCounts& c) {
  return detail::ratio_or(2 * c.tp, 2 * c.tp + c.fp + c.fn,
                          c.fp == 0 && c.fn == 0);
}

inline double precision(const ConfusionCounts& c) {
  return detail::ratio_or(c.tp, c.tp + c.fp, c.tp + c.fn == 0);
}

inline double recall(const ConfusionCounts& c) {
  return detail::ratio_or(c.tp, c.tp + c.fn, c.tp + c.fp == 0);
}

inline double f1(const ConfusionCounts& c) {
  const double p = precision(c), r = recall(c);
  if (p + r == 0.0) return 0.0;
  return 2.0 * p * r / (p + r);
}

inline double accuracy(const ConfusionCounts& c) {
  return detail::ratio_or(c.tp + c.tn, c.total(), true);
}

// The background row of the report is the complemented confusion.
inline ConfusionCounts complement(const ConfusionCounts& c) {
  return {c.tn, c.fn, c.fp, c.tp};
}

// A report in the shape of the per-class precision/recall/f1/support table.
struct EvalReport {
  ConfusionCounts counts;  // signal class

  nlohmann::json to_table() const {
    const ConfusionCounts bkg = complement(counts);
    return {
        {"rows",
         {{{"class", "background"},
           {"precision", precision(bkg)},
           {"recall", recall(bkg)},
           {"f1_score", f1(bkg)},
           {"support", bkg.tp + bkg.fn}},
          {{"class", "signal"},
           {"precision", precision(counts)},
           {"recall", recall(counts)},
           {"f1_score", f1(counts)},
           {"support", counts.tp + counts.fn}}}},
        {"accuracy", accuracy(counts)},
        {"dice_signal", dice(counts)},
    };
  }

  std::string to_csv() const {
    const ConfusionCounts bkg = complement(counts);
    std::string s = "class,precision,recall,f1_score,support\n";
    char buf[160];
    std::snprintf(buf, sizeof(buf), "background,%.6f,%.6f,%.6f,%llu\n",
                  precision(bkg), recall(bkg), f1(bkg),
                  static_cast<unsigned long long>(bkg.tp + bkg.fn));
    s += buf;
    std::snprintf(buf, sizeof(buf), "signal,%.6f,%.6f,%.6f,%llu\n",
                  precision(counts), recall(counts), f1(counts),
                  static_cast<unsigned long long>(counts.tp + counts.fn));
    s += buf;
    std::snprintf(buf, sizeof(buf), "accuracy,%.6f\ndice_signal,%.6f\n",
                  accuracy(counts), dice(counts));
    s += buf;
    return s;
  }
};

// Micro-pooling: counts are summed across folds, then metrics computed once.
inline ConfusionCounts aggregate(const std::vector<ConfusionCounts>& folds) {
  if (folds.empty()) throw DataError("aggregate requires at least one fold");
  ConfusionCounts pooled;
  for (const auto& f : folds) pooled += f;
  return pooled;
}

// ---------------------------------------------------------------------------
// k-fold plan: shuffled case ids split into k parts; fold f tests on part f,
// validates on part (f+1) mod k, trains on the rest. Remainder cases are
// distributed one per part from the front.
// ---------------------------------------------------------------------------

struct Fold {
  std::vector<std::string> train, val, test;
};

struct FoldPlan {
  std::uint64_t seed = 0;
  std::vector<Fold> folds;
};

inline FoldPlan make_folds(std::vector<std::string> case_ids,
                           std::uint64_t seed, int k = 10) {
  if (k < 2) throw ConfigError("fold count must be >= 2");
  if (static_cast<int>(case_ids.size()) < k)
    throw ConfigError("need at least " + std::to_string(k) +
                      " cases for " + std::to_string(k) +
                      "-fold cross-validation; pass a smaller k");

  Rng rng(seed);
  for (std::size_t i = case_ids.size(); i > 1; --i)
    std::swap(case_ids[i - 1], case_ids[rng.below(i)]);

  const std::size_t n = case_ids.size();
  const std::size_t base = n / static_cast<std::size_t>(k);
  const std::size_t rem = n % static_cast<std::size_t>(k);
  std::vector<std::vector<std::string>> parts(k);
  std::size_t pos = 0;
  for (int p = 0; p < k; ++p) {
    const std::size_t sz = base + (static_cast<std::size_t>(p) < rem ? 1 : 0);
    parts[p].assign(case_ids.begin() + pos, case_ids.begin() + pos + sz);
    pos += sz;
  }

  FoldPlan plan;
  plan.seed = seed;
  for (int f = 0; f < k; ++f) {
    Fold fold;
    fold.test = parts[f];
    // With only two parts there is nothing left for a validation split;
    // train on the full complement of the test part instead.
    if (k > 2) fold.val = parts[(f + 1) % k];
    for (int p = 0; p < k; ++p)
      if (p != f && (k <= 2 || p != (f + 1) % k))
        fold.train.insert(fold.train.end(), parts[p].begin(), parts[p].end());
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

inline void to_json(nlohmann::json& j, const Fold& f) {
  j = {{"train", f.train}, {"val", f.val}, {"test", f.test}};
}
inline void to_json(nlohmann::json& j, const FoldPlan& p) {
  j = {{"seed", p.seed}, {"folds", p.folds}};
}

}  // namespace sparsevox
