#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "sparsevox/eval.hpp"

using namespace sparsevox;

TEST_CASE("confusion counting matches a direct scan") {
  Rng rng(1);
  std::vector<std::uint8_t> pred(500), truth(500);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pred[i] = rng.uniform() < 0.3 ? 1 : 0;
    truth[i] = rng.uniform() < 0.3 ? 1 : 0;
  }
  const ConfusionCounts c = confusion(pred, truth);
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] && truth[i]) ++tp;
    if (pred[i] && !truth[i]) ++fp;
    if (!pred[i] && truth[i]) ++fn;
    if (!pred[i] && !truth[i]) ++tn;
  }
  CHECK(c.tp == tp);
  CHECK(c.fp == fp);
  CHECK(c.fn == fn);
  CHECK(c.tn == tn);
  CHECK(c.total() == 500);
  CHECK_THROWS_AS(confusion(pred, std::vector<std::uint8_t>{1}), DataError);
}

TEST_CASE("multi-class labels binarize to the signal class") {
  const ConfusionCounts c = confusion({1, 0, 1, 0}, {2, 3, 0, 0});
  CHECK(c.tp == 1);
  CHECK(c.fn == 1);
  CHECK(c.fp == 1);
  CHECK(c.tn == 1);
}

TEST_CASE("metric identities on hand-checkable counts") {
  ConfusionCounts c{1, 1, 1, 5};  // tp fp fn tn
  CHECK(dice(c) == doctest::Approx(2.0 / 4.0));
  CHECK(precision(c) == doctest::Approx(0.5));
  CHECK(recall(c) == doctest::Approx(0.5));
  CHECK(accuracy(c) == doctest::Approx(6.0 / 8.0));
  CHECK(f1(c) == doctest::Approx(dice(c)));  // identity for binary counts
}

TEST_CASE("f1 equals dice on random counts") {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    ConfusionCounts c{rng.below(50) + 1, rng.below(50), rng.below(50),
                      rng.below(100)};
    CHECK(f1(c) == doctest::Approx(dice(c)).epsilon(1e-12));
  }
}

TEST_CASE("empty-set conventions") {
  ConfusionCounts empty{0, 0, 0, 10};
  CHECK(dice(empty) == 1.0);       // nothing predicted, nothing true
  CHECK(precision(empty) == 1.0);
  CHECK(recall(empty) == 1.0);

  ConfusionCounts miss{0, 0, 5, 10};  // something true, nothing predicted
  CHECK(dice(miss) == 0.0);
  CHECK(precision(miss) == 0.0);
  CHECK(recall(miss) == 0.0);

  ConfusionCounts ghost{0, 5, 0, 10};  // something predicted, nothing true
  CHECK(precision(ghost) == 0.0);
  CHECK(recall(ghost) == 0.0);
}

TEST_CASE("complement swaps the class roles") {
  ConfusionCounts c{3, 4, 5, 6};
  const ConfusionCounts b = complement(c);
  CHECK(b.tp == 6);
  CHECK(b.fp == 5);
  CHECK(b.fn == 4);
  CHECK(b.tn == 3);
  CHECK(accuracy(b) == doctest::Approx(accuracy(c)));
  CHECK(complement(b).tp == c.tp);
}

TEST_CASE("report table carries per-class rows, accuracy, and dice") {
  EvalReport rep{{10, 2, 3, 85}};
  const nlohmann::json t = rep.to_table();
  REQUIRE(t.at("rows").size() == 2);
  CHECK(t["rows"][0]["class"] == "background");
  CHECK(t["rows"][1]["class"] == "signal");
  CHECK(t["rows"][1]["support"] == 13);   // tp + fn
  CHECK(t["rows"][0]["support"] == 87);   // tn + fp
  CHECK(t["accuracy"].get<double>() == doctest::Approx(0.95));
  CHECK(t["dice_signal"].get<double>() ==
        doctest::Approx(20.0 / (20 + 2 + 3)));
  const std::string csv = rep.to_csv();
  CHECK(csv.find("background,") != std::string::npos);
  CHECK(csv.find("signal,") != std::string::npos);
  CHECK(csv.find("accuracy,0.95") != std::string::npos);
}

TEST_CASE("aggregation micro-pools counts, not per-fold metrics") {
  // One fold with lots of background, one small fold with poor dice: the
  // pooled dice is count-weighted, not the mean of the two dices.
  ConfusionCounts a{90, 0, 10, 900};
  ConfusionCounts b{1, 8, 1, 0};
  const ConfusionCounts pooled = aggregate({a, b});
  CHECK(pooled.tp == 91);
  CHECK(pooled.fp == 8);
  CHECK(pooled.fn == 11);
  CHECK(pooled.tn == 900);
  const double mean_dice = (dice(a) + dice(b)) / 2.0;
  CHECK(dice(pooled) != doctest::Approx(mean_dice));
  CHECK(dice(pooled) ==
        doctest::Approx(2.0 * 91 / (2.0 * 91 + 8 + 11)));
  CHECK_THROWS_AS(aggregate({}), DataError);
}

TEST_CASE("fold plan partitions the cases") {
  std::vector<std::string> ids;
  for (int i = 0; i < 30; ++i) ids.push_back("case" + std::to_string(i));
  const FoldPlan plan = make_folds(ids, 5, 10);
  REQUIRE(plan.folds.size() == 10);
  for (int f = 0; f < 10; ++f) {
    const Fold& fold = plan.folds[f];
    CHECK(fold.test.size() == 3);
    CHECK(fold.val.size() == 3);
    CHECK(fold.train.size() == 24);
    // Disjoint.
    std::set<std::string> all(fold.train.begin(), fold.train.end());
    for (const auto& id : fold.val) CHECK(all.insert(id).second);
    for (const auto& id : fold.test) CHECK(all.insert(id).second);
    CHECK(all.size() == 30);
    // Validation part is the next fold's test part.
    CHECK(fold.val == plan.folds[(f + 1) % 10].test);
  }
  // Every case appears exactly once as a test case.
  std::set<std::string> tested;
  for (const auto& f : plan.folds)
    for (const auto& id : f.test) CHECK(tested.insert(id).second);
  CHECK(tested.size() == 30);

  // Deterministic in the seed.
  const FoldPlan again = make_folds(ids, 5, 10);
  for (int f = 0; f < 10; ++f) CHECK(plan.folds[f].test == again.folds[f].test);
  const FoldPlan other = make_folds(ids, 6, 10);
  bool differs = false;
  for (int f = 0; f < 10; ++f)
    if (plan.folds[f].test != other.folds[f].test) differs = true;
  CHECK(differs);
}

TEST_CASE("fold plan distributes remainders and validates inputs") {
  std::vector<std::string> ids;
  for (int i = 0; i < 7; ++i) ids.push_back(std::to_string(i));
  const FoldPlan plan = make_folds(ids, 0, 3);
  CHECK(plan.folds[0].test.size() == 3);  // 7 = 3 + 2 + 2
  CHECK(plan.folds[1].test.size() == 2);
  CHECK(plan.folds[2].test.size() == 2);

  CHECK_THROWS_AS(make_folds(ids, 0, 1), ConfigError);
  CHECK_THROWS_AS(make_folds({"a", "b"}, 0, 3), ConfigError);
  try {
    make_folds({"a", "b"}, 0, 3);
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("smaller k") != std::string::npos);
  }
}
