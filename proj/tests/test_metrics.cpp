#include <gtest/gtest.h>

#include <sstream>

#include "segnet/metrics.hpp"
#include "segnet/rng.hpp"

using namespace segnet;

namespace {

std::vector<std::uint8_t> random_mask(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::uint8_t> m(n);
  for (auto& v : m) v = static_cast<std::uint8_t>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
  return m;
}

/// Brute-force counts straight from the mask pair.
struct Counts {
  std::uint64_t both = 0, pred = 0, truth = 0;
};

Counts count(const std::vector<std::uint8_t>& p, const std::vector<std::uint8_t>& t, std::size_t c) {
  Counts r;
  for (std::size_t i = 0; i < p.size(); ++i) {
    r.both += p[i] == c && t[i] == c;
    r.pred += p[i] == c;
    r.truth += t[i] == c;
  }
  return r;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& s) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(s);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(Confusion, PerfectAndDegenerate) {
  const std::vector<std::uint8_t> t{0, 1, 2, 2, 1, 0};
  const auto cm = confusion(t, t, 3);
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t q = 0; q < 3; ++q)
      if (p != q) {
        EXPECT_EQ(cm.at(p, q), 0u);
      }
  const std::vector<std::uint8_t> zeros(6, 0);
  const auto z = confusion(zeros, t, 3);
  EXPECT_EQ(z.row_sum(0), 6u);
  EXPECT_EQ(z.row_sum(1) + z.row_sum(2), 0u);
}

TEST(Confusion, MatchesDoubleLoopOracle) {
  Rng rng(1);
  const auto p = random_mask(64, 3, rng), t = random_mask(64, 3, rng);
  const auto cm = confusion(p, t, 3);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b) {
      std::uint64_t n = 0;
      for (std::size_t i = 0; i < 64; ++i) n += p[i] == a && t[i] == b;
      EXPECT_EQ(cm.at(a, b), n);
    }
  EXPECT_EQ(cm.total(), 64u);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(cm.col_sum(c), count(p, t, c).truth);
    EXPECT_EQ(cm.row_sum(c), count(p, t, c).pred);
  }
}

TEST(Confusion, Errors) {
  const std::vector<std::uint8_t> a{0, 1, 3}, b{0, 1, 2}, c{0, 1};
  EXPECT_THROW(confusion(a, b, 3), std::invalid_argument);
  EXPECT_THROW(confusion(b, c, 3), std::invalid_argument);
  ConfusionMatrix x(3), y(4);
  EXPECT_THROW(x += y, std::invalid_argument);
}

TEST(Iou, IdentityDisjointAndWorkedCase) {
  const std::vector<std::uint8_t> t{1, 1, 0, 0};
  EXPECT_EQ(iou(confusion(t, t, 2), 1), 1.0);
  const std::vector<std::uint8_t> d{0, 0, 1, 1};
  EXPECT_EQ(iou(confusion(d, t, 2), 1), 0.0);
  // Truth: 4 pixels of class 1. Prediction hits 2 of them and adds 2 elsewhere.
  const std::vector<std::uint8_t> truth{1, 1, 1, 1, 0, 0, 0, 0};
  const std::vector<std::uint8_t> pred{1, 1, 0, 0, 1, 1, 0, 0};
  EXPECT_DOUBLE_EQ(*iou(confusion(pred, truth, 2), 1), 2.0 / 6.0);
  EXPECT_FALSE(iou(confusion(std::vector<std::uint8_t>{0}, std::vector<std::uint8_t>{0}, 3), 2).has_value());
}

TEST(Iou, MeanExcludesUndefinedAndBackground) {
  const std::vector<std::uint8_t> truth{0, 0, 1, 1, 2, 2};
  const std::vector<std::uint8_t> pred{0, 1, 1, 1, 2, 0};
  const auto cm = confusion(pred, truth, 4);
  const auto fg = mean_iou(cm, true);
  EXPECT_EQ(fg.defined, 2u);
  EXPECT_EQ(fg.excluded, std::vector<std::size_t>{3});
  EXPECT_DOUBLE_EQ(fg.value, (2.0 / 3.0 + 1.0 / 2.0) / 2);
  const auto all = mean_iou(cm, false);
  EXPECT_DOUBLE_EQ(all.value, (1.0 / 3.0 + 2.0 / 3.0 + 1.0 / 2.0) / 3);
  EXPECT_EQ(mean_iou(ConfusionMatrix(3)).value, 0.0);
}

TEST(Accuracy, BinaryCountsAndEmpty) {
  ConfusionMatrix cm(2);
  cm.at(1, 1) = 3;   // TP
  cm.at(0, 0) = 90;  // TN
  cm.at(1, 0) = 4;   // FP
  cm.at(0, 1) = 3;   // FN
  EXPECT_DOUBLE_EQ(pixel_accuracy(cm), 0.93);
  EXPECT_THROW(pixel_accuracy(ConfusionMatrix(2)), std::invalid_argument);
}

TEST(Accuracy, UniformRandomPredictionsNearChance) {
  Rng rng(5);
  for (std::size_t k : {2u, 3u, 6u}) {
    std::vector<std::uint8_t> truth(10000);
    for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = static_cast<std::uint8_t>(i % k);
    const auto pred = random_mask(10000, k, rng);
    EXPECT_NEAR(pixel_accuracy(confusion(pred, truth, k)), 1.0 / static_cast<double>(k), 0.05);
  }
}

TEST(AveragePrecision, MeanOfPerImagePrecisions) {
  std::vector<ConfusionMatrix> ims(2, ConfusionMatrix(2));
  ims[0].at(1, 1) = 4;
  ims[1].at(1, 1) = 2;
  ims[1].at(1, 0) = 2;
  EXPECT_DOUBLE_EQ(*average_precision(ims, 1), 0.75);
  ims.push_back(ConfusionMatrix(2));
  ims[2].at(0, 0) = 5;
  EXPECT_DOUBLE_EQ(*average_precision(ims, 1), 0.75);
  const auto m = mean_average_precision(ims);
  EXPECT_DOUBLE_EQ(m.value, 0.75);
  EXPECT_TRUE(m.excluded.empty());
}

TEST(AveragePrecision, PerfectImagesGiveOne) {
  Rng rng(6);
  std::vector<ConfusionMatrix> ims;
  for (int i = 0; i < 4; ++i) {
    const auto t = random_mask(64, 6, rng);
    ims.push_back(confusion(t, t, 6));
  }
  const auto r = make_report(ims);
  EXPECT_EQ(r.map.value, 1.0);
  EXPECT_EQ(r.mean_iou.value, 1.0);
  EXPECT_EQ(r.accuracy, 1.0);
}

TEST(AveragePrecision, RandomBatchMatchesCountingOracle) {
  Rng rng(7);
  std::vector<ConfusionMatrix> ims;
  std::vector<std::vector<std::uint8_t>> ps, ts;
  for (int i = 0; i < 5; ++i) {
    ps.push_back(random_mask(64, 4, rng));
    ts.push_back(random_mask(64, 4, rng));
    ims.push_back(confusion(ps.back(), ts.back(), 4));
  }
  double map = 0;
  for (std::size_t c = 1; c < 4; ++c) {
    double acc = 0;
    int n = 0;
    for (int i = 0; i < 5; ++i) {
      const auto k = count(ps[i], ts[i], c);
      if (k.pred == 0) continue;
      acc += static_cast<double>(k.both) / static_cast<double>(k.pred);
      ++n;
    }
    EXPECT_EQ(*average_precision(ims, c), acc / n);
    map += acc / n;
  }
  EXPECT_NEAR(mean_average_precision(ims).value, map / 3, 1e-15);
}

TEST(Report, RatesBoundedAndIouBelowPrecisionAndRecall) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<ConfusionMatrix> ims;
    for (int i = 0; i < 3; ++i) ims.push_back(confusion(random_mask(64, 6, rng), random_mask(64, 6, rng), 6));
    const auto r = make_report(ims);
    EXPECT_EQ(r.cm.total(), 3u * 64u);
    for (std::size_t c = 0; c < 6; ++c) {
      const auto i = r.iou[c], p = precision(r.cm, c), q = recall(r.cm, c);
      if (i && p && q) {
        EXPECT_LE(*i, std::min(*p, *q));
        EXPECT_GE(*i, 0.0);
      }
    }
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 1.0);
    const auto again = make_report(ims);
    EXPECT_EQ(again.mean_iou.value, r.mean_iou.value);
    EXPECT_EQ(again.map.value, r.map.value);
  }
  EXPECT_THROW(make_report(std::vector<ConfusionMatrix>{}), std::invalid_argument);
}

TEST(Report, ClassPermutationFollowsLabels) {
  Rng rng(9);
  const auto p = random_mask(256, 4, rng), t = random_mask(256, 4, rng);
  const std::uint8_t perm[4] = {0, 3, 1, 2};
  std::vector<std::uint8_t> pp(p.size()), tt(t.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    pp[i] = perm[p[i]];
    tt[i] = perm[t[i]];
  }
  const auto a = confusion(p, t, 4), b = confusion(pp, tt, 4);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(iou(a, c), iou(b, perm[c]));
}

TEST(Render, DiagonalZeroRowAndCsvRoundTrip) {
  ConfusionMatrix cm(6);
  for (std::size_t c = 0; c < 5; ++c) cm.at(c, c) = 10 + c;
  cm.at(1, 2) = 3;
  const auto r = render_confusion(cm);
  EXPECT_EQ(r.text.find("nan"), std::string::npos);
  EXPECT_NE(r.text.find("Numer"), std::string::npos);
  const auto rows = parse_csv(r.csv);
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"pred\\true", "Background", "Thi", "Thin", "Dash", "Arrow", "Numer"}));
  for (std::size_t p = 0; p < 6; ++p) {
    ASSERT_EQ(rows[p + 1].size(), 7u);
    EXPECT_EQ(rows[p + 1][0], class_labels(6)[p]);
    for (std::size_t t = 0; t < 6; ++t) {
      const std::string& cell = rows[p + 1][t + 1];
      if (p == 5) {
        EXPECT_EQ(cell, "-");
        continue;
      }
      const double expect = static_cast<double>(cm.at(p, t)) / static_cast<double>(cm.row_sum(p));
      EXPECT_NEAR(std::stod(cell), expect, 5e-5);
      EXPECT_EQ(cell.size(), 6u);
    }
  }
  EXPECT_EQ(rows[1][1], "1.0000");
  EXPECT_EQ(rows[2][2], "0.7857");
}
