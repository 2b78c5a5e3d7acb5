#include <gtest/gtest.h>

#include <cmath>

#include "darkvrai/conditioning.hpp"
#include "darkvrai/gradcheck.hpp"

using namespace darkvrai;

TEST(Vocabulary, OneHotPlacesSingleOne) {
  auto vocab = ConditionVocabulary::paper_scale();
  auto oh = one_hot({3, 1.0, 60.0}, vocab);
  ASSERT_EQ(oh.sensor.size(), 14u);
  for (std::size_t i = 0; i < 14; ++i) EXPECT_EQ(oh.sensor[i], i == 3 ? 1.0 : 0.0);
  EXPECT_EQ(oh.illuminance, (std::vector<double>{1, 0, 0}));
  EXPECT_EQ(oh.fps, (std::vector<double>{0, 1, 0}));
}

TEST(Vocabulary, UnknownValuesNameTheFactor) {
  auto vocab = ConditionVocabulary::desk();
  try {
    one_hot({0, 1.0, 30.0}, vocab);
    FAIL() << "expected VocabularyError";
  } catch (const VocabularyError& e) {
    EXPECT_NE(std::string(e.what()).find("fps"), std::string::npos);
  }
  try {
    one_hot({0, 2.0, 24.0}, vocab);
    FAIL() << "expected VocabularyError";
  } catch (const VocabularyError& e) {
    EXPECT_NE(std::string(e.what()).find("illuminance"), std::string::npos);
  }
  EXPECT_THROW(one_hot({4, 1.0, 24.0}, vocab), VocabularyError);
}

TEST(Vocabulary, ValidationAndJson) {
  ConditionVocabulary bad{2, {3.0, 1.0}, {24.0}};
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW((ConditionVocabulary{0, {1.0}, {24.0}}.validate()), ConfigError);
  auto vocab = ConditionVocabulary::desk();
  nlohmann::json j = vocab;
  EXPECT_EQ(j.get<ConditionVocabulary>(), vocab);
  j["extra"] = 1;
  EXPECT_THROW(j.get<ConditionVocabulary>(), ConfigError);
  CaptureCondition c{2, 3.0, 120.0};
  EXPECT_EQ(nlohmann::json(c).get<CaptureCondition>(), c);
}

TEST(Embedding, SelectsTableRowsAndFuses) {
  ParameterSet<double> ps(5);
  auto vocab = ConditionVocabulary::desk();
  ConditionEmbedding<double> emb(ps, "c3", vocab, 4, 6);
  const CaptureCondition cond{2, 10.0, 24.0};
  auto v = emb.embed(cond);
  ASSERT_EQ(v.shape(), (Shape{1, 6}));
  // Oracle: gather rows directly and apply the fusion layer by hand.
  std::vector<double> joined;
  auto take = [&](const Tensor<double>& table, std::size_t row) {
    for (std::size_t k = 0; k < 4; ++k) joined.push_back(table[row * 4 + k]);
  };
  take(emb.sensor_table(), 2);
  take(emb.illuminance_table(), 2);
  take(emb.fps_table(), 0);
  const auto& w = ps.at("c3.fusion.weight");
  const auto& b = ps.at("c3.fusion.bias");
  for (std::size_t o = 0; o < 6; ++o) {
    double s = b[o];
    for (std::size_t k = 0; k < 12; ++k) s += w[o * 12 + k] * joined[k];
    EXPECT_NEAR(v[o], s, 1e-12);
  }
}

TEST(Embedding, ZeroTablesGiveFusionBias) {
  ParameterSet<double> ps(6);
  ConditionEmbedding<double> emb(ps, "c3", ConditionVocabulary::desk(), 3, 5);
  for (const char* name : {"c3.sensor_table", "c3.illuminance_table", "c3.fps_table"}) {
    auto t = ps.at(name);
    for (auto& x : t.mutable_data()) x = 0.0;
  }
  auto v = emb.embed(CaptureCondition{1, 3.0, 60.0});
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(v[i], emb.fusion_bias()[i]);
}

TEST(Embedding, DistinctConditionsGiveDistinctVectors) {
  ParameterSet<double> ps(7);
  auto vocab = ConditionVocabulary::desk();
  ConditionEmbedding<double> emb(ps, "c3", vocab, 8, 16);
  std::vector<std::vector<double>> seen;
  for (std::size_t s = 0; s < vocab.sensors; ++s)
    for (double lx : vocab.illuminance_lx)
      for (double fps : vocab.fps) {
        auto v = emb.embed(CaptureCondition{s, lx, fps});
        std::vector<double> cur(v.data().begin(), v.data().end());
        for (const auto& prev : seen) {
          double diff = 0.0;
          for (std::size_t i = 0; i < cur.size(); ++i) diff = std::max(diff, std::fabs(cur[i] - prev[i]));
          EXPECT_GT(diff, 0.0);
        }
        seen.push_back(cur);
      }
}

TEST(Embedding, OneHotLengthMismatchThrows) {
  ParameterSet<double> ps(8);
  ConditionEmbedding<double> emb(ps, "c3", ConditionVocabulary::desk(), 2, 2);
  OneHotCondition oh{{1, 0}, {1, 0, 0}, {1, 0, 0}};
  EXPECT_THROW(emb.embed(oh), ShapeError);
}

TEST(AdaLayerNorm, HandEvaluatedCase) {
  // x = [[1,2],[3,4]] as 1x2x1x2, gamma = [1,2], beta = [0,1], eps = 1e-5: mu = 2.5, var = 1.25.
  Tensor<double> x({1, 2, 1, 2}, {1.0, 2.0, 3.0, 4.0});
  auto y = ada_ln(x, Tensor<double>({1, 2}, {1.0, 2.0}), Tensor<double>({1, 2}, {0.0, 1.0}), 1e-5);
  const double s = std::sqrt(1.25 + 1e-5);
  const double expected[] = {-1.5 / s, -0.5 / s, 2.0 * 0.5 / s + 1.0, 2.0 * 1.5 / s + 1.0};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], expected[i], 1e-6);
}

TEST(AdaLayerNorm, ConditionedSiteStartsAsPlainNorm) {
  ParameterSet<double> ps(9);
  AdaLayerNorm<double> site(ps, "n", 3, 4, true);
  Rng rng(9);
  auto v = random_tensor({1, 4}, rng);
  auto [gamma, beta] = site.modulation(v);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(gamma[c], 1.0);
    EXPECT_EQ(beta[c], 0.0);
  }
  EXPECT_THROW(site.modulation(Tensor<double>()), ConfigError);
}

TEST(AdaLayerNorm, ShiftInvarianceAndScaleCovariance) {
  Rng rng(10);
  auto x = random_tensor({2, 3, 4, 4}, rng, -2.0, 2.0);
  auto g = random_tensor({2, 3}, rng);
  auto b = random_tensor({2, 3}, rng);
  auto y = ada_ln(x, g, b, 1e-5);
  auto shifted = ada_ln(add_scalar(x, 3.7), g, b, 1e-5);
  auto ones = Tensor<double>::ones({1, 3});
  auto zeros = Tensor<double>::zeros({1, 3});
  auto n1 = ada_ln(x, ones, zeros, 1e-5);
  auto n2 = ada_ln(mul_scalar(x, 25.0), ones, zeros, 1e-5);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    EXPECT_NEAR(shifted[i], y[i], 1e-6);
    EXPECT_NEAR(n2[i], n1[i], 1e-5);
  }
}

TEST(AdaLayerNorm, GradientThroughProjection) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed + 20);
    auto f = [](const std::vector<Tensor<double>>& v) {
      auto gb = chunk(linear(v[1], v[2], v[3]), 1, 2);
      return ada_ln(v[0], gb[0], gb[1], 1e-5);
    };
    auto r = gradcheck(f,
                       {random_tensor({2, 3, 3, 3}, rng), random_tensor({2, 5}, rng), random_tensor({6, 5}, rng),
                        random_tensor({6}, rng)},
                       rng);
    EXPECT_TRUE(r.passed(1e-4)) << r.max_rel_error << " " << r.worst;
  }
}
