#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "gradcheck.hpp"
#include "omnibind/cad.hpp"
#include "omnibind/error.hpp"
#include "omnibind/fusion.hpp"

using namespace omnibind;
using omnibind::testing::max_gradient_error;
using omnibind::testing::random_tensor;
using omnibind::testing::random_unit_rows;

namespace {

Tensor normalized_mean(const Tensor& tokens) { return l2_normalize_rows(mean_rows(tokens)); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

AdaptiveFusion trained_like(std::size_t dim, std::size_t heads, std::uint64_t seed) {
  Rng rng(seed);
  AdaptiveFusion af(AfParams{dim, heads, true}, rng);
  af.wo().value = random_tensor(rng, dim, dim, 0.5);
  return af;
}

std::map<ModalityId, Tensor> as_map(const Tensor& tokens) {
  std::map<ModalityId, Tensor> out;
  for (std::size_t i = 0; i < tokens.rows(); ++i) out.emplace(kAllModalities[i], tokens.row_copy(i));
  return out;
}

}  // namespace

TEST(ClassifyCls, ExactLabelVectorWins) {
  Rng rng(1);
  const Tensor labels = random_unit_rows(rng, 6, 8);
  const auto preds = classify_cls({{ModalityId::Image, labels.row_copy(3)}}, labels);
  ASSERT_EQ(preds.size(), 1u);
  EXPECT_EQ(preds[0].label, 3u);
  EXPECT_NEAR(preds[0].scores[3], 1.0, 1e-12);
}

TEST(ClassifyCls, PicksHigherCosine) {
  const Tensor labels = Tensor::from_rows({{0.2, std::sqrt(1 - 0.04)}, {0.9, std::sqrt(1 - 0.81)}});
  const auto preds = classify_cls({{ModalityId::Touch, Tensor::from_rows({{1.0, 0.0}})}}, labels);
  EXPECT_EQ(preds[0].label, 1u);
}

TEST(ClassifyCls, MatchesBruteForceOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor labels = random_unit_rows(rng, 5, 6);
    const Tensor emb = random_unit_rows(rng, 3, 6);
    const auto preds = classify_cls(as_map(emb), labels);
    ASSERT_EQ(preds.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
      std::size_t best = 0;
      double best_score = -2.0;
      for (std::size_t c = 0; c < 5; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < 6; ++j) s += emb(i, j) * labels(c, j);
        EXPECT_NEAR(preds[i].scores[c], s, 1e-12);
        if (s > best_score) {
          best_score = s;
          best = c;
        }
      }
      EXPECT_EQ(preds[i].label, best);
    }
  }
}

TEST(ClassifyCls, TiesGoToLowestId) {
  const Tensor labels = Tensor::from_rows({{1.0, 0.0}, {0.0, 1.0}, {1.0, 0.0}});
  const auto preds = classify_cls({{ModalityId::Image, Tensor::from_rows({{1.0, 0.0}})}}, labels);
  EXPECT_EQ(preds[0].label, 0u);
}

TEST(ClassifyCls, Errors) {
  EXPECT_THROW(classify_cls({}, Tensor(2, 2, 0.5)), ValidationError);
  EXPECT_THROW(classify_cls({{ModalityId::Image, Tensor(1, 2, 0.5)}}, Tensor()), ValidationError);
}

TEST(SelectNegatives, WrongPredictionsOnly) {
  Rng rng(0);
  std::vector<Prediction> preds(3);
  preds[0] = {ModalityId::Image, 3, {}};
  preds[1] = {ModalityId::Touch, 7, {}};
  preds[2] = {ModalityId::Event, 3, {}};
  EXPECT_EQ(select_negatives(preds, 3, 16, rng), (NegativeSet{7}));
}

TEST(SelectNegatives, AllTwoModalityOutcomePatterns) {
  // Truth 3; each prediction is either the truth or one of two wrong ids.
  const std::size_t options[] = {3, 5, 6};
  for (std::size_t a : options) {
    for (std::size_t b : options) {
      Rng rng(1);
      std::vector<Prediction> preds = {{ModalityId::Image, a, {}}, {ModalityId::Audio, b, {}}};
      const NegativeSet got = select_negatives(preds, 3, 16, rng);
      NegativeSet expected;
      if (a != 3) expected.insert(a);
      if (b != 3) expected.insert(b);
      if (expected.empty()) {
        ASSERT_EQ(got.size(), 1u);
        EXPECT_NE(*got.begin(), 3u);
      } else {
        EXPECT_EQ(got, expected);
      }
    }
  }
}

TEST(SelectNegatives, FallbackIsSeededAndNeverTheTruth) {
  std::vector<Prediction> preds = {{ModalityId::Image, 2, {}}, {ModalityId::Text, 2, {}}};
  Rng a(42), b(42);
  EXPECT_EQ(select_negatives(preds, 2, 16, a), select_negatives(preds, 2, 16, b));
  Rng rng(7);
  std::vector<int> seen(5, 0);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t truth = static_cast<std::size_t>(trial % 5);
    for (auto& p : preds) p.label = truth;
    const NegativeSet n = select_negatives(preds, truth, 5, rng);
    ASSERT_EQ(n.size(), 1u);
    ASSERT_NE(*n.begin(), truth);
    ++seen[*n.begin()];
    const NegativeSet r = random_negative(truth, 5, rng);
    ASSERT_NE(*r.begin(), truth);
  }
  for (int count : seen) EXPECT_GT(count, 0);
}

TEST(SelectNegatives, SingleClassIsAConfigError) {
  Rng rng(0);
  std::vector<Prediction> preds = {{ModalityId::Image, 0, {}}};
  EXPECT_THROW(select_negatives(preds, 0, 1, rng), ConfigError);
  EXPECT_THROW(random_negative(0, 1, rng), ConfigError);
  EXPECT_THROW(select_negatives({}, 0, 4, rng), ValidationError);
}

TEST(FuseSa, ZeroOutputMapIsNormalizedMean) {
  const AdaptiveFusion af = AdaptiveFusion::mean_baseline(AfParams{8, 4, true});
  Rng rng(3);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor tokens = random_unit_rows(rng, 1 + rng.below(7), 8);
    std::vector<Tensor> rows;
    for (std::size_t i = 0; i < tokens.rows(); ++i) rows.push_back(tokens.row_copy(i));
    worst = std::max(worst, max_abs_diff(fuse_sa(rows, af), normalized_mean(tokens)));
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(FuseSa, SingleInputWithZeroOutputIsIdentity) {
  const AdaptiveFusion af = AdaptiveFusion::mean_baseline(AfParams{8, 2, true});
  Rng rng(4);
  const Tensor x = random_unit_rows(rng, 1, 8);
  EXPECT_LT(max_abs_diff(fuse_sa(std::vector<Tensor>{x}, af), x), 1e-12);
}

TEST(FuseSa, PermutationInvariantOverAllOrderings) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const AdaptiveFusion af = trained_like(8, 4, seed);
    Rng rng(seed + 100);
    for (std::size_t n = 2; n <= 4; ++n) {
      const Tensor tokens = random_unit_rows(rng, n, 8);
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      const Tensor ref = fuse_sa(std::vector<Tensor>{stack_rows(std::vector<Tensor>{tokens})}, af);
      do {
        std::vector<Tensor> rows;
        for (std::size_t i : perm) rows.push_back(tokens.row_copy(i));
        EXPECT_LT(max_abs_diff(fuse_sa(rows, af), ref), 1e-12);
      } while (std::next_permutation(perm.begin(), perm.end()));
    }
  }
}

TEST(FuseSa, OutputIsUnitNorm) {
  const AdaptiveFusion af = trained_like(8, 2, 9);
  Rng rng(9);
  for (int i = 0; i < 50; ++i) {
    const Tensor out = fuse_sa(std::vector<Tensor>{random_unit_rows(rng, 3, 8)}, af);
    EXPECT_NEAR(norm(out.values()), 1.0, 1e-12);
  }
}

TEST(FuseSa, Errors) {
  const AdaptiveFusion af = AdaptiveFusion::mean_baseline(AfParams{8, 4, true});
  EXPECT_THROW(fuse_sa(std::vector<Tensor>{}, af), ValidationError);
  EXPECT_THROW(fuse_sa(std::vector<Tensor>{Tensor(1, 6, 0.4)}, af), DimensionError);
  Rng rng(0);
  EXPECT_THROW(AdaptiveFusion(AfParams{8, 3, true}, rng), ConfigError);
}

TEST(LossStage2, ClosedForm) {
  Tape tape;
  const Var fused = tape.constant(Tensor::from_rows({{1.0, 0.0}}));
  const Var loss =
      loss_stage2(fused, Tensor::from_rows({{1.0, 0.0}}), Tensor::from_rows({{0.0, 1.0}}), 1.0);
  EXPECT_NEAR(loss.value()[0], std::log(1.0 + std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(loss.value()[0], 0.3133, 1e-4);
}

TEST(LossStage2, DuplicatedNegativesIncreaseLoss) {
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    const Tensor m = random_unit_rows(rng, 1, 6);
    const Tensor pos = random_unit_rows(rng, 1, 6);
    const Tensor neg = random_unit_rows(rng, 2, 6);
    Tape tape;
    const Var fused = tape.constant(m);
    const double once = loss_stage2(fused, pos, neg, 0.07).value()[0];
    const double twice = loss_stage2(fused, pos, stack_rows(std::vector<Tensor>{neg, neg}), 0.07).value()[0];
    EXPECT_GT(twice, once);
    EXPECT_GE(once, 0.0);
  }
}

TEST(LossStage2, MonotoneInPositiveSimilarity) {
  const Tensor neg = Tensor::from_rows({{0.0, 1.0, 0.0}});
  double previous = INFINITY;
  for (double angle = 1.5; angle >= 0.0; angle -= 0.1) {
    Tape tape;
    const Var fused = tape.constant(Tensor::from_rows({{std::cos(angle), 0.0, std::sin(angle)}}));
    const double loss = loss_stage2(fused, Tensor::from_rows({{1.0, 0.0, 0.0}}), neg, 0.5).value()[0];
    EXPECT_LT(loss, previous);
    previous = loss;
  }
}

TEST(LossStage2, Errors) {
  Tape tape;
  const Var fused = tape.constant(Tensor(1, 2, 0.5));
  EXPECT_THROW(loss_stage2(fused, Tensor(1, 2, 0.5), Tensor(), 0.07), ValidationError);
  EXPECT_THROW(loss_stage2(fused, Tensor(1, 3, 0.5), Tensor(1, 2, 0.5), 0.07), DimensionError);
}

TEST(Stage2Gradients, LossWrtFusedEmbedding) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Parameter raw{"raw", random_tensor(rng, 1, 8)};
    const Tensor pos = random_unit_rows(rng, 1, 8);
    const Tensor neg = random_unit_rows(rng, 3, 8);
    EXPECT_LT(max_gradient_error({&raw}, [&](Tape& t) {
                return loss_stage2(l2_normalize_rows(t.param(raw)), pos, neg, 0.3);
              }),
              1e-4);
  }
}

TEST(Stage2Gradients, FuseSaParameters) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    AdaptiveFusion af = trained_like(8, 2, seed);
    Rng rng(seed + 50);
    const Tensor tokens = random_unit_rows(rng, 4, 8);
    const Tensor pos = random_unit_rows(rng, 1, 8);
    const Tensor neg = random_unit_rows(rng, 2, 8);
    const Tensor probe = random_tensor(rng, 1, 8);
    EXPECT_LT(max_gradient_error(af.parameters(), [&](Tape& t) {
                return sum(hadamard(af.fuse(t, tokens), t.constant(probe)));
              }),
              1e-4);
    EXPECT_LT(max_gradient_error(af.parameters(), [&](Tape& t) {
                return loss_stage2(af.fuse(t, tokens), pos, neg, 0.5);
              }),
              1e-4);
  }
}

TEST(Stage2Gradients, Baselines) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    const Tensor tokens = random_unit_rows(rng, 3, 4);
    const std::vector<ModalityId> mods = {ModalityId::Image, ModalityId::Event, ModalityId::Thermal};
    const Tensor pos = random_unit_rows(rng, 1, 4);
    const Tensor neg = random_unit_rows(rng, 2, 4);
    LinearFusion lin(4);
    for (Parameter* p : lin.parameters()) {
      for (double& v : p->value.values()) v += 0.3 * rng.normal();
    }
    EXPECT_LT(max_gradient_error(lin.parameters(), [&](Tape& t) {
                return loss_stage2(lin.fuse(t, mods, tokens), pos, neg, 0.5);
              }),
              1e-4);
    OuterProductFusion outer(4);
    for (double& v : outer.parameters()[0]->value.values()) v = 0.3 * rng.normal();
    EXPECT_LT(max_gradient_error(outer.parameters(), [&](Tape& t) {
                return loss_stage2(outer.fuse(t, mods, tokens), pos, neg, 0.5);
              }),
              1e-4);
  }
}

TEST(Baselines, StartAtMeanFusion) {
  Rng rng(8);
  const Tensor tokens = random_unit_rows(rng, 3, 6);
  const std::vector<ModalityId> mods = {ModalityId::Text, ModalityId::Audio, ModalityId::Touch};
  EXPECT_LT(max_abs_diff(LinearFusion(6).fuse_value(mods, tokens), normalized_mean(tokens)), 1e-12);
  EXPECT_LT(max_abs_diff(OuterProductFusion(6).fuse_value(mods, tokens), normalized_mean(tokens)), 1e-12);
}

TEST(Infer, SingleModalityBranchMatchesCls) {
  Rng rng(2);
  const Tensor labels = random_unit_rows(rng, 7, 8);
  const AdaptiveFusion trained = trained_like(8, 4, 2);
  const AdaptiveFusion zero = AdaptiveFusion::mean_baseline(AfParams{8, 4, true});
  for (int t = 0; t < 200; ++t) {
    for (ModalityId m : kAllModalities) {
      const std::map<ModalityId, Tensor> one = {{m, random_unit_rows(rng, 1, 8)}};
      const std::size_t branch = infer(one, trained, labels);
      EXPECT_EQ(branch, classify_cls(one, labels)[0].label);
      const Tensor fused = zero.fuse_value({}, one.begin()->second);
      EXPECT_EQ(branch, argmax(matmul_nt(fused, labels)));
    }
  }
}

TEST(Infer, AllSubsetsOfSizeTwoToFive) {
  Rng rng(6);
  const Tensor labels = random_unit_rows(rng, 5, 8);
  const AdaptiveFusion af = trained_like(8, 4, 6);
  const LinearFusion lin(8);
  std::size_t count = 0;
  for (unsigned mask = 1; mask < (1u << kNumModalities); ++mask) {
    const int n = std::popcount(mask);
    if (n < 2 || n > 5) continue;
    std::map<ModalityId, Tensor> emb;
    for (std::size_t i = 0; i < kNumModalities; ++i) {
      if (mask & (1u << i)) emb.emplace(kAllModalities[i], random_unit_rows(rng, 1, 8));
    }
    EXPECT_LT(infer(emb, af, labels), 5u);
    EXPECT_LT(infer(emb, lin, labels), 5u);
    ++count;
  }
  EXPECT_EQ(count, 112u);
  EXPECT_THROW(infer({}, af, labels), ValidationError);
}

TEST(Checkpoint, RoundTripsEveryKind) {
  const auto dir = std::filesystem::temp_directory_path() / "omnibind_fusion_ckpt";
  std::filesystem::remove_all(dir);
  Rng rng(1);
  const Tensor tokens = random_unit_rows(rng, 3, 8);
  const std::vector<ModalityId> mods = {ModalityId::Image, ModalityId::Audio, ModalityId::Touch};
  std::vector<std::unique_ptr<FusionModel>> models;
  models.push_back(std::make_unique<AdaptiveFusion>(trained_like(8, 4, 1)));
  models.push_back(std::make_unique<LinearFusion>(8));
  models.push_back(std::make_unique<OuterProductFusion>(8));
  for (const auto& m : models) {
    save_fusion(*m, dir / m->kind(), 3, "abc");
    const auto back = load_fusion(dir / m->kind());
    EXPECT_EQ(back->kind(), m->kind());
    const Tensor a = m->fuse_value(mods, tokens);
    const Tensor b = back->fuse_value(mods, tokens);
    EXPECT_LT(max_abs_diff(a, b), 1e-5);
  }
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_fusion(dir / "af"), MissingArtifactError);
}

class Stage2Training : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    WorldParams wp;
    wp.num_classes = 8;
    wp.dim = 16;
    wp.feature_dims = {24, 24, 24, 20, 18, 16, 20};
    world_ = new SemanticWorld(SemanticWorld::generate(wp));
    CadConfig cc;
    cc.epochs = 6;
    cc.teacher_per_class = 60;
    cc.student_per_class = 20;
    auto s1 = train_stage1(*world_, cc, 3);
    encoders_ = new Encoders{world_, s1.heads};
    DatasetConfig dc;
    dc.records_per_class = {30, 30, 20, 20, 20, 20, 20};
    data_ = new BuiltDataset(build_dataset(*world_, dc, 800, 4));
  }
  static void TearDownTestSuite() {
    delete data_;
    delete encoders_;
    delete world_;
  }
  Stage2Data inputs() const { return {world_, encoders_, &data_->store, &data_->manifest}; }
  static Stage2Config quick() {
    Stage2Config c;
    c.epochs = 2;
    return c;
  }

  static SemanticWorld* world_;
  static Encoders* encoders_;
  static BuiltDataset* data_;
};

SemanticWorld* Stage2Training::world_ = nullptr;
Encoders* Stage2Training::encoders_ = nullptr;
BuiltDataset* Stage2Training::data_ = nullptr;

TEST_F(Stage2Training, OnlyFusionParametersChange) {
  std::map<ModalityId, std::vector<Tensor>> before;
  for (const auto& [m, head] : encoders_->heads) {
    for (const Parameter* p : head.parameters()) before[m].push_back(p->value);
  }
  const SemanticWorld snapshot = *world_;
  Rng rng(1);
  const AdaptiveFusion init(AfParams{16, 4, true}, rng);
  const Stage2Result r = train_stage2(inputs(), init, quick(), 9);
  for (const auto& [m, head] : encoders_->heads) {
    const auto params = head.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) EXPECT_EQ(params[i]->value, before[m][i]);
  }
  EXPECT_EQ(world_->fingerprint(), snapshot.fingerprint());
  const auto trained = r.model->parameters();
  const auto original = init.parameters();
  bool changed = false;
  for (std::size_t i = 0; i < trained.size(); ++i) changed |= !(trained[i]->value == original[i]->value);
  EXPECT_TRUE(changed);
  const std::size_t n = data_->manifest.samples.size();
  const std::size_t train = n - n / 10;
  EXPECT_EQ(r.curve.size(), 2 * ((train + 31) / 32));
}

TEST_F(Stage2Training, SameSeedSameCurve) {
  Rng a(1), b(1);
  const Stage2Result x = train_stage2(inputs(), AdaptiveFusion(AfParams{16, 4, true}, a), quick(), 5);
  const Stage2Result y = train_stage2(inputs(), AdaptiveFusion(AfParams{16, 4, true}, b), quick(), 5);
  ASSERT_EQ(x.curve.size(), y.curve.size());
  for (std::size_t i = 0; i < x.curve.size(); ++i) EXPECT_EQ(x.curve[i].loss, y.curve[i].loss);
  EXPECT_EQ(x.dev_accuracy, y.dev_accuracy);
}

TEST_F(Stage2Training, RejectsBadConfig) {
  Stage2Config c = quick();
  c.batch_size = 0;
  Rng rng(1);
  EXPECT_THROW(train_stage2(inputs(), AdaptiveFusion(AfParams{16, 4, true}, rng), c, 1), ConfigError);
  Stage2Data missing = inputs();
  missing.encoders = nullptr;
  EXPECT_THROW(train_stage2(missing, AdaptiveFusion(AfParams{16, 4, true}, rng), quick(), 1),
               ValidationError);
}
