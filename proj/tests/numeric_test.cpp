#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "omnibind/autodiff.hpp"
#include "omnibind/error.hpp"
#include "omnibind/optim.hpp"
#include "omnibind/serialize.hpp"
#include "omnibind/tensor.hpp"

using namespace omnibind;
using omnibind::testing::max_gradient_error;
using omnibind::testing::random_stochastic_rows;
using omnibind::testing::random_tensor;

namespace {

Tensor triple_loop(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

// Probes every output entry of a non-scalar op with fixed random weights.
Var weighted_sum(Tape& tape, const Var& out, const Tensor& weights) {
  return sum(hadamard(out, tape.constant(weights)));
}

}  // namespace

TEST(Matmul, IdentityAndPermutation) {
  const Tensor m = Tensor::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(Tensor::identity(2), m), m);
  const Tensor swap = Tensor::from_rows({{0, 1}, {1, 0}});
  EXPECT_EQ(matmul(Tensor::identity(2), swap), swap);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor a = random_tensor(rng, 3, 4);
    const Tensor b = random_tensor(rng, 4, 2);
    const Tensor got = matmul(a, b);
    const Tensor want = triple_loop(a, b);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
    const Tensor nt = matmul_nt(a, transpose(b));
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(nt[i], want[i], 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor(2, 3), Tensor(2, 3));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2x3)"), std::string::npos);
    EXPECT_NE(msg.find("by (2x3)"), std::string::npos);
  }
}

TEST(Softmax, Examples) {
  const Tensor half = rowwise_softmax(Tensor::from_rows({{0, 0}}), 1.0);
  EXPECT_DOUBLE_EQ(half[0], 0.5);
  EXPECT_DOUBLE_EQ(half[1], 0.5);

  const Tensor y = rowwise_softmax(Tensor::from_rows({{1, 2, 3}}), 1.0);
  EXPECT_NEAR(y[0], 0.0900, 1e-4);
  EXPECT_NEAR(y[1], 0.2447, 1e-4);
  EXPECT_NEAR(y[2], 0.6652, 1e-4);

  for (double c : {-40.0, 7.5, 1000.0}) {
    const Tensor s = rowwise_softmax(Tensor::from_rows({{c + 1, c + 2, c + 3}}), 1.0);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(s[j], y[j], 1e-12);
  }
  EXPECT_THROW(rowwise_softmax(Tensor(1, 2), 0.0), ConfigError);
  EXPECT_THROW(rowwise_softmax(Tensor(1, 2), -1.0), ConfigError);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor x(4, 6);
    for (double& v : x.values()) v = rng.uniform(-50.0, 50.0);
    const double tau = rng.uniform(0.01, 3.0);
    const Tensor y = rowwise_softmax(x, tau);
    ASSERT_TRUE(y.all_finite());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double s = 0.0;
      for (double v : y.row(i)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(L2Normalize, Examples) {
  const Tensor y = l2_normalize_rows(Tensor::from_rows({{3, 4}}));
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
  const Tensor unit = Tensor::from_rows({{0.6, 0.8}});
  const Tensor again = l2_normalize_rows(unit);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(again[i], unit[i], 1e-12);

  Rng rng(3);
  const Tensor r = l2_normalize_rows(random_tensor(rng, 4, 8));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(norm(r.row(i)), 1.0, 1e-9);
}

TEST(L2Normalize, ZeroRowIdentifiesIndex) {
  try {
    l2_normalize_rows(Tensor::from_rows({{1, 0}, {0, 0}}));
    FAIL();
  } catch (const DegenerateInputError& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
}

TEST(KlRows, Examples) {
  const Tensor p = Tensor::from_rows({{0.5, 0.5}});
  const Tensor q = Tensor::from_rows({{0.9, 0.1}});
  EXPECT_NEAR(kl_rows(p, p), 0.0, 1e-12);
  EXPECT_NEAR(kl_rows(p, q), 0.5108, 1e-3);
  EXPECT_DOUBLE_EQ(kl_rows(Tensor::from_rows({{1.0, 0.0}}), Tensor::from_rows({{0.5, 0.5}})),
                   std::log(2.0));
}

TEST(KlRows, Errors) {
  EXPECT_THROW(kl_rows(Tensor(1, 2, 0.5), Tensor(1, 3, 1.0 / 3)), DimensionError);
  EXPECT_THROW(kl_rows(Tensor::from_rows({{0.7, 0.7}}), Tensor(1, 2, 0.5)), ValidationError);
  EXPECT_THROW(kl_rows(Tensor(1, 2, 0.5), Tensor::from_rows({{1.5, -0.5}})), ValidationError);
}

TEST(KlRows, GibbsInequality) {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor p = random_stochastic_rows(rng, 3, 5);
    const Tensor q = random_stochastic_rows(rng, 3, 5);
    EXPECT_GE(kl_rows(p, q), -1e-9);
    EXPECT_NEAR(kl_rows(p, p), 0.0, 1e-9);
  }
}

TEST(Backward, LinearAndQuadratic) {
  Parameter x{"x", Tensor::from_rows({{1, -2}, {3, 0.5}})};
  {
    Tape tape;
    const auto grads = tape.backward(sum(tape.param(x)));
    EXPECT_EQ(grads.at(&x), Tensor(2, 2, 1.0));
  }
  Parameter y{"y", Tensor::from_rows({{1, 2}})};
  Tape tape;
  const Var v = tape.param(y);
  const auto grads = tape.backward(sum(hadamard(v, v)));
  EXPECT_EQ(grads.at(&y), Tensor::from_rows({{2, 4}}));
}

TEST(Backward, Errors) {
  Parameter x{"x", Tensor(2, 2, 1.0)};
  Tape tape;
  const Var v = tape.param(x);
  EXPECT_THROW(tape.backward(v), DimensionError);
  const Var c = sum(tape.constant(Tensor(2, 2, 1.0)));
  EXPECT_THROW(tape.backward(c), ValidationError);
  Tape other;
  const Var foreign = sum(other.param(x));
  EXPECT_THROW(tape.backward(foreign), ValidationError);
}

TEST(Backward, ConstantsReceiveNoGradient) {
  Parameter w{"w", Tensor(3, 2, 0.5)};
  Tape tape;
  const Var frozen = tape.constant(Tensor(2, 3, 1.0));
  const auto grads = tape.backward(sum(matmul(frozen, tape.param(w))));
  EXPECT_EQ(grads.size(), 1u);
  EXPECT_TRUE(grads.contains(&w));
}

struct OpCase {
  const char* name;
  std::function<double(std::uint64_t)> error_for_seed;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EXPECT_LT(GetParam().error_for_seed(seed), 1e-4) << GetParam().name << " seed " << seed;
  }
}

namespace {

double binary_case(std::uint64_t seed, std::size_t ar, std::size_t ac, std::size_t br,
                   std::size_t bc, Var (*op)(const Var&, const Var&), std::size_t outr,
                   std::size_t outc) {
  Rng rng(seed);
  Parameter a{"a", random_tensor(rng, ar, ac)};
  Parameter b{"b", random_tensor(rng, br, bc)};
  const Tensor w = random_tensor(rng, outr, outc);
  return max_gradient_error({&a, &b}, [&](Tape& t) {
    return weighted_sum(t, op(t.param(a), t.param(b)), w);
  });
}

double unary_case(std::uint64_t seed, std::size_t r, std::size_t c,
                  const std::function<Var(const Var&)>& op, std::size_t outr, std::size_t outc,
                  double offset = 0.0) {
  Rng rng(seed);
  Parameter a{"a", random_tensor(rng, r, c)};
  for (double& v : a.value.values()) v += offset;
  const Tensor w = random_tensor(rng, outr, outc);
  return max_gradient_error({&a}, [&](Tape& t) { return weighted_sum(t, op(t.param(a)), w); });
}

const OpCase kOpCases[] = {
    {"matmul", [](std::uint64_t s) { return binary_case(s, 3, 4, 4, 2, &matmul, 3, 2); }},
    {"matmul_nt", [](std::uint64_t s) { return binary_case(s, 3, 4, 2, 4, &matmul_nt, 3, 2); }},
    {"add", [](std::uint64_t s) { return binary_case(s, 2, 3, 2, 3, &add, 2, 3); }},
    {"sub", [](std::uint64_t s) { return binary_case(s, 2, 3, 2, 3, &sub, 2, 3); }},
    {"hadamard", [](std::uint64_t s) { return binary_case(s, 2, 3, 2, 3, &hadamard, 2, 3); }},
    {"add_row", [](std::uint64_t s) { return binary_case(s, 4, 3, 1, 3, &add_row, 4, 3); }},
    {"gelu", [](std::uint64_t s) { return unary_case(s, 3, 4, [](const Var& x) { return gelu(x); }, 3, 4); }},
    {"softmax", [](std::uint64_t s) {
       return unary_case(s, 4, 4, [](const Var& x) { return rowwise_softmax(x, 0.7); }, 4, 4);
     }},
    {"l2_normalize", [](std::uint64_t s) {
       return unary_case(s, 4, 8, [](const Var& x) { return l2_normalize_rows(x); }, 4, 8);
     }},
    {"row_sum_normalize", [](std::uint64_t s) {
       return unary_case(s, 3, 4, [](const Var& x) { return row_sum_normalize(x); }, 3, 4, 4.0);
     }},
    {"mean_rows", [](std::uint64_t s) {
       return unary_case(s, 4, 5, [](const Var& x) { return mean_rows(x); }, 1, 5);
     }},
    {"slice_concat", [](std::uint64_t s) {
       return unary_case(s, 3, 6, [](const Var& x) {
         const Var parts[] = {slice_cols(x, 4, 2), scale(slice_cols(x, 0, 3), 2.0)};
         return concat_cols(parts);
       }, 3, 5);
     }},
    {"stack_row", [](std::uint64_t s) {
       return unary_case(s, 3, 4, [](const Var& x) {
         const Var parts[] = {row(x, 2), row(x, 0), row(x, 2)};
         return stack_rows(parts);
       }, 3, 4);
     }},
    {"cross_entropy", [](std::uint64_t s) {
       Rng rng(s);
       Parameter a{"a", random_tensor(rng, 4, 4)};
       const std::vector<std::size_t> targets{0, 3, 1, 1};
       return max_gradient_error({&a}, [&](Tape& t) {
         return cross_entropy_rows(t.param(a), targets, 0.5);
       });
     }},
    {"kl_logits", [](std::uint64_t s) {
       Rng rng(s);
       Parameter a{"a", random_tensor(rng, 4, 4)};
       const Tensor p = random_stochastic_rows(rng, 4, 4);
       return max_gradient_error({&a}, [&](Tape& t) { return kl_rows_logits(p, t.param(a), 0.3); });
     }},
    {"kl_rows", [](std::uint64_t s) {
       Rng rng(s);
       Parameter a{"a", random_tensor(rng, 3, 4)};
       for (double& v : a.value.values()) v = std::abs(v) + 0.5;
       const Tensor p = random_stochastic_rows(rng, 3, 4);
       return max_gradient_error({&a}, [&](Tape& t) { return kl_rows(p, row_sum_normalize(t.param(a))); });
     }},
};

}  // namespace

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(kOpCases),
                         [](const auto& info) { return std::string(info.param.name); });

TEST(Schedule, WarmupThenLinearDecay) {
  EXPECT_DOUBLE_EQ(linear_warmup_factor(0, 4, 12), 0.0);
  EXPECT_DOUBLE_EQ(linear_warmup_factor(2, 4, 12), 0.5);
  EXPECT_DOUBLE_EQ(linear_warmup_factor(4, 4, 12), 1.0);
  EXPECT_DOUBLE_EQ(linear_warmup_factor(8, 4, 12), 0.5);
  EXPECT_DOUBLE_EQ(linear_warmup_factor(12, 4, 12), 0.0);
  EXPECT_DOUBLE_EQ(linear_warmup_factor(20, 4, 12), 0.0);
  EXPECT_DOUBLE_EQ(linear_warmup_factor(20, 0, 0), 1.0);
}

TEST(AdamW, ZeroGradientLeavesParametersUnchanged) {
  Parameter p{"p", Tensor::from_rows({{1.5, -2.0}})};
  AdamW opt({.lr = 0.1, .weight_decay = 0.0}, {&p});
  for (int i = 0; i < 5; ++i) opt.step({});
  EXPECT_EQ(p.value, Tensor::from_rows({{1.5, -2.0}}));
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  Parameter p{"p", Tensor(1, 1, 0.0)};
  AdamW opt({.lr = 0.1, .weight_decay = 0.0}, {&p});
  Gradients g;
  g.emplace(&p, Tensor(1, 1, 1.0));
  opt.step(g);
  EXPECT_NEAR(p.value[0], -0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(opt.step_count(), 1u);
}

TEST(AdamW, DecoupledWeightDecay) {
  Parameter p{"p", Tensor(1, 1, 2.0)};
  AdamW opt({.lr = 0.1, .weight_decay = 0.01}, {&p});
  opt.step({});
  EXPECT_DOUBLE_EQ(p.value[0], 2.0 * (1.0 - 0.1 * 0.01));
}

TEST(AdamW, DeterministicAndShapeChecked) {
  auto run = [] {
    Rng rng(9);
    Parameter p{"p", random_tensor(rng, 3, 3)};
    AdamW opt({.lr = 0.01, .warmup_steps = 3, .total_steps = 20}, {&p});
    for (int i = 0; i < 20; ++i) {
      Gradients g;
      g.emplace(&p, random_tensor(rng, 3, 3));
      opt.step(g);
    }
    return p.value;
  };
  EXPECT_EQ(run(), run());

  Parameter p{"p", Tensor(2, 2)};
  AdamW opt({}, {&p});
  Gradients bad;
  bad.emplace(&p, Tensor(1, 2));
  EXPECT_THROW(opt.step(bad), DimensionError);
}

TEST(ClipGradNorm, RescalesJointNorm) {
  Parameter a{"a", Tensor(1, 1)}, b{"b", Tensor(1, 1)};
  Gradients g;
  g.emplace(&a, Tensor(1, 1, 3.0));
  g.emplace(&b, Tensor(1, 1, 4.0));
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, {&a, &b}, 1.0), 5.0);
  EXPECT_NEAR(g.at(&a)[0], 0.6, 1e-6);
  EXPECT_NEAR(g.at(&b)[0], 0.8, 1e-6);
}

TEST(Serialization, ByteLayout) {
  const auto bytes = encode_tensor(Tensor::from_rows({{1.0, -2.0}}));
  ASSERT_EQ(bytes.size(), 20u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "OBT1");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 2);
  // 1.0f = 0x3f800000, little-endian
  EXPECT_EQ(bytes[12], 0x00);
  EXPECT_EQ(bytes[15], 0x3f);
  EXPECT_EQ(bytes[19], 0xc0);
}

TEST(Serialization, RoundTripEqualsFloatRounding) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor t = random_tensor(rng, 1 + rng.below(6), 1 + rng.below(6), 10.0);
    EXPECT_EQ(decode_tensor(encode_tensor(t)), round_to_float(t));
  }
}

TEST(Serialization, RejectsMalformedInput) {
  auto bytes = encode_tensor(Tensor(2, 2, 1.0));
  bytes.pop_back();
  EXPECT_THROW(decode_tensor(bytes), IoError);
  bytes = encode_tensor(Tensor(1, 1));
  bytes[0] = 'X';
  EXPECT_THROW(decode_tensor(bytes), IoError);
}
