#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mbo/net.hpp"
#include "support.hpp"

using namespace mbo;
using namespace mbo::testing;

namespace {

NetConfig conditional_config() {
  NetConfig c;
  c.input_dim = 3;
  c.hidden_width = 8;
  c.hidden_depth = 4;
  c.time_embed_dim = 6;
  c.label_embed_dim = 4;
  c.has_null_token = true;
  c.output_dim = 3;
  return c;
}

NetConfig linear_like_config(std::size_t out) {
  NetConfig c;
  c.input_dim = 2;
  c.hidden_width = 2;
  c.hidden_depth = 2;
  c.output_dim = out;
  return c;
}

}  // namespace

TEST(Net, ConfigValidation) {
  NetConfig c = conditional_config();
  EXPECT_NO_THROW(c.validate());
  c.hidden_depth = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = conditional_config();
  c.time_embed_dim = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = conditional_config();
  c.label_embed_dim = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Net, ZeroWeightsGiveZeroOutput) {
  const NetConfig c = conditional_config();
  const Matrix x = random_matrix(5, 3, 1);
  const std::vector<int> t{0, 3, 9, 1, 2};
  const std::vector<double> y{0.1, 0.2, 0.3, 0.4, 0.5};
  const Matrix out = forward(zero_params(c), c, x, {t, y});
  for (double v : out.storage()) EXPECT_EQ(v, 0.0);
}

TEST(Net, IdenticalRowsGiveIdenticalOutputs) {
  const NetConfig c = conditional_config();
  const NetParams p = init_params(c, 3);
  Matrix x(4, 3);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) x(i, j) = 0.1 * static_cast<double>(j + 1);
  const std::vector<int> t(4, 7);
  const std::vector<double> y(4, 0.25);
  const Matrix out = forward(p, c, x, {t, y});
  for (std::size_t i = 1; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(out(i, j), out(0, j));
}

TEST(Net, ForwardMatchesScalarReference) {
  const NetConfig c = conditional_config();
  const NetParams p = random_params(c, 5);
  const Matrix x = random_matrix(6, 3, 6);
  const std::vector<int> t{0, 1, 5, 50, 120, 199};
  const std::vector<double> y{-0.5, 0.0, 0.5, 1.0, 1.5, 2.0};
  const std::vector<std::uint8_t> drop{0, 1, 0, 1, 0, 0};
  const Matrix out = forward(p, c, x, {t, y, drop});
  for (std::size_t i = 0; i < 6; ++i) {
    const std::vector<double> xr(x.row(i).begin(), x.row(i).end());
    const auto ref = reference_forward_row(p, c, xr, t[i], y[i], drop[i] != 0);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out(i, j), ref[j], 1e-12);
  }
}

TEST(Net, LabelAndNullTokenPathsDiffer) {
  // Frozen outputs of the scalar reference on init_params(conditional_config(), 2024),
  // x = (0.2, -0.4, 0.6), t = 17, y = 0.8.
  const NetConfig c = conditional_config();
  const NetParams p = init_params(c, 2024);
  const Matrix x(1, 3, std::vector<double>{0.2, -0.4, 0.6});
  const std::vector<int> t{17};
  const std::vector<double> y{0.8};
  const std::vector<std::uint8_t> keep{0}, drop{1};
  const Matrix with_label = forward(p, c, x, {t, y, keep});
  const Matrix with_null = forward(p, c, x, {t, y, drop});
  const std::vector<double> expect_label{-0.088737352451386226, 0.014862432986428101, -0.16862491288357831};
  const std::vector<double> expect_null{0.33325302492775222, -0.016913570298572381, 0.12538837705163591};
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(with_label(0, j), expect_label[j], 1e-12);
    EXPECT_NEAR(with_null(0, j), expect_null[j], 1e-12);
  }
  double diff = 0.0;
  for (std::size_t j = 0; j < 3; ++j) diff += std::abs(with_label(0, j) - with_null(0, j));
  EXPECT_GT(diff, 1e-3);
}

TEST(Net, ShapeMismatchIsArgumentError) {
  const NetConfig c = conditional_config();
  const NetParams p = init_params(c, 1);
  const Matrix x = random_matrix(2, 3, 1);
  const std::vector<int> t{1};
  EXPECT_THROW(forward(p, c, x, {t}), ArgumentError);
  EXPECT_THROW(forward(p, c, random_matrix(2, 4, 1)), ArgumentError);
  const std::vector<double> y{0.0, 0.0};
  NetParams short_p = p;
  short_p.values.pop_back();
  EXPECT_THROW(forward(short_p, c, x, {std::vector<int>{1, 2}, y}), ArgumentError);
}

TEST(Net, LinearCaseMatchesClosedFormGradient) {
  // With zero block weights and biases the network is out = (x W_in + b_in) W_out + b_out.
  const NetConfig c = linear_like_config(2);
  const ParamLayout L(c);
  NetParams p = zero_params(c);
  p.values[L.in_w + 0] = 1.0;  // W_in = I
  p.values[L.in_w + 3] = 1.0;
  p.values[L.out_w + 0] = 1.0;  // W_out = I
  p.values[L.out_w + 3] = 1.0;
  const Matrix x(1, 2, std::vector<double>{1.0, 2.0});
  const Matrix target(1, 2);
  const auto lg = grad_params(p, c, x, {}, [&](const Matrix& o) { return mse_head(o, target); });
  // loss = 1 + 4; d_out = 2 * out = (2, 4)
  EXPECT_DOUBLE_EQ(lg.loss, 5.0);
  const std::vector<double> gw{2, 4, 4, 8};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(lg.grad[L.out_w + i], gw[i]);
    EXPECT_DOUBLE_EQ(lg.grad[L.in_w + i], gw[i]);
  }
  EXPECT_DOUBLE_EQ(lg.grad[L.out_b + 0], 2.0);
  EXPECT_DOUBLE_EQ(lg.grad[L.out_b + 1], 4.0);
  // residual branch: silu'(0) = 1/2 scales the bias gradient of the second layer
  EXPECT_DOUBLE_EQ(lg.grad[L.blocks[0].bb + 0], 1.0);
  EXPECT_DOUBLE_EQ(lg.grad[L.blocks[0].bb + 1], 2.0);
}

TEST(Net, FiniteDifferenceOracleOnHalfSquaredNorm) {
  const std::vector<double> v{0.3, -1.2, 2.5, 0.0};
  auto f = [](const std::vector<double>& u) {
    double s = 0.0;
    for (double a : u) s += 0.5 * a * a;
    return s;
  };
  EXPECT_LT(check_gradient(v, v, f, 20, 1).max_rel_err, 1e-8);
}

class GradientSuite : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradientSuite, ParamGradientMatchesFiniteDifferences) {
  NetConfig c = conditional_config();
  c.hidden_depth = GetParam();
  const NetParams p = random_params(c, 11);
  ASSERT_LE(p.size(), 10000u);
  const Matrix x = random_matrix(5, 3, 12);
  const std::vector<int> t{0, 4, 9, 33, 150};
  const std::vector<double> y{0.1, 0.9, -0.3, 1.7, 0.5};
  const std::vector<std::uint8_t> drop{0, 1, 0, 0, 1};
  const Matrix target = random_matrix(5, 3, 13);
  const NetInput in{t, y, drop};
  auto head = [&](const Matrix& o) { return mse_head(o, target); };
  const auto lg = grad_params(p, c, x, in, head);
  auto f = [&](const std::vector<double>& v) { return head(forward(NetParams{v}, c, x, in)).loss; };
  const FdReport rep = check_gradient(p.values, lg.grad, f, 20, 14);
  EXPECT_LT(rep.max_rel_err, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Depths, GradientSuite, ::testing::Values(2, 4, 6));

TEST(Net, InputGradientOfLinearRegressorIsConstant) {
  const NetConfig c = linear_like_config(1);
  const ParamLayout L(c);
  NetParams p = zero_params(c);
  p.values[L.in_w + 0] = 2.0;
  p.values[L.in_w + 1] = 0.5;
  p.values[L.in_w + 2] = -1.0;
  p.values[L.in_w + 3] = 3.0;
  p.values[L.out_w + 0] = 1.5;
  p.values[L.out_w + 1] = -2.0;
  // w = W_in W_out = (2*1.5 + 0.5*-2, -1*1.5 + 3*-2) = (2, -7.5)
  const Matrix g = grad_input(p, c, random_matrix(4, 2, 3));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(g(i, 0), 2.0);
    EXPECT_DOUBLE_EQ(g(i, 1), -7.5);
  }
}

TEST(Net, InputGradientMatchesFiniteDifferences) {
  NetConfig c = conditional_config();
  c.output_dim = 1;
  c.label_embed_dim = 0;
  c.has_null_token = false;
  const NetParams p = random_params(c, 21);
  const Matrix x = random_matrix(10, 3, 22);
  const std::vector<int> t{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const Matrix g = grad_input(p, c, x, {t});
  double worst = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      Matrix up = x, down = x;
      up(i, j) += 1e-5;
      down(i, j) -= 1e-5;
      const double fd = (forward(p, c, up, {t})(i, 0) - forward(p, c, down, {t})(i, 0)) / 2e-5;
      worst = std::max(worst, rel_err(g(i, j), fd));
    }
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Net, ConstantOutputHasZeroInputGradient) {
  const NetConfig c = linear_like_config(1);
  NetParams p = random_params(c, 4);
  const ParamLayout L(c);
  for (std::size_t i = 0; i < c.hidden_width; ++i) p.values[L.out_w + i] = 0.0;
  const Matrix g = grad_input(p, c, random_matrix(3, 2, 5));
  for (double v : g.storage()) EXPECT_EQ(v, 0.0);
}

TEST(Net, NullTokenGradientOnlyFromDroppedRows) {
  const NetConfig c = conditional_config();
  const ParamLayout L(c);
  const NetParams p = random_params(c, 31);
  const Matrix x = random_matrix(4, 3, 32);
  const Matrix target = random_matrix(4, 3, 33);
  const std::vector<int> t{1, 2, 3, 4};
  const std::vector<double> y{0.2, 0.4, 0.6, 0.8};
  auto head = [&](const Matrix& o) { return mse_head(o, target); };

  const std::vector<std::uint8_t> none(4, 0), all(4, 1);
  const auto kept = grad_params(p, c, x, {t, y, none}, head);
  const auto dropped = grad_params(p, c, x, {t, y, all}, head);
  for (std::size_t k = 0; k < c.label_embed_dim; ++k) {
    EXPECT_EQ(kept.grad[L.null_embed + k], 0.0);
    EXPECT_NE(dropped.grad[L.null_embed + k], 0.0);
    EXPECT_EQ(dropped.grad[L.label_scale + k], 0.0);
    EXPECT_EQ(dropped.grad[L.label_shift + k], 0.0);
  }
}

TEST(Net, NonFiniteLossNamesStage) {
  const NetConfig c = linear_like_config(1);
  const NetParams p = init_params(c, 1);
  const Matrix x = random_matrix(2, 2, 1);
  try {
    grad_params(p, c, x, {}, [](const Matrix& o) { return HeadLoss{std::nan(""), Matrix(o.rows(), 1)}; },
                "probe stage");
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.stage(), "probe stage");
  }
}

TEST(TimeEmbedding, ZeroTimestepAndRange) {
  const auto e0 = time_embedding(0, 8);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(e0[2 * j], 0.0);
    EXPECT_EQ(e0[2 * j + 1], 1.0);
  }
  const auto e1 = time_embedding(1, 8), e2 = time_embedding(2, 8);
  EXPECT_NE(e1, e2);
  // each sin/cos pair has unit norm
  for (int t = 0; t < 200; t += 13) {
    double norm2 = 0.0;
    for (double v : time_embedding(t, 16)) norm2 += v * v;
    EXPECT_NEAR(norm2, 8.0, 1e-12);
  }
  EXPECT_THROW(time_embedding(1, 7), ConfigError);
}

TEST(Adam, ZeroGradientLeavesParams) {
  NetParams p{{1.0, -2.0, 3.0}};
  AdamState s(3, {});
  const std::vector<double> g(3, 0.0);
  auto [q, s2] = adam_step(p, g, s);
  EXPECT_EQ(q, p);
  EXPECT_EQ(s2.step, 1u);
}

TEST(Adam, ZeroBeta1KeepsRawGradient) {
  NetParams p{{0.0, 0.0}};
  AdamState s(2, {1e-3, 0.0, 0.9, 1e-8});
  for (int k = 0; k < 5; ++k) {
    const std::vector<double> g{0.1 * (k + 1), -0.3 * k};
    adam_update(p, g, s);
    EXPECT_EQ(s.m[0], g[0]);
    EXPECT_EQ(s.m[1], g[1]);
  }
}

TEST(Adam, FirstStepIsSignTimesLearningRate) {
  // m_hat = 0.5, v_hat = 0.25: update = -lr * 0.5 / (0.5 + 1e-8)
  NetParams p{{1.0}};
  AdamState s(1, {2e-5, 0.0, 0.9, 1e-8});
  adam_update(p, std::vector<double>{0.5}, s);
  EXPECT_NEAR(p.values[0], 1.0 - 2e-5 * 0.5 / (0.5 + 1e-8), 1e-18);
  EXPECT_NEAR(p.values[0], 1.0 - 2e-5, 1e-12);
}

TEST(Adam, NonFiniteGradientThrows) {
  NetParams p{{1.0}};
  AdamState s(1, {});
  EXPECT_THROW(adam_update(p, std::vector<double>{INFINITY}, s), NumericError);
}

TEST(Adam, ClipGlobalNorm) {
  std::vector<double> g{3.0, 4.0};
  EXPECT_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0], 0.6, 1e-15);
  EXPECT_NEAR(g[1], 0.8, 1e-15);
  std::vector<double> small{0.1};
  clip_global_norm(small, 1.0);
  EXPECT_EQ(small[0], 0.1);
}

TEST(Checkpoint, RoundTrip) {
  const NetConfig c = conditional_config();
  Checkpoint ck{"diffusion", c, random_params(c, 7), {{"metric", "FD"}}};
  std::stringstream ss;
  write_checkpoint(ss, ck);
  const Checkpoint back = read_checkpoint(ss);
  EXPECT_EQ(back.role, "diffusion");
  EXPECT_EQ(back.config, c);
  EXPECT_EQ(back.params, ck.params);
  EXPECT_EQ(back.extra.at("metric"), "FD");
}

TEST(Checkpoint, RejectsBadInput) {
  std::stringstream bad_magic("MBOV2\nend\n");
  EXPECT_THROW(read_checkpoint(bad_magic), ParseError);

  const NetConfig c = conditional_config();
  Checkpoint ck{"oracle", c, random_params(c, 7), {}};
  std::stringstream ss;
  write_checkpoint(ss, ck);
  std::string text = ss.str();
  const auto at = text.find("param_count=");
  text.replace(at, text.find('\n', at) - at, "param_count=12");
  std::stringstream wrong_count(text);
  EXPECT_THROW(read_checkpoint(wrong_count), ParseError);

  std::stringstream truncated(ss.str().substr(0, ss.str().size() - 16));
  EXPECT_THROW(read_checkpoint(truncated), ParseError);
}
