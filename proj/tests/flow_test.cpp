#include <cmath>

#include <gtest/gtest.h>

#include "ctrlflow/flow/cfm.hpp"
#include "ctrlflow/nn/gradcheck.hpp"

namespace ctrlflow::flow {
namespace {

VectorFieldConfig small_ff() {
  VectorFieldConfig c;
  c.hidden = {16, 16};
  c.time_width = 4;
  return c;
}

VectorFieldConfig small_attention() {
  VectorFieldConfig c;
  c.architecture = nn::Architecture::mini_attention;
  c.time_width = 4;
  c.attention.model_width = 8;
  c.attention.heads = 2;
  c.attention.ff_width = 8;
  c.attention.pos_width = 4;
  return c;
}

// Mean pairwise distance terms of the energy distance between sample sets
// (columns are points).
double energy_distance(const Matrix& x, const Matrix& y) {
  auto mean_dist = [](const Matrix& a, const Matrix& b) {
    double s = 0.0;
    for (Index i = 0; i < a.cols(); ++i) {
      for (Index j = 0; j < b.cols(); ++j) s += (a.col(i) - b.col(j)).norm();
    }
    return s / static_cast<double>(a.cols() * b.cols());
  };
  return 2.0 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y);
}

TEST(FlowState, FlattenRoundTrip) {
  FlowState s;
  s.payload = Matrix::Random(7, 5);
  s.t = 0.3;
  const Vector flat = s.flatten();
  EXPECT_EQ(flat(7), s.payload(0, 1));  // step-major
  const FlowState back = FlowState::unflatten(flat, 7, 0.3);
  EXPECT_EQ(back.payload, s.payload);
  EXPECT_EQ(back.h(), 5);
  EXPECT_THROW(FlowState::unflatten(flat, 6), ConfigError);
}

TEST(PathSample, StartPoint) {
  Rng rng(1);
  const Matrix tau1 = Matrix::Random(6, 3);
  const PathBatch b = make_path_batch(tau1, rng, 0.01, 0.0);
  EXPECT_TRUE(b.noisy.isApprox(b.tau0 + 0.01 * b.eps, 1e-15));
  EXPECT_EQ(b.target, tau1 - b.tau0);
}

TEST(PathSample, EndPointExact) {
  Rng rng(2);
  const Matrix tau1 = Matrix::Random(6, 3);
  const PathBatch b = make_path_batch(tau1, rng, 0.0, 1.0);
  EXPECT_EQ(b.noisy, tau1);
}

TEST(PathSample, Midpoint) {
  Rng rng(3);
  const Matrix zeros = Matrix::Zero(4, 2);
  const PathBatch b = make_path_batch(Matrix::Ones(4, 2), rng, 0.0, 0.5, &zeros);
  EXPECT_EQ(b.noisy, Matrix::Constant(4, 2, 0.5));
}

TEST(PathSample, InvariantsOnRandomDraws) {
  Rng rng(4);
  const Matrix tau1 = Matrix::Random(5, 64);
  const PathBatch b = make_path_batch(tau1, rng, 0.05);
  for (Index j = 0; j < 64; ++j) {
    EXPECT_GE(b.t(j), 0.0);
    EXPECT_LE(b.t(j), 1.0);
    const Vector mu = b.t(j) * tau1.col(j) + (1 - b.t(j)) * b.tau0.col(j);
    EXPECT_TRUE(b.mu.col(j).isApprox(mu, 1e-14));
  }
  EXPECT_TRUE(b.noisy.isApprox(b.mu + 0.05 * b.eps, 1e-14));
}

TEST(CfmLoss, ZeroWhenOutputMatchesTarget) {
  Rng rng(5);
  VectorFieldModel m(small_ff(), 3, 4, rng);
  m.parameters().setZero();
  const Matrix tau = Matrix::Random(6, 4);
  const PathBatch b = make_path_batch(tau, rng, 0.01, std::nullopt, &tau);
  EXPECT_EQ(cfm_loss(m, b).value, 0.0);
}

TEST(CfmLoss, ZeroModelUnitTargets) {
  Rng rng(6);
  VectorFieldModel m(small_ff(), 3, 4, rng);
  m.parameters().setZero();
  const Matrix tau0 = Matrix::Random(9, 4);
  const Matrix tau1 = tau0.array() + 1.0;
  const PathBatch b = make_path_batch(tau1, rng, 0.01, std::nullopt, &tau0);
  EXPECT_DOUBLE_EQ(cfm_loss(m, b).value, 1.0);
}

TEST(CfmLoss, MatchesNaiveLoop) {
  for (const VectorFieldConfig& cfg : {small_ff(), small_attention()}) {
    Rng rng(7);
    VectorFieldModel m(cfg, 3, 5, rng);
    const PathBatch b = make_path_batch(rng.normal_matrix(12, 6), rng, 0.01);
    double naive = 0.0;
    for (Index j = 0; j < 6; ++j) {
      const Vector v = m.evaluate(Matrix(b.noisy.col(j)), b.t(j));
      for (Index i = 0; i < 12; ++i) naive += (v(i) - b.target(i, j)) * (v(i) - b.target(i, j));
    }
    naive /= 72.0;
    EXPECT_NEAR(cfm_loss(m, b).value, naive, 1e-12);
  }
}

TEST(CfmLoss, NonNegativeOnRandomBatches) {
  Rng rng(8);
  VectorFieldModel m(small_ff(), 2, 3, rng);
  for (int k = 0; k < 20; ++k) {
    const PathBatch b = make_path_batch(rng.normal_matrix(2 * (1 + k % 3), 4), rng, 0.01);
    EXPECT_GE(cfm_loss(m, b).value, 0.0);
  }
}

TEST(KlRegularizer, ZeroForIdenticalMoments) {
  Rng rng(9);
  VectorFieldModel m(small_ff(), 2, 3, rng);
  m.parameters().setZero();
  const Matrix tau = rng.normal_matrix(6, 16);
  Tape tape;
  const KlResult kl = kl_endpoint_regularizer(tape, m, tau, tau, 1e-4, nullptr);
  EXPECT_NEAR(kl.value.scalar(), 0.0, 1e-14);
  EXPECT_EQ(kl.floor_hits, 0);
}

TEST(KlRegularizer, StandardFormula) {
  EXPECT_DOUBLE_EQ(diag_gaussian_kl(Vector::Zero(1), Vector::Ones(1), Vector::Ones(1), Vector::Ones(1)), 0.5);
}

TEST(KlRegularizer, MatchesHandFormulaOnRandomMoments) {
  Rng rng(10);
  for (int k = 0; k < 10; ++k) {
    const Vector mh = rng.normal_matrix(5, 1), m = rng.normal_matrix(5, 1);
    const Vector vh = rng.normal_matrix(5, 1).cwiseAbs().array() + 0.1;
    const Vector v = rng.normal_matrix(5, 1).cwiseAbs().array() + 0.1;
    double hand = 0.0;
    for (int i = 0; i < 5; ++i) {
      hand += std::log(std::sqrt(v(i)) / std::sqrt(vh(i))) +
              (vh(i) + (mh(i) - m(i)) * (mh(i) - m(i))) / (2 * v(i)) - 0.5;
    }
    EXPECT_NEAR(diag_gaussian_kl(mh, vh, m, v), hand, 1e-10);
  }
  // The tape value agrees with the closed form on the realised moments.
  VectorFieldModel model(small_ff(), 2, 2, rng);
  const Matrix tau1 = rng.normal_matrix(4, 12), tau0 = rng.normal_matrix(4, 12);
  Tape tape;
  const KlResult kl = kl_endpoint_regularizer(tape, model, tau1, tau0, 1e-4, nullptr);
  const Matrix end = tau0 + model.evaluate(tau0, 0.0);
  const Vector mh = end.rowwise().mean(), m = tau1.rowwise().mean();
  const Vector vh = (end.colwise() - mh).array().square().rowwise().mean();
  const Vector v = (tau1.colwise() - m).array().square().rowwise().mean();
  EXPECT_NEAR(kl.value.scalar(), diag_gaussian_kl(mh, vh, m, v), 1e-10);
}

TEST(KlRegularizer, FloorIsFlagged) {
  Rng rng(11);
  VectorFieldModel m(small_ff(), 1, 2, rng);
  const Matrix tau1 = Matrix::Ones(2, 8);  // zero variance
  Tape tape;
  const KlResult kl = kl_endpoint_regularizer(tape, m, tau1, rng.normal_matrix(2, 8), 1e-4, nullptr);
  EXPECT_EQ(kl.floor_hits, 2);
  EXPECT_TRUE(std::isfinite(kl.value.scalar()));
  EXPECT_THROW(kl_endpoint_regularizer(tape, m, Matrix::Ones(2, 1), Matrix::Ones(2, 1), 1e-4, nullptr),
               ConfigError);
}

class FlowGradient : public ::testing::TestWithParam<int> {};

TEST_P(FlowGradient, CfmLoss) {
  for (const VectorFieldConfig& cfg : {small_ff(), small_attention()}) {
    Rng rng(100 + GetParam());
    VectorFieldModel m(cfg, 3, 4, rng);
    const int h = 1 + GetParam() % 4;
    const PathBatch b = make_path_batch(rng.normal_matrix(3 * h, 5), rng, 0.01);
    const LossGrad lg = cfm_loss(m, b);
    auto f = [&](const Vector& p) {
      VectorFieldModel m2 = m;
      m2.parameters() = p;
      return cfm_loss(m2, b).value;
    };
    EXPECT_LE(nn::check_gradient(f, m.parameters(), lg.grad).relative_error, 1e-4);
  }
}

TEST_P(FlowGradient, KlRegularizer) {
  for (const VectorFieldConfig& cfg : {small_ff(), small_attention()}) {
    Rng rng(200 + GetParam());
    VectorFieldModel m(cfg, 2, 3, rng);
    const Matrix tau1 = rng.normal_matrix(6, 8), tau0 = rng.normal_matrix(6, 8);
    Tape tape;
    Vector grad = Vector::Zero(m.parameter_count());
    tape.backward(kl_endpoint_regularizer(tape, m, tau1, tau0, 1e-4, &grad).value);
    auto f = [&](const Vector& p) {
      VectorFieldModel m2 = m;
      m2.parameters() = p;
      Tape t2;
      return kl_endpoint_regularizer(t2, m2, tau1, tau0, 1e-4, nullptr).value.scalar();
    };
    EXPECT_LE(nn::check_gradient(f, m.parameters(), grad).relative_error, 1e-4);
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, FlowGradient, ::testing::Range(0, 10));

TEST(VectorField, ShapesForEveryLength) {
  for (const VectorFieldConfig& cfg : {small_ff(), small_attention()}) {
    Rng rng(12);
    VectorFieldModel m(cfg, 3, 6, rng);
    for (int h = 1; h <= 6; ++h) {
      const Matrix y = m.evaluate(rng.normal_matrix(3 * h, 2), 0.4);
      EXPECT_EQ(y.rows(), 3 * h);
      EXPECT_EQ(y.cols(), 2);
    }
    EXPECT_THROW(m.evaluate(Matrix::Zero(21, 1), 0.0), ConfigError);
    VectorFieldModel z(cfg, 3, 6, rng, true);
    EXPECT_EQ(z.evaluate(rng.normal_matrix(9, 4), 0.1).rows(), 1);
  }
}

TEST(VectorField, TapeAgreesWithPlainEvaluation) {
  for (bool scalar : {false, true}) {
    for (const VectorFieldConfig& cfg : {small_ff(), small_attention()}) {
      Rng rng(13);
      VectorFieldModel m(cfg, 3, 5, rng, scalar);
      const Matrix X = rng.normal_matrix(9, 4);
      const RowVector t = RowVector::LinSpaced(4, 0, 1);
      Tape tape;
      EXPECT_TRUE(m.evaluate(tape, tape.constant(X), t, nullptr).value().isApprox(m.evaluate(X, t), 1e-14));
    }
  }
}

TEST(VectorField, CheckpointRoundTrip) {
  Rng rng(14);
  VectorFieldModel m(small_attention(), 3, 5, rng);
  BlobWriter w;
  m.save(w, "vf");
  EXPECT_TRUE(VectorFieldModel::load(BlobReader::parse(w.str()), "vf") == m);
}

TEST(Ode, ConstantFieldIsExact) {
  const Matrix c = (Matrix(2, 1) << 0.5, -2).finished();
  const Field v = [&](const Matrix& X, double) { return Matrix(c.replicate(1, X.cols())); };
  const Matrix x = (Matrix(2, 1) << 1, 1).finished();
  for (Scheme s : {Scheme::euler, Scheme::midpoint, Scheme::rk4}) {
    EXPECT_TRUE(advance(v, x, 0, 1, {7, s}).isApprox(x + c, 1e-14));
  }
}

TEST(Ode, LinearFieldMatchesExponential) {
  const Field v = [](const Matrix& X, double) { return X; };
  const Matrix x = Matrix::Constant(1, 1, 1.5);
  EXPECT_NEAR(advance(v, x, 0, 1, {100, Scheme::midpoint})(0, 0), 1.5 * std::exp(1.0), 1e-4);
  EXPECT_NEAR(advance(v, x, 0, 1, {100, Scheme::rk4})(0, 0), 1.5 * std::exp(1.0), 1e-9);
}

TEST(Ode, IdentityAndInverse) {
  const Field v = [](const Matrix& X, double t) { return Matrix(X.array().sin() + t); };
  const Matrix x = Matrix::Random(3, 2);
  EXPECT_EQ(advance(v, x, 0.3, 0.3, {}), x);
  const Matrix y = advance(v, x, 0.1, 0.9, {200, Scheme::rk4});
  EXPECT_TRUE(advance(v, y, 0.9, 0.1, {200, Scheme::rk4}).isApprox(x, 1e-8));
}

TEST(TrainCfm, ZeroEpochsLeaveModelUnchanged) {
  Rng rng(15);
  VectorFieldModel m(small_ff(), 1, 3, rng);
  const VectorFieldModel before = m;
  nn::Adam opt({1e-3}, m.parameter_count());
  TrainCfmConfig cfg;
  cfg.epochs = 0;
  const PayloadSource src = [](int h, int n, Rng& r) { return r.normal_matrix(h, n); };
  EXPECT_TRUE(train_cfm(m, opt, src, cfg, rng).epochs.empty());
  EXPECT_TRUE(m == before);
}

TEST(TrainCfm, DeterministicCurves) {
  auto run = [] {
    Rng rng(16);
    VectorFieldModel m(small_ff(), 2, 3, rng);
    nn::Adam opt({1e-3}, m.parameter_count());
    TrainCfmConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 16;
    const PayloadSource src = [](int h, int n, Rng& r) { return Matrix(r.normal_matrix(2 * h, n).array() + 1.0); };
    std::vector<double> out;
    for (const CfmEpoch& e : train_cfm(m, opt, src, cfg, rng).epochs) {
      out.push_back(e.cfm_loss);
      out.push_back(e.kl_term);
    }
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainCfm, DivergenceIsReported) {
  Rng rng(17);
  VectorFieldModel m(small_ff(), 1, 2, rng);
  nn::Adam opt({1e-3}, m.parameter_count());
  TrainCfmConfig cfg;
  cfg.epochs = 20;
  cfg.steps_per_epoch = 1;
  int calls = 0;
  const PayloadSource src = [&calls](int h, int n, Rng& r) {
    return Matrix(r.normal_matrix(h, n) * std::pow(4.0, calls++));
  };
  EXPECT_THROW(train_cfm(m, opt, src, cfg, rng), TrainingDivergedError);
}

TEST(TrainCfm, RecoversConstantSequenceMean) {
  Rng rng(18);
  VectorFieldConfig vc;
  vc.hidden = {64, 64};
  VectorFieldModel m(vc, 1, 4, rng);
  nn::Adam opt({3e-3}, m.parameter_count());
  TrainCfmConfig cfg;
  cfg.epochs = 40;
  cfg.steps_per_epoch = 10;
  const PayloadSource src = [](int h, int n, Rng& r) {
    Matrix x(h, n);
    for (Index j = 0; j < n; ++j) x.col(j).setConstant(r.normal(2.0, 0.1));
    return x;
  };
  const CfmReport rep = train_cfm(m, opt, src, cfg, rng);
  EXPECT_LT(rep.epochs.back().cfm_loss, rep.epochs.front().cfm_loss);
  const Matrix x = sample_endpoints(m, 4, 256, rng);
  EXPECT_NEAR(x.mean(), 2.0, 0.1);
}

TEST(TrainCfm, EnergyDistanceOnGaussianMixture) {
  Rng rng(19);
  const PayloadSource mixture = [](int h, int n, Rng& r) {
    Matrix x(2 * h, n);
    for (Index j = 0; j < n; ++j) {
      const double c = r.uniform() < 0.5 ? -1.5 : 1.5;
      for (Index i = 0; i < x.rows(); ++i) x(i, j) = r.normal(c, 0.3);
    }
    return x;
  };
  VectorFieldConfig vc;
  vc.hidden = {64, 64};
  VectorFieldModel m(vc, 2, 1, rng);
  const Matrix held_out = mixture(1, 400, rng);
  const double before = energy_distance(sample_endpoints(m, 1, 400, rng), held_out);
  nn::Adam opt({3e-3}, m.parameter_count());
  TrainCfmConfig cfg;
  cfg.epochs = 60;
  cfg.steps_per_epoch = 10;
  cfg.batch_size = 128;
  train_cfm(m, opt, mixture, cfg, rng);
  const double after = energy_distance(sample_endpoints(m, 1, 400, rng), held_out);
  EXPECT_LE(10.0 * after, before) << "before " << before << " after " << after;
}

}  // namespace
}  // namespace ctrlflow::flow
