#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "ctrlflow/guidance/guidance.hpp"
#include "ctrlflow/nn/gradcheck.hpp"

namespace ctrlflow::guidance {
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

env::Trajectory constant_reward(double r, int h) {
  env::Trajectory t;
  for (int i = 0; i < h; ++i) t.transitions.push_back({Vector::Zero(1), Vector::Zero(1), r, Vector::Zero(1)});
  return t;
}

TEST(Energy, Examples) {
  EnergyFn J;
  J.returns = {0.0, 10.0, 0.999, 2};
  EXPECT_DOUBLE_EQ(J.of_return(10.0), -1.0);
  EXPECT_DOUBLE_EQ(J.of_return(0.0), 0.0);
  J.scale = 2.0;
  EXPECT_DOUBLE_EQ(J.of_return(5.0), -1.0);
  EXPECT_DOUBLE_EQ(J.of_return(50.0), -2.0);
  EXPECT_DOUBLE_EQ(J(constant_reward(1.0, 4), 0.5), -2.0 * 1.875 / 10.0);
  EXPECT_THROW(J(env::Trajectory{}, 0.5), DomainError);
  EXPECT_THROW(EnergyFn{}.of_return(1.0), NotReadyError);
}

TEST(Energy, MonotoneInReturn) {
  Rng rng(1);
  EnergyFn J;
  for (int i = 0; i < 50; ++i) J.returns.observe(rng.normal(0.0, 3.0));
  for (int i = 0; i < 200; ++i) {
    const double a = rng.normal(0.0, 2.0), b = rng.normal(0.0, 2.0);
    if (a > b) {
      EXPECT_LE(J.of_return(a), J.of_return(b));
    }
    EXPECT_TRUE(std::isfinite(J.of_return(a)));
  }
}

TEST(Energy, NormalizerBoundsRelax) {
  ReturnNormalizer n;
  n.observe(0.0);
  n.observe(10.0);
  n.observe(5.0);
  EXPECT_NEAR(n.lo, 0.999 * (0.001 * 10.0) + 0.001 * 5.0, 1e-12);
  EXPECT_NEAR(n.hi, 0.999 * 10.0 + 0.001 * 5.0, 1e-12);
  EXPECT_THROW(n.observe(std::nan("")), DomainError);
  BlobWriter w;
  n.save(w, "rn");
  const ReturnNormalizer m = ReturnNormalizer::load(BlobReader::parse(w.str()), "rn");
  EXPECT_EQ(m.lo, n.lo);
  EXPECT_EQ(m.hi, n.hi);
  EXPECT_EQ(m.count, 3);
}

TEST(Energy, PayloadReturnsUseEnvironmentUnits) {
  const env::Normalizer norm(Vector::Constant(2, 1.0), Vector::Constant(2, 2.0));
  EnergyFn J;
  J.returns = {0.0, 4.0, 0.999, 2};
  Matrix X(4, 1);
  X << 0, 0.5, 0, -0.5;  // rewards 2 and 0
  EXPECT_DOUBLE_EQ(J.of_payloads(X, norm, 0.5)(0), -0.5);
  EXPECT_THROW(J.of_payloads(Matrix::Zero(3, 1), norm, 0.5), ConfigError);
}

TEST(GuidanceTarget, Examples) {
  const Matrix v = Matrix::Ones(2, 1);
  EXPECT_EQ(guidance_target(v, RowVector::Constant(1, 3.0), RowVector::Constant(1, 3.0)).norm(), 0.0);
  const RowVector w0 = tilt_weights(RowVector::Zero(1));
  EXPECT_EQ(guidance_target(v, w0, RowVector::Ones(1)).norm(), 0.0);
  EXPECT_EQ(guidance_target(v, RowVector::Constant(1, 2.0), RowVector::Ones(1)), v);
  EXPECT_THROW(guidance_target(v, w0, RowVector::Zero(1)), DomainError);
}

TEST(GuidanceTarget, WeightsAreClampedAndFlagged) {
  RowVector J(3);
  J << -50.0, 0.0, 50.0;
  int hits = 0;
  const RowVector w = tilt_weights(J, {}, &hits);
  EXPECT_EQ(hits, 2);
  EXPECT_EQ(w(0), 1e4);
  EXPECT_EQ(w(1), 1.0);
  EXPECT_EQ(w(2), 1e-4);
}

TEST(GuidanceLosses, ZeroWhenTargetsMatch) {
  Rng rng(2);
  GuidanceBundle b(small_ff(), 2, 3, rng);
  b.Z.parameters().setZero();
  GuidanceBatch batch{rng.normal_matrix(4, 5), RowVector::Constant(5, 0.3), rng.normal_matrix(4, 5),
                      RowVector::Constant(5, 1.0 + GuidanceBundle::kZFloor)};
  Tape tape;
  const GuidanceLoss l = guidance_losses(tape, b, batch, nullptr, nullptr);
  EXPECT_LE(l.g.scalar(), 1e-24);
  EXPECT_LE(l.z.scalar(), 1e-24);

  batch.weight.setOnes();
  Tape t2;
  EXPECT_LE(guidance_losses(t2, b, batch, nullptr, nullptr).z.scalar(), 1e-11);
}

TEST(GuidanceLosses, MatchNaiveLoop) {
  Rng rng(3);
  GuidanceBundle b(small_ff(), 3, 2, rng);
  b.G.parameters() = rng.normal_matrix(b.G.parameter_count(), 1);
  const GuidanceBatch batch =
      make_guidance_batch(rng.normal_matrix(6, 7), RowVector(rng.normal_matrix(1, 7)), rng, 0.01);
  Tape tape;
  const GuidanceLoss l = guidance_losses(tape, b, batch, nullptr, nullptr);
  double lg = 0.0, lz = 0.0;
  for (Index j = 0; j < 7; ++j) {
    const Matrix xj = batch.X.col(j);
    const RowVector tj = RowVector::Constant(1, batch.t(j));
    const double z = b.z_value(xj, tj)(0);
    const Matrix g = b.G.evaluate(xj, tj);
    for (Index i = 0; i < 6; ++i) {
      const double target = (batch.weight(j) / z - 1.0) * batch.v(i, j);
      lg += (g(i, 0) - target) * (g(i, 0) - target);
    }
    lz += (z - batch.weight(j)) * (z - batch.weight(j));
  }
  EXPECT_NEAR(l.g.scalar(), lg / 7.0, 1e-12);
  EXPECT_NEAR(l.z.scalar(), lz / 7.0, 1e-12);
}

class GuidanceGradient : public ::testing::TestWithParam<int> {};

TEST_P(GuidanceGradient, BothLosses) {
  for (const VectorFieldConfig& cfg : {small_ff(), small_attention()}) {
    Rng rng(400 + GetParam());
    GuidanceBundle b(cfg, 3, 3, rng);
    b.G.parameters() = 0.5 * rng.normal_matrix(b.G.parameter_count(), 1);
    const int h = 1 + GetParam() % 3;
    const GuidanceBatch batch =
        make_guidance_batch(rng.normal_matrix(3 * h, 6), RowVector(rng.normal_matrix(1, 6)), rng, 0.01);
    Tape tape;
    Vector gg = Vector::Zero(b.G.parameter_count()), gz = Vector::Zero(b.Z.parameter_count());
    const GuidanceLoss l = guidance_losses(tape, b, batch, &gg, &gz);
    tape.backward(l.g + l.z);
    auto fg = [&](const Vector& p) {
      GuidanceBundle c = b;
      c.G.parameters() = p;
      Tape t;
      return guidance_losses(t, c, batch, nullptr, nullptr).g.scalar();
    };
    auto fz = [&](const Vector& p) {
      GuidanceBundle c = b;
      c.Z.parameters() = p;
      Tape t;
      return guidance_losses(t, c, batch, nullptr, nullptr).z.scalar();
    };
    EXPECT_LE(nn::check_gradient(fg, b.G.parameters(), gg).relative_error, 1e-4);
    EXPECT_LE(nn::check_gradient(fz, b.Z.parameters(), gz).relative_error, 1e-4);
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, GuidanceGradient, ::testing::Range(0, 10));

TEST(GuidanceBundle, ZIsPositive) {
  Rng rng(5);
  GuidanceBundle b(small_ff(), 2, 2, rng);
  b.Z.parameters() = 5.0 * rng.normal_matrix(b.Z.parameter_count(), 1);
  for (int chunk = 0; chunk < 10; ++chunk) {
    const Matrix X = 10.0 * rng.normal_matrix(4, 10000);
    RowVector t(10000);
    for (Index j = 0; j < t.size(); ++j) t(j) = rng.uniform();
    EXPECT_GT(b.z_value(X, t).minCoeff(), 0.0);
  }
}

TEST(GuidanceBundle, UntrainedIsNeutral) {
  Rng rng(6);
  const GuidanceBundle b(small_ff(), 2, 2, rng);
  const Matrix X = rng.normal_matrix(4, 3), v = rng.normal_matrix(4, 3);
  EXPECT_EQ(b.guidance_value(X, 0.4, v).norm(), 0.0);
  EXPECT_EQ(energy_field(v, b.guidance_value(X, 0.4, v)), v);
  GuidanceBundle scaled = b;
  scaled.cfg.beta = 3.0;
  EXPECT_LE((scaled.guidance_value(X, 0.4, v) - 2.0 * v).norm(), 1e-15);
  GuidanceConfig bad;
  bad.beta = 0.0;
  EXPECT_THROW(GuidanceBundle(small_ff(), 2, 2, rng, bad), ConfigError);
}

TEST(EnergyField, Examples) {
  const Matrix vc = Eigen::Vector2d(1.0, 0.0);
  EXPECT_EQ(energy_field(vc, Matrix::Zero(2, 1)), vc);
  EXPECT_EQ(energy_field(vc, Matrix(Eigen::Vector2d(0.0, 1.0))), Matrix(Eigen::Vector2d(1.0, 1.0)));
  EXPECT_THROW(energy_field(vc, Matrix::Zero(3, 1)), ConfigError);
}

TEST(GuidanceBundle, CheckpointRoundTrip) {
  Rng rng(7);
  GuidanceBundle b(small_ff(), 2, 3, rng, {1.5, 1.0, 0.5, {1e-3, 1e3}});
  b.G.parameters() = rng.normal_matrix(b.G.parameter_count(), 1);
  BlobWriter w;
  b.save(w, "g");
  const GuidanceBundle c = GuidanceBundle::load(BlobReader::parse(w.str()), "g");
  EXPECT_TRUE(c.G == b.G);
  EXPECT_TRUE(c.Z == b.Z);
  EXPECT_EQ(c.cfg.beta, 1.5);
  EXPECT_EQ(c.cfg.zeta, 0.5);
  EXPECT_EQ(c.cfg.clamp.hi, 1e3);
}

GuidanceReport neutral_run(GuidanceBundle& b, std::uint64_t seed) {
  Rng rng(seed);
  b = GuidanceBundle(small_ff(), 2, 2, rng);
  TrainGuidanceConfig cfg;
  cfg.epochs = 10;
  cfg.h_values = {1, 2};
  nn::Adam og(cfg.adam, b.G.parameter_count()), oz(cfg.adam, b.Z.parameter_count());
  const PayloadSource src = [](int h, int n, Rng& r) { return r.normal_matrix(2 * h, n); };
  const PayloadEnergy zero = [](const Matrix& X) { return RowVector(RowVector::Zero(X.cols())); };
  return train_guidance(b, og, oz, src, zero, cfg, rng);
}

TEST(TrainGuidance, ZeroEnergyStaysNeutral) {
  GuidanceBundle b;
  const GuidanceReport rep = neutral_run(b, 8);
  Rng rng(9);
  const Matrix X = rng.normal_matrix(4, 256), v = rng.normal_matrix(4, 256);
  const Matrix g = b.guidance_value(X, 0.5, v);
  EXPECT_LE(std::sqrt(g.squaredNorm() / g.size()), 1e-2);
  EXPECT_NEAR(b.z_value(X, RowVector::Constant(256, 0.5)).mean(), 1.0, 1e-2);
  EXPECT_EQ(rep.epochs.back().mean_weight, 1.0);
  EXPECT_EQ(rep.epochs.back().clamp_hits, 0);
}

TEST(TrainGuidance, DeterministicAndWritesCsv) {
  GuidanceBundle a, b;
  const GuidanceReport ra = neutral_run(a, 10), rb = neutral_run(b, 10);
  ASSERT_EQ(ra.epochs.size(), 10u);
  for (std::size_t i = 0; i < ra.epochs.size(); ++i) EXPECT_EQ(ra.epochs[i].loss_z, rb.epochs[i].loss_z);
  EXPECT_TRUE(a.G == b.G);
  const auto path = std::filesystem::temp_directory_path() / "ctrlflow_guidance.csv";
  ra.write_csv(path.string());
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "epoch,loss_g,loss_z,mean_weight,mean_z,coef_p10,coef_p50,coef_p90,clamp_hits");
  std::filesystem::remove(path);
}

TEST(TiltedGaussian, ZeroEnergyKeepsBase) {
  const TiltedResult r = tilted_gaussian_check(0.0, 11);
  EXPECT_LE(r.mean_error, 0.05);
  EXPECT_LE(r.variance_error, 0.1);
}

TEST(TiltedGaussian, RecoversShiftedMean) {
  const TiltedResult r = tilted_gaussian_check(1.0, 12);
  EXPECT_LE(r.mean_error, 0.05) << "mean " << r.mean;
  EXPECT_LE(r.variance_error, 0.1) << "variance " << r.variance;
}

}  // namespace
}  // namespace ctrlflow::guidance
