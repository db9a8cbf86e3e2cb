#include <gtest/gtest.h>

#include <numbers>

#include "oracles.hpp"
#include "portobello/random.hpp"
#include "portobello/rigid_transform.hpp"

using namespace portobello;

namespace {

RigidTransform random_transform(Rng& rng) {
  Quat q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  return {q, Vec3(rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-10, 10))};
}

}  // namespace

TEST(RigidTransform, IdentityComposesToIdentity) {
  EXPECT_EQ(compose(RigidTransform::identity(), RigidTransform::identity()), RigidTransform::identity());
}

TEST(RigidTransform, ComposeWithInverseIsIdentity) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto t = random_transform(rng);
    EXPECT_TRUE(approx_equal(t * t.inverse(), RigidTransform::identity(), 1e-9));
    EXPECT_TRUE(approx_equal(t.inverse() * t, RigidTransform::identity(), 1e-9));
  }
}

TEST(RigidTransform, TwoQuarterYawsMatchMatrixProduct) {
  const auto a = RigidTransform::from_yaw(std::numbers::pi / 2, Vec3(1, 0, 0));
  const auto c = compose(a, a);
  // Frozen from the 4x4 oracle below: yaw 180 deg, t = (1, 1, 0).
  EXPECT_NEAR(c.translation().x(), 1.0, 1e-12);
  EXPECT_NEAR(c.translation().y(), 1.0, 1e-12);
  EXPECT_NEAR(c.translation().z(), 0.0, 1e-12);
  EXPECT_NEAR(std::abs(c.yaw()), std::numbers::pi, 1e-12);
  const oracle::Mat4 m = oracle::to_matrix(a) * oracle::to_matrix(a);
  EXPECT_LT(oracle::matrix_distance(m, oracle::to_matrix(c)), 1e-12);
}

TEST(RigidTransform, CompositionMatchesMatrixOracleAndIsAssociative) {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_transform(rng), b = random_transform(rng), c = random_transform(rng);
    EXPECT_LT(oracle::matrix_distance(oracle::to_matrix(a * b), oracle::to_matrix(a) * oracle::to_matrix(b)), 1e-9);
    EXPECT_TRUE(approx_equal((a * b) * c, a * (b * c), 1e-9));
    EXPECT_NEAR((a * b).rotation().norm(), 1.0, 1e-9);
  }
}

TEST(RigidTransform, CanonicalFormHasNonNegativeW) {
  const auto t = RigidTransform::from_components(-0.5, -0.5, -0.5, -0.5, Vec3::Zero());
  EXPECT_GE(t.rotation().w(), 0.0);
  EXPECT_EQ(t, RigidTransform::from_components(0.5, 0.5, 0.5, 0.5, Vec3::Zero()));
  const auto half_turn = RigidTransform::from_components(0, 0, 0, -1, Vec3::Zero());
  EXPECT_EQ(half_turn, RigidTransform::from_components(0, 0, 0, 1, Vec3::Zero()));
}

TEST(RigidTransform, UnnormalizedInputIsNormalized) {
  const auto t = RigidTransform::from_components(2, 0, 0, 0, Vec3(1, 2, 3));
  EXPECT_EQ(t, RigidTransform::from_translation(Vec3(1, 2, 3)));
}

TEST(RigidTransform, InterpolationMidpointHalvesAngle) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_transform(rng), b = random_transform(rng);
    const double full = rotation_distance(a, b);
    if (full > std::numbers::pi - 1e-3) continue;
    const auto mid = interpolate(a, b, 0.5);
    EXPECT_NEAR(rotation_distance(a, mid), full / 2, 1e-9);
    EXPECT_NEAR(rotation_distance(mid, b), full / 2, 1e-9);
  }
}
