#include <gtest/gtest.h>

#include <atomic>
#include <numbers>
#include <thread>

#include "portobello/frames.hpp"
#include "portobello/random.hpp"

using namespace portobello;

namespace {

Timestamp sec(double s) { return Timestamp::from_seconds(s); }

}  // namespace

TEST(FrameTree, LookupAfterSingleInsert) {
  FrameTree tree;
  const auto t = RigidTransform::from_yaw(0.3, Vec3(1, 2, 3));
  tree.set_transform({"map", "vehicle", sec(0), t});
  EXPECT_EQ(tree.lookup("map", "vehicle", sec(0)), t);
}

TEST(FrameTree, SelfLookupIsIdentity) {
  FrameTree tree;
  tree.set_transform({"map", "vehicle", sec(0), RigidTransform::from_yaw(1.0)});
  EXPECT_EQ(tree.lookup("map", "map", sec(123)), RigidTransform::identity());
}

TEST(FrameTree, RejectsCycle) {
  FrameTree tree;
  tree.set_transform({"map", "vehicle", sec(0), {}});
  EXPECT_THROW(tree.set_transform({"vehicle", "map", sec(0), {}}), CycleError);
  tree.set_transform({"vehicle", "lidar", sec(0), {}});
  EXPECT_THROW(tree.set_transform({"lidar", "map", sec(0), {}}), CycleError);
  EXPECT_THROW(tree.set_transform({"map", "map", sec(0), {}}), CycleError);
}

TEST(FrameTree, RejectsReparent) {
  FrameTree tree;
  tree.set_transform({"map", "vehicle", sec(0), {}});
  tree.set_transform({"map", "odom", sec(0), {}});
  EXPECT_THROW(tree.set_transform({"odom", "vehicle", sec(0), {}}), ReparentError);
}

TEST(FrameTree, OutOfOrderInsertKeepsBufferSorted) {
  FrameTree tree;
  tree.set_transform({"map", "vehicle", sec(5), {}});
  tree.set_transform({"map", "vehicle", sec(3), {}});
  tree.set_transform({"map", "vehicle", sec(4), {}});
  const auto stamps = tree.buffered_stamps("vehicle");
  ASSERT_EQ(stamps.size(), 3u);
  EXPECT_TRUE(std::is_sorted(stamps.begin(), stamps.end()));
  EXPECT_EQ(stamps.front(), sec(3));
  EXPECT_EQ(stamps.back(), sec(5));
}

TEST(FrameTree, RetentionWindowEvictsOldEntries) {
  FrameTree tree(FrameTreeConfig{2 * kNanosPerSecond, 100'000'000});
  for (int i = 0; i <= 10; ++i) tree.set_transform({"map", "vehicle", sec(i), {}});
  const auto stamps = tree.buffered_stamps("vehicle");
  EXPECT_EQ(stamps.front(), sec(8));
  EXPECT_THROW(tree.lookup("map", "vehicle", sec(5)), ExtrapolationError);
}

TEST(FrameTree, LinearInterpolationAtMidpoint) {
  FrameTree tree;
  tree.set_transform({"map", "vehicle", sec(0), {}});
  tree.set_transform({"map", "vehicle", sec(1), RigidTransform::from_translation(Vec3(2, 0, 0))});
  const auto mid = tree.lookup("map", "vehicle", sec(0.5));
  EXPECT_TRUE(approx_equal(mid, RigidTransform::from_translation(Vec3(1, 0, 0)), 1e-12));
}

TEST(FrameTree, ExtrapolationSlackHoldsThenFails) {
  FrameTree tree;
  const auto t = RigidTransform::from_translation(Vec3(1, 0, 0));
  tree.set_transform({"map", "vehicle", sec(1), t});
  EXPECT_EQ(tree.lookup("map", "vehicle", sec(1.1)), t);
  EXPECT_EQ(tree.lookup("map", "vehicle", sec(0.9)), t);
  EXPECT_THROW(tree.lookup("map", "vehicle", sec(1.2)), ExtrapolationError);
  EXPECT_THROW(tree.lookup("map", "vehicle", sec(0.85)), ExtrapolationError);
}

TEST(FrameTree, UnknownAndDisconnectedFrames) {
  FrameTree tree;
  tree.set_transform({"map", "vehicle", sec(0), {}});
  tree.set_transform({"other_root", "thing", sec(0), {}});
  EXPECT_THROW(tree.lookup("map", "nowhere", sec(0)), UnknownFrame);
  EXPECT_THROW(tree.lookup("map", "thing", sec(0)), ConnectivityError);
}

TEST(FrameTree, ChainEqualsManualComposition) {
  FrameTree tree;
  const auto mv0 = RigidTransform::from_yaw(0.1, Vec3(1, 0, 0));
  const auto mv1 = RigidTransform::from_yaw(0.5, Vec3(3, 1, 0));
  const auto vl = RigidTransform::from_yaw(-0.2, Vec3(0.5, 0, 1.8));
  tree.set_transform({"map", "vehicle", sec(0), mv0});
  tree.set_transform({"map", "vehicle", sec(1), mv1});
  tree.set_static_transform("vehicle", "lidar", vl);
  const auto chained = tree.lookup("map", "lidar", sec(0.3));
  const auto manual = tree.lookup("map", "vehicle", sec(0.3)) * tree.lookup("vehicle", "lidar", sec(0.3));
  EXPECT_TRUE(approx_equal(chained, manual, 1e-12));
  EXPECT_TRUE(approx_equal(chained, interpolate(mv0, mv1, 0.3) * vl, 1e-12));
}

// Random trees: compose through intermediate frames and inverse symmetry.
TEST(FrameTree, RandomTreesComposeAndInvert) {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    FrameTree tree;
    const int n = 8;
    std::vector<int> parent(n, -1);
    for (int f = 1; f < n; ++f) {
      parent[static_cast<std::size_t>(f)] = static_cast<int>(rng.index(static_cast<std::uint64_t>(f)));
      for (int k = 0; k < 4; ++k) {
        Quat q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        tree.set_transform({"f" + std::to_string(parent[static_cast<std::size_t>(f)]), "f" + std::to_string(f),
                            sec(k), RigidTransform(q, Vec3(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)))});
      }
    }
    for (int q = 0; q < 20; ++q) {
      const auto t = sec(rng.uniform(0, 3));
      const auto a = "f" + std::to_string(rng.index(n));
      const auto c = "f" + std::to_string(rng.index(n));
      // b on the path: the ancestor chain of c.
      auto b = c;
      for (int steps = static_cast<int>(rng.index(3)); steps > 0; --steps) {
        if (auto p = tree.parent_of(b)) b = *p;
      }
      EXPECT_TRUE(approx_equal(tree.lookup(a, c, t), tree.lookup(a, b, t) * tree.lookup(b, c, t), 1e-9));
      EXPECT_TRUE(approx_equal(tree.lookup(a, c, t) * tree.lookup(c, a, t), RigidTransform::identity(), 1e-9));
    }
  }
}

TEST(FrameTree, InterpolatedRotationMidpointHalvesAngle) {
  FrameTree tree;
  tree.set_transform({"map", "vehicle", sec(0), RigidTransform::from_yaw(0.2)});
  tree.set_transform({"map", "vehicle", sec(2), RigidTransform::from_axis_angle(Vec3(0.3, -1.0, 2.0))});
  const auto a = tree.lookup("map", "vehicle", sec(0));
  const auto b = tree.lookup("map", "vehicle", sec(2));
  const auto m = tree.lookup("map", "vehicle", sec(1));
  EXPECT_NEAR(rotation_distance(a, m), rotation_distance(a, b) / 2, 1e-9);
}

TEST(FrameTree, ConcurrentReadersSeeCompleteEdges) {
  FrameTree tree(FrameTreeConfig{1000 * kNanosPerSecond, 100'000'000});
  tree.set_transform({"map", "vehicle", sec(0), {}});
  std::atomic<bool> stop{false};
  std::atomic<int> bad{0};
  std::vector<std::thread> readers;
  for (int r = 0; r < 3; ++r) {
    readers.emplace_back([&] {
      while (!stop) {
        const auto t = tree.lookup("map", "vehicle", sec(0));
        if (std::abs(t.rotation().norm() - 1.0) > 1e-9) ++bad;
      }
    });
  }
  for (int i = 1; i < 2000; ++i) {
    tree.set_transform({"map", "vehicle", Timestamp(i * 1000), RigidTransform::from_yaw(i * 0.001)});
  }
  stop = true;
  for (auto& t : readers) t.join();
  EXPECT_EQ(bad.load(), 0);
}
