#include "latentflow/synth_data.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <set>
#include <string>

using namespace latentflow;

namespace {

MixtureSpec one_mode_spec(double mean, double stdev, std::size_t L = 16, std::size_t D = 2) {
  MixtureSpec spec;
  spec.seq_len = L;
  spec.dim = D;
  spec.modes.push_back({std::vector<double>(D, mean), stdev, 1.0});
  return spec;
}

std::string temp_path(const std::string& name) {
  return std::string(::testing::TempDir()) + name;
}

}  // namespace

TEST(MakeMixtureDataset, DeterministicInSeed) {
  const MixtureSpec spec = one_mode_spec(0.0, 1.0);
  const Dataset a = make_mixture_dataset(spec, 4, 7);
  const Dataset b = make_mixture_dataset(spec, 4, 7);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(a.samples[i].frames == b.samples[i].frames);
    EXPECT_EQ(a.mode_labels[i], b.mode_labels[i]);
  }
  const Dataset c = make_mixture_dataset(spec, 4, 8);
  EXPECT_FALSE(a.samples[0].frames == c.samples[0].frames);
}

TEST(MakeMixtureDataset, DegenerateStdevIsPointMass) {
  const double mean = 1.75;
  const MixtureSpec spec = one_mode_spec(mean, 0.0);
  const Dataset ds = make_mixture_dataset(spec, 3, 11);
  for (const auto& s : ds.samples)
    for (std::size_t j = 0; j < s.frames.size(); ++j) EXPECT_EQ(s.frames[j], mean);
}

TEST(MakeMixtureDataset, ModeFrequenciesMatchWeights) {
  // Monte-Carlo oracle: with n = 10000 the Bernoulli standard error is
  // ~0.0046, so +-0.02 is a > 4 sigma band.
  MixtureSpec spec;
  spec.seq_len = 4;
  spec.dim = 1;
  spec.modes.push_back({{-1.0}, 0.1, 0.7});
  spec.modes.push_back({{+1.0}, 0.1, 0.3});
  const std::size_t n = 10000;
  const Dataset ds = make_mixture_dataset(spec, n, 123);
  std::size_t count0 = 0;
  for (auto label : ds.mode_labels) count0 += label == 0 ? 1 : 0;
  const double f0 = static_cast<double>(count0) / static_cast<double>(n);
  EXPECT_NEAR(f0, 0.7, 0.02);
}

TEST(MakeMixtureDataset, PerSampleSeedDerivation) {
  // sample i depends only on (seed XOR i): a shifted dataset shares samples
  const MixtureSpec spec = one_mode_spec(0.0, 1.0);
  const Dataset a = make_mixture_dataset(spec, 8, 64);
  // seed' = 64^3 = 67; sample 3 of `a` used stream 64^3, sample 0 of b uses 67^0
  const Dataset b = make_mixture_dataset(spec, 1, 64 ^ 3);
  EXPECT_TRUE(a.samples[3].frames == b.samples[0].frames);
}

TEST(MakeMixtureDataset, RejectsInvalidSpecs) {
  MixtureSpec empty;
  empty.modes.clear();
  EXPECT_THROW(make_mixture_dataset(empty, 1, 0), ConfigError);

  MixtureSpec bad_stdev = one_mode_spec(0.0, 1.0);
  bad_stdev.modes[0].stdev = -0.5;
  EXPECT_THROW(make_mixture_dataset(bad_stdev, 1, 0), ConfigError);

  MixtureSpec bad_weight = one_mode_spec(0.0, 1.0);
  bad_weight.modes[0].weight = 0.0;
  EXPECT_THROW(make_mixture_dataset(bad_weight, 1, 0), ConfigError);

  MixtureSpec bad_mean = one_mode_spec(0.0, 1.0);
  bad_mean.modes[0].mean.pop_back();
  EXPECT_THROW(make_mixture_dataset(bad_mean, 1, 0), ConfigError);

  EXPECT_THROW(make_mixture_dataset(one_mode_spec(0.0, 1.0), 0, 0), InputError);
}

TEST(NearestMode, PicksClosestMean) {
  MixtureSpec spec;
  spec.seq_len = 2;
  spec.dim = 2;
  spec.modes.push_back({{-2.0, 0.0}, 0.5, 1.0});
  spec.modes.push_back({{+2.0, 0.0}, 0.5, 1.0});
  LatentSeq s;
  s.frames = Tensor::matrix(2, 2);
  s.frames.at(0, 0) = 1.5;
  s.frames.at(1, 0) = 2.5;
  EXPECT_EQ(nearest_mode(spec, s), 1u);
}

TEST(PerturbAlignment, ZeroJitterIsIdentity) {
  LyricAlignment a;
  a.token_ids = {3, 9, 1};
  a.start_frames = {2, 7, 11};
  for (std::uint64_t seed = 0; seed < 32; ++seed) {
    const LyricAlignment out = perturb_alignment(a, 0, 16, seed);
    EXPECT_EQ(out.token_ids, a.token_ids);
    EXPECT_EQ(out.start_frames, a.start_frames);
  }
}

TEST(PerturbAlignment, TwoTokenOffsetsStayInRange) {
  // Exhaustive oracle: all 25 offset pairs keep token 0 in [3,7] and token 1
  // in [8,12]; the ranges cannot collide, so every reachable output is just
  // the shifted pair.
  std::set<std::pair<std::uint32_t, std::uint32_t>> reachable;
  for (int d0 = -2; d0 <= 2; ++d0)
    for (int d1 = -2; d1 <= 2; ++d1)
      reachable.insert({static_cast<std::uint32_t>(5 + d0), static_cast<std::uint32_t>(10 + d1)});
  ASSERT_EQ(reachable.size(), 25u);

  LyricAlignment a;
  a.token_ids = {1, 2};
  a.start_frames = {5, 10};
  std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const LyricAlignment out = perturb_alignment(a, 2, 16, seed);
    ASSERT_EQ(out.size(), 2u);
    EXPECT_GE(out.start_frames[0], 3u);
    EXPECT_LE(out.start_frames[0], 7u);
    EXPECT_GE(out.start_frames[1], 8u);
    EXPECT_LE(out.start_frames[1], 12u);
    const auto pair = std::make_pair(out.start_frames[0], out.start_frames[1]);
    EXPECT_TRUE(reachable.count(pair)) << pair.first << "," << pair.second;
    seen.insert(pair);
  }
  EXPECT_EQ(seen.size(), 25u);  // every offset combination shows up
}

TEST(PerturbAlignment, ClampingBoundsSingleToken) {
  LyricAlignment a;
  a.token_ids = {0};
  a.start_frames = {0};
  std::set<std::uint32_t> seen;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const LyricAlignment out = perturb_alignment(a, 3, 4, seed);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_LT(out.start_frames[0], 4u);
    seen.insert(out.start_frames[0]);
  }
  EXPECT_EQ(seen, (std::set<std::uint32_t>{0, 1, 2, 3}));
}

TEST(PerturbAlignment, OutputAlwaysStrictlyIncreasing) {
  LyricAlignment a;
  a.token_ids = {0, 1, 2, 3};
  a.start_frames = {1, 4, 6, 12};
  for (std::uint64_t seed = 0; seed < 3000; ++seed) {
    const LyricAlignment out = perturb_alignment(a, 3, 16, seed);
    EXPECT_NO_THROW(out.validate(16));
    EXPECT_EQ(out.token_ids, a.token_ids);  // token order preserved
  }
}

TEST(PerturbAlignment, OffsetsAreChiSquareUniform) {
  // chi-square GOF for a single unclamped token over 10000 seeds; J=2 gives
  // 5 bins / 4 dof, critical value 13.2767 at p = 0.01.
  LyricAlignment a;
  a.token_ids = {5};
  a.start_frames = {10};
  const std::uint32_t J = 2;
  std::vector<std::size_t> counts(2 * J + 1, 0);
  const std::size_t trials = 10000;
  for (std::uint64_t seed = 0; seed < trials; ++seed) {
    const LyricAlignment out = perturb_alignment(a, J, 30, seed);
    const int offset = static_cast<int>(out.start_frames[0]) - 10;
    ASSERT_GE(offset, -static_cast<int>(J));
    ASSERT_LE(offset, static_cast<int>(J));
    ++counts[static_cast<std::size_t>(offset + static_cast<int>(J))];
  }
  const double expected = static_cast<double>(trials) / static_cast<double>(counts.size());
  double stat = 0.0;
  for (std::size_t c : counts) {
    const double diff = static_cast<double>(c) - expected;
    stat += diff * diff / expected;
  }
  EXPECT_LT(stat, 13.2767);
}

TEST(FixupStartFrames, CascadesDuplicatesForward) {
  EXPECT_EQ(fixup_start_frames({5, 5, 5}, 10), (std::vector<std::uint32_t>{5, 6, 7}));
  EXPECT_EQ(fixup_start_frames({7, 2, 2}, 10), (std::vector<std::uint32_t>{2, 3, 7}));
  EXPECT_THROW(fixup_start_frames({9, 9}, 10), AlignmentError);
  EXPECT_THROW(fixup_start_frames({1, 1, 1}, 3), AlignmentError);
}

TEST(LyricAlignment, FromPairsIsPermutationStable) {
  const auto a = LyricAlignment::from_pairs({{2, 7}, {5, 9}, {11, 3}});
  const auto b = LyricAlignment::from_pairs({{11, 3}, {2, 7}, {5, 9}});
  EXPECT_EQ(a.token_ids, b.token_ids);
  EXPECT_EQ(a.start_frames, b.start_frames);
}

TEST(DatasetFile, RoundTripsExactly) {
  const MixtureSpec spec = one_mode_spec(0.3, 1.2, 8, 3);
  const Dataset ds = make_mixture_dataset(spec, 5, 99);
  const std::string path = temp_path("roundtrip.drpd");
  save_dataset(ds, path);
  const Dataset back = load_dataset(path);
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.frame_rate, ds.frame_rate);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_TRUE(back.samples[i].frames == ds.samples[i].frames);
    EXPECT_EQ(back.mode_labels[i], ds.mode_labels[i]);
  }
  std::remove(path.c_str());
}

TEST(DatasetFile, RejectsCorruptHeaders) {
  const MixtureSpec spec = one_mode_spec(0.0, 1.0, 4, 2);
  const Dataset ds = make_mixture_dataset(spec, 2, 5);
  const std::string path = temp_path("corrupt.drpd");
  save_dataset(ds, path);

  auto bytes = read_file(path);
  bytes[0] = 'X';
  write_file(path, bytes);
  EXPECT_THROW(load_dataset(path), PersistenceError);

  bytes = read_file(path);  // refresh
  bytes[0] = 'D';
  bytes.resize(bytes.size() - 3);  // truncate
  write_file(path, bytes);
  EXPECT_THROW(load_dataset(path), PersistenceError);
  std::remove(path.c_str());
}
