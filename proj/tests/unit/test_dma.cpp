// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "dmavg/affine_denoiser.hpp"
#include "dmavg/dma.hpp"
#include "dmavg/errors.hpp"
#include "dmavg/random.hpp"
#include "fixture.hpp"

namespace dmavg {
namespace {

DmaConfig small_config(int k = 6) {
  DmaConfig c;
  c.latent_count = k;
  c.iterations = 5;
  c.learning_rate = 2e-2;
  c.t_stop = 4;
  c.num_steps = 8;
  c.seed = 3;
  c.decode_count = k;
  return c;
}

Batch plain_samples(const Denoiser& model, const Batch& latents, const DmaConfig& c, int concept_id) {
  return decode_image(model, sample_ddim(model, latents, schedule_for(model, c.num_steps),
                                         ConditioningSpec::for_concept(concept_id), c.guidance));
}

TEST(InitLatents, StandardNormalMoments) {
  const LatentShape shape{3, 8, 8};
  const auto b = init_latents(64, shape, 1);
  const double n = static_cast<double>(b.latents.values().size());
  double s = 0.0, s2 = 0.0;
  for (double v : b.latents.values()) {
    s += v;
    s2 += v * v;
  }
  const double bound = 4.0 / std::sqrt(n);
  EXPECT_NEAR(s / n, 0.0, bound);
  EXPECT_NEAR(s2 / n - (s / n) * (s / n), 1.0, bound * std::sqrt(2.0));
  EXPECT_EQ(b.size(), 64);
  EXPECT_EQ(b.latents.cols(), shape.size());
}

TEST(InitLatents, DeterministicPerSeed) {
  EXPECT_EQ(init_latents(4, {1, 4, 4}, 9).latents, init_latents(4, {1, 4, 4}, 9).latents);
  EXPECT_NE(init_latents(4, {1, 4, 4}, 9).latents, init_latents(4, {1, 4, 4}, 10).latents);
  EXPECT_THROW(init_latents(0, {1, 4, 4}, 0), InvalidArgument);
}

TEST(MeanActivation, MatchesBruteForceLoop) {
  const auto model = testing::small_toy();
  const auto s = schedule_for(*model, 10);
  const auto lat = init_latents(7, model->latent_shape(), 2);
  const auto cond = ConditioningSpec::for_concept(0);
  const auto mean = mean_activation(*model, lat.latents, s, 3, cond, {}, "bottleneck");
  std::vector<double> expected(model->tap_size("bottleneck"), 0.0);
  for (std::size_t r = 0; r < lat.latents.rows(); ++r) {
    const auto tape = model->record(lat.latents.row(r), s.timestep(3), 0, cond, "bottleneck");
    for (std::size_t i = 0; i < expected.size(); ++i) expected[i] += tape->activation()[i] / 7.0;
  }
  ASSERT_EQ(mean.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(mean[i], expected[i], 1e-12);
}

TEST(MeanActivation, IdenticalLatentsAndSingleLatentAreExact) {
  const auto model = testing::small_toy();
  const auto s = schedule_for(*model, 10);
  const auto one = init_latents(1, model->latent_shape(), 4);
  const auto cond = ConditioningSpec::for_concept(1);
  const auto tape = model->record(one.latents.row(0), s.timestep(2), 1, cond, "bottleneck");
  const std::vector<double> own(tape->activation().begin(), tape->activation().end());
  EXPECT_EQ(mean_activation(*model, one.latents, s, 2, cond, {}, "bottleneck"), own);
  Batch copies;
  for (int i = 0; i < 5; ++i) copies.append_row(one.latents.row(0));
  EXPECT_EQ(mean_activation(*model, copies, s, 2, cond, {}, "bottleneck"), own);
}

AlignmentProblem problem_for(const Denoiser& model, const ConditioningSpec& cond, int timestep, int iterations) {
  AlignmentProblem p;
  p.model = &model;
  p.cond = &cond;
  p.tap = "bottleneck";
  p.timestep = timestep;
  p.iterations = iterations;
  return p;
}

TEST(AlignLatent, OwnActivationIsFixedPoint) {
  const auto model = testing::small_toy();
  const auto cond = ConditioningSpec::for_concept(0);
  const auto z = init_latents(1, model->latent_shape(), 5);
  const auto tape = model->record(z.latents.row(0), 400, 0, cond, "bottleneck");
  const std::vector<double> target(tape->activation().begin(), tape->activation().end());
  const auto r = align_latent(problem_for(*model, cond, 400, 25), z.latents.row(0), target);
  EXPECT_TRUE(std::equal(r.latent.begin(), r.latent.end(), z.latents.row(0).begin()));
  EXPECT_EQ(r.loss_before, 0.0);
  EXPECT_EQ(r.loss_after, 0.0);
}

TEST(AlignLatent, ZeroIterationsIsIdentity) {
  const auto model = testing::small_toy();
  const auto cond = ConditioningSpec::for_concept(0);
  const auto z = init_latents(2, model->latent_shape(), 6);
  const auto tape = model->record(z.latents.row(1), 400, 0, cond, "bottleneck");
  const std::vector<double> target(tape->activation().begin(), tape->activation().end());
  const auto r = align_latent(problem_for(*model, cond, 400, 0), z.latents.row(0), target);
  EXPECT_TRUE(std::equal(r.latent.begin(), r.latent.end(), z.latents.row(0).begin()));
  EXPECT_EQ(r.loss_before, r.loss_after);
}

TEST(AlignLatent, RejectsBadProblems) {
  const auto model = testing::small_toy();
  const auto cond = ConditioningSpec::for_concept(0);
  const auto z = init_latents(1, model->latent_shape(), 7);
  std::vector<double> wrong(3, 0.0);
  EXPECT_THROW(align_latent(problem_for(*model, cond, 400, 5), z.latents.row(0), wrong), InvalidArgument);
  std::vector<double> target(model->tap_size("bottleneck"), 0.0);
  auto p = problem_for(*model, cond, 400, 5);
  p.learning_rate = 0.0;
  EXPECT_THROW(align_latent(p, z.latents.row(0), target), InvalidArgument);
  target[0] = std::nan("");
  EXPECT_THROW(align_latent(problem_for(*model, cond, 400, 5), z.latents.row(0), target), NumericFailure);
}

TEST(AlignLatent, GradientMatchesFiniteDifferences) {
  const auto model = testing::small_toy(2, 21, {3, 4, 4})->with_precision(Precision::f64);
  const auto cond = ConditioningSpec::for_concept(1);
  const auto z = init_latents(2, model->latent_shape(), 8);
  const auto tape = model->record(z.latents.row(1), 250, 1, cond, "bottleneck");
  const std::vector<double> target(tape->activation().begin(), tape->activation().end());
  auto p = problem_for(*model, cond, 250, 0);
  p.guidance = {7.0, CfgConvention::conventional};
  std::vector<double> x(z.latents.row(0).begin(), z.latents.row(0).end()), grad(x.size());
  alignment_loss(p, x, target, grad);
  Rng rng(3);
  double num = 0.0, den = 0.0;
  for (int k = 0; k < 10; ++k) {
    const std::size_t i = rng.below(x.size());
    auto xp = x, xm = x;
    xp[i] += 1e-5;
    xm[i] -= 1e-5;
    const double fd = (alignment_loss(p, xp, target) - alignment_loss(p, xm, target)) / 2e-5;
    num += (grad[i] - fd) * (grad[i] - fd);
    den += fd * fd;
  }
  EXPECT_LT(std::sqrt(num / den), 1e-6);
}

TEST(AlignLatent, ReducesLossOnTrainedModel) {
  const auto& f = testing::toy_fixture();
  const auto schedule = schedule_for(*f.model, 20);
  for (int pair = 0; pair < 10; ++pair) {
    const auto cond = ConditioningSpec::for_concept(pair % 3);
    const auto lat = init_latents(2, f.model->latent_shape(), 200 + static_cast<std::uint64_t>(pair));
    const int t = schedule.timestep(pair % 11);
    const auto tape = f.model->record(lat.latents.row(1), t, cond.concept_id, cond, "bottleneck");
    const std::vector<double> target(tape->activation().begin(), tape->activation().end());
    auto p = problem_for(*f.model, cond, t, 50);
    p.guidance = {7.0, CfgConvention::conventional};
    const auto r = align_latent(p, lat.latents.row(0), target);
    EXPECT_LE(r.loss_after, 0.1 * r.loss_before) << "pair " << pair;
  }
}

TEST(DmaRun, SingleLatentEqualsPlainSampling) {
  const auto model = testing::small_toy();
  for (double w : {1.0, 7.0}) {
    auto c = small_config(1);
    c.guidance.scale = w;
    const auto r = dma_run(model, ConditioningSpec::for_concept(0), c);
    const auto lat = init_latents(1, model->latent_shape(), c.seed);
    EXPECT_EQ(r.prototypes, plain_samples(*model, lat.latents, c, 0));
  }
}

TEST(DmaRun, IdenticalLatentsReproducePlainSample) {
  const auto model = testing::small_toy();
  auto c = small_config(4);
  const auto one = init_latents(1, model->latent_shape(), 11);
  LatentBatch copies = init_latents(4, model->latent_shape(), 11);
  for (int i = 0; i < 4; ++i) std::copy(one.latents.row(0).begin(), one.latents.row(0).end(), copies.latents.row(i).begin());
  const auto r = dma_run(model, ConditioningSpec::for_concept(1), c, copies);
  const Batch plain = plain_samples(*model, one.latents, c, 1);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_TRUE(std::equal(r.prototypes.row(i).begin(), r.prototypes.row(i).end(), plain.row(0).begin()));
  }
}

TEST(DmaRun, ZeroIterationsIsPlainBatchSampling) {
  const auto model = testing::small_toy();
  for (int t_stop : {0, 4}) {
    auto c = small_config(5);
    c.iterations = 0;
    c.t_stop = t_stop;
    const auto r = dma_run(model, ConditioningSpec::for_concept(0), c);
    EXPECT_EQ(r.prototypes, plain_samples(*model, init_latents(5, model->latent_shape(), c.seed).latents, c, 0));
  }
}

TEST(DmaRun, TraceRecordsOneMeanPerAlignedStep) {
  const auto model = testing::small_toy();
  const auto c = small_config(5);
  const auto r = dma_run(model, ConditioningSpec::for_concept(0), c);
  ASSERT_EQ(r.trace.steps.size(), 8u);
  const auto schedule = schedule_for(*model, c.num_steps);
  for (const auto& s : r.trace.steps) {
    EXPECT_EQ(s.aligned, s.step <= c.t_stop);
    EXPECT_EQ(s.mean_evaluations, s.aligned ? 1 : 0);
    EXPECT_EQ(s.timestep, schedule.timestep(s.step));
    EXPECT_TRUE(std::isfinite(s.loss_after));
  }
  EXPECT_EQ(DmaTrace::from_json(r.trace.to_json()).hash(), r.trace.hash());
}

TEST(DmaRun, StepsAfterCutoffArePlainDdim) {
  const auto model = testing::small_toy();
  const auto c = small_config(4);
  DmaRunner runner(model, ConditioningSpec::for_concept(0), c);
  for (int i = 0; i <= c.t_stop; ++i) runner.step();
  const Batch rest = sample_ddim(*model, runner.state().batch.latents, runner.schedule(),
                                 ConditioningSpec::for_concept(0), c.guidance, c.t_stop + 1);
  runner.run();
  EXPECT_EQ(runner.state().batch.latents, rest);
}

TEST(DmaRun, MeanTargetIsFixedWithinStep) {
  // With a single sweep the target equals the pre-optimization batch mean.
  const auto model = testing::small_toy();
  auto c = small_config(3);
  c.t_stop = 0;
  DmaRunner runner(model, ConditioningSpec::for_concept(0), c);
  const auto before = runner.state().batch.latents;
  const auto mean =
      mean_activation(*model, before, runner.schedule(), 0, ConditioningSpec::for_concept(0), c.guidance, "bottleneck");
  runner.step();
  const auto cond = ConditioningSpec::for_concept(0);
  auto p = problem_for(*model, cond, runner.schedule().timestep(0), c.iterations);
  p.guidance = c.guidance;
  Batch aligned(3, before.cols());
  for (std::size_t k = 0; k < 3; ++k) {
    const auto r = align_latent(p, before.row(k), mean);
    std::copy(r.latent.begin(), r.latent.end(), aligned.row(k).begin());
  }
  EXPECT_EQ(runner.state().batch.latents, ddim_step(runner.schedule(), 0, aligned,
                                                    predict_noise(*model, aligned, runner.schedule(), 0, cond,
                                                                  c.guidance)));
}

TEST(DmaRun, ResumeFromSnapshotIsBitwise) {
  const auto model = testing::small_toy();
  const auto c = small_config(4);
  const auto full = dma_run(model, ConditioningSpec::for_concept(1), c);
  DmaRunner first(model, ConditioningSpec::for_concept(1), c);
  for (int i = 0; i < 3; ++i) first.step();
  const auto dir = testing::scratch_dir("resume");
  first.state().save(dir / "state.bin");
  DmaRunner second(model, ConditioningSpec::for_concept(1), c, RunState::load(dir / "state.bin"));
  EXPECT_EQ(second.completed_steps(), 3);
  second.run();
  const auto resumed = second.result();
  EXPECT_EQ(resumed.prototypes, full.prototypes);
  EXPECT_EQ(resumed.trace.hash(), full.trace.hash());
  auto other = c;
  other.iterations = 6;
  EXPECT_THROW(DmaRunner(model, ConditioningSpec::for_concept(1), other, RunState::load(dir / "state.bin")),
               InvalidArgument);
}

TEST(DmaRun, WorkerCountDoesNotChangeResults) {
  const auto model = testing::small_toy();
  auto c = small_config(5);
  const auto one = dma_run(model, ConditioningSpec::for_concept(0), c);
  c.workers = 3;
  const auto three = dma_run(model, ConditioningSpec::for_concept(0), c);
  EXPECT_EQ(one.prototypes, three.prototypes);
  EXPECT_EQ(one.trace.hash(), three.trace.hash());
}

TEST(DmaRun, DeterministicTraceHash) {
  const auto model = testing::small_toy();
  const auto c = small_config(4);
  EXPECT_EQ(dma_run(model, ConditioningSpec::for_concept(0), c).trace.hash(),
            dma_run(model, ConditioningSpec::for_concept(0), c).trace.hash());
}

TEST(DmaConfig, ValidationListsEveryViolation) {
  DmaConfig c;
  c.latent_count = 0;
  c.iterations = -1;
  c.learning_rate = 0.0;
  c.t_stop = 30;
  c.guidance.scale = -1.0;
  c.workers = 0;
  const auto v = c.validate();
  EXPECT_GE(v.size(), 6u);
  EXPECT_THROW(dma_run(testing::small_toy(), ConditioningSpec::for_concept(0), c), InvalidArgument);
  EXPECT_TRUE(DmaConfig{}.validate().empty());
}

TEST(DmaConfig, HashIgnoresWorkersOnly) {
  DmaConfig a, b;
  b.workers = 4;
  EXPECT_EQ(a.hash(), b.hash());
  b.t_stop = 9;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(DmaConfig, PrototypeIndices) {
  DmaConfig c;
  c.latent_count = 10;
  EXPECT_EQ(c.prototype_indices(), std::vector<int>{0});
  c.decode_count = 3;
  EXPECT_EQ(c.prototype_indices(), (std::vector<int>{0, 1, 2}));
  c.decode_indices = {7, 2};
  EXPECT_EQ(c.prototype_indices(), (std::vector<int>{7, 2}));
  c.decode_indices = {10};
  EXPECT_FALSE(c.validate().empty());
}

TEST(DecodePrototypes, OrderAndRange) {
  const auto model = AffineDenoiser::random({1, 2, 2}, 1, 2, 3);
  auto lat = init_latents(4, model->latent_shape(), 1);
  const Batch out = decode_prototypes(*model, lat, std::vector<int>{3, 1});
  EXPECT_EQ(out, lat.latents.select(std::vector<int>{3, 1}));
  EXPECT_EQ(decode_prototypes(*model, lat, std::vector<int>{2}).rows(), 1u);
  EXPECT_THROW(decode_prototypes(*model, lat, std::vector<int>{4}), InvalidArgument);
  EXPECT_THROW(decode_prototypes(*model, lat, std::vector<int>{}), InvalidArgument);
}

}  // namespace
}  // namespace dmavg
