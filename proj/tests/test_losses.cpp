#include <gtest/gtest.h>

#include "hnet/losses.hpp"
#include "test_support.hpp"

using namespace hnet;

namespace {

double ssim_const_oracle(double a, double b) {
  const double c1 = 1e-4;
  return (2 * a * b + c1) / (a * a + b * b + c1);  // variance terms cancel
}

MultiScaleOutput random_outputs(Rng& rng, std::size_t h, std::size_t w, std::size_t m) {
  MultiScaleOutput o;
  for (int b = 0; b < 2; ++b)
    for (std::size_t s = 0; s < m; ++s) o.omega[b].push_back(rng.uniform_tensor({1, h >> s, w >> s}, 0.05, 0.3));
  return o;
}

}  // namespace

TEST(Warp, ZeroDisparityIsIdentity) {
  Rng rng(1);
  const Tensor src = rng.uniform_tensor({3, 4, 7}, 0, 1);
  const Tensor d({1, 4, 7});
  EXPECT_EQ(warp(src, d, WarpDirection::left_from_right), src);
  EXPECT_EQ(warp(src, d, WarpDirection::right_from_left), src);
}

TEST(Warp, UnitDisparityShiftsAndDuplicatesBorder) {
  Rng rng(2);
  const Tensor src = rng.uniform_tensor({3, 2, 5}, 0, 1);
  const Tensor d({1, 2, 5}, 1.0);
  const Tensor rl = warp(src, d, WarpDirection::right_from_left);
  const Tensor lr = warp(src, d, WarpDirection::left_from_right);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_EQ(rl.at(c, i, j), src.at(c, i, std::min<std::size_t>(j + 1, 4)));
        EXPECT_EQ(lr.at(c, i, j), src.at(c, i, j == 0 ? 0 : j - 1));
      }
}

TEST(Warp, HalfPixelAveragesNeighbours) {
  Rng rng(3);
  const Tensor src = rng.uniform_tensor({3, 3, 6}, 0, 1);
  const Tensor out = warp(src, Tensor({1, 3, 6}, 0.5), WarpDirection::right_from_left);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j + 1 < 6; ++j)
        EXPECT_NEAR(out.at(c, i, j), 0.5 * (src.at(c, i, j) + src.at(c, i, j + 1)), 1e-15);
}

TEST(Warp, ExactOnIntegerDisparitiesAndLinearInSource) {
  Rng rng(4);
  const Tensor a = rng.uniform_tensor({3, 4, 9}, 0, 1), b = rng.uniform_tensor({3, 4, 9}, 0, 1);
  Tensor d({1, 4, 9});
  for (std::size_t q = 0; q < d.size(); ++q) d[q] = static_cast<double>(rng.next_u64() % 4);
  const Tensor out = warp(a, d, WarpDirection::left_from_right);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 9; ++j) {
        const auto k = static_cast<std::size_t>(d.at(0, i, j));
        EXPECT_EQ(out.at(c, i, j), a.at(c, i, j >= k ? j - k : 0));
      }
  Tensor df = rng.uniform_tensor({1, 4, 9}, 0, 3);
  const Tensor lhs = warp(add(scaled(a, 2.0), scaled(b, -0.5)), df, WarpDirection::right_from_left);
  const Tensor rhs = add(scaled(warp(a, df, WarpDirection::right_from_left), 2.0),
                         scaled(warp(b, df, WarpDirection::right_from_left), -0.5));
  for (std::size_t q = 0; q < lhs.size(); ++q) EXPECT_NEAR(lhs[q], rhs[q], 1e-14);
}

TEST(Warp, RejectsShapeMismatch) {
  EXPECT_THROW(warp(Tensor({3, 4, 5}), Tensor({1, 4, 4}), WarpDirection::left_from_right), ShapeError);
}

TEST(Warp, Gradcheck) {
  for (auto dir : {WarpDirection::left_from_right, WarpDirection::right_from_left}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(100 + seed);
      DiffOp op{"warp", [dir](const std::vector<Tensor>& in) { return warp(in[0], in[1], dir); },
                [dir](const std::vector<Tensor>& in, const Tensor& g) {
                  auto wg = warp_vjp(in[0], in[1], dir, g);
                  return std::vector<Tensor>{wg.dsource, wg.ddisp};
                }};
      // Keep samples off integer positions and include clamped ones.
      Tensor d = rng.uniform_tensor({1, 3, 6}, 0, 4);
      for (double& v : d.data()) v = std::floor(v) + 0.1 + 0.8 * (v - std::floor(v));
      const auto res = gradcheck(op, {rng.uniform_tensor({3, 3, 6}, 0, 1), d}, 1e-5, seed);
      EXPECT_LT(res.max_rel_error, 1e-4);
    }
  }
}

TEST(Ssim, IdenticalImagesGiveOne) {
  Rng rng(5);
  const Tensor x = rng.uniform_tensor({3, 5, 6}, 0, 1);
  for (double v : ssim(x, x).data()) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(Ssim, ConstantImagesMatchClosedForm) {
  for (auto [a, b] : {std::pair{0.0, 1.0}, {0.2, 0.7}, {0.5, 0.5}, {0.9, 0.1}}) {
    const Tensor s = ssim(Tensor({3, 4, 4}, a), Tensor({3, 4, 4}, b));
    for (double v : s.data()) EXPECT_NEAR(v, ssim_const_oracle(a, b), 1e-12);
  }
}

TEST(Ssim, RangeOnRandomImages) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor s = ssim(rng.uniform_tensor({3, 5, 7}, 0, 1), rng.uniform_tensor({3, 5, 7}, 0, 1));
    for (double v : s.data()) {
      EXPECT_GE((1 - v) / 2, -1e-12);
      EXPECT_LE((1 - v) / 2, 1 + 1e-12);
    }
  }
}

TEST(Ssim, BorderWindowsAreTruncated) {
  // A single bright pixel in a corner: the corner window holds 4 pixels.
  Tensor x({1, 3, 3});
  x.at(0, 0, 0) = 1.0;
  const Tensor mx = detail::box3_mean(x);
  EXPECT_DOUBLE_EQ(mx.at(0, 0, 0), 0.25);
  EXPECT_DOUBLE_EQ(mx.at(0, 0, 1), 1.0 / 6.0);
  EXPECT_DOUBLE_EQ(mx.at(0, 1, 1), 1.0 / 9.0);
  Rng rng(6);
  const Tensor g = rng.uniform_tensor({2, 3, 4}, -1, 1), v = rng.uniform_tensor({2, 3, 4}, -1, 1);
  EXPECT_NEAR(hnet::testing::frobenius(detail::box3_mean(v), g), hnet::testing::frobenius(v, detail::box3_mean_adjoint(g)),
              1e-14);
}

TEST(Ssim, Gradcheck) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(200 + seed);
    DiffOp op{"ssim", [](const std::vector<Tensor>& in) { return ssim(in[0], in[1]); },
              [](const std::vector<Tensor>& in, const Tensor& g) {
                auto pg = ssim_vjp(in[0], in[1], g);
                return std::vector<Tensor>{pg.dx, pg.dy};
              }};
    const auto res = gradcheck(op, {rng.uniform_tensor({3, 4, 5}, 0, 1), rng.uniform_tensor({3, 4, 5}, 0, 1)},
                               1e-5, seed);
    EXPECT_LT(res.max_rel_error, 1e-4);
  }
}

TEST(Photometric, ZeroOnIdenticalImages) {
  Rng rng(7);
  const Tensor x = rng.uniform_tensor({3, 6, 8}, 0, 1);
  EXPECT_NEAR(photometric_loss(x, x), 0.0, 1e-15);
}

TEST(Photometric, GammaZeroIsMeanAbsoluteError) {
  Rng rng(8);
  const Tensor x = rng.uniform_tensor({3, 6, 8}, 0, 1), y = rng.uniform_tensor({3, 6, 8}, 0, 1);
  double mae = 0.0;
  for (std::size_t q = 0; q < x.size(); ++q) mae += std::abs(x[q] - y[q]);
  mae /= static_cast<double>(x.size());
  LossConfig cfg;
  cfg.gamma = 0.0;
  EXPECT_DOUBLE_EQ(photometric_loss(x, y, cfg), mae);
}

TEST(Photometric, ConstantTwoByTwoHandValue) {
  const double expected = 0.425 * (1.0 - ssim_const_oracle(0.0, 1.0)) + 0.15 * 1.0;
  EXPECT_NEAR(photometric_loss(Tensor({3, 2, 2}, 0.0), Tensor({3, 2, 2}, 1.0)), expected, 1e-12);
}

TEST(Photometric, NonNegativeAndPositiveOnTexturedDifference) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(300 + seed);
    const Tensor x = rng.uniform_tensor({3, 5, 6}, 0, 1);
    Tensor y = x;
    y[rng.next_u64() % y.size()] += 0.01;
    EXPECT_GT(photometric_loss(x, y), 0.0);
    EXPECT_GE(photometric_loss(x, rng.uniform_tensor({3, 5, 6}, 0, 1)), 0.0);
  }
}

TEST(Photometric, RejectsShapeMismatch) {
  EXPECT_THROW(photometric_loss(Tensor({3, 2, 2}), Tensor({3, 2, 3})), ShapeError);
}

TEST(Photometric, Gradcheck) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(400 + seed);
    DiffOp op{"photometric",
              [](const std::vector<Tensor>& in) { return Tensor({1}, photometric_loss(in[0], in[1])); },
              [](const std::vector<Tensor>& in, const Tensor& g) {
                auto pg = photometric_loss_vjp(in[0], in[1], g[0]);
                return std::vector<Tensor>{pg.dx, pg.dy};
              }};
    const auto res = gradcheck(op, {rng.uniform_tensor({3, 4, 5}, 0, 1), rng.uniform_tensor({3, 4, 5}, 0, 1)},
                               1e-5, seed);
    EXPECT_LT(res.max_rel_error, 1e-4);
  }
}

TEST(Photometric, MaskedMeanSkipsNeighbourhoodOfExcludedPixels) {
  Rng rng(9);
  const Tensor x = rng.uniform_tensor({3, 5, 8}, 0, 1);
  Tensor y = x;
  for (std::size_t c = 0; c < 3; ++c) y.at(c, 2, 0) = 1.0 - x.at(c, 2, 0);
  Tensor mask({1, 5, 8});
  mask.at(0, 2, 0) = 1.0;
  const auto [loss, n] = masked_photometric_loss(x, y, mask);
  EXPECT_EQ(n, 5u * 8u - 3u * 2u);
  EXPECT_NEAR(loss, 0.0, 1e-15);
  EXPECT_THROW(masked_photometric_loss(x, y, Tensor({1, 5, 8}, 1.0)), ValidationError);
}

TEST(Smoothness, ConstantMapIsZero) {
  Rng rng(10);
  EXPECT_EQ(smoothness_loss(Tensor({1, 4, 6}, 0.37), rng.uniform_tensor({3, 4, 6}, 0, 1)), 0.0);
}

TEST(Smoothness, EdgeImageLowersLoss) {
  Tensor d({1, 4, 4}), flat({3, 4, 4}, 0.5), edge({3, 4, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      d.at(0, i, j) = 1.0 + j;
      for (std::size_t c = 0; c < 3; ++c) edge.at(c, i, j) = j >= 2 ? 1.0 : 0.0;
    }
  // Direct evaluation: mean(d) = 2.5, three unit steps per row.
  const double flat_oracle = 4 * 3 * (1.0 / 2.5) / 16.0;
  const double edge_oracle = 4 * (2 + std::exp(-1.0)) * (1.0 / 2.5) / 16.0;
  EXPECT_NEAR(smoothness_loss(d, flat), flat_oracle, 1e-15);
  EXPECT_NEAR(smoothness_loss(d, edge), edge_oracle, 1e-15);
  EXPECT_LT(smoothness_loss(d, edge), smoothness_loss(d, flat));
}

TEST(Smoothness, InvariantToPositiveRescaling) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(500 + seed);
    const Tensor d = rng.uniform_tensor({1, 5, 7}, 0.1, 2), img = rng.uniform_tensor({3, 5, 7}, 0, 1);
    const double base = smoothness_loss(d, img);
    for (double k : {1e-3, 0.5, 3.0, 1e4}) EXPECT_NEAR(smoothness_loss(scaled(d, k), img), base, 1e-12 * base);
  }
}

TEST(Smoothness, RejectsDegenerateMeanAndShapes) {
  EXPECT_THROW(smoothness_loss(Tensor({1, 3, 3}), Tensor({3, 3, 3})), ValidationError);
  EXPECT_THROW(smoothness_loss(Tensor({1, 3, 4}, 1.0), Tensor({3, 3, 3})), ShapeError);
}

TEST(Smoothness, Gradcheck) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(600 + seed);
    const Tensor img = rng.uniform_tensor({3, 4, 5}, 0, 1);
    DiffOp op{"smoothness", [img](const std::vector<Tensor>& in) { return Tensor({1}, smoothness_loss(in[0], img)); },
              [img](const std::vector<Tensor>& in, const Tensor& g) {
                return std::vector<Tensor>{smoothness_loss_vjp(in[0], img, g[0])};
              }};
    const auto res = gradcheck(op, {rng.uniform_tensor({1, 4, 5}, 0.1, 1)}, 1e-5, seed);
    EXPECT_LT(res.max_rel_error, 1e-4);
  }
}

TEST(TotalLoss, RecombinationIdentity) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(700 + seed);
    const Tensor l = rng.uniform_tensor({3, 8, 16}, 0, 1), r = rng.uniform_tensor({3, 8, 16}, 0, 1);
    const auto ev = total_loss(random_outputs(rng, 8, 16, 3), l, r, Camera{}, LossConfig{});
    const auto& rep = ev.report;
    double sum = 0.0;
    for (int b = 0; b < 2; ++b)
      for (const auto& t : rep.terms[b]) sum += t.photometric + 0.001 * t.smoothness;
    EXPECT_NEAR(rep.total, sum / 6.0, 1e-12);
    EXPECT_NEAR(rep.total, rep.photometric + rep.lambda * rep.smoothness, 1e-12);
  }
}

TEST(TotalLoss, LambdaZeroIsPhotometricAverage) {
  Rng rng(11);
  const Tensor l = rng.uniform_tensor({3, 8, 16}, 0, 1), r = rng.uniform_tensor({3, 8, 16}, 0, 1);
  LossConfig cfg;
  cfg.lambda = 0.0;
  const auto rep = total_loss(random_outputs(rng, 8, 16, 2), l, r, Camera{}, cfg).report;
  double s = 0.0;
  for (int b = 0; b < 2; ++b)
    for (const auto& t : rep.terms[b]) s += t.photometric;
  EXPECT_NEAR(rep.total, s / 4.0, 1e-15);
}

TEST(TotalLoss, SingleScaleAveragesBranches) {
  Rng rng(12);
  const Tensor l = rng.uniform_tensor({3, 8, 16}, 0, 1), r = rng.uniform_tensor({3, 8, 16}, 0, 1);
  const auto out = random_outputs(rng, 8, 16, 1);
  LossConfig cfg;
  const auto rep = total_loss(out, l, r, Camera{}, cfg).report;
  // Independent evaluation of each branch.
  auto branch = [&](const Tensor& om, const Tensor& self, const Tensor& other, WarpDirection dir) {
    const Tensor inv = map(om, [](double o) { return 9.99 * o + 0.01; });
    return photometric_loss(self, warp(other, inv, dir)) + 0.001 * smoothness_loss(inv, self);
  };
  const double ll = branch(out.omega[0][0], l, r, WarpDirection::left_from_right);
  const double lr = branch(out.omega[1][0], r, l, WarpDirection::right_from_left);
  EXPECT_NEAR(rep.total, (ll + lr) / 2.0, 1e-15);
}

TEST(TotalLoss, RejectsMissingOrMisshapenScales) {
  Rng rng(13);
  const Tensor l = rng.uniform_tensor({3, 8, 16}, 0, 1);
  auto out = random_outputs(rng, 8, 16, 2);
  out.omega[1].pop_back();
  EXPECT_THROW(total_loss(out, l, l, Camera{}, LossConfig{}), ValidationError);
  out = random_outputs(rng, 8, 16, 2);
  out.omega[0][1] = Tensor({1, 4, 4}, 0.5);
  EXPECT_THROW(total_loss(out, l, l, Camera{}, LossConfig{}), ShapeError);
}

TEST(TotalLoss, GradcheckWithRespectToOutputs) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(800 + seed);
    const std::size_t h = 8, w = 16, m = 3;
    const Tensor l = rng.uniform_tensor({3, h, w}, 0, 1), r = rng.uniform_tensor({3, h, w}, 0, 1);
    const Camera cam{32.0, 0.03125};
    LossConfig cfg;
    cfg.lambda = 0.1;  // make the smoothness path visible in the check
    auto unflatten = [=](const std::vector<Tensor>& in) {
      MultiScaleOutput o;
      for (int b = 0; b < 2; ++b)
        for (std::size_t s = 0; s < m; ++s) o.omega[b].push_back(in[b * m + s]);
      return o;
    };
    DiffOp op{"total_loss",
              [=](const std::vector<Tensor>& in) {
                return Tensor({1}, total_loss(unflatten(in), l, r, cam, cfg).report.total);
              },
              [=](const std::vector<Tensor>& in, const Tensor& g) {
                const auto out = unflatten(in);
                const auto ev = total_loss(out, l, r, cam, cfg);
                const auto gr = total_loss_vjp(out, ev, l, r, cam, cfg, {}, g[0]);
                std::vector<Tensor> v;
                for (int b = 0; b < 2; ++b)
                  for (const auto& t : gr[b]) v.push_back(t);
                return v;
              }};
    const auto start = random_outputs(rng, h, w, m);
    std::vector<Tensor> in;
    for (int b = 0; b < 2; ++b)
      for (const auto& t : start.omega[b]) in.push_back(t);
    const auto res = gradcheck(op, in, 1e-5, seed);
    EXPECT_LT(res.max_rel_error, 1e-4) << "input " << res.worst_input << " idx " << res.worst_index
                                       << " a=" << res.analytic << " n=" << res.numeric;
  }
}
