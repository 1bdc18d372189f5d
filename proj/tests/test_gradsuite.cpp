#include <gtest/gtest.h>

#include <set>

#include "hnet/gradsuite.hpp"

using namespace hnet;

TEST(Gradcheck, DetectsAWrongVjp) {
  // d/dx sin x reported as sin x: wrong everywhere except isolated points.
  const DiffOp bad{"bad_sin",
                   [](const std::vector<Tensor>& in) {
                     Tensor y = in[0];
                     for (double& v : y.data()) v = std::sin(v);
                     return y;
                   },
                   [](const std::vector<Tensor>& in, const Tensor& g) {
                     Tensor d = g;
                     for (std::size_t i = 0; i < d.size(); ++i) d[i] *= std::sin(in[0][i]);
                     return std::vector<Tensor>{d};
                   }};
  Rng rng(4);
  const auto r = gradcheck(bad, {rng.uniform_tensor({3, 4}, -1, 1)}, 1e-5, 1, kGradTolerance);
  EXPECT_GT(r.max_rel_error, 0.1);
  EXPECT_GT(r.max_rel_error_refined, 0.1);
}

TEST(Gradcheck, RefinementOnlyTouchesFailingEntries) {
  // |x| checked at a point straddling the kink at the coarse step only.
  const DiffOp absop{"abs",
                     [](const std::vector<Tensor>& in) {
                       Tensor y = in[0];
                       for (double& v : y.data()) v = std::abs(v);
                       return y;
                     },
                     [](const std::vector<Tensor>& in, const Tensor& g) {
                       Tensor d = g;
                       for (std::size_t i = 0; i < d.size(); ++i) d[i] *= in[0][i] < 0 ? -1.0 : 1.0;
                       return std::vector<Tensor>{d};
                     }};
  Tensor x({4});
  x[0] = 0.5;
  x[1] = -0.25;
  x[2] = 3e-6;  // within the coarse step of the kink, outside the refined one
  x[3] = 1.0;
  const auto r = gradcheck(absop, {x}, 1e-5, 2, kGradTolerance);
  EXPECT_GT(r.max_rel_error, 0.1);
  EXPECT_EQ(r.refined_entries, 1u);
  EXPECT_LT(r.max_rel_error_refined, 1e-8);
  const auto plain = gradcheck(absop, {x}, 1e-5, 2);
  EXPECT_EQ(plain.refined_entries, 0u);
  EXPECT_EQ(plain.max_rel_error_refined, plain.max_rel_error);
}

TEST(GradientSuite, CoversEveryCategory) {
  const auto cases = gradient_suite(0);
  std::set<std::string> names;
  for (const auto& c : cases) EXPECT_TRUE(names.insert(c.name).second) << "duplicate " << c.name;
  for (const char* n :
       {"batched_matmul", "softmax", "conv1x1", "conv3x3_stride1", "conv3x3_stride2", "relu", "sigmoid", "exp",
        "sinkhorn", "eg_retrieve", "ot_retrieve", "warp_left_from_right", "warp_right_from_left", "ssim",
        "photometric_loss", "smoothness_loss", "total_loss", "model_depth_off", "model_depth_eg-mea",
        "model_depth_ot-mea", "model_total_loss_off", "model_total_loss_ot-mea"}) {
    EXPECT_TRUE(names.count(n)) << n;
  }
  std::size_t attention = 0;
  for (const auto& n : names) attention += n.rfind("attention_", 0) == 0;
  EXPECT_EQ(attention, 4u);
}

TEST(GradientSuite, PassesAtSeedZero) {
  for (const auto& r : run_gradient_suite(0)) {
    EXPECT_LT(r.check.max_rel_error_refined, kGradTolerance)
        << r.name << " input " << r.check.worst_input << " index " << r.check.worst_index;
    EXPECT_GT(r.check.entries_checked, 0u) << r.name;
  }
}
