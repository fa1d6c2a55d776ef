#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mfc/checkpoint.hpp"
#include "mfc/errors.hpp"
#include "mfc/mfnn.hpp"

using namespace mfc;

namespace {

double mf_loss(const MeanFieldNet& net, double t, const Eigen::MatrixXd& x,
               const Eigen::Ref<const VectorXd>& cloud, const Eigen::MatrixXd& upstream) {
  MfContext ctx;
  if (net.variant == MfVariant::Cylindrical)
    mf_context_from_samples(net, t, cloud, ctx);
  else
    mf_context_from_feature(net, t, cloud, ctx);
  MeanFieldNet tmp = net;
  mf_eval_batch(tmp, x, ctx);
  return (upstream.array() * mf_output(ctx).array()).sum();
}

// Finite differences over all flat parameters, including the latent path.
void check_mf_grads(MeanFieldNet net, double t, const Eigen::MatrixXd& x, const VectorXd& cloud,
                    double rel_tol) {
  RngStream rng(17);
  Eigen::MatrixXd upstream(net.output_dim, x.cols());
  for (int j = 0; j < upstream.cols(); ++j)
    for (int i = 0; i < upstream.rows(); ++i) upstream(i, j) = rng.uniform(-1.0, 1.0);

  MfContext ctx;
  if (net.variant == MfVariant::Cylindrical)
    mf_context_from_samples(net, t, cloud, ctx);
  else
    mf_context_from_feature(net, t, cloud, ctx);
  mf_eval_batch(net, x, ctx);

  VectorXd grad = VectorXd::Zero(net.total_param_count());
  Eigen::MatrixXd gx(1, x.cols());
  MfGradSink sink;
  sink.params = grad.data();
  sink.x = &gx;
  Eigen::MatrixXd gcloud;
  if (net.variant == MfVariant::Cylindrical) {
    gcloud.resize(1, cloud.size());
    sink.cloud_x = &gcloud;
  }
  mf_grad_batch(net, x, ctx, upstream, sink);

  const double step = 1e-6;
  for (int i = 0; i < net.params.size(); ++i) {
    MeanFieldNet p = net;
    p.params[i] = net.params[i] + step;
    const double up = mf_loss(p, t, x, cloud, upstream);
    p.params[i] = net.params[i] - step;
    const double dn = mf_loss(p, t, x, cloud, upstream);
    const double fd = (up - dn) / (2.0 * step);
    const double scale = std::max({std::abs(fd), std::abs(grad[i]), 1e-4});
    CHECK(std::abs(fd - grad[i]) / scale < rel_tol);
  }
  if (net.variant == MfVariant::Cylindrical) {
    // Cloud samples feed the latent only; perturb a few.
    for (int i = 0; i < std::min<int>(3, cloud.size()); ++i) {
      VectorXd c = cloud;
      c[i] = cloud[i] + step;
      const double up = mf_loss(net, t, x, c, upstream);
      c[i] = cloud[i] - step;
      const double dn = mf_loss(net, t, x, c, upstream);
      const double fd = (up - dn) / (2.0 * step);
      const double scale = std::max({std::abs(fd), std::abs(gcloud(0, i)), 1e-4});
      CHECK(std::abs(fd - gcloud(0, i)) / scale < rel_tol);
    }
  }
}

}  // namespace

TEST_CASE("empirical latent: single sample, zero net, linearity") {
  MeanFieldNet net = make_cylindrical_net(4, {6}, 1, false, 3);

  VectorXd one(1);
  one[0] = 0.37;
  const LatentStat single = empirical_latent(net, 0.0, one);
  CHECK(single.n_samples == 1);
  VectorXd xin(1);
  xin[0] = 0.37;
  const VectorXd phi = mlp_forward(net.inner, VectorXd(net.inner_params()), xin);
  CHECK((single.value - phi).cwiseAbs().maxCoeff() < 1e-15);

  MeanFieldNet zeroed = net;
  zeroed.params.segment(net.outer_param_count() + param_count(net.inner) - (6 * 4 + 4), 6 * 4 + 4)
      .setZero();  // zero the inner output layer
  VectorXd many(9);
  many.setLinSpaced(9, -1.0, 1.0);
  CHECK(empirical_latent(zeroed, 0.0, many).value.cwiseAbs().maxCoeff() == 0.0);

  // Latent of concatenated sets is the sample-count weighted average.
  VectorXd a(3), b(5);
  a << -0.2, 0.4, 0.9;
  b << 0.1, 0.2, -0.7, 0.5, 0.0;
  VectorXd ab(8);
  ab << a, b;
  const VectorXd la = empirical_latent(net, 0.0, a).value;
  const VectorXd lb = empirical_latent(net, 0.0, b).value;
  const VectorXd lab = empirical_latent(net, 0.0, ab).value;
  CHECK((lab - (3.0 * la + 5.0 * lb) / 8.0).cwiseAbs().maxCoeff() < 1e-14);

  MeanFieldNet bin = make_bin_net(8, {6}, 1, false, 4);
  CHECK_THROWS_AS(empirical_latent(bin, 0.0, many), ShapeError);
  CHECK_THROWS_AS(empirical_latent(net, 0.0, VectorXd()), ShapeError);
}

TEST_CASE("mf_eval: zero parameters give zero output") {
  MeanFieldNet bin = make_bin_net(10, {20, 20}, 1, true, 5);
  bin.params.setZero();
  BinDensity d{{-1.0, 1.0, 10}, VectorXd::Constant(10, 0.5)};
  CHECK(mf_eval(bin, 0.1, 0.3, d)[0] == 0.0);

  MeanFieldNet cyl = make_cylindrical_net(5, {20, 20}, 2, true, 6);
  cyl.params.setZero();
  VectorXd cloud(4);
  cloud << 0.1, -0.3, 0.8, 0.0;
  const LatentStat lat = empirical_latent(cyl, 0.1, cloud);
  CHECK(mf_eval(cyl, 0.1, 0.3, lat).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("bin variant is exactly an MLP on the concatenated input") {
  MeanFieldNet net = make_bin_net(6, {9, 7}, 2, true, 11);
  BinDensity d{{0.0, 3.0, 6}, VectorXd::Zero(6)};
  d.w << 0.1, 0.4, 0.7, 0.5, 0.2, 0.1;
  d.w /= d.w.sum() * d.grid.h();
  const double t = 0.13, x = 1.7;

  const VectorXd got = mf_eval(net, t, x, d);
  VectorXd full(1 + 1 + 6);
  full[0] = t;
  full[1] = x;
  full.tail(6) = d.w;
  const VectorXd want = mlp_forward(net.outer, net.params, full);
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-14);

  // Gradients agree with the plain MLP on the concatenated input.
  Eigen::MatrixXd xs(1, 1);
  xs(0, 0) = x;
  MfContext ctx;
  mf_context_from_density(net, t, d, ctx);
  mf_eval_batch(net, xs, ctx);
  VectorXd grad = VectorXd::Zero(net.total_param_count());
  Eigen::MatrixXd gx(1, 1);
  MfGradSink sink;
  sink.params = grad.data();
  sink.x = &gx;
  VectorXd upstream(2);
  upstream << 0.7, -1.3;
  mf_grad_batch(net, xs, ctx, upstream, sink);

  VectorXd gp_ref, gx_ref;
  mlp_grad(net.outer, net.params, full, upstream, gp_ref, gx_ref);
  CHECK((grad - gp_ref).cwiseAbs().maxCoeff() < 1e-13);
  CHECK(std::abs(gx(0, 0) - gx_ref[1]) < 1e-13);
}

TEST_CASE("cylindrical output is permutation invariant in the cloud") {
  MeanFieldNet net = make_cylindrical_net(5, {8, 8}, 1, true, 21);
  VectorXd cloud(7);
  cloud << 0.3, -0.2, 0.9, 0.1, -0.6, 0.4, 0.0;
  const LatentStat l1 = empirical_latent(net, 0.2, cloud);
  std::reverse(cloud.data(), cloud.data() + cloud.size());
  const LatentStat l2 = empirical_latent(net, 0.2, cloud);
  const double y1 = mf_eval(net, 0.2, 0.5, l1)[0];
  const double y2 = mf_eval(net, 0.2, 0.5, l2)[0];
  CHECK(std::abs(y1 - y2) < 1e-12);
}

TEST_CASE("mean-field gradients match finite differences (both variants)") {
  RngStream rng(99);
  Eigen::MatrixXd x(1, 3);
  x << 0.2, -0.5, 0.8;

  MeanFieldNet bin = make_bin_net(4, {5}, 1, true, 31);
  VectorXd w(4);
  w << 0.2, 0.9, 0.6, 0.3;
  w /= w.sum() * 0.5;  // grid h = 0.5 on [-1, 1]
  check_mf_grads(bin, 0.07, x, w, 1e-6);

  MeanFieldNet cyl = make_cylindrical_net(3, {5}, 2, true, 32);
  VectorXd cloud(6);
  for (int i = 0; i < 6; ++i) cloud[i] = rng.uniform(-1.0, 1.0);
  check_mf_grads(cyl, 0.07, x, cloud, 1e-6);

  MeanFieldNet cyl_notime = make_cylindrical_net(3, {5}, 1, false, 33);
  check_mf_grads(cyl_notime, 0.0, x, cloud, 1e-6);
}

TEST_CASE("zero upstream produces zero gradients") {
  MeanFieldNet cyl = make_cylindrical_net(3, {6}, 1, true, 41);
  VectorXd cloud(5);
  cloud << 0.1, 0.2, 0.3, -0.1, -0.4;
  MfContext ctx;
  mf_context_from_samples(cyl, 0.3, cloud, ctx);
  Eigen::MatrixXd x(1, 5);
  x << 0.5, 0.2, -0.7, 0.0, 0.1;
  mf_eval_batch(cyl, x, ctx);
  VectorXd grad = VectorXd::Zero(cyl.total_param_count());
  Eigen::MatrixXd gx(1, 5), gc(1, 5);
  MfGradSink sink;
  sink.params = grad.data();
  sink.x = &gx;
  sink.cloud_x = &gc;
  mf_grad_batch(cyl, x, ctx, Eigen::MatrixXd::Zero(1, 5), sink);
  CHECK(grad.cwiseAbs().maxCoeff() == 0.0);
  CHECK(gx.cwiseAbs().maxCoeff() == 0.0);
  CHECK(gc.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("grid size mismatch is rejected") {
  MeanFieldNet net = make_bin_net(10, {5}, 1, false, 51);
  BinDensity d{{0.0, 1.0, 8}, VectorXd::Constant(8, 1.0 / 8.0 / 0.125)};
  MfContext ctx;
  CHECK_THROWS_AS(mf_context_from_density(net, 0.0, d, ctx), ShapeError);
}

TEST_CASE("checkpoint round trip preserves nets bit-exactly") {
  MeanFieldNet cyl = make_cylindrical_net(7, {20, 20}, 2, true, 61);
  save_checkpoint(cyl, "ckpt_test_cyl.bin");
  const MeanFieldNet back = load_checkpoint("ckpt_test_cyl.bin");
  CHECK(back.variant == MfVariant::Cylindrical);
  CHECK(back.time_input == true);
  CHECK(back.latent_dim == 7);
  CHECK(back.params == cyl.params);

  MeanFieldNet bin = make_bin_net(50, {20, 20}, 1, false, 62);
  save_checkpoint(bin, "ckpt_test_bin.bin");
  const MeanFieldNet bback = load_checkpoint("ckpt_test_bin.bin");
  CHECK(bback.variant == MfVariant::Bin);
  CHECK(bback.k_bins == 50);
  CHECK(bback.params == bin.params);

  CHECK_THROWS_AS(load_checkpoint("does_not_exist.bin"), ConfigError);
}
