#include "mfc/mfnn.hpp"

#include "mfc/errors.hpp"

namespace mfc {

namespace {

MlpSpec dense_spec(int in_dim, const std::vector<int>& hidden, int out_dim) {
  MlpSpec spec;
  spec.layers.reserve(hidden.size() + 2);
  spec.layers.push_back(in_dim);
  spec.layers.insert(spec.layers.end(), hidden.begin(), hidden.end());
  spec.layers.push_back(out_dim);
  return spec;
}

VectorXd time_head(const MeanFieldNet& net, double t) {
  if (!net.time_input) return VectorXd();
  VectorXd h(1);
  h[0] = t;
  return h;
}

}  // namespace

void validate(const MeanFieldNet& net) {
  validate(net.outer);
  const int t = net.time_input ? 1 : 0;
  if (net.variant == MfVariant::Bin) {
    if (net.k_bins < 1) throw ShapeError("bin net needs k_bins >= 1");
    if (net.outer.input_dim() != t + net.state_dim + net.k_bins)
      throw ShapeError("bin net input dimension mismatch");
  } else {
    validate(net.inner);
    if (net.latent_dim < 1) throw ShapeError("cylindrical net needs latent_dim >= 1");
    if (net.outer.input_dim() != t + net.state_dim + net.latent_dim)
      throw ShapeError("cylindrical outer input dimension mismatch");
    if (net.inner.input_dim() != t + net.state_dim)
      throw ShapeError("cylindrical inner input dimension mismatch");
    if (net.inner.output_dim() != net.latent_dim)
      throw ShapeError("cylindrical inner output dimension mismatch");
  }
  if (net.outer.output_dim() != net.output_dim) throw ShapeError("output dimension mismatch");
  if (net.params.size() != net.total_param_count())
    throw ShapeError("flat parameter vector size mismatch");
}

MeanFieldNet make_bin_net(int k_bins, const std::vector<int>& hidden, int output_dim,
                          bool time_input, std::uint64_t seed) {
  MeanFieldNet net;
  net.variant = MfVariant::Bin;
  net.time_input = time_input;
  net.output_dim = output_dim;
  net.k_bins = k_bins;
  net.outer = dense_spec((time_input ? 1 : 0) + 1 + k_bins, hidden, output_dim);
  net.params = init_params(net.outer, seed);
  validate(net);
  return net;
}

MeanFieldNet make_cylindrical_net(int latent_dim, const std::vector<int>& hidden, int output_dim,
                                  bool time_input, std::uint64_t seed) {
  MeanFieldNet net;
  net.variant = MfVariant::Cylindrical;
  net.time_input = time_input;
  net.output_dim = output_dim;
  net.latent_dim = latent_dim;
  const int t = time_input ? 1 : 0;
  net.outer = dense_spec(t + 1 + latent_dim, hidden, output_dim);
  net.inner = dense_spec(t + 1, hidden, latent_dim);
  net.params.resize(param_count(net.outer) + param_count(net.inner));
  net.params << init_params(net.outer, seed), init_params(net.inner, mix64(seed) + 1);
  validate(net);
  return net;
}

LatentStat empirical_latent(const MeanFieldNet& net, double t,
                            const Eigen::Ref<const VectorXd>& samples) {
  if (net.variant != MfVariant::Cylindrical)
    throw ShapeError("empirical_latent requires a cylindrical net");
  if (samples.size() == 0) throw ShapeError("empirical_latent needs a nonempty sample set");
  MfContext ctx;
  mf_context_from_samples(net, t, samples, ctx);
  return LatentStat{ctx.feature, static_cast<int>(samples.size())};
}

void mf_context_from_density(const MeanFieldNet& net, double t, const BinDensity& density,
                             MfContext& ctx) {
  if (net.variant != MfVariant::Bin)
    throw ShapeError("bin-density context requires a bin-variant net (estimate a cloud instead)");
  if (density.grid.k_bins != net.k_bins)
    throw ShapeError("bin density grid size does not match the declared K");
  ctx.t = t;
  ctx.feature = density.w;
  ctx.latent_cloud.resize(0, 0);
}

void mf_context_from_samples(const MeanFieldNet& net, double t,
                             const Eigen::Ref<const VectorXd>& samples, MfContext& ctx) {
  if (net.variant != MfVariant::Cylindrical)
    throw ShapeError("sample-cloud context requires a cylindrical net");
  if (samples.size() == 0) throw ShapeError("latent cloud must be nonempty");
  ctx.t = t;
  ctx.latent_cloud = samples.transpose();
  const VectorXd head = time_head(net, t);
  mlp_forward_batch(net.inner, net.inner_params(), head, ctx.latent_cloud, VectorXd(),
                    ctx.inner_ws);
  ctx.feature = ctx.inner_ws.act.back().rowwise().mean();
}

void mf_context_from_feature(const MeanFieldNet& net, double t, const VectorXd& feature,
                             MfContext& ctx) {
  const int want = net.variant == MfVariant::Bin ? net.k_bins : net.latent_dim;
  if (feature.size() != want) throw ShapeError("feature size mismatch");
  ctx.t = t;
  ctx.feature = feature;
  ctx.latent_cloud.resize(0, 0);
}

void mf_eval_batch(const MeanFieldNet& net, const Eigen::Ref<const Eigen::MatrixXd>& x,
                   MfContext& ctx) {
  const VectorXd head = time_head(net, ctx.t);
  mlp_forward_batch(net.outer, net.outer_params(), head, x, ctx.feature, ctx.outer_ws);
}

void mf_grad_batch(const MeanFieldNet& net, const Eigen::Ref<const Eigen::MatrixXd>& x,
                   const MfContext& ctx, const Eigen::MatrixXd& upstream, const MfGradSink& sink) {
  const VectorXd head = time_head(net, ctx.t);


  const bool latent_path = net.variant == MfVariant::Cylindrical && ctx.latent_cloud.size() > 0 &&
                           (sink.params || sink.cloud_x || sink.feature);
  VectorXd feature_grad;
  if (latent_path || sink.feature) feature_grad = VectorXd::Zero(ctx.feature.size());

  MlpGradSink outer_sink;
  outer_sink.params = sink.params;
  outer_sink.x = sink.x;
  outer_sink.tail = (latent_path || sink.feature) ? &feature_grad : nullptr;
  mlp_backward_batch(net.outer, net.outer_params(), head, x, ctx.feature, ctx.outer_ws,
                     upstream, outer_sink);

  if (sink.feature) *sink.feature += feature_grad;

  if (latent_path) {
    // latent = (1/N) sum_n phi(t, cloud_n): each cloud column carries the
    // same upstream scaled by 1/N.
    const Eigen::Index n = ctx.latent_cloud.cols();
    const Eigen::MatrixXd inner_up =
        (feature_grad / static_cast<double>(n)).replicate(1, n);
    MlpGradSink inner_sink;
    inner_sink.params = sink.params ? sink.params + net.outer_param_count() : nullptr;
    inner_sink.x = sink.cloud_x;
    mlp_backward_batch(net.inner, net.inner_params(), head, ctx.latent_cloud, VectorXd(),
                       ctx.inner_ws, inner_up, inner_sink);
  }
}

VectorXd mf_eval(const MeanFieldNet& net, double t, double x, const BinDensity& density) {
  MfContext ctx;
  mf_context_from_density(net, t, density, ctx);
  Eigen::MatrixXd xs(1, 1);
  xs(0, 0) = x;
  mf_eval_batch(net, xs, ctx);
  return mf_output(ctx).col(0);
}

VectorXd mf_eval(const MeanFieldNet& net, double t, double x, const LatentStat& latent) {
  if (net.variant != MfVariant::Cylindrical)
    throw ShapeError("latent evaluation requires a cylindrical net");
  MfContext ctx;
  mf_context_from_feature(net, t, latent.value, ctx);
  Eigen::MatrixXd xs(1, 1);
  xs(0, 0) = x;
  mf_eval_batch(net, xs, ctx);
  return mf_output(ctx).col(0);
}

}  // namespace mfc
