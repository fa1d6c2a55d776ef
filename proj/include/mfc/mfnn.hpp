#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "mfc/measure.hpp"
#include "mfc/nnet.hpp"

namespace mfc {

enum class MfVariant { Bin, Cylindrical };

/// Average of the inner-network features over a sample cloud:
/// value = (1/N) sum_n phi(t, X^(n)).
struct LatentStat {
  VectorXd value;
  int n_samples = 0;
};

/// A measure-input network. Bin variant: Phi([t?, x, p_1..p_K]). Cylindrical
/// variant: Psi([t?, x, latent]) with latent = <phi(t, .), mu> estimated from
/// samples. Parameters are stored flat, outer network first.
struct MeanFieldNet {
  MfVariant variant = MfVariant::Bin;
  bool time_input = false;
  int state_dim = 1;
  int output_dim = 1;
  int k_bins = 0;      // bin variant
  int latent_dim = 0;  // cylindrical variant
  MlpSpec outer;       // Phi or Psi
  MlpSpec inner;       // phi (cylindrical only)
  VectorXd params;

  int outer_param_count() const { return param_count(outer); }
  int inner_param_count() const {
    return variant == MfVariant::Cylindrical ? param_count(inner) : 0;
  }
  int total_param_count() const { return outer_param_count() + inner_param_count(); }

  Eigen::VectorBlock<const VectorXd> outer_params() const {
    return params.segment(0, outer_param_count());
  }
  Eigen::VectorBlock<const VectorXd> inner_params() const {
    return params.segment(outer_param_count(), inner_param_count());
  }
};

void validate(const MeanFieldNet& net);

MeanFieldNet make_bin_net(int k_bins, const std::vector<int>& hidden, int output_dim,
                          bool time_input, std::uint64_t seed);
MeanFieldNet make_cylindrical_net(int latent_dim, const std::vector<int>& hidden, int output_dim,
                                  bool time_input, std::uint64_t seed);

/// Evaluation context for one (time, measure) pair, reused across the whole
/// particle batch. For the bin variant `feature` holds the K bin weights; for
/// the cylindrical variant it holds the latent, with the inner workspace and
/// the latent cloud retained for the backward pass.
struct MfContext {
  double t = 0.0;
  VectorXd feature;
  MlpWorkspace outer_ws;
  MlpWorkspace inner_ws;        // cylindrical only
  Eigen::MatrixXd latent_cloud;  // 1 x N row of samples that formed the latent
};

/// LatentStat of a cylindrical net over a sample cloud. Throws on the bin
/// variant or an empty cloud.
LatentStat empirical_latent(const MeanFieldNet& net, double t,
                            const Eigen::Ref<const VectorXd>& samples);

/// Prepare a context from a bin density (bin variant) or from the sample
/// cloud feeding the latent (cylindrical variant).
void mf_context_from_density(const MeanFieldNet& net, double t, const BinDensity& density,
                             MfContext& ctx);
void mf_context_from_samples(const MeanFieldNet& net, double t,
                             const Eigen::Ref<const VectorXd>& samples, MfContext& ctx);
/// Context with an externally supplied feature (bin weights or a precomputed
/// latent). The backward pass then treats the feature as an input constant.
void mf_context_from_feature(const MeanFieldNet& net, double t, const VectorXd& feature,
                             MfContext& ctx);

/// Forward over a batch of states (1 x B row). Output is output_dim x B,
/// available as mf_output(ctx) afterwards.
void mf_eval_batch(const MeanFieldNet& net, const Eigen::Ref<const Eigen::MatrixXd>& x,
                   MfContext& ctx);

inline const Eigen::MatrixXd& mf_output(const MfContext& ctx) { return ctx.outer_ws.act.back(); }

/// Gradient accumulation targets for mf_grad_batch. `params` spans the full
/// flat vector (outer then inner). `cloud_x` receives the latent-path
/// gradients with respect to the latent cloud samples; when the evaluation
/// batch and the latent cloud are the same particles the caller adds it to
/// `x`. All accumulating targets must be pre-sized; `x`/`cloud_x` are
/// overwritten.
struct MfGradSink {
  double* params = nullptr;  // flat buffer with the net's parameter layout
  Eigen::MatrixXd* x = nullptr;        // 1 x B
  Eigen::MatrixXd* cloud_x = nullptr;  // 1 x N latent cloud (cylindrical)
  VectorXd* feature = nullptr;         // d<upstream,out>/dfeature
};

void mf_grad_batch(const MeanFieldNet& net, const Eigen::Ref<const Eigen::MatrixXd>& x,
                   const MfContext& ctx, const Eigen::MatrixXd& upstream, const MfGradSink& sink);

/// Spec-level single-point wrappers.
VectorXd mf_eval(const MeanFieldNet& net, double t, double x, const BinDensity& density);
VectorXd mf_eval(const MeanFieldNet& net, double t, double x, const LatentStat& latent);

}  // namespace mfc
