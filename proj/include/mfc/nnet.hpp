#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "mfc/rng.hpp"

namespace mfc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Activation { Tanh, Identity };

/// Dense feedforward network specification. Hidden layers apply the hidden
/// activation; the output layer is affine unless `bounded_output` is set, in
/// which case the output is squashed into [out_lo, out_hi] with a scaled tanh.
struct MlpSpec {
  std::vector<int> layers;  // [input, hidden..., output], all >= 1, size >= 2
  Activation hidden_activation = Activation::Tanh;
  bool bounded_output = false;
  double out_lo = -1.0;
  double out_hi = 1.0;

  int input_dim() const { return layers.front(); }
  int output_dim() const { return layers.back(); }
  int n_affine() const { return static_cast<int>(layers.size()) - 1; }
};

void validate(const MlpSpec& spec);

/// Total number of parameters: sum over layers of n_l * n_{l-1} + n_l.
int param_count(const MlpSpec& spec);

/// Flat parameter layout: for each affine layer in order, the weight matrix
/// in row-major order (rows = outputs), then the bias vector.
/// Weights are Glorot-uniform on [-sqrt(6/(n_in+n_out)), +...], biases zero.
VectorXd init_params(const MlpSpec& spec, std::uint64_t seed);

/// Cached forward pass over a batch of B columns. act[l] holds the
/// post-activation output of affine layer l (so act.back() is the network
/// output, already squashed if the spec asks for a bounded output).
/// `delta` is backward-pass scratch, kept here so repeated passes reuse the
/// allocations.
struct MlpWorkspace {
  std::vector<MatrixXd> act;
  mutable std::vector<MatrixXd> delta;
};

/// Batched forward with the input columns laid out as [head; x; tail] where
/// `head` and `tail` are shared by every column of the batch. Either shared
/// part may be empty. head.size() + x.rows() + tail.size() must equal the
/// declared input dimension.
void mlp_forward_batch(const MlpSpec& spec, const Eigen::Ref<const VectorXd>& params,
                       const VectorXd& head,
                       const Eigen::Ref<const MatrixXd>& x, const VectorXd& tail,
                       MlpWorkspace& ws);

inline const MatrixXd& mlp_output(const MlpWorkspace& ws) { return ws.act.back(); }

/// Gradient accumulation targets for the batched backward pass. Non-null
/// entries receive += contributions; `x` is overwritten (not accumulated).
/// `params` points at a flat gradient buffer with the same layout as the
/// parameter vector (it may be a segment of a larger buffer).
struct MlpGradSink {
  double* params = nullptr;  // += d<upstream, output>/dparams
  MatrixXd* x = nullptr;     // =  d/dx, same shape as the per-sample block
  VectorXd* head = nullptr;  // += d/dhead
  VectorXd* tail = nullptr;  // += d/dtail
};

/// Exact reverse-mode pass for <upstream, output>. `ws` must come from a
/// matching mlp_forward_batch call on the same inputs.
void mlp_backward_batch(const MlpSpec& spec, const Eigen::Ref<const VectorXd>& params,
                        const VectorXd& head,
                        const Eigen::Ref<const MatrixXd>& x, const VectorXd& tail,
                        const MlpWorkspace& ws, const MatrixXd& upstream, const MlpGradSink& sink);

/// Single-input convenience wrappers.
VectorXd mlp_forward(const MlpSpec& spec, const VectorXd& params, const VectorXd& x);
void mlp_grad(const MlpSpec& spec, const VectorXd& params, const VectorXd& x,
              const VectorXd& upstream, VectorXd& grad_params, VectorXd& grad_x);

/// Adam with bias correction. `lr` may be adjusted between steps (step decay).
struct AdamState {
  VectorXd m;
  VectorXd v;
  long step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 1e-3;
};

AdamState make_adam(int n_params, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                    double eps = 1e-8);

/// One optimizer step in place. Throws TrainingDiverged on non-finite
/// gradient entries.
void adam_step(AdamState& state, VectorXd& params, const VectorXd& grad);

}  // namespace mfc
