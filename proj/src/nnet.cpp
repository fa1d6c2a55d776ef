#include "mfc/nnet.hpp"

#include <cmath>
#include <string>

#include "mfc/errors.hpp"

namespace mfc {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using WMap = Eigen::Map<const RowMat>;
using WMapMut = Eigen::Map<RowMat>;
using BMap = Eigen::Map<const VectorXd>;
using BMapMut = Eigen::Map<VectorXd>;

int layer_offset(const MlpSpec& spec, int layer) {
  int off = 0;
  for (int l = 0; l < layer; ++l) off += spec.layers[l + 1] * spec.layers[l] + spec.layers[l + 1];
  return off;
}

WMap weights(const MlpSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& params, int layer,
             int off) {
  return WMap(params.data() + off, spec.layers[layer + 1], spec.layers[layer]);
}

BMap bias(const MlpSpec& spec, const Eigen::Ref<const Eigen::VectorXd>& params, int layer,
          int off) {
  const int nw = spec.layers[layer + 1] * spec.layers[layer];
  return BMap(params.data() + off + nw, spec.layers[layer + 1]);
}

// tanh through exp: Eigen vectorizes exp for doubles while std::tanh stays
// scalar; the clamp keeps the ratio finite and matches tanh to 1 ulp.
void tanh_in_place(MatrixXd& m) {
  auto t = (2.0 * m.array().min(19.0).max(-19.0)).exp();
  m.array() = (t - 1.0) / (t + 1.0);
}

}  // namespace

void validate(const MlpSpec& spec) {
  if (spec.layers.size() < 2) throw ShapeError("MlpSpec needs at least input and output layers");
  for (int n : spec.layers)
    if (n < 1) throw ShapeError("MlpSpec layer sizes must be >= 1");
  if (spec.bounded_output && !(spec.out_lo < spec.out_hi))
    throw ParamError("bounded output requires out_lo < out_hi");
}

int param_count(const MlpSpec& spec) {
  return layer_offset(spec, spec.n_affine());
}

VectorXd init_params(const MlpSpec& spec, std::uint64_t seed) {
  validate(spec);
  VectorXd params = VectorXd::Zero(param_count(spec));
  RngStream rng = RngStream::substream(seed, {0x6d6c7069u});  // "mlpi"
  int off = 0;
  for (int l = 0; l < spec.n_affine(); ++l) {
    const int n_in = spec.layers[l];
    const int n_out = spec.layers[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(n_in + n_out));
    for (int i = 0; i < n_out * n_in; ++i) params[off + i] = rng.uniform(-limit, limit);
    off += n_out * n_in + n_out;  // biases stay zero
  }
  return params;
}

void mlp_forward_batch(const MlpSpec& spec, const Eigen::Ref<const VectorXd>& params,
                       const VectorXd& head,
                       const Eigen::Ref<const MatrixXd>& x, const VectorXd& tail,
                       MlpWorkspace& ws) {
  const int d_head = static_cast<int>(head.size());
  const int d_x = static_cast<int>(x.rows());
  const int d_tail = static_cast<int>(tail.size());
  if (d_head + d_x + d_tail != spec.input_dim())
    throw ShapeError("input split does not match declared input dimension");
  const Eigen::Index batch = x.cols();
  const int n_layers = spec.n_affine();
  ws.act.resize(n_layers);

  int off = 0;
  for (int l = 0; l < n_layers; ++l) {
    const WMap w = weights(spec, params, l, off);
    const BMap b = bias(spec, params, l, off);
    MatrixXd& out = ws.act[l];
    if (l == 0) {
      // z = W_head*head + W_x*x + W_tail*tail + b; the shared parts collapse
      // into one per-batch column.
      VectorXd shared = b;
      if (d_head > 0) shared.noalias() += w.leftCols(d_head) * head;
      if (d_tail > 0) shared.noalias() += w.rightCols(d_tail) * tail;
      out.noalias() = w.middleCols(d_head, d_x) * x;
      out.colwise() += shared;
    } else {
      out.noalias() = w * ws.act[l - 1];
      out.colwise() += b;
    }
    const bool is_output = (l == n_layers - 1);
    if (!is_output && spec.hidden_activation == Activation::Tanh) {
      tanh_in_place(out);
    } else if (is_output && spec.bounded_output) {
      const double mid = 0.5 * (spec.out_lo + spec.out_hi);
      const double half = 0.5 * (spec.out_hi - spec.out_lo);
      tanh_in_place(out);
      out = mid + half * out.array();
    }
    off += spec.layers[l + 1] * spec.layers[l] + spec.layers[l + 1];
  }
}

void mlp_backward_batch(const MlpSpec& spec, const Eigen::Ref<const VectorXd>& params,
                        const VectorXd& head,
                        const Eigen::Ref<const MatrixXd>& x, const VectorXd& tail,
                        const MlpWorkspace& ws, const MatrixXd& upstream,
                        const MlpGradSink& sink) {
  const int d_head = static_cast<int>(head.size());
  const int d_x = static_cast<int>(x.rows());
  const int d_tail = static_cast<int>(tail.size());
  const int n_layers = spec.n_affine();
  if (upstream.rows() != spec.output_dim() || upstream.cols() != x.cols())
    throw ShapeError("upstream shape mismatch");

  ws.delta.resize(n_layers);
  MatrixXd& top = ws.delta[n_layers - 1];
  top = upstream;
  if (spec.bounded_output) {
    const double mid = 0.5 * (spec.out_lo + spec.out_hi);
    const double half = 0.5 * (spec.out_hi - spec.out_lo);
    // d squash / d z = half * (1 - u^2) with u = (out - mid)/half
    const auto u = (ws.act.back().array() - mid) / half;
    top.array() *= half * (1.0 - u.square());
  }

  for (int l = n_layers - 1; l >= 0; --l) {
    const int off = layer_offset(spec, l);
    const WMap w = weights(spec, params, l, off);
    const bool first = (l == 0);
    const MatrixXd& delta = ws.delta[l];

    if (sink.params) {
      const int nw = spec.layers[l + 1] * spec.layers[l];
      WMapMut dw(sink.params + off, spec.layers[l + 1], spec.layers[l]);
      BMapMut db(sink.params + off + nw, spec.layers[l + 1]);
      const VectorXd row_sum = delta.rowwise().sum();
      if (first) {
        if (d_head > 0) dw.leftCols(d_head).noalias() += row_sum * head.transpose();
        dw.middleCols(d_head, d_x).noalias() += delta * x.transpose();
        if (d_tail > 0) dw.rightCols(d_tail).noalias() += row_sum * tail.transpose();
      } else {
        dw.noalias() += delta * ws.act[l - 1].transpose();
      }
      db.noalias() += row_sum;
    }

    if (first) {
      if (sink.x) sink.x->noalias() = w.middleCols(d_head, d_x).transpose() * delta;
      if (sink.head && d_head > 0)
        sink.head->noalias() += w.leftCols(d_head).transpose() * delta.rowwise().sum();
      if (sink.tail && d_tail > 0)
        sink.tail->noalias() += w.rightCols(d_tail).transpose() * delta.rowwise().sum();
      break;
    }

    MatrixXd& next = ws.delta[l - 1];
    next.noalias() = w.transpose() * delta;
    if (spec.hidden_activation == Activation::Tanh)
      next.array() *= 1.0 - ws.act[l - 1].array().square();
  }
}

VectorXd mlp_forward(const MlpSpec& spec, const VectorXd& params, const VectorXd& x) {
  if (x.size() != spec.input_dim()) throw ShapeError("input size mismatch");
  MlpWorkspace ws;
  mlp_forward_batch(spec, params, VectorXd(), x, VectorXd(), ws);
  return ws.act.back().col(0);
}

void mlp_grad(const MlpSpec& spec, const VectorXd& params, const VectorXd& x,
              const VectorXd& upstream, VectorXd& grad_params, VectorXd& grad_x) {
  if (x.size() != spec.input_dim()) throw ShapeError("input size mismatch");
  if (upstream.size() != spec.output_dim()) throw ShapeError("upstream size mismatch");
  MlpWorkspace ws;
  mlp_forward_batch(spec, params, VectorXd(), x, VectorXd(), ws);
  grad_params = VectorXd::Zero(param_count(spec));
  MatrixXd gx(x.size(), 1);
  MlpGradSink sink;
  sink.params = grad_params.data();
  sink.x = &gx;
  mlp_backward_batch(spec, params, VectorXd(), x, VectorXd(), ws, upstream, sink);
  grad_x = gx.col(0);
}

AdamState make_adam(int n_params, double lr, double beta1, double beta2, double eps) {
  AdamState s;
  s.m = VectorXd::Zero(n_params);
  s.v = VectorXd::Zero(n_params);
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  return s;
}

void adam_step(AdamState& state, VectorXd& params, const VectorXd& grad) {
  if (grad.size() != params.size() || state.m.size() != params.size())
    throw ShapeError("adam gradient/parameter size mismatch");
  if (!grad.allFinite()) throw TrainingDiverged("non-finite gradient in adam_step");
  state.step_count += 1;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  params.array() -=
      state.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + state.eps);
}

}  // namespace mfc
