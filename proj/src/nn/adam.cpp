#include <cmath>

#include "locfuse/cells.hpp"
#include "locfuse/error.hpp"

namespace locfuse::nn {

void TrainConfig::validate() const {
  require(learning_rate >= 0.0 && std::isfinite(learning_rate), "train config: learning_rate must be >= 0");
  require(batch_size >= 1, "train config: batch_size must be >= 1");
  require(iterations >= 0, "train config: iterations must be >= 0");
}

AdamState make_adam_state(const ParamSet& params) {
  return AdamState{params.zeros_like(), params.zeros_like(), 0};
}

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, const AdamConfig& cfg) {
  if (!params.same_layout(grads) || !params.same_layout(state.m) || !params.same_layout(state.v)) {
    fail(ErrorCode::kShapeMismatch, "adam_step: parameter/gradient/moment layouts differ");
  }
  if (!grads.all_finite()) fail(ErrorCode::kDiverged, "adam_step: non-finite gradient");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto m = state.m[i].array();
    auto v = state.v[i].array();
    const auto g = grads[i].array();
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.square();
    params[i].array() -= cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.epsilon);
  }
  params.touch();
}

}  // namespace locfuse::nn
