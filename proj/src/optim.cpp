#include "attmask/optim.hpp"

#include <cmath>
#include <numbers>

#include "attmask/error.hpp"

namespace attmask {

template <typename T>
OptimizerState<T> OptimizerState<T>::for_parameters(std::span<const Tensor<T>> params,
                                                    AdamWHyper hyper) {
  OptimizerState state;
  state.hyper = hyper;
  for (const auto& p : params) {
    state.first_moment.emplace_back(p.numel(), T(0));
    state.second_moment.emplace_back(p.numel(), T(0));
  }
  return state;
}

template <typename T>
void adamw_step(std::span<Tensor<T>> params, OptimizerState<T>& state, double lr,
                double weight_decay, std::span<const bool> decay_mask,
                std::span<const std::string> names) {
  if (lr < 0.0 || weight_decay < 0.0) {
    throw ParameterError("adamw_step: lr and weight_decay must be >= 0");
  }
  if (state.first_moment.size() != params.size() || (!decay_mask.empty() && decay_mask.size() != params.size())) {
    throw DimensionError("adamw_step: optimizer state tracks " +
                         std::to_string(state.first_moment.size()) + " parameters, got " +
                         std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i].numel()) {
      throw DimensionError("adamw_step: moment shape drift on parameter " + std::to_string(i));
    }
    for (const T g : params[i].grad()) {
      if (!std::isfinite(g)) {
        const std::string who = i < names.size() ? names[i] : "#" + std::to_string(i);
        throw NumericError("adamw_step: non-finite gradient in parameter " + who + " " +
                           shape_string(params[i].shape()));
      }
    }
  }

  const auto step = ++state.step;
  const double b1 = state.hyper.beta1, b2 = state.hyper.beta2;
  const T bias1 = T(1.0 - std::pow(b1, static_cast<double>(step)));
  const T bias2 = T(1.0 - std::pow(b2, static_cast<double>(step)));
  const T lr_t = T(lr);
  const T eps = T(state.hyper.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    auto g = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const bool decay = decay_mask.empty() || decay_mask[i];
    const T shrink = decay ? T(1.0 - lr * weight_decay) : T(1);
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T gj = g.empty() ? T(0) : g[j];
      m[j] = T(b1) * m[j] + T(1.0 - b1) * gj;
      v[j] = T(b2) * v[j] + T(1.0 - b2) * gj * gj;
      const T mhat = m[j] / bias1;
      const T vhat = v[j] / bias2;
      w[j] = w[j] * shrink - lr_t * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

void ScheduleSpec::validate() const {
  if (total_steps < 0 || warmup_steps < 0) {
    throw ParameterError("schedule: negative step counts");
  }
  if (warmup_steps > total_steps) {
    throw ParameterError("schedule: warmup " + std::to_string(warmup_steps) +
                         " exceeds total " + std::to_string(total_steps));
  }
  if (kind == ScheduleKind::WarmupCosine && total_steps > 0 && warmup_steps == total_steps) {
    throw ParameterError("schedule: warmup must end before the cosine phase");
  }
}

double eval_schedule(const ScheduleSpec& spec, std::int64_t step) {
  spec.validate();
  if (step < 0 || step > spec.total_steps) {
    throw RangeError("schedule step " + std::to_string(step) + " outside [0, " +
                     std::to_string(spec.total_steps) + "]");
  }
  if (spec.total_steps == 0) {
    return spec.start;
  }
  const auto half_cosine = [](double from, double to, double t) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  };
  switch (spec.kind) {
    case ScheduleKind::WarmupCosine: {
      if (step <= spec.warmup_steps) {
        if (spec.warmup_steps == 0) {
          return spec.peak;
        }
        const double t = static_cast<double>(step) / static_cast<double>(spec.warmup_steps);
        return spec.start + (spec.peak - spec.start) * t;
      }
      const double t = static_cast<double>(step - spec.warmup_steps) /
                       static_cast<double>(spec.total_steps - spec.warmup_steps);
      return half_cosine(spec.peak, spec.final_value, t);
    }
    case ScheduleKind::Cosine:
      return half_cosine(spec.start, spec.final_value,
                         static_cast<double>(step) / static_cast<double>(spec.total_steps));
    case ScheduleKind::Linear: {
      const auto span = spec.warmup_steps > 0 ? spec.warmup_steps : spec.total_steps;
      if (step >= span) {
        return spec.final_value;
      }
      return spec.start + (spec.final_value - spec.start) * static_cast<double>(step) /
                              static_cast<double>(span);
    }
  }
  return spec.final_value;
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void adamw_step<float>(std::span<Tensor<float>>, OptimizerState<float>&, double, double,
                                std::span<const bool>, std::span<const std::string>);
template void adamw_step<double>(std::span<Tensor<double>>, OptimizerState<double>&, double,
                                 double, std::span<const bool>, std::span<const std::string>);

}  // namespace attmask
