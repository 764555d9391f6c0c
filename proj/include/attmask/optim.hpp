#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "attmask/tensor.hpp"

namespace attmask {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments per parameter plus the update counter.
template <typename T>
struct OptimizerState {
  AdamWHyper hyper;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::int64_t step = 0;

  static OptimizerState for_parameters(std::span<const Tensor<T>> params, AdamWHyper hyper = {});
};

/// One AdamW update with decoupled weight decay: the decay multiplies the
/// parameter directly and never enters the moments. Gradients are read from
/// each parameter's grad field (missing grad = zero). Parameters with
/// decay_mask[i] == false skip decay; an empty mask decays everything.
///
/// Throws NumericError naming the offending parameter when a gradient is not
/// finite; no parameter is modified in that case.
template <typename T>
void adamw_step(std::span<Tensor<T>> params, OptimizerState<T>& state, double lr,
                double weight_decay, std::span<const bool> decay_mask = {},
                std::span<const std::string> names = {});

enum class ScheduleKind { WarmupCosine, Cosine, Linear };

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::WarmupCosine;
  double start = 0.0;
  double peak = 0.0;
  double final_value = 0.0;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 0;

  /// Throws ParameterError on inconsistent step counts.
  void validate() const;
};

/// WarmupCosine: linear start->peak over the warmup, then half-cosine
/// peak->final. Cosine: half-cosine start->final over all steps. Linear:
/// linear start->final over the warmup (all steps when warmup is 0), then
/// constant at final.
double eval_schedule(const ScheduleSpec& spec, std::int64_t step);

}  // namespace attmask
