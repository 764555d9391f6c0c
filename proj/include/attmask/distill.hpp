#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "attmask/data.hpp"
#include "attmask/masking.hpp"
#include "attmask/optim.hpp"
#include "attmask/rng.hpp"
#include "attmask/vit.hpp"

namespace attmask {

enum class ObjectiveMode { Ibot, Dino };

struct LossWeights {
  double mim_weight = 1.0;  // lambda
  ObjectiveMode mode = ObjectiveMode::Ibot;

  void validate() const;
  /// Dino mode drops the dense term regardless of mim_weight.
  [[nodiscard]] double effective_mim_weight() const {
    return mode == ObjectiveMode::Dino ? 0.0 : mim_weight;
  }
};

/// Student/teacher parameters plus the teacher-side centering state. The
/// teacher never requires gradients.
template <typename T>
struct StudentTeacherPair {
  ParamSet<T> student;
  ParamSet<T> teacher;
  std::vector<T> cls_center;    // K
  std::vector<T> patch_center;  // K

  static StudentTeacherPair from_student(ParamSet<T> student, std::size_t out_dim);
};

/// teacher <- alpha * teacher + (1 - alpha) * student, for every tensor.
template <typename T>
void ema_update(StudentTeacherPair<T>& pair, double alpha);

/// center <- m * center + (1 - m) * mean over rows of `logits`.
template <typename T>
void center_update(std::vector<T>& center, const Tensor<T>& logits, double momentum);

/// Dense loss over masked patch tokens. Rows are view-major (view * n + i),
/// one mask per view. Normalized by the total number of masked tokens; zero
/// when nothing is masked.
template <typename T>
Tensor<T> mim_loss(const Tensor<T>& teacher_patch_probs, const Tensor<T>& student_patch_log_probs,
                   std::span<const MaskVector> masks);

/// [CLS] loss between teacher view u and student view v for u != v. Both
/// inputs hold 2*B rows ordered view-major. Mean over images and the two
/// ordered pairs.
template <typename T>
Tensor<T> global_loss(const Tensor<T>& teacher_cls_probs, const Tensor<T>& student_cls_log_probs,
                      std::size_t batch, std::size_t views = 2);

/// [CLS] loss between each teacher global view and each student local crop.
/// Local rows are crop-major (crop * B + image). Mean over images and the
/// 2*m pairs unless `normalize` is false. Zero crops give zero.
template <typename T>
Tensor<T> local_crop_loss(const Tensor<T>& teacher_cls_probs,
                          const Tensor<T>& student_local_log_probs, std::size_t batch,
                          std::size_t local_crops, bool normalize = true);

template <typename T>
struct LossParts {
  Tensor<T> mim;
  Tensor<T> global;
  Tensor<T> local;
};

template <typename T>
Tensor<T> total_loss(const LossParts<T>& parts, const LossWeights& weights);

struct TeacherConfig {
  double momentum = 0.99;  // EMA alpha, held constant
  double temperature_start = 0.04;
  double temperature_end = 0.07;
  double temperature_warmup_fraction = 0.3;
  double center_momentum = 0.9;
};

struct StepSchedules {
  ScheduleSpec lr;
  ScheduleSpec weight_decay;
  ScheduleSpec teacher_temperature;
  ScheduleSpec ema_momentum;
};

struct TrainSetup {
  EncoderConfig encoder;
  MaskPolicy policy;
  LossWeights weights;
  TeacherConfig teacher;
  StepSchedules schedules;
};

template <typename T>
struct TrainState {
  StudentTeacherPair<T> pair;
  OptimizerState<T> optimizer;
  std::int64_t step = 0;

  static TrainState initialize(const EncoderConfig& config, const Rng& init_rng);
};

struct StepMetrics {
  std::int64_t step = 0;
  double loss_total = 0;
  double loss_mim = 0;
  double loss_g = 0;
  double loss_lc = 0;
  double lr = 0;
  double weight_decay = 0;
  double teacher_temp = 0;
  double masked_fraction = 0;
  double ema_alpha = 0;
  std::vector<MaskVector> masks;  // one per global view, view-major

  [[nodiscard]] std::string describe() const;
};

/// Decay applies to weight matrices only (not biases, norms, or the
/// [CLS]/[MASK]/position tables).
bool decays(const std::string& parameter_name);

/// Everything one step computes before back-propagation.
template <typename T>
struct StepForward {
  LossParts<T> parts;
  Tensor<T> total;
  Tensor<T> teacher_cls_logits;    // [2B x K], for the center update
  Tensor<T> teacher_patch_logits;  // [2B*n x K]; undefined when the dense term is off
  std::vector<MaskVector> masks;   // one per global view, view-major
  double masked_fraction = 0.0;
};

/// Teacher pass, masks, student pass and the weighted loss, with the graph
/// attached to the student parameters. No state is modified.
template <typename T>
StepForward<T> forward_losses(const ViewBatch<T>& batch, const StudentTeacherPair<T>& pair,
                              const TrainSetup& setup, double teacher_temperature,
                              const Rng& mask_rng);

/// One optimization step: teacher forward on the unmasked global views with
/// attention capture; per-view mask decision and mask construction from that
/// view's own teacher [CLS] attention; student forward on masked globals and
/// unmasked locals; losses, backward, AdamW; center update; EMA update.
/// `mask_rng` must be specific to this step.
template <typename T>
StepMetrics train_step(const ViewBatch<T>& batch, TrainState<T>& state, const TrainSetup& setup,
                       const Rng& mask_rng);

}  // namespace attmask
