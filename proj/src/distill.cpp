#include "attmask/distill.hpp"

#include <cmath>
#include <memory>
#include <sstream>

#include "attmask/error.hpp"
#include "attmask/ops.hpp"

namespace attmask {

void LossWeights::validate() const {
  if (!(mim_weight >= 0.0)) {
    throw ConfigError("loss.mim_weight must be >= 0");
  }
}

template <typename T>
StudentTeacherPair<T> StudentTeacherPair<T>::from_student(ParamSet<T> student,
                                                          std::size_t out_dim) {
  StudentTeacherPair pair;
  pair.teacher = student.clone(false);
  pair.student = std::move(student);
  pair.cls_center.assign(out_dim, T(0));
  pair.patch_center.assign(out_dim, T(0));
  return pair;
}

template <typename T>
void ema_update(StudentTeacherPair<T>& pair, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ParameterError("ema_update: alpha must lie in [0, 1]");
  }
  const auto names = pair.student.names();
  if (names != pair.teacher.names()) {
    throw ContractError("ema_update: student and teacher parameter sets differ");
  }
  const T a = static_cast<T>(alpha);
  const T b = static_cast<T>(1.0 - alpha);
  for (const auto& name : names) {
    const auto& s = pair.student.at(name);
    auto& t = pair.teacher.at(name);
    if (s.shape() != t.shape()) {
      throw ContractError("ema_update: shape drift on " + name + ": " + shape_string(s.shape()) +
                          " vs " + shape_string(t.shape()));
    }
    auto dst = t.mutable_data();
    const auto src = s.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i] = a * dst[i] + b * src[i];
    }
  }
}

template <typename T>
void center_update(std::vector<T>& center, const Tensor<T>& logits, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) {
    throw ParameterError("center_update: momentum must lie in [0, 1]");
  }
  const std::size_t r = logits.rows(), c = logits.cols();
  if (center.size() != c) {
    throw DimensionError("center_update: center of size " + std::to_string(center.size()) +
                         " for logits " + shape_string(logits.shape()));
  }
  if (r == 0) {
    return;
  }
  std::vector<double> mean(c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      mean[j] += static_cast<double>(logits[i * c + j]);
    }
  }
  for (std::size_t j = 0; j < c; ++j) {
    center[j] = static_cast<T>(momentum * static_cast<double>(center[j]) +
                               (1.0 - momentum) * mean[j] / static_cast<double>(r));
  }
}

template <typename T>
Tensor<T> mim_loss(const Tensor<T>& teacher_patch_probs, const Tensor<T>& student_patch_log_probs,
                   std::span<const MaskVector> masks) {
  const std::size_t rows = student_patch_log_probs.rows();
  std::size_t total_tokens = 0;
  for (const auto& m : masks) {
    total_tokens += m.size();
  }
  if (total_tokens != rows || teacher_patch_probs.rows() != rows) {
    throw DimensionError("mim_loss: masks cover " + std::to_string(total_tokens) +
                         " tokens, outputs have " + std::to_string(rows) + " rows");
  }
  std::vector<T> weights;
  weights.reserve(rows);
  std::size_t masked = 0;
  for (const auto& m : masks) {
    for (const auto bit : m.bits) {
      weights.push_back(bit ? T(1) : T(0));
      masked += bit ? 1 : 0;
    }
  }
  if (masked == 0) {
    return Tensor<T>::scalar(T(0));
  }
  const auto sum = ops::soft_cross_entropy<T>(teacher_patch_probs, student_patch_log_probs, weights);
  return ops::scale(sum, T(1) / static_cast<T>(masked));
}

template <typename T>
Tensor<T> global_loss(const Tensor<T>& teacher_cls_probs, const Tensor<T>& student_cls_log_probs,
                      std::size_t batch, std::size_t views) {
  if (views < 2) {
    throw ContractError("global_loss: needs at least two global views, got " +
                        std::to_string(views));
  }
  if (teacher_cls_probs.rows() != views * batch || student_cls_log_probs.rows() != views * batch) {
    throw DimensionError("global_loss: expected " + std::to_string(views * batch) + " rows");
  }
  const std::vector<T> ones(batch, T(1));
  std::vector<Tensor<T>> terms;
  for (std::size_t u = 0; u < views; ++u) {
    const auto target = ops::slice_rows(teacher_cls_probs, u * batch, batch);
    for (std::size_t v = 0; v < views; ++v) {
      if (u == v) {
        continue;
      }
      terms.push_back(ops::soft_cross_entropy<T>(
          target, ops::slice_rows(student_cls_log_probs, v * batch, batch), ones));
    }
  }
  const auto pairs = static_cast<T>(views * (views - 1) * batch);
  return ops::scale(ops::sum(ops::concat_rows(terms)), T(1) / pairs);
}

template <typename T>
Tensor<T> local_crop_loss(const Tensor<T>& teacher_cls_probs,
                          const Tensor<T>& student_local_log_probs, std::size_t batch,
                          std::size_t local_crops, bool normalize) {
  if (local_crops == 0) {
    return Tensor<T>::scalar(T(0));
  }
  if (teacher_cls_probs.rows() % batch != 0 || student_local_log_probs.rows() != local_crops * batch) {
    throw DimensionError("local_crop_loss: row counts do not match batch " + std::to_string(batch));
  }
  const std::size_t views = teacher_cls_probs.rows() / batch;
  const std::vector<T> ones(batch, T(1));
  std::vector<Tensor<T>> terms;
  for (std::size_t v = 0; v < views; ++v) {
    const auto target = ops::slice_rows(teacher_cls_probs, v * batch, batch);
    for (std::size_t j = 0; j < local_crops; ++j) {
      terms.push_back(ops::soft_cross_entropy<T>(
          target, ops::slice_rows(student_local_log_probs, j * batch, batch), ones));
    }
  }
  auto total = ops::sum(ops::concat_rows(terms));
  if (!normalize) {
    return total;
  }
  return ops::scale(total, T(1) / static_cast<T>(views * local_crops * batch));
}

template <typename T>
Tensor<T> total_loss(const LossParts<T>& parts, const LossWeights& weights) {
  auto total = ops::add(parts.global, parts.local);
  const double lambda = weights.effective_mim_weight();
  if (lambda != 0.0 && parts.mim.defined()) {
    total = ops::add(total, ops::scale(parts.mim, static_cast<T>(lambda)));
  }
  return total;
}

template <typename T>
TrainState<T> TrainState<T>::initialize(const EncoderConfig& config, const Rng& init_rng) {
  TrainState state;
  state.pair = StudentTeacherPair<T>::from_student(init_vit_params<T>(config, init_rng),
                                                   static_cast<std::size_t>(config.out_dim));
  const auto params = state.pair.student.tensors();
  state.optimizer = OptimizerState<T>::for_parameters(params);
  return state;
}

std::string StepMetrics::describe() const {
  std::ostringstream os;
  os.precision(9);
  os << "step=" << step << " loss_total=" << loss_total << " loss_mim=" << loss_mim
     << " loss_g=" << loss_g << " loss_lc=" << loss_lc << " lr=" << lr
     << " weight_decay=" << weight_decay << " teacher_temp=" << teacher_temp
     << " masked_fraction=" << masked_fraction << " ema_alpha=" << ema_alpha;
  return os.str();
}

bool decays(const std::string& name) {
  const std::string suffix = ".weight";
  if (name.size() < suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) {
    return false;
  }
  return name.find("norm") == std::string::npos;
}

template <typename T>
StepForward<T> forward_losses(const ViewBatch<T>& batch, const StudentTeacherPair<T>& pair,
                              const TrainSetup& setup, double teacher_temperature,
                              const Rng& mask_rng) {
  const auto& cfg = setup.encoder;
  const auto& policy = setup.policy;
  const std::size_t images = batch.images;
  constexpr std::size_t kViews = 2;
  const std::size_t global_count = kViews * images;
  if (batch.globals.count != global_count) {
    throw ContractError("train_step: expected two global views per image");
  }
  const int grid = batch.globals.side / cfg.patch_size;
  const auto n = static_cast<std::size_t>(grid * grid);
  const bool dense = setup.weights.effective_mim_weight() > 0.0;
  const int layer = policy.layer == 0 ? cfg.depth : policy.layer;
  if (layer > cfg.depth || (cfg.depth == 0 && strategy_uses_attention(policy.strategy))) {
    throw ConfigError("mask.layer " + std::to_string(layer) + " outside valid range 1.." +
                      std::to_string(cfg.depth));
  }
  const auto& student = pair.student;
  const auto& teacher = pair.teacher;
  StepForward<T> fw;

  // Teacher: unmasked global views, attention captured at the masking layer.
  Tensor<T> teacher_cls_probs, teacher_patch_probs;
  AttentionRecord<T> record;
  {
    NoGradGuard no_grad;
    auto seq = add_position_embeddings(tokenize(batch.globals, teacher, cfg), teacher, cfg);
    auto enc = encoder_forward(seq, teacher, cfg, cfg.depth > 0 ? layer : -1);
    const auto len = enc.sequence.seq_len();
    const auto crows = cls_rows(global_count, len);
    fw.teacher_cls_logits = head_logits(ops::gather_rows<T>(enc.sequence.tokens, crows), teacher, cfg);
    teacher_cls_probs = scaled_softmax<T>(fw.teacher_cls_logits, teacher_temperature, pair.cls_center);
    if (dense) {
      const auto prows = patch_rows(global_count, len);
      fw.teacher_patch_logits =
          head_logits(ops::gather_rows<T>(enc.sequence.tokens, prows), teacher, cfg);
      teacher_patch_probs = scaled_softmax<T>(fw.teacher_patch_logits, teacher_temperature,
                                              pair.patch_center);
    }
    record = std::move(enc.attention);
  }

  // Masks: each global view decides independently and uses its own attention.
  fw.masks.resize(global_count);
  std::size_t masked_tokens = 0;
  for (std::size_t idx = 0; idx < global_count; ++idx) {
    Rng rng = mask_rng.split(idx);
    const RatioDraw draw = sample_ratio(policy, rng);
    if (!draw.apply) {
      fw.masks[idx] = MaskVector(n);
      continue;
    }
    std::vector<T> attention;
    if (strategy_uses_attention(policy.strategy)) {
      attention = cls_attention(record, layer, idx).values;
    }
    fw.masks[idx] = make_mask<T>(policy.strategy, n, draw.ratio, policy.show_ratio, attention, rng);
    masked_tokens += fw.masks[idx].count();
  }
  fw.masked_fraction = static_cast<double>(masked_tokens) / static_cast<double>(global_count * n);

  // Student: masked global views, unmasked local crops.
  auto seq = tokenize(batch.globals, student, cfg);
  seq = apply_mask<T>(seq, fw.masks, student.at("mask_token"));
  seq = add_position_embeddings(seq, student, cfg);
  const auto enc = encoder_forward(seq, student, cfg, -1);
  const auto len = enc.sequence.seq_len();
  const auto tau_s = static_cast<T>(cfg.student_temperature);
  const auto crows = cls_rows(global_count, len);
  const auto student_cls_logp = ops::log_softmax_rows(
      head_logits(ops::gather_rows<T>(enc.sequence.tokens, crows), student, cfg), tau_s);

  if (dense && masked_tokens > 0) {
    // Only masked positions enter the dense loss, so the student head runs on
    // those rows alone. Same value as mim_loss over all patch rows.
    std::vector<std::size_t> seq_rows, patch_idx;
    seq_rows.reserve(masked_tokens);
    patch_idx.reserve(masked_tokens);
    for (std::size_t v = 0; v < global_count; ++v) {
      for (std::size_t i = 0; i < n; ++i) {
        if (fw.masks[v].bits[i]) {
          seq_rows.push_back(v * len + 1 + i);
          patch_idx.push_back(v * n + i);
        }
      }
    }
    const auto student_logp = ops::log_softmax_rows(
        head_logits(ops::gather_rows<T>(enc.sequence.tokens, seq_rows), student, cfg), tau_s);
    const auto targets = ops::gather_rows<T>(teacher_patch_probs, patch_idx);
    const std::vector<T> ones(seq_rows.size(), T(1));
    fw.parts.mim = ops::scale(ops::soft_cross_entropy<T>(targets, student_logp, ones),
                              T(1) / static_cast<T>(seq_rows.size()));
  } else {
    fw.parts.mim = Tensor<T>::scalar(T(0));
  }
  fw.parts.global = global_loss<T>(teacher_cls_probs, student_cls_logp, images, kViews);

  const auto crops = static_cast<std::size_t>(batch.local_crop_count);
  if (crops > 0) {
    const auto lseq = add_position_embeddings(tokenize(batch.locals, student, cfg), student, cfg);
    const auto lenc = encoder_forward(lseq, student, cfg, -1);
    const auto lrows = cls_rows(batch.locals.count, lenc.sequence.seq_len());
    const auto local_logp = ops::log_softmax_rows(
        head_logits(ops::gather_rows<T>(lenc.sequence.tokens, lrows), student, cfg), tau_s);
    fw.parts.local = local_crop_loss<T>(teacher_cls_probs, local_logp, images, crops);
  } else {
    fw.parts.local = Tensor<T>::scalar(T(0));
  }
  fw.total = total_loss(fw.parts, setup.weights);
  return fw;
}

template <typename T>
StepMetrics train_step(const ViewBatch<T>& batch, TrainState<T>& state, const TrainSetup& setup,
                       const Rng& mask_rng) {
  const std::int64_t step = state.step;
  StepMetrics metrics;
  metrics.step = step;
  metrics.lr = eval_schedule(setup.schedules.lr, step);
  metrics.weight_decay = eval_schedule(setup.schedules.weight_decay, step);
  metrics.teacher_temp = eval_schedule(setup.schedules.teacher_temperature, step);
  metrics.ema_alpha = eval_schedule(setup.schedules.ema_momentum, step);

  auto& student = state.pair.student;
  const auto& teacher = state.pair.teacher;
  student.zero_grad();
  auto fw = forward_losses(batch, state.pair, setup, metrics.teacher_temp, mask_rng);
  metrics.masks = std::move(fw.masks);
  metrics.masked_fraction = fw.masked_fraction;
  metrics.loss_mim = static_cast<double>(fw.parts.mim.item());
  metrics.loss_g = static_cast<double>(fw.parts.global.item());
  metrics.loss_lc = static_cast<double>(fw.parts.local.item());
  metrics.loss_total = static_cast<double>(fw.total.item());
  if (!std::isfinite(metrics.loss_total)) {
    throw NumericError("train_step: non-finite loss; " + metrics.describe());
  }

  fw.total.backward();
  for (const auto& name : teacher.names()) {
    if (teacher.at(name).has_grad()) {
      throw ContractError("train_step: teacher parameter " + name + " received a gradient");
    }
  }

  auto params = student.tensors();
  const auto names = student.names();
  const auto decay_mask = std::make_unique<bool[]>(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    decay_mask[i] = decays(names[i]);
  }
  adamw_step<T>(params, state.optimizer, metrics.lr, metrics.weight_decay,
                std::span<const bool>(decay_mask.get(), names.size()), names);
  student.zero_grad();

  const double cm = setup.teacher.center_momentum;
  center_update(state.pair.cls_center, fw.teacher_cls_logits, cm);
  if (fw.teacher_patch_logits.defined()) {
    center_update(state.pair.patch_center, fw.teacher_patch_logits, cm);
  }
  ema_update(state.pair, metrics.ema_alpha);
  ++state.step;
  return metrics;
}

#define ATTMASK_INSTANTIATE(T)                                                                    \
  template struct StudentTeacherPair<T>;                                                          \
  template struct TrainState<T>;                                                                  \
  template void ema_update<T>(StudentTeacherPair<T>&, double);                                    \
  template void center_update<T>(std::vector<T>&, const Tensor<T>&, double);                      \
  template Tensor<T> mim_loss<T>(const Tensor<T>&, const Tensor<T>&, std::span<const MaskVector>); \
  template Tensor<T> global_loss<T>(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> local_crop_loss<T>(const Tensor<T>&, const Tensor<T>&, std::size_t,          \
                                        std::size_t, bool);                                       \
  template Tensor<T> total_loss<T>(const LossParts<T>&, const LossWeights&);                      \
  template StepForward<T> forward_losses<T>(const ViewBatch<T>&, const StudentTeacherPair<T>&,   \
                                            const TrainSetup&, double, const Rng&);             \
  template StepMetrics train_step<T>(const ViewBatch<T>&, TrainState<T>&, const TrainSetup&,      \
                                     const Rng&);

ATTMASK_INSTANTIATE(float)
ATTMASK_INSTANTIATE(double)
#undef ATTMASK_INSTANTIATE

}  // namespace attmask
