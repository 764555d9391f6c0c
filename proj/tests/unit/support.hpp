#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "attmask/rng.hpp"
#include "attmask/tensor.hpp"

namespace testing {

inline std::filesystem::path temp_dir(const std::string& name) {
  const char* root = std::getenv("ATTMASK_TEST_TMP");
  std::filesystem::path dir = root ? root : (std::filesystem::temp_directory_path() / "attmask_unit");
  dir /= name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline attmask::Tensor<double> random_tensor(attmask::Shape shape, attmask::Rng& rng,
                                             double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(attmask::shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return attmask::Tensor<double>::from(std::move(shape), std::move(v), requires_grad);
}

// Redraws every tensor: LayerNorm gains around 1, everything else N(0, 0.3^2).
template <typename Params>
void redraw(Params& params, attmask::Rng& rng) {
  for (const auto& name : params.names()) {
    const bool gain = name.find("norm") != std::string::npos && name.ends_with(".weight");
    for (auto& v : params.at(name).mutable_data()) v = (gain ? 1.0 : 0.0) + 0.3 * rng.normal();
  }
}

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  double worst_analytic = 0.0;  // entry with the largest relative error
  double worst_numeric = 0.0;
};

// Compares reverse-mode gradients with central differences. The relative
// error of each entry is |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradients(std::vector<attmask::Tensor<double>> params,
                                 const std::function<attmask::Tensor<double>()>& loss_fn,
                                 double h = 1e-6, double floor = 1e-6) {
  const auto loss = loss_fn();
  const auto analytic = attmask::reverse_mode_gradient<double>(loss, params);
  GradCheck out;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto values = params[p].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss_fn().item();
      values[i] = saved - h;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[p][i];
      const double err = std::abs(a - numeric);
      out.max_abs_error = std::max(out.max_abs_error, err);
      const double rel = err / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst_analytic = a;
        out.worst_numeric = numeric;
      }
    }
  }
  return out;
}

}  // namespace testing
