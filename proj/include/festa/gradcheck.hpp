#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "festa/neural.hpp"
#include "festa/random.hpp"

namespace festa::nn {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Per tensor; 0 checks every coordinate.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 1;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Coordinates whose +-step perturbation changed a discrete branch
  // (ReLU pattern, argmax, grouping); the function is not smooth there.
  std::size_t skipped = 0;
  std::string worst;

  bool passed(double tolerance) const { return checked > 0 && max_rel_error < tolerance; }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(numeric) + 1e-8);
}

/// Builds the network output from the input leaves on a fresh tape.
using GraphBuilder = std::function<Var(Tape&, std::span<const Var>)>;

/// Central-difference check of every parameter of `store` and every matrix in
/// `inputs`. The scalar objective is a fixed random projection of the output,
/// so all output entries take part.
inline GradCheckResult check_gradients(ParameterStore& store, std::vector<Matrix> inputs,
                                       const GraphBuilder& build, const GradCheckOptions& opt = {}) {
  Matrix projection;
  auto evaluate = [&](std::uint64_t* hash) {
    Tape tape(&store);
    std::vector<Var> leaves;
    for (const auto& m : inputs) leaves.push_back(tape.variable(m));
    Var out = build(tape, leaves);
    if (out.rows() != projection.rows() || out.cols() != projection.cols()) {
      throw StateError("gradient check: output shape changed under perturbation");
    }
    Var loss = weighted_sum(out, projection);
    if (hash) *hash = tape.structure_hash();
    return loss.value()(0, 0);
  };

  // Analytic pass.
  store.zero_grad();
  std::vector<Matrix> input_grads;
  std::uint64_t base_hash = 0;
  {
    Tape tape(&store);
    std::vector<Var> leaves;
    for (const auto& m : inputs) leaves.push_back(tape.variable(m));
    Var out = build(tape, leaves);
    Rng rng(opt.seed);
    projection.resize(out.rows(), out.cols());
    for (Index i = 0; i < projection.size(); ++i) projection.data()[i] = uniform(rng, -1.0, 1.0);
    Var loss = weighted_sum(out, projection);
    base_hash = tape.structure_hash();
    tape.backward(loss);
    for (const auto& v : leaves) input_grads.push_back(tape.grad(v));
  }

  GradCheckResult result;
  Rng pick(mix_seed(opt.seed));
  auto coords = [&](Index n) {
    std::vector<Index> idx(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    if (opt.max_coords_per_tensor != 0 && idx.size() > opt.max_coords_per_tensor) {
      for (std::size_t i = 0; i < opt.max_coords_per_tensor; ++i) {
        const auto j = i + static_cast<std::size_t>(uniform_index(pick, idx.size() - i));
        std::swap(idx[i], idx[j]);
      }
      idx.resize(opt.max_coords_per_tensor);
    }
    return idx;
  };
  auto probe = [&](double* slot, double analytic, const std::string& label) {
    const double saved = *slot;
    std::uint64_t hp = 0, hm = 0;
    *slot = saved + opt.step;
    const double fp = evaluate(&hp);
    *slot = saved - opt.step;
    const double fm = evaluate(&hm);
    *slot = saved;
    if (hp != base_hash || hm != base_hash) {
      ++result.skipped;
      return;
    }
    const double numeric = (fp - fm) / (2.0 * opt.step);
    const double err = relative_error(analytic, numeric);
    ++result.checked;
    if (err > result.max_rel_error || result.worst.empty()) {
      result.max_rel_error = std::max(result.max_rel_error, err);
      result.worst = label;
    }
  };

  for (std::size_t pi = 0; pi < store.size(); ++pi) {
    Parameter& p = store.at(pi);
    const Matrix wg = p.weight_grad;
    const RowVector bg = p.bias_grad;
    for (Index i : coords(p.weight.size())) {
      probe(p.weight.data() + i, wg.data()[i], p.name + ".w[" + std::to_string(i) + "]");
    }
    for (Index i : coords(p.bias.size())) {
      probe(p.bias.data() + i, bg[i], p.name + ".b[" + std::to_string(i) + "]");
    }
  }
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (Index i : coords(inputs[t].size())) {
      probe(inputs[t].data() + i, input_grads[t].data()[i],
            "input" + std::to_string(t) + "[" + std::to_string(i) + "]");
    }
  }
  store.zero_grad();
  return result;
}

}  // namespace festa::nn
