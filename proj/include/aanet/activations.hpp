#pragma once

// Language-adaptive activations. An APL unit evaluates
//
//   F(x) = max(0, x) + sum_i lambda_i * max(0, -x + b_i)
//
// with lambda and the breakpoints b trainable per (layer, language). With
// lambda = 0 it is exactly ReLU. Subgradients at kinks are taken as 0.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "aanet/error.hpp"
#include "aanet/numeric.hpp"
#include "aanet/random.hpp"

namespace aanet {

inline constexpr std::size_t kDefaultAplUnits = 5;
inline constexpr double kAplInitRange = 0.05;

struct APLActivation {
  Matrix lambda;       // 1 x M
  Matrix breakpoints;  // 1 x M

  APLActivation() = default;
  APLActivation(std::vector<double> lambda_values, std::vector<double> breakpoint_values) {
    if (lambda_values.size() != breakpoint_values.size() || lambda_values.empty())
      throw ShapeError("APL lambda/breakpoints", 1, lambda_values.size(), 1, breakpoint_values.size());
    const std::size_t m = lambda_values.size();
    lambda = Matrix(1, m, std::move(lambda_values));
    breakpoints = Matrix(1, m, std::move(breakpoint_values));
  }

  std::size_t unit_count() const { return lambda.cols(); }

  /// Near-ReLU start: lambda ~ U(-0.05, 0.05), breakpoints evenly spaced in [-1, 1].
  static APLActivation initialized(std::size_t units, Rng& rng) {
    if (units == 0) throw Error("APL activation needs at least one unit");
    std::vector<double> lam(units), brk(units);
    for (std::size_t i = 0; i < units; ++i) {
      lam[i] = uniform(rng, -kAplInitRange, kAplInitRange);
      brk[i] = units == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(units - 1);
    }
    return APLActivation(std::move(lam), std::move(brk));
  }

  static APLActivation relu_equivalent(std::size_t units) {
    Rng rng(0);
    APLActivation a = initialized(units, rng);
    a.lambda.fill(0.0);
    return a;
  }
};

inline double relu(double x) { return x > 0.0 ? x : 0.0; }

inline double apl_forward(double x, const APLActivation& act) {
  double y = relu(x);
  const std::size_t m = act.unit_count();
  for (std::size_t i = 0; i < m; ++i) y += act.lambda[i] * relu(-x + act.breakpoints[i]);
  return y;
}

struct AplGradient {
  double dx = 0.0;
  std::vector<double> dlambda;
  std::vector<double> dbreak;
};

inline AplGradient apl_backward(double x, const APLActivation& act, double upstream) {
  const std::size_t m = act.unit_count();
  AplGradient g;
  g.dlambda.assign(m, 0.0);
  g.dbreak.assign(m, 0.0);
  double slope = x > 0.0 ? 1.0 : 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double hinge = -x + act.breakpoints[i];
    if (hinge > 0.0) {
      slope -= act.lambda[i];
      g.dlambda[i] = upstream * hinge;
      g.dbreak[i] = upstream * act.lambda[i];
    }
  }
  g.dx = upstream * slope;
  return g;
}

/// Elementwise APL over a matrix.
inline Matrix apl_forward(const Matrix& x, const APLActivation& act) {
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = apl_forward(x[i], act);
  return y;
}

/// Elementwise backward. Writes dx (if non-null) and accumulates into the
/// 1 x M parameter gradients (if non-null).
inline void apl_backward(const Matrix& x, const APLActivation& act, const Matrix& upstream, Matrix* dx,
                         Matrix* dlambda, Matrix* dbreak) {
  require_same_shape("apl_backward", x, upstream);
  const std::size_t m = act.unit_count();
  const double* lam = act.lambda.data();
  const double* brk = act.breakpoints.data();
  std::vector<double> acc_l(m, 0.0), acc_b(m, 0.0);
  for (std::size_t e = 0; e < x.size(); ++e) {
    const double xv = x[e];
    const double g = upstream[e];
    double slope = xv > 0.0 ? 1.0 : 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double hinge = brk[i] - xv;
      if (hinge > 0.0) {
        slope -= lam[i];
        acc_l[i] += g * hinge;
        acc_b[i] += g * lam[i];
      }
    }
    if (dx) (*dx)[e] = g * slope;
  }
  if (dlambda)
    for (std::size_t i = 0; i < m; ++i) (*dlambda)[i] += acc_l[i];
  if (dbreak)
    for (std::size_t i = 0; i < m; ++i) (*dbreak)[i] += acc_b[i];
}

// ---------------------------------------------------------------------------
// General basis form: F(x) = sum_i lambda_i * sigma_i(x)

struct Basis {
  std::string name;
  std::function<double(double)> fn;
};

inline double basis_forward(double x, const std::vector<double>& lambda, const std::vector<Basis>& bases) {
  if (lambda.size() != bases.size()) throw ShapeError("basis_forward", 1, lambda.size(), 1, bases.size());
  double y = 0.0;
  for (std::size_t i = 0; i < bases.size(); ++i) y += lambda[i] * bases[i].fn(x);
  return y;
}

/// The APL unit rewritten as a basis expansion: a ReLU basis with weight 1
/// followed by one hinge max(0, -x + b_i) per unit.
inline std::pair<std::vector<double>, std::vector<Basis>> apl_as_basis(const APLActivation& act) {
  std::vector<double> weights{1.0};
  std::vector<Basis> bases{{"relu", [](double x) { return relu(x); }}};
  for (std::size_t i = 0; i < act.unit_count(); ++i) {
    const double b = act.breakpoints[i];
    weights.push_back(act.lambda[i]);
    bases.push_back({"hinge" + std::to_string(i), [b](double x) { return relu(-x + b); }});
  }
  return {weights, bases};
}

// ---------------------------------------------------------------------------
// Slots

enum class SlotKind { FixedRelu, Adaptive };

struct ActivationSlot {
  SlotKind kind = SlotKind::FixedRelu;
  std::size_t layer_index = 0;
  std::map<std::string, APLActivation> per_language;

  bool adaptive() const { return kind == SlotKind::Adaptive; }

  const APLActivation& for_language(const std::string& language) const {
    auto it = per_language.find(language);
    if (it == per_language.end())
      throw Error("layer " + std::to_string(layer_index) + " has no activation for language '" + language + "'");
    return it->second;
  }
  APLActivation& for_language(const std::string& language) {
    return const_cast<APLActivation&>(std::as_const(*this).for_language(language));
  }
};

inline Matrix slot_forward(const ActivationSlot& slot, const std::string& language, const Matrix& pre) {
  if (!slot.adaptive()) {
    Matrix y(pre.rows(), pre.cols());
    for (std::size_t i = 0; i < pre.size(); ++i) y[i] = relu(pre[i]);
    return y;
  }
  return apl_forward(pre, slot.for_language(language));
}

/// dpre (if non-null) receives the input gradient; APL parameter gradients
/// are accumulated when the pointers are non-null.
inline void slot_backward(const ActivationSlot& slot, const std::string& language, const Matrix& pre,
                          const Matrix& upstream, Matrix* dpre, Matrix* dlambda, Matrix* dbreak) {
  if (!slot.adaptive()) {
    if (dpre)
      for (std::size_t i = 0; i < pre.size(); ++i) (*dpre)[i] = pre[i] > 0.0 ? upstream[i] : 0.0;
    return;
  }
  apl_backward(pre, slot.for_language(language), upstream, dpre, dlambda, dbreak);
}

// ---------------------------------------------------------------------------
// Curve export

struct CurvePoint {
  double x;
  double y;
};

inline std::vector<CurvePoint> export_curve(const APLActivation& act, const std::vector<double>& xs) {
  if (xs.empty()) throw Error("export_curve needs at least one point");
  if (!std::is_sorted(xs.begin(), xs.end())) throw Error("export_curve grid must be sorted");
  std::vector<CurvePoint> out;
  out.reserve(xs.size());
  for (double x : xs) out.push_back({x, apl_forward(x, act)});
  return out;
}

inline std::vector<double> linspace(double lo, double hi, std::size_t points) {
  if (points == 0) throw Error("linspace needs at least one point");
  std::vector<double> xs(points);
  for (std::size_t i = 0; i < points; ++i)
    xs[i] = points == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
  return xs;
}

/// Two header lines naming the layer and language, then one "x<TAB>F(x)" row per point.
inline void write_curve_tsv(std::ostream& os, const std::vector<CurvePoint>& curve, const std::string& layer,
                            const std::string& language) {
  os << "# layer\t" << layer << "\n# language\t" << language << "\n";
  os.precision(17);
  for (const auto& p : curve) os << p.x << '\t' << p.y << '\n';
}

}  // namespace aanet
