#pragma once

#include "vitscope/attribution/basis.hpp"
#include "vitscope/circuits/graph.hpp"

#include <functional>
#include <optional>

namespace vitscope::circuits {

enum class CircuitMode { kKeepOnly, kAblate };

/// Read-point hook rebuilding the residual of every circuit layer as
/// compose(modified activations, error). Keep-only pins every feature
/// outside C to its median (and the error to the median error unless the
/// error node is in C); ablate pins the features in C (and the error when
/// it is in C). Layers with nothing to pin are left bit-for-bit untouched.
backbone::ReadPointHook circuit_hook(const attribution::ReplacementModel& rm, const CircuitGraph& c, CircuitMode mode);

backbone::ForwardRecord run_with_circuit(const attribution::ReplacementModel& rm, const CircuitGraph& c,
                                         const backbone::Image& img, CircuitMode mode);

/// m under the circuit intervention.
double circuit_objective(const attribution::ReplacementModel& rm, const CircuitGraph& c, const backbone::Image& img,
                         CircuitMode mode);

struct FaithfulnessTerms {
  double m_full = 0.0;   // m(G), the unmodified model
  double m_empty = 0.0;  // m(empty circuit), keep-only
  bool defined() const { return std::abs(m_full - m_empty) >= 1e-8; }
};

FaithfulnessTerms faithfulness_terms(const attribution::ReplacementModel& rm, const attribution::Objective& m,
                                     int top, const backbone::Image& img);

/// (m(C) - m(empty)) / (m(G) - m(empty)); nullopt when the denominator
/// vanishes.
std::optional<double> faithfulness(const attribution::ReplacementModel& rm, const CircuitGraph& c,
                                   const backbone::Image& img, const FaithfulnessTerms& terms);
std::optional<double> faithfulness(const attribution::ReplacementModel& rm, const CircuitGraph& c,
                                   const backbone::Image& img);

/// 1 - f(G \ C), with G \ C realised by ablating C.
std::optional<double> reported_completeness(const attribution::ReplacementModel& rm, const CircuitGraph& c,
                                            const backbone::Image& img, const FaithfulnessTerms& terms);
std::optional<double> reported_completeness(const attribution::ReplacementModel& rm, const CircuitGraph& c,
                                            const backbone::Image& img);

/// Mean over circuit layers l of the mean relative drop (d - d_ablated) / d
/// of the circuit's feature nodes at every later layer when the features
/// of layer l are pinned to their medians. Nodes with d < 1e-8 are
/// skipped. nullopt when fewer than two layers hold features.
std::optional<double> causality(const attribution::ReplacementModel& rm, const CircuitGraph& c,
                                const backbone::Image& img);

/// Mean over `values` (ignoring nullopt); nullopt when all are undefined.
std::optional<double> mean_defined(const std::vector<std::optional<double>>& values);

}  // namespace vitscope::circuits
