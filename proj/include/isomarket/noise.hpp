// Copyright 2026 The isomarket Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "isomarket/errors.hpp"
#include "isomarket/rng.hpp"

namespace isomarket {

/// A discrete distribution over scalar noise values.
struct FiniteSupport {
  std::vector<double> values;
  std::vector<double> probabilities;

  void validate() const {
    if (values.empty()) throw InstanceError("finite-support law has no outcomes");
    if (values.size() != probabilities.size())
      throw InstanceError("finite-support law: values and probabilities differ in length");
    double total = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) throw InstanceError("finite-support law: non-finite value");
      if (!(probabilities[i] >= 0.0) || !std::isfinite(probabilities[i]))
        throw InstanceError("finite-support law: negative or non-finite probability");
      total += probabilities[i];
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw InstanceError("finite-support law: probabilities sum to " + std::to_string(total));
  }

  double sample(Rng& rng) const {
    const double u = rng.uniform();
    double cumulative = 0.0;
    for (std::size_t i = 0; i + 1 < values.size(); ++i) {
      cumulative += probabilities[i];
      if (u < cumulative) return values[i];
    }
    return values.back();
  }
};

/// Law of a scalar additive disturbance process over the horizon.
///
/// `none` is the degenerate law at zero. A finite law is either i.i.d. across
/// time (one support) or time-indexed (one support per absolute time step).
/// Gaussian laws are zero mean and are only meaningful for LQ agents.
class NoiseLaw {
 public:
  enum class Kind { none, finite, gaussian };

  NoiseLaw() = default;

  static NoiseLaw none() { return NoiseLaw(); }

  static NoiseLaw finite(std::vector<double> values, std::vector<double> probabilities) {
    return finite_per_time({FiniteSupport{std::move(values), std::move(probabilities)}});
  }

  static NoiseLaw finite_per_time(std::vector<FiniteSupport> supports) {
    if (supports.empty()) throw InstanceError("finite-support law needs at least one support");
    for (const auto& s : supports) s.validate();
    NoiseLaw law;
    law.kind_ = Kind::finite;
    law.supports_ = std::move(supports);
    return law;
  }

  static NoiseLaw gaussian(double sigma) {
    if (!(sigma >= 0.0) || !std::isfinite(sigma))
      throw InstanceError("gaussian law: sigma must be finite and nonnegative");
    NoiseLaw law;
    law.kind_ = Kind::gaussian;
    law.sigma_ = sigma;
    return law;
  }

  Kind kind() const { return kind_; }
  double sigma() const { return sigma_; }
  bool is_time_indexed() const { return kind_ == Kind::finite && supports_.size() > 1; }
  const std::vector<FiniteSupport>& supports() const { return supports_; }

  /// True when the law can describe every time step in [0, horizon).
  bool covers(std::size_t horizon) const {
    return !is_time_indexed() || supports_.size() >= horizon;
  }

  /// Outcomes at absolute time `t`.
  const FiniteSupport& support_at(std::size_t t) const {
    static const FiniteSupport kDegenerate{{0.0}, {1.0}};
    switch (kind_) {
      case Kind::none:
        return kDegenerate;
      case Kind::finite:
        if (supports_.size() == 1) return supports_.front();
        if (t >= supports_.size())
          throw InstanceError("time-indexed law has no support for t=" + std::to_string(t));
        return supports_[t];
      case Kind::gaussian:
        break;
    }
    throw UnsupportedRegimeError("gaussian noise has no finite support");
  }

  double sample(std::size_t t, Rng& rng) const {
    switch (kind_) {
      case Kind::none:
        return 0.0;
      case Kind::finite:
        return support_at(t).sample(rng);
      case Kind::gaussian:
        return sigma_ * rng.normal();
    }
    return 0.0;
  }

 private:
  Kind kind_ = Kind::none;
  std::vector<FiniteSupport> supports_;
  double sigma_ = 0.0;
};

inline const char* to_string(NoiseLaw::Kind kind) {
  switch (kind) {
    case NoiseLaw::Kind::none: return "none";
    case NoiseLaw::Kind::finite: return "finite";
    case NoiseLaw::Kind::gaussian: return "gaussian";
  }
  return "?";
}

}  // namespace isomarket
