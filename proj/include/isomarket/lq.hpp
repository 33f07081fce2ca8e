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

#include <cstddef>
#include <string>
#include <vector>

#include "isomarket/errors.hpp"
#include "isomarket/linalg.hpp"
#include "isomarket/model.hpp"

namespace isomarket {

/// V_t(x) = x'P_t x + s_t'x + c_t for t = first_time .. first_time + P.size() - 1.
struct AffineValueFunction {
  std::size_t first_time = 0;
  std::vector<Matrix> P;
  std::vector<Vector> s;
  std::vector<double> c;

  double operator()(std::size_t t, const Vector& x) const {
    const std::size_t j = t - first_time;
    return x.dot(P[j] * x) + s[j].dot(x) + c[j];
  }
};

/// u(t) = gains[t] x(t) + offsets[t].
struct FeedbackLaw {
  std::size_t first_time = 0;
  std::vector<Matrix> gains;
  std::vector<Vector> offsets;

  Vector action(std::size_t t, const Vector& x) const {
    const std::size_t j = t - first_time;
    return gains[j] * x + offsets[j];
  }
};

namespace detail {

struct AffineStep {
  Matrix P;
  Vector s;
  double c = 0.0;
  Matrix K;  // 1 x n
  double k = 0.0;
};

// One backward step of the priced scalar-input LQ problem
//   min_u  x'Qx + R u^2 + price u + E[V+(A x + b u + d)]
// where the expectation is already folded into (Pbar, sbar, cbar).
inline AffineStep affine_lq_step(const Matrix& A, const Vector& b, const Matrix& Q, double R,
                                 const Matrix& Pbar, const Vector& sbar, double cbar, double price) {
  const Vector Pb = Pbar * b;
  const double H = R + b.dot(Pb);
  if (!(H > 0.0)) throw NumericalError("LQ backward step: R + B'PB is not positive");
  const double h = price + b.dot(sbar);
  const Eigen::RowVectorXd bPA = Pb.transpose() * A;
  AffineStep out;
  out.K = -bPA / H;
  out.k = -0.5 * h / H;
  out.P = symmetrized(Q + A.transpose() * Pbar * A - bPA.transpose() * bPA / H);
  out.s = A.transpose() * sbar - bPA.transpose() * (h / H);
  out.c = cbar - 0.25 * h * h / H;
  return out;
}

}  // namespace detail

struct LqBestResponse {
  BidProfile bids;
  double cost = 0.0;  // priced objective at the optimum, including x_s'Qx_s
  std::vector<Vector> states;
  AffineValueFunction value;
  FeedbackLaw policy;
};

/// Optimal open-loop purchases of a noise-free LQ agent facing `prices` over
/// t = s..T-1 (s = prices.first_time, T = s + prices.size()), starting at x_s.
inline LqBestResponse lq_best_response(const LqAgent& agent, const PriceProfile& prices, const Vector& x_s) {
  agent.validate();
  if (prices.kind != IndexKind::time) throw InstanceError("lq_best_response: time-indexed prices required");
  if (!prices.all_finite()) throw InstanceError("lq_best_response: non-finite price");
  if (x_s.size() != agent.A.rows()) throw InstanceError("lq_best_response: state dimension mismatch");
  const std::size_t steps = prices.size();
  const std::size_t s = prices.first_time;
  const Vector b = agent.B.col(0);
  const auto n = agent.A.rows();

  LqBestResponse out;
  auto& V = out.value;
  V.first_time = s;
  V.P.resize(steps + 1);
  V.s.resize(steps + 1);
  V.c.resize(steps + 1);
  V.P[steps] = agent.Q;
  V.s[steps] = Vector::Zero(n);
  V.c[steps] = 0.0;
  out.policy.first_time = s;
  out.policy.gains.resize(steps);
  out.policy.offsets.resize(steps);
  for (std::size_t j = steps; j-- > 0;) {
    auto st = detail::affine_lq_step(agent.A, b, agent.Q, agent.r(), V.P[j + 1], V.s[j + 1], V.c[j + 1],
                                     prices[j]);
    V.P[j] = std::move(st.P);
    V.s[j] = std::move(st.s);
    V.c[j] = st.c;
    out.policy.gains[j] = std::move(st.K);
    out.policy.offsets[j] = Vector::Constant(1, st.k);
  }

  out.bids = BidProfile{IndexKind::time, s, std::vector<double>(steps)};
  out.states.reserve(steps + 1);
  out.states.push_back(x_s);
  for (std::size_t j = 0; j < steps; ++j) {
    const Vector& x = out.states.back();
    const double u = out.policy.action(s + j, x)(0);
    out.bids[j] = u;
    out.states.push_back(agent.A * x + b * u);
  }
  out.cost = V(s, x_s);
  return out;
}

/// Priced objective of a given open-loop bid: the quantity lq_best_response minimizes.
inline double lq_priced_objective(const LqAgent& agent, const PriceProfile& prices, const Vector& x_s,
                                  std::span<const double> bids) {
  if (bids.size() != prices.size()) throw InstanceError("lq_priced_objective: length mismatch");
  Vector x = x_s;
  double total = 0.0;
  for (std::size_t j = 0; j < bids.size(); ++j) {
    total += agent.stage_cost(x, bids[j]) + prices[j] * bids[j];
    x = agent.A * x + agent.B.col(0) * bids[j];
  }
  return total + agent.terminal_cost(x);
}

struct RiccatiSolution {
  std::vector<Matrix> P;      // P_0 .. P_T
  std::vector<Matrix> gains;  // Gamma_0 .. Gamma_{T-1}
};

/// Finite-horizon discrete Riccati recursion for
///   min sum_{t<T} x'Qx + u'Ru + x_T'Qx_T,  x+ = A x + B u.
inline RiccatiSolution riccati_recursion(const Matrix& A, const Matrix& B, const Matrix& Q, const Matrix& R,
                                         std::size_t horizon) {
  const auto n = A.rows();
  const auto m = B.cols();
  if (A.cols() != n || B.rows() != n || Q.rows() != n || Q.cols() != n || R.rows() != m || R.cols() != m)
    throw InstanceError("riccati_recursion: inconsistent dimensions");
  if (m > 0 && Eigen::LLT<Matrix>(symmetrized(R)).info() != Eigen::Success)
    throw InstanceError("riccati_recursion: R is not positive definite");
  RiccatiSolution sol;
  sol.P.resize(horizon + 1);
  sol.gains.resize(horizon);
  sol.P[horizon] = Q;
  for (std::size_t t = horizon; t-- > 0;) {
    const Matrix& Pn = sol.P[t + 1];
    const Matrix BtP = B.transpose() * Pn;
    const Matrix S = symmetrized(R + BtP * B);
    Eigen::LLT<Matrix> llt(S);
    if (llt.info() != Eigen::Success) throw NumericalError("riccati_recursion: R + B'PB lost definiteness");
    sol.gains[t] = -llt.solve(BtP * A);
    sol.P[t] = symmetrized(Q + A.transpose() * Pn * A + (BtP * A).transpose() * sol.gains[t]);
  }
  return sol;
}

/// All agents as one block-diagonal system with one input column per agent.
struct StackedSystem {
  Matrix A, B, Q, R;
  std::vector<Eigen::Index> offsets;  // first state row of each agent

  std::size_t agents() const { return offsets.size(); }
};

inline StackedSystem stack_system(const MarketInstance& instance) {
  if (!instance.all_lq()) throw UnsupportedRegimeError("stacking requires LQ agents");
  const std::size_t M = instance.size();
  Eigen::Index n = 0;
  StackedSystem sys;
  for (std::size_t i = 0; i < M; ++i) {
    sys.offsets.push_back(n);
    n += instance.lq(i).A.rows();
  }
  const auto m = static_cast<Eigen::Index>(M);
  sys.A = Matrix::Zero(n, n);
  sys.B = Matrix::Zero(n, m);
  sys.Q = Matrix::Zero(n, n);
  sys.R = Matrix::Zero(m, m);
  for (std::size_t i = 0; i < M; ++i) {
    const auto& a = instance.lq(i);
    const auto o = sys.offsets[i];
    const auto ni = a.A.rows();
    const auto col = static_cast<Eigen::Index>(i);
    sys.A.block(o, o, ni, ni) = a.A;
    sys.B.block(o, col, ni, 1) = a.B;
    sys.Q.block(o, o, ni, ni) = a.Q;
    sys.R(col, col) = a.r();
  }
  return sys;
}

inline Vector stack_states(std::span<const Vector> states) {
  Eigen::Index n = 0;
  for (const auto& x : states) n += x.size();
  Vector out(n);
  Eigen::Index o = 0;
  for (const auto& x : states) {
    out.segment(o, x.size()) = x;
    o += x.size();
  }
  return out;
}

/// Balanced feedback for the stacked constrained LQR. The last agent's input
/// is eliminated (u_M = -sum of the others); the recursion runs on the
/// reduced unconstrained system.
struct CentralizedLqr {
  StackedSystem system;
  Matrix elimination;      // M x (M-1): u = E v
  RiccatiSolution reduced;
  FeedbackLaw law;         // gains lifted to all M inputs
  std::size_t horizon = 0;

  /// Balanced control vector at absolute time t. The last entry is formed as
  /// minus the left-to-right sum of the others, so the sum is exactly zero.
  std::vector<double> action(std::size_t t, const Vector& x) const {
    if (t >= horizon) throw InstanceError("centralized LQR: time beyond horizon");
    if (x.size() != system.A.rows()) throw InstanceError("centralized LQR: stacked state dimension mismatch");
    const Vector v = reduced.gains[t] * x;
    std::vector<double> u(static_cast<std::size_t>(v.size()) + 1);
    double sum = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      u[static_cast<std::size_t>(i)] = v(i);
      sum += v(i);
    }
    u.back() = -sum;
    return u;
  }
};

inline CentralizedLqr centralized_constrained_lqr(const MarketInstance& instance) {
  if (instance.regime() == Regime::tree)
    throw UnsupportedRegimeError("centralized_constrained_lqr: not defined for the tree regime");
  if (!instance.all_lq()) throw UnsupportedRegimeError("centralized_constrained_lqr: LQ agents required");
  const auto M = static_cast<Eigen::Index>(instance.size());
  if (M < 2) throw InstanceError("centralized_constrained_lqr: at least two agents required");
  CentralizedLqr out;
  out.system = stack_system(instance);
  out.horizon = instance.horizon();
  out.elimination = Matrix::Zero(M, M - 1);
  out.elimination.topRows(M - 1).setIdentity();
  out.elimination.row(M - 1).setConstant(-1.0);
  const Matrix& E = out.elimination;
  const Matrix Br = out.system.B * E;
  const Matrix Rr = symmetrized(E.transpose() * out.system.R * E);
  out.reduced = riccati_recursion(out.system.A, Br, out.system.Q, Rr, out.horizon);
  out.law.first_time = 0;
  for (const auto& g : out.reduced.gains) {
    out.law.gains.push_back(E * g);
    out.law.offsets.push_back(Vector::Zero(M));
  }
  return out;
}

/// Stochastic-optimal balanced action at (t, x): the noise-free constrained
/// LQR feedback evaluated at the current stacked state.
inline std::vector<double> certainty_equivalent_action(const CentralizedLqr& lqr, std::size_t t,
                                                       const Vector& x) {
  return lqr.action(t, x);
}

inline std::vector<double> certainty_equivalent_action(const MarketInstance& instance, std::size_t t,
                                                       const Vector& x) {
  if (instance.regime() != Regime::lqg)
    throw UnsupportedRegimeError("certainty_equivalent_action: lqg regime required");
  return centralized_constrained_lqr(instance).action(t, x);
}

/// Closed loop of the certainty-equivalent controller along one noise path.
inline std::vector<Trajectory> simulate_certainty_equivalent(const CentralizedLqr& lqr,
                                                             const MarketInstance& instance,
                                                             const NoisePath& path) {
  const std::size_t M = instance.size();
  const std::size_t T = instance.horizon();
  std::vector<Trajectory> trajs(M);
  std::vector<Vector> xs = instance.initial_states();
  for (std::size_t i = 0; i < M; ++i) trajs[i].states.push_back(xs[i]);
  for (std::size_t t = 0; t < T; ++t) {
    const auto u = lqr.action(t, stack_states(xs));
    for (std::size_t i = 0; i < M; ++i) {
      xs[i] = instance.lq(i).step(xs[i], u[i], path.per_agent[i][t], path.common[t]);
      trajs[i].controls.push_back(u[i]);
      trajs[i].states.push_back(xs[i]);
    }
  }
  return trajs;
}

}  // namespace isomarket
