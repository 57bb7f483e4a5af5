#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "depthkit/tape.hpp"

namespace depthkit {

// ---------------------------------------------------------------------------
// Depth-update rules. Every transformer block is one of these steps: the
// state X (and for momentum rules a velocity V) advances by combining the
// attention and MLP residual directions under a learned set of per-layer
// scalars, with a velocity LayerNorm after each velocity update.
// ---------------------------------------------------------------------------

enum class UpdateKind { GD, Polyak, Nesterov, IMEX, PRKVerlet, Hamiltonian };
enum class SplitScheme { Euler, LieTrotter };
enum class Ordering { AMA, MAM };  // attention-first vs mlp-first
enum class LnvMode { EndOnly, EveryUpdate };

struct UpdateVariant {
  UpdateKind kind = UpdateKind::GD;
  SplitScheme scheme = SplitScheme::Euler;  // GD / Polyak / Nesterov
  Ordering ordering = Ordering::AMA;        // IMEX / PRKVerlet
  int k = 1;                                // IMEX refinements
  LnvMode lnv_mode = LnvMode::EndOnly;      // IMEX
};

/// Which learned scalars a variant owns. Anything absent is never allocated.
struct ScalarSet {
  bool mu = false, mu_half = false;
  bool beta = false, beta_half = false;
  bool gamma = false, gamma_half = false;
  bool delta = false;
};

inline bool uses_velocity(const UpdateVariant& v) {
  return v.kind != UpdateKind::GD;
}

inline ScalarSet scalars_for(const UpdateVariant& v) {
  ScalarSet s;
  switch (v.kind) {
    case UpdateKind::GD:
      break;
    case UpdateKind::Polyak:
      s.beta = s.gamma = true;
      if (v.scheme == SplitScheme::LieTrotter) s.beta_half = s.gamma_half = true;
      break;
    case UpdateKind::Nesterov:
      s.mu = s.beta = s.gamma = true;
      if (v.scheme == SplitScheme::LieTrotter) {
        s.mu_half = s.beta_half = s.gamma_half = true;
      }
      break;
    case UpdateKind::IMEX:
    case UpdateKind::PRKVerlet:
      s.mu = s.mu_half = s.beta = s.gamma = s.gamma_half = true;
      break;
    case UpdateKind::Hamiltonian:
      s.mu = s.beta = s.gamma = s.gamma_half = s.delta = true;
      break;
  }
  return s;
}

/// (attention calls, mlp calls) one block of this variant performs.
inline std::pair<int, int> oracle_call_count(const UpdateVariant& v) {
  switch (v.kind) {
    case UpdateKind::GD:
    case UpdateKind::Polyak:
    case UpdateKind::Nesterov:
    case UpdateKind::Hamiltonian:
      return {1, 1};
    case UpdateKind::IMEX:
      return v.ordering == Ordering::AMA ? std::pair<int, int>{1, v.k}
                                         : std::pair<int, int>{v.k, 1};
    case UpdateKind::PRKVerlet:
      return v.ordering == Ordering::AMA ? std::pair<int, int>{2, 1}
                                         : std::pair<int, int>{1, 2};
  }
  return {0, 0};
}

inline std::string variant_name(const UpdateVariant& v) {
  switch (v.kind) {
    case UpdateKind::GD:
      return v.scheme == SplitScheme::Euler ? "gd_euler" : "gd_lt";
    case UpdateKind::Polyak:
      return v.scheme == SplitScheme::Euler ? "polyak_euler" : "polyak_lt";
    case UpdateKind::Nesterov:
      return v.scheme == SplitScheme::Euler ? "nesterov_euler" : "nesterov_lt";
    case UpdateKind::IMEX:
      return "imex";
    case UpdateKind::PRKVerlet:
      return "prk_verlet";
    case UpdateKind::Hamiltonian:
      return "hamiltonian";
  }
  return "?";
}

/// Builds a variant from its config spelling, rejecting sub-keys that do not
/// apply (ordering/k/lnv_mode are only meaningful where listed).
inline UpdateVariant make_variant(const std::string& name,
                                  std::optional<std::string> ordering = {},
                                  std::optional<int> k = {},
                                  std::optional<std::string> lnv_mode = {}) {
  UpdateVariant v;
  if (name == "gd_euler") {
    v.kind = UpdateKind::GD;
    v.scheme = SplitScheme::Euler;
  } else if (name == "gd_lt") {
    v.kind = UpdateKind::GD;
    v.scheme = SplitScheme::LieTrotter;
  } else if (name == "polyak_euler") {
    v.kind = UpdateKind::Polyak;
    v.scheme = SplitScheme::Euler;
  } else if (name == "polyak_lt") {
    v.kind = UpdateKind::Polyak;
    v.scheme = SplitScheme::LieTrotter;
  } else if (name == "nesterov_euler") {
    v.kind = UpdateKind::Nesterov;
    v.scheme = SplitScheme::Euler;
  } else if (name == "nesterov_lt") {
    v.kind = UpdateKind::Nesterov;
    v.scheme = SplitScheme::LieTrotter;
  } else if (name == "imex") {
    v.kind = UpdateKind::IMEX;
  } else if (name == "prk_verlet") {
    v.kind = UpdateKind::PRKVerlet;
  } else if (name == "hamiltonian") {
    v.kind = UpdateKind::Hamiltonian;
  } else {
    throw ConfigError("unknown variant '" + name + "'");
  }

  bool takes_ordering =
      v.kind == UpdateKind::IMEX || v.kind == UpdateKind::PRKVerlet;
  bool takes_imex_keys = v.kind == UpdateKind::IMEX;

  if (ordering) {
    if (!takes_ordering) {
      throw ConfigError("variant '" + name + "' takes no ordering key");
    }
    if (*ordering == "ama") {
      v.ordering = Ordering::AMA;
    } else if (*ordering == "mam") {
      v.ordering = Ordering::MAM;
    } else {
      throw ConfigError("ordering must be 'ama' or 'mam', got '" + *ordering + "'");
    }
  }
  if (k) {
    if (!takes_imex_keys) {
      throw ConfigError("variant '" + name + "' takes no k key");
    }
    if (*k < 1) {
      throw ConfigError("imex refinement count k must be >= 1, got " +
                        std::to_string(*k));
    }
    v.k = *k;
  }
  if (lnv_mode) {
    if (!takes_imex_keys) {
      throw ConfigError("variant '" + name + "' takes no lnv_mode key");
    }
    if (*lnv_mode == "end_only") {
      v.lnv_mode = LnvMode::EndOnly;
    } else if (*lnv_mode == "every_update") {
      v.lnv_mode = LnvMode::EveryUpdate;
    } else {
      throw ConfigError("lnv_mode must be 'end_only' or 'every_update', got '" +
                        *lnv_mode + "'");
    }
  }
  return v;
}

// -- scalar reparameterizations -------------------------------------------

// Both maps stay strictly inside their codomain even where correctly rounded
// float64 would touch the boundary (sigmoid saturates to 1.0 near raw = 37,
// softplus underflows to 0.0 near raw = -746).
inline double reparam_unit(double raw) {
  return std::min(detail::sigmoid_value(raw),
                  1.0 - std::numeric_limits<double>::epsilon() / 2);
}

inline double reparam_pos(double raw) {
  return std::max(detail::softplus_value(raw),
                  std::numeric_limits<double>::min());
}

/// raw value whose softplus is v (for initialization)
inline double reparam_pos_inverse(double v) {
  return v > 30.0 ? v : std::log(std::expm1(v));
}

// -- step functions --------------------------------------------------------

template <typename S>
struct OraclePair {
  std::function<Var<S>(Var<S>)> attn;
  std::function<Var<S>(Var<S>)> mlp;
};

/// Already-reparameterized per-layer coefficients, bound to the active tape
/// as scalar vars. Fields a variant does not use stay invalid.
template <typename S>
struct BlockCoeffs {
  Var<S> mu, mu_half;
  Var<S> beta, beta_half;
  Var<S> gamma, gamma_half;
  Var<S> delta;
};

/// Velocity normalization applied after each velocity update; the model binds
/// a per-layer LayerNorm gain, tests may pass the identity.
template <typename S>
using VNorm = std::function<Var<S>(Var<S>)>;

template <typename S>
VNorm<S> identity_norm() {
  return [](Var<S> v) { return v; };
}

template <typename S>
struct StateXV {
  Var<S> x;
  Var<S> v;  // invalid for velocity-free rules
};

namespace detail {

// v-update with one oracle direction, fixed association for the exactness of
// the reduction identities: beta*v + coeff*g
template <typename S>
Var<S> vel_update1(Var<S> beta, Var<S> v, Var<S> coeff, Var<S> g) {
  Tape<S>& t = *v.tape;
  return t.add(t.mul(beta, v), t.mul(coeff, g));
}

// v-update with both oracle directions: beta*v + (gamma*a + gamma*m)
template <typename S>
Var<S> vel_update2(Var<S> beta, Var<S> v, Var<S> gamma, Var<S> a, Var<S> m) {
  Tape<S>& t = *v.tape;
  return t.add(t.mul(beta, v), t.add(t.mul(gamma, a), t.mul(gamma, m)));
}

template <typename S>
Var<S> lookahead(Var<S> x, Var<S> mu, Var<S> v) {
  Tape<S>& t = *x.tape;
  return t.add(x, t.mul(mu, v));
}

}  // namespace detail

/// X' = X + (Attn(X) + MLP(X)), both oracles at the same point.
template <typename S>
Var<S> step_gd_euler(Var<S> x, const OraclePair<S>& o) {
  Tape<S>& t = *x.tape;
  return t.add(x, t.add(o.attn(x), o.mlp(x)));
}

/// Sequential residual block: X1 = X + Attn(X); X' = X1 + MLP(X1).
template <typename S>
Var<S> step_gd_lt(Var<S> x, const OraclePair<S>& o) {
  Tape<S>& t = *x.tape;
  Var<S> x1 = t.add(x, o.attn(x));
  return t.add(x1, o.mlp(x1));
}

template <typename S>
StateXV<S> step_nesterov_euler(Var<S> x, Var<S> v, const BlockCoeffs<S>& c,
                               const OraclePair<S>& o, const VNorm<S>& lnv) {
  Tape<S>& t = *x.tape;
  Var<S> xin = detail::lookahead(x, c.mu, v);
  Var<S> vn = lnv(detail::vel_update2(c.beta, v, c.gamma, o.attn(xin), o.mlp(xin)));
  return {t.add(x, vn), vn};
}

template <typename S>
StateXV<S> step_polyak_euler(Var<S> x, Var<S> v, const BlockCoeffs<S>& c,
                             const OraclePair<S>& o, const VNorm<S>& lnv) {
  Tape<S>& t = *x.tape;
  Var<S> vn = lnv(detail::vel_update2(c.beta, v, c.gamma, o.attn(x), o.mlp(x)));
  return {t.add(x, vn), vn};
}

template <typename S>
StateXV<S> step_nesterov_lt(Var<S> x, Var<S> v, const BlockCoeffs<S>& c,
                            const OraclePair<S>& o, const VNorm<S>& lnv) {
  Tape<S>& t = *x.tape;
  Var<S> xin = detail::lookahead(x, c.mu, v);
  Var<S> vhalf = lnv(detail::vel_update1(c.beta, v, c.gamma, o.attn(xin)));
  Var<S> xhalf = t.add(x, vhalf);
  Var<S> xin2 = detail::lookahead(xhalf, c.mu_half, vhalf);
  Var<S> vn = lnv(detail::vel_update1(c.beta_half, vhalf, c.gamma_half, o.mlp(xin2)));
  return {t.add(xhalf, vn), vn};
}

template <typename S>
StateXV<S> step_polyak_lt(Var<S> x, Var<S> v, const BlockCoeffs<S>& c,
                          const OraclePair<S>& o, const VNorm<S>& lnv) {
  Tape<S>& t = *x.tape;
  Var<S> vhalf = lnv(detail::vel_update1(c.beta, v, c.gamma, o.attn(x)));
  Var<S> xhalf = t.add(x, vhalf);
  Var<S> vn = lnv(detail::vel_update1(c.beta_half, vhalf, c.gamma_half, o.mlp(xhalf)));
  return {t.add(xhalf, vn), vn};
}

/// Explicit step with the first oracle at a lookahead, then k unrolled
/// refinements of the implicit second oracle; beta is shared across substeps.
template <typename S>
StateXV<S> step_imex(Var<S> x, Var<S> v, const BlockCoeffs<S>& c,
                     const OraclePair<S>& o, Ordering ordering, int k,
                     LnvMode mode, const VNorm<S>& lnv) {
  if (k < 1) {
    throw ConfigError("imex refinement count k must be >= 1, got " +
                      std::to_string(k));
  }
  Tape<S>& t = *x.tape;
  const auto& first = ordering == Ordering::AMA ? o.attn : o.mlp;
  const auto& second = ordering == Ordering::AMA ? o.mlp : o.attn;
  bool every = mode == LnvMode::EveryUpdate;

  Var<S> xin = detail::lookahead(x, c.mu, v);
  Var<S> vhalf = detail::vel_update1(c.beta, v, c.gamma, first(xin));
  if (every) vhalf = lnv(vhalf);

  Var<S> vj = vhalf;
  Var<S> xj = detail::lookahead(x, c.mu_half, vj);
  for (int j = 1; j <= k; ++j) {
    vj = detail::vel_update1(c.beta, vhalf, c.gamma_half, second(xj));
    if (every) vj = lnv(vj);
    if (j < k) xj = detail::lookahead(x, c.mu_half, vj);
  }
  Var<S> vn = every ? vj : lnv(vj);
  return {t.add(x, vn), vn};
}

/// Strang half/full/half composition; the half-steps halve the first
/// oracle's step size and every substep shares the damping beta.
template <typename S>
StateXV<S> step_prk_verlet(Var<S> x, Var<S> v, const BlockCoeffs<S>& c,
                           const OraclePair<S>& o, Ordering ordering,
                           const VNorm<S>& lnv) {
  Tape<S>& t = *x.tape;
  const auto& half_oracle = ordering == Ordering::AMA ? o.attn : o.mlp;
  const auto& full_oracle = ordering == Ordering::AMA ? o.mlp : o.attn;
  Var<S> half_coeff = t.scale(c.gamma, S(0.5));

  auto substep = [&](Var<S> xs, Var<S> vs, Var<S> mu, Var<S> coeff,
                     const std::function<Var<S>(Var<S>)>& oracle) {
    Var<S> xin = detail::lookahead(xs, mu, vs);
    Var<S> vn = lnv(detail::vel_update1(c.beta, vs, coeff, oracle(xin)));
    return StateXV<S>{t.add(xs, vn), vn};
  };

  StateXV<S> s1 = substep(x, v, c.mu, half_coeff, half_oracle);
  StateXV<S> s2 = substep(s1.x, s1.v, c.mu_half, c.gamma_half, full_oracle);
  return substep(s2.x, s2.v, c.mu, half_coeff, half_oracle);
}

/// Attn-kick, drift, MLP-kick; both kicks subtract their direction and share
/// mu and beta, the drift moves the state by delta * velocity, and the MLP
/// kick touches only the momentum.
template <typename S>
StateXV<S> step_hamiltonian(Var<S> x, Var<S> v, const BlockCoeffs<S>& c,
                            const OraclePair<S>& o, const VNorm<S>& lnv) {
  Tape<S>& t = *x.tape;
  Var<S> xin = detail::lookahead(x, c.mu, v);
  Var<S> vhalf = lnv(t.sub(t.mul(c.beta, v), t.mul(c.gamma, o.attn(xin))));
  Var<S> xhalf = t.add(x, t.mul(c.delta, vhalf));
  Var<S> xin2 = detail::lookahead(xhalf, c.mu, vhalf);
  Var<S> vn = lnv(t.sub(t.mul(c.beta, vhalf), t.mul(c.gamma_half, o.mlp(xin2))));
  return {xhalf, vn};
}

/// Runs one block of the given variant. For velocity-free rules the returned
/// v is invalid and the input v is ignored.
template <typename S>
StateXV<S> step_variant(const UpdateVariant& var, Var<S> x, Var<S> v,
                        const BlockCoeffs<S>& c, const OraclePair<S>& o,
                        const VNorm<S>& lnv) {
  switch (var.kind) {
    case UpdateKind::GD:
      return {var.scheme == SplitScheme::Euler ? step_gd_euler(x, o)
                                               : step_gd_lt(x, o),
              Var<S>{}};
    case UpdateKind::Polyak:
      return var.scheme == SplitScheme::Euler ? step_polyak_euler(x, v, c, o, lnv)
                                              : step_polyak_lt(x, v, c, o, lnv);
    case UpdateKind::Nesterov:
      return var.scheme == SplitScheme::Euler
                 ? step_nesterov_euler(x, v, c, o, lnv)
                 : step_nesterov_lt(x, v, c, o, lnv);
    case UpdateKind::IMEX:
      return step_imex(x, v, c, o, var.ordering, var.k, var.lnv_mode, lnv);
    case UpdateKind::PRKVerlet:
      return step_prk_verlet(x, v, c, o, var.ordering, lnv);
    case UpdateKind::Hamiltonian:
      return step_hamiltonian(x, v, c, o, lnv);
  }
  throw ContractError("unhandled variant kind");
}

inline const std::vector<std::string>& all_variant_names() {
  static const std::vector<std::string> names = {
      "gd_euler",     "gd_lt",      "nesterov_euler",
      "nesterov_lt",  "polyak_euler", "polyak_lt",
      "imex",         "prk_verlet", "hamiltonian"};
  return names;
}

}  // namespace depthkit
