#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "depthkit/oracles.hpp"
#include "depthkit/update_rules.hpp"

using namespace depthkit;

using Td = Tensor<double>;
using Vd = Var<double>;

namespace {

Td randn(std::vector<int64_t> shape, uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return Td::randn(std::move(shape), rng, sd);
}

// constant-direction oracles, optionally recording every argument they see
OraclePair<double> stubs(Tape<double>& t, Td aout, Td mout,
                         std::vector<Td>* attn_args = nullptr,
                         std::vector<Td>* mlp_args = nullptr) {
  OraclePair<double> o;
  o.attn = [&t, aout, attn_args](Vd x) {
    if (attn_args) attn_args->push_back(x.value());
    return t.constant(aout);
  };
  o.mlp = [&t, mout, mlp_args](Vd x) {
    if (mlp_args) mlp_args->push_back(x.value());
    return t.constant(mout);
  };
  return o;
}

struct RealBlock {
  Td attn_gain, wqkv, wout;
  Td mlp_gain, win, wout2;
  Td lnv_gain;
  int heads;
};

RealBlock make_block(int64_t d, int heads, uint64_t seed) {
  return {Td::full({d}, 1.0),
          randn({d, 3 * d}, seed, 0.25),
          randn({d, d}, seed + 1, 0.25),
          Td::full({d}, 1.0),
          randn({d, 4 * d}, seed + 2, 0.25),
          randn({4 * d, d}, seed + 3, 0.25),
          Td::full({d}, 1.0),
          heads};
}

struct BoundBlock {
  OraclePair<double> oracles;
  VNorm<double> lnv;
};

BoundBlock bind_block(Tape<double>& t, const RealBlock& b,
                      bool lnv_identity = false) {
  AttnParams<double> ap;
  ap.ln_gain = t.input(b.attn_gain);
  ap.w_qkv = t.input(b.wqkv);
  ap.w_out = t.input(b.wout);
  ap.heads = b.heads;
  MlpParams<double> mp;
  mp.ln_gain = t.input(b.mlp_gain);
  mp.w_in = t.input(b.win);
  mp.w_out = t.input(b.wout2);
  BoundBlock out;
  out.oracles.attn = [ap](Vd x) { return attn_forward(x, ap, true); };
  out.oracles.mlp = [mp](Vd x) { return mlp_forward(x, mp); };
  if (lnv_identity) {
    out.lnv = identity_norm<double>();
  } else {
    Vd g = t.input(b.lnv_gain);
    out.lnv = [&t, g](Vd v) { return t.layernorm(v, g); };
  }
  return out;
}

BlockCoeffs<double> coeffs(Tape<double>& t, double mu, double mu_half,
                           double beta, double beta_half, double gamma,
                           double gamma_half, double delta = 1.0) {
  BlockCoeffs<double> c;
  c.mu = t.constant(Td::scalar(mu));
  c.mu_half = t.constant(Td::scalar(mu_half));
  c.beta = t.constant(Td::scalar(beta));
  c.beta_half = t.constant(Td::scalar(beta_half));
  c.gamma = t.constant(Td::scalar(gamma));
  c.gamma_half = t.constant(Td::scalar(gamma_half));
  c.delta = t.constant(Td::scalar(delta));
  return c;
}

struct CallCounter {
  int attn = 0, mlp = 0;
  OraclePair<double> wrap(OraclePair<double> inner) {
    OraclePair<double> out;
    out.attn = [this, inner](Vd x) {
      ++attn;
      return inner.attn(x);
    };
    out.mlp = [this, inner](Vd x) {
      ++mlp;
      return inner.mlp(x);
    };
    return out;
  }
};

}  // namespace

TEST_CASE("reparameterizations stay strictly inside their ranges") {
  CHECK(reparam_unit(0.0) == 0.5);
  CHECK(reparam_pos(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(reparam_unit(-40.0) < 1e-17);
  CHECK(reparam_unit(-40.0) > 0.0);
  for (double raw : {-40.0, 0.0, 40.0}) {
    CHECK(reparam_unit(raw) > 0.0);
    CHECK(reparam_unit(raw) < 1.0);
    CHECK(reparam_pos(raw) > 0.0);
  }
  CHECK(reparam_pos(reparam_pos_inverse(1.0)) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(reparam_pos_inverse(1.0) ==
        doctest::Approx(0.5413248546129181).epsilon(1e-14));
}

TEST_CASE("variant parsing round-trips and rejects stray keys") {
  for (const std::string& name : all_variant_names()) {
    CHECK(variant_name(make_variant(name)) == name);
  }
  UpdateVariant v = make_variant("imex", std::string("mam"), 2,
                                 std::string("every_update"));
  CHECK(v.kind == UpdateKind::IMEX);
  CHECK(v.ordering == Ordering::MAM);
  CHECK(v.k == 2);
  CHECK(v.lnv_mode == LnvMode::EveryUpdate);
  CHECK(make_variant("prk_verlet", std::string("mam")).ordering == Ordering::MAM);

  CHECK_THROWS_AS(make_variant("adamw_block"), ConfigError);
  CHECK_THROWS_AS(make_variant("gd_euler", std::string("ama")), ConfigError);
  CHECK_THROWS_AS(make_variant("prk_verlet", {}, 2), ConfigError);
  CHECK_THROWS_AS(make_variant("polyak_lt", {}, {}, std::string("end_only")),
                  ConfigError);
  CHECK_THROWS_AS(make_variant("imex", std::string("sideways")), ConfigError);
  CHECK_THROWS_AS(make_variant("imex", {}, 0), ConfigError);
  CHECK_THROWS_AS(make_variant("imex", {}, {}, std::string("sometimes")),
                  ConfigError);
}

TEST_CASE("each variant owns exactly the scalars it uses") {
  auto flags = [](const ScalarSet& s) {
    return std::vector<bool>{s.mu,    s.mu_half,    s.beta, s.beta_half,
                             s.gamma, s.gamma_half, s.delta};
  };
  auto want = [](bool mu, bool muh, bool b, bool bh, bool g, bool gh, bool del) {
    return std::vector<bool>{mu, muh, b, bh, g, gh, del};
  };
  CHECK(flags(scalars_for(make_variant("gd_euler"))) == want(0, 0, 0, 0, 0, 0, 0));
  CHECK(flags(scalars_for(make_variant("gd_lt"))) == want(0, 0, 0, 0, 0, 0, 0));
  CHECK(flags(scalars_for(make_variant("polyak_euler"))) == want(0, 0, 1, 0, 1, 0, 0));
  CHECK(flags(scalars_for(make_variant("polyak_lt"))) == want(0, 0, 1, 1, 1, 1, 0));
  CHECK(flags(scalars_for(make_variant("nesterov_euler"))) == want(1, 0, 1, 0, 1, 0, 0));
  CHECK(flags(scalars_for(make_variant("nesterov_lt"))) == want(1, 1, 1, 1, 1, 1, 0));
  CHECK(flags(scalars_for(make_variant("imex"))) == want(1, 1, 1, 0, 1, 1, 0));
  CHECK(flags(scalars_for(make_variant("prk_verlet"))) == want(1, 1, 1, 0, 1, 1, 0));
  CHECK(flags(scalars_for(make_variant("hamiltonian"))) == want(1, 0, 1, 0, 1, 1, 1));
}

TEST_CASE("static oracle call budgets match the table") {
  auto count = [](const char* n, std::optional<std::string> ord = {},
                  std::optional<int> k = {}) {
    return oracle_call_count(make_variant(n, std::move(ord), k));
  };
  CHECK(count("gd_euler") == std::make_pair(1, 1));
  CHECK(count("gd_lt") == std::make_pair(1, 1));
  CHECK(count("polyak_euler") == std::make_pair(1, 1));
  CHECK(count("polyak_lt") == std::make_pair(1, 1));
  CHECK(count("nesterov_euler") == std::make_pair(1, 1));
  CHECK(count("nesterov_lt") == std::make_pair(1, 1));
  CHECK(count("hamiltonian") == std::make_pair(1, 1));
  CHECK(count("imex", std::string("ama"), 1) == std::make_pair(1, 1));
  CHECK(count("imex", std::string("ama"), 2) == std::make_pair(1, 2));
  CHECK(count("imex", std::string("mam"), 2) == std::make_pair(2, 1));
  CHECK(count("prk_verlet", std::string("ama")) == std::make_pair(2, 1));
  CHECK(count("prk_verlet", std::string("mam")) == std::make_pair(1, 2));
}

TEST_CASE("runtime call counters agree with the static budgets") {
  std::vector<UpdateVariant> variants;
  for (const std::string& name : all_variant_names()) variants.push_back(make_variant(name));
  variants.push_back(make_variant("imex", std::string("ama"), 2));
  variants.push_back(make_variant("imex", std::string("mam"), 2));
  variants.push_back(make_variant("imex", std::string("ama"), 3,
                                  std::string("every_update")));
  variants.push_back(make_variant("prk_verlet", std::string("mam")));

  RealBlock block = make_block(8, 2, 100);
  for (const UpdateVariant& v : variants) {
    CAPTURE(variant_name(v));
    Tape<double> t;
    BoundBlock b = bind_block(t, block);
    CallCounter counter;
    OraclePair<double> wrapped = counter.wrap(b.oracles);
    Vd x = t.input(randn({6, 8}, 101, 0.5));
    Vd vel = t.input(randn({6, 8}, 102, 0.5));
    BlockCoeffs<double> c = coeffs(t, 0.4, 0.3, 0.5, 0.6, 0.8, 0.7, 0.9);
    step_variant(v, x, vel, c, wrapped, b.lnv);
    std::pair<int, int> want = oracle_call_count(v);
    CHECK(counter.attn == want.first);
    CHECK(counter.mlp == want.second);
  }
}

TEST_CASE("gd steps match their definitions") {
  int64_t n = 4, d = 6;
  Td x0 = randn({n, d}, 110, 0.7);
  Td A = randn({n, d}, 111, 0.4);
  Td M = randn({n, d}, 112, 0.4);

  {
    Tape<double> t;
    Vd x = t.input(x0);
    Vd out = step_gd_euler(x, stubs(t, Td::zeros({n, d}), Td::zeros({n, d})));
    CHECK(out.value() == x0);
  }
  {
    Tape<double> t;
    Vd x = t.input(x0);
    std::vector<Td> aargs, margs;
    Vd out = step_gd_euler(x, stubs(t, A, M, &aargs, &margs));
    REQUIRE(aargs.size() == 1);
    REQUIRE(margs.size() == 1);
    CHECK(aargs[0] == x0);
    CHECK(margs[0] == x0);
    for (int64_t i = 0; i < n * d; ++i) {
      CHECK(out.value()[i] == x0[i] + (A[i] + M[i]));
    }
  }
  {
    Tape<double> t;
    Vd x = t.input(x0);
    std::vector<Td> aargs, margs;
    Vd out = step_gd_lt(x, stubs(t, A, M, &aargs, &margs));
    REQUIRE(aargs.size() == 1);
    REQUIRE(margs.size() == 1);
    CHECK(aargs[0] == x0);
    Td x1(x0.shape());
    for (int64_t i = 0; i < n * d; ++i) x1[i] = x0[i] + A[i];
    CHECK(margs[0] == x1);
    for (int64_t i = 0; i < n * d; ++i) CHECK(out.value()[i] == x1[i] + M[i]);
  }
}

TEST_CASE("gd_lt equals an independently composed residual block") {
  int64_t n = 5, d = 8;
  RealBlock block = make_block(d, 2, 120);
  Td x0 = randn({n, d}, 121, 0.6);

  Tape<double> t1;
  BoundBlock b1 = bind_block(t1, block);
  Td got = step_gd_lt(t1.input(x0), b1.oracles).value();

  // reference composition built directly from the oracle modules
  Tape<double> t2;
  AttnParams<double> ap;
  ap.ln_gain = t2.input(block.attn_gain);
  ap.w_qkv = t2.input(block.wqkv);
  ap.w_out = t2.input(block.wout);
  ap.heads = block.heads;
  MlpParams<double> mp;
  mp.ln_gain = t2.input(block.mlp_gain);
  mp.w_in = t2.input(block.win);
  mp.w_out = t2.input(block.wout2);
  Vd xr = t2.input(x0);
  Vd x1 = t2.add(xr, attn_forward(xr, ap, true));
  Td ref = t2.add(x1, mlp_forward(x1, mp)).value();

  CHECK(got == ref);
}

TEST_CASE("nesterov euler looks ahead by sigmoid(mu_raw) times velocity") {
  int64_t n = 4, d = 6;
  Td x0 = randn({n, d}, 130, 0.7);
  Td v0 = randn({n, d}, 131, 0.5);
  double mu_raw = 0.3;

  Tape<double> t;
  Vd x = t.input(x0);
  Vd v = t.input(v0);
  BlockCoeffs<double> c = coeffs(t, 0, 0, 0.5, 0, 0.8, 0);
  c.mu = t.sigmoid(t.constant(Td::scalar(mu_raw)));
  std::vector<Td> aargs, margs;
  OraclePair<double> o = stubs(t, Td::zeros({n, d}), Td::zeros({n, d}), &aargs, &margs);
  step_nesterov_euler(x, v, c, o, identity_norm<double>());

  double mu = detail::sigmoid_value(mu_raw);
  REQUIRE(aargs.size() == 1);
  REQUIRE(margs.size() == 1);
  for (int64_t i = 0; i < n * d; ++i) {
    CHECK(aargs[0][i] == x0[i] + mu * v0[i]);
    CHECK(margs[0][i] == x0[i] + mu * v0[i]);
  }
}

TEST_CASE("reduction lattice collapses exactly") {
  int64_t n = 6, d = 8;
  RealBlock block = make_block(d, 2, 140);
  Td x0 = randn({n, d}, 141, 0.6);
  Td v0 = randn({n, d}, 142, 0.4);
  Td zero = Td::zeros({n, d});

  auto run = [&](auto stepper) {
    Tape<double> t;
    BoundBlock b = bind_block(t, block, true);
    return stepper(t, b);
  };

  // Nesterov(mu = 0) is Polyak, Euler scheme
  {
    auto nes = run([&](Tape<double>& t, BoundBlock& b) {
      StateXV<double> s = step_nesterov_euler(
          t.input(x0), t.input(v0), coeffs(t, 0.0, 0, 0.4, 0, 0.9, 0),
          b.oracles, b.lnv);
      return std::pair<Td, Td>(s.x.value(), s.v.value());
    });
    auto pol = run([&](Tape<double>& t, BoundBlock& b) {
      StateXV<double> s = step_polyak_euler(t.input(x0), t.input(v0),
                                            coeffs(t, 0, 0, 0.4, 0, 0.9, 0),
                                            b.oracles, b.lnv);
      return std::pair<Td, Td>(s.x.value(), s.v.value());
    });
    CHECK(nes.first == pol.first);
    CHECK(nes.second == pol.second);
  }

  // Nesterov(mu = mu_half = 0) is Polyak, Lie-Trotter scheme
  {
    auto nes = run([&](Tape<double>& t, BoundBlock& b) {
      StateXV<double> s = step_nesterov_lt(
          t.input(x0), t.input(v0), coeffs(t, 0.0, 0.0, 0.4, 0.6, 0.9, 0.5),
          b.oracles, b.lnv);
      return std::pair<Td, Td>(s.x.value(), s.v.value());
    });
    auto pol = run([&](Tape<double>& t, BoundBlock& b) {
      StateXV<double> s = step_polyak_lt(
          t.input(x0), t.input(v0), coeffs(t, 0, 0, 0.4, 0.6, 0.9, 0.5),
          b.oracles, b.lnv);
      return std::pair<Td, Td>(s.x.value(), s.v.value());
    });
    CHECK(nes.first == pol.first);
    CHECK(nes.second == pol.second);
  }

  // Polyak(beta = 0, gamma = 1, V = 0) is GD, both schemes
  {
    auto pol = run([&](Tape<double>& t, BoundBlock& b) {
      return step_polyak_euler(t.input(x0), t.input(zero),
                               coeffs(t, 0, 0, 0.0, 0, 1.0, 0), b.oracles,
                               b.lnv)
          .x.value();
    });
    auto gd = run([&](Tape<double>& t, BoundBlock& b) {
      return step_gd_euler(t.input(x0), b.oracles).value();
    });
    CHECK(pol == gd);
  }
  {
    auto pol = run([&](Tape<double>& t, BoundBlock& b) {
      return step_polyak_lt(t.input(x0), t.input(zero),
                            coeffs(t, 0, 0, 0.0, 0.0, 1.0, 1.0), b.oracles,
                            b.lnv)
          .x.value();
    });
    auto gd = run([&](Tape<double>& t, BoundBlock& b) {
      return step_gd_lt(t.input(x0), b.oracles).value();
    });
    CHECK(pol == gd);
  }

  // Nesterov Euler with V = 0, gamma = 1 already is a gd_euler block
  {
    auto nes = run([&](Tape<double>& t, BoundBlock& b) {
      return step_nesterov_euler(t.input(x0), t.input(zero),
                                 coeffs(t, 0.9, 0, 0.7, 0, 1.0, 0), b.oracles,
                                 b.lnv)
          .x.value();
    });
    auto gd = run([&](Tape<double>& t, BoundBlock& b) {
      return step_gd_euler(t.input(x0), b.oracles).value();
    });
    CHECK(nes == gd);
  }
}

TEST_CASE("nesterov lt with zero oracles unrolls symbolically") {
  int64_t n = 4, d = 5;
  Td x0 = randn({n, d}, 150, 0.8);
  Td v0 = randn({n, d}, 151, 0.6);
  double mu = 0.35, mu_half = 0.15, beta = 0.6, beta_half = 0.25, gamma = 0.8,
         gamma_half = 0.45;

  Tape<double> t;
  StateXV<double> s = step_nesterov_lt(
      t.input(x0), t.input(v0),
      coeffs(t, mu, mu_half, beta, beta_half, gamma, gamma_half),
      stubs(t, Td::zeros({n, d}), Td::zeros({n, d})), identity_norm<double>());

  for (int64_t i = 0; i < n * d; ++i) {
    double vhalf = beta * v0[i] + gamma * 0.0;
    double xhalf = x0[i] + vhalf;
    double vn = beta_half * vhalf + gamma_half * 0.0;
    CHECK(s.v.value()[i] == vn);
    CHECK(s.x.value()[i] == xhalf + vn);
    // closed form: V' = beta_half beta V, X' = X + (beta + beta_half beta) V
    CHECK(s.v.value()[i] ==
          doctest::Approx(beta_half * beta * v0[i]).epsilon(1e-15));
    CHECK(s.x.value()[i] ==
          doctest::Approx(x0[i] + (beta + beta_half * beta) * v0[i]).epsilon(1e-14));
  }
}

TEST_CASE("polyak oracles never see a lookahead") {
  int64_t n = 4, d = 5;
  Td x0 = randn({n, d}, 160, 0.8);
  Td v0 = randn({n, d}, 161, 0.6);
  Td A = randn({n, d}, 162, 0.4);
  Td M = randn({n, d}, 163, 0.4);
  double beta = 0.55, beta_half = 0.35, gamma = 0.75, gamma_half = 0.65;

  {
    Tape<double> t;
    std::vector<Td> aargs, margs;
    step_polyak_euler(t.input(x0), t.input(v0),
                      coeffs(t, 0, 0, beta, 0, gamma, 0),
                      stubs(t, A, M, &aargs, &margs), identity_norm<double>());
    REQUIRE(aargs.size() == 1);
    REQUIRE(margs.size() == 1);
    CHECK(aargs[0] == x0);
    CHECK(margs[0] == x0);
  }
  {
    Tape<double> t;
    std::vector<Td> aargs, margs;
    StateXV<double> s = step_polyak_lt(
        t.input(x0), t.input(v0),
        coeffs(t, 0, 0, beta, beta_half, gamma, gamma_half),
        stubs(t, A, M, &aargs, &margs), identity_norm<double>());
    REQUIRE(aargs.size() == 1);
    REQUIRE(margs.size() == 1);
    CHECK(aargs[0] == x0);
    for (int64_t i = 0; i < n * d; ++i) {
      double vhalf = beta * v0[i] + gamma * A[i];
      CHECK(margs[0][i] == x0[i] + vhalf);
      double vn = beta_half * vhalf + gamma_half * M[i];
      CHECK(s.v.value()[i] == vn);
      CHECK(s.x.value()[i] == (x0[i] + vhalf) + vn);
    }
  }
  // one step from rest: the state moves by the gamma-scaled directions only
  {
    Tape<double> t;
    StateXV<double> s = step_polyak_euler(
        t.input(x0), t.input(Td::zeros({n, d})),
        coeffs(t, 0, 0, beta, 0, gamma, 0), stubs(t, A, M),
        identity_norm<double>());
    for (int64_t i = 0; i < n * d; ++i) {
      CHECK(s.x.value()[i] == x0[i] + (beta * 0.0 + (gamma * A[i] + gamma * M[i])));
    }
  }
}

TEST_CASE("imex matches the closed form and honors lnv placement") {
  int64_t n = 3, d = 4;
  Td x0 = randn({n, d}, 170, 0.7);
  Td v0 = randn({n, d}, 171, 0.5);
  Td A = randn({n, d}, 172, 0.4);
  Td M = randn({n, d}, 173, 0.4);
  double mu = 0.3, mu_half = 0.2, beta = 0.6, gamma = 0.8, gamma_half = 0.5;

  // k = 1, attention-first, LN_v once at the end (identity here)
  {
    Tape<double> t;
    std::vector<Td> aargs, margs;
    StateXV<double> s = step_imex(
        t.input(x0), t.input(v0), coeffs(t, mu, mu_half, beta, 0, gamma, gamma_half),
        stubs(t, A, M, &aargs, &margs), Ordering::AMA, 1, LnvMode::EndOnly,
        identity_norm<double>());
    REQUIRE(aargs.size() == 1);
    REQUIRE(margs.size() == 1);
    for (int64_t i = 0; i < n * d; ++i) {
      CHECK(aargs[0][i] == x0[i] + mu * v0[i]);
      double vhalf = beta * v0[i] + gamma * A[i];
      CHECK(margs[0][i] == x0[i] + mu_half * vhalf);
      double v1 = beta * vhalf + gamma_half * M[i];
      CHECK(s.v.value()[i] == v1);
      CHECK(s.x.value()[i] == x0[i] + v1);
    }
  }

  // a doubling "norm" makes the placement observable
  VNorm<double> doubler = [](Vd v) { return v.tape->scale(v, 2.0); };
  {
    Tape<double> t;
    StateXV<double> s = step_imex(
        t.input(x0), t.input(v0), coeffs(t, mu, mu_half, beta, 0, gamma, gamma_half),
        stubs(t, A, M), Ordering::AMA, 1, LnvMode::EndOnly, doubler);
    for (int64_t i = 0; i < n * d; ++i) {
      double vhalf = beta * v0[i] + gamma * A[i];     // not normalized
      double v1 = beta * vhalf + gamma_half * M[i];   // not normalized
      CHECK(s.v.value()[i] == 2.0 * v1);              // once at the end
    }
  }
  {
    Tape<double> t;
    std::vector<Td> margs;
    StateXV<double> s = step_imex(
        t.input(x0), t.input(v0), coeffs(t, mu, mu_half, beta, 0, gamma, gamma_half),
        stubs(t, A, M, nullptr, &margs), Ordering::AMA, 1, LnvMode::EveryUpdate,
        doubler);
    REQUIRE(margs.size() == 1);
    for (int64_t i = 0; i < n * d; ++i) {
      double vhalf = 2.0 * (beta * v0[i] + gamma * A[i]);  // normalized at once
      CHECK(margs[0][i] == x0[i] + mu_half * vhalf);       // refinement sees it
      double v1 = 2.0 * (beta * vhalf + gamma_half * M[i]);
      CHECK(s.v.value()[i] == v1);  // no extra end normalization
      CHECK(s.x.value()[i] == x0[i] + v1);
    }
  }

  // k = 2 refinement chain: beta always multiplies the explicit velocity
  {
    Tape<double> t;
    std::vector<Td> margs;
    StateXV<double> s = step_imex(
        t.input(x0), t.input(v0), coeffs(t, mu, mu_half, beta, 0, gamma, gamma_half),
        stubs(t, A, M, nullptr, &margs), Ordering::AMA, 2, LnvMode::EndOnly,
        identity_norm<double>());
    REQUIRE(margs.size() == 2);
    for (int64_t i = 0; i < n * d; ++i) {
      double vhalf = beta * v0[i] + gamma * A[i];
      CHECK(margs[0][i] == x0[i] + mu_half * vhalf);
      double v1 = beta * vhalf + gamma_half * M[i];
      CHECK(margs[1][i] == x0[i] + mu_half * v1);
      double v2 = beta * vhalf + gamma_half * M[i];
      CHECK(s.v.value()[i] == v2);
    }
  }

  // mlp-first ordering is attention-first with the roles swapped
  {
    Tape<double> t;
    BlockCoeffs<double> c = coeffs(t, mu, mu_half, beta, 0, gamma, gamma_half);
    StateXV<double> mam = step_imex(t.input(x0), t.input(v0), c, stubs(t, A, M),
                                    Ordering::MAM, 2, LnvMode::EndOnly,
                                    identity_norm<double>());
    OraclePair<double> swapped = stubs(t, M, A);  // attn slot returns M
    StateXV<double> ama = step_imex(t.input(x0), t.input(v0), c, swapped,
                                    Ordering::AMA, 2, LnvMode::EndOnly,
                                    identity_norm<double>());
    CHECK(mam.x.value() == ama.x.value());
    CHECK(mam.v.value() == ama.v.value());
  }

  {
    Tape<double> t;
    CHECK_THROWS_AS(
        step_imex(t.input(x0), t.input(v0),
                  coeffs(t, mu, mu_half, beta, 0, gamma, gamma_half),
                  stubs(t, A, M), Ordering::AMA, 0, LnvMode::EndOnly,
                  identity_norm<double>()),
        ConfigError);
  }
}

TEST_CASE("prk verlet halves the bracketing steps and is symmetric in roles") {
  int64_t n = 3, d = 4;
  Td x0 = randn({n, d}, 180, 0.7);
  Td v0 = randn({n, d}, 181, 0.5);
  Td G = randn({n, d}, 182, 0.4);
  double mu = 0.25, mu_half = 0.45, beta = 0.3, gamma = 0.7, gamma_half = 0.5;

  // rest state, silent oracles: nothing moves
  {
    Tape<double> t;
    StateXV<double> s = step_prk_verlet(
        t.input(x0), t.input(Td::zeros({n, d})),
        coeffs(t, mu, mu_half, beta, 0, gamma, gamma_half),
        stubs(t, Td::zeros({n, d}), Td::zeros({n, d})), Ordering::AMA,
        identity_norm<double>());
    CHECK(s.x.value() == x0);
    CHECK(s.v.value() == Td::zeros({n, d}));
  }

  // constant attention direction, silent mlp: mirror all three substeps
  {
    Tape<double> t;
    std::vector<Td> aargs;
    StateXV<double> s = step_prk_verlet(
        t.input(x0), t.input(v0),
        coeffs(t, mu, mu_half, beta, 0, gamma, gamma_half),
        stubs(t, G, Td::zeros({n, d}), &aargs), Ordering::AMA,
        identity_norm<double>());
    REQUIRE(aargs.size() == 2);
    double hc = 0.5 * gamma;
    for (int64_t i = 0; i < n * d; ++i) {
      CHECK(aargs[0][i] == x0[i] + mu * v0[i]);
      double v1 = beta * v0[i] + hc * G[i];  // first update adds half gamma G
      double x1 = x0[i] + v1;
      double v2 = beta * v1 + gamma_half * 0.0;
      double x2 = x1 + v2;
      CHECK(aargs[1][i] == x2 + mu * v2);
      double v3 = beta * v2 + hc * G[i];
      CHECK(s.v.value()[i] == v3);
      CHECK(s.x.value()[i] == x2 + v3);
    }
  }

  // role swap
  {
    Tape<double> t;
    BlockCoeffs<double> c = coeffs(t, mu, mu_half, beta, 0, gamma, gamma_half);
    Td M = randn({n, d}, 183, 0.4);
    StateXV<double> mam = step_prk_verlet(t.input(x0), t.input(v0), c,
                                          stubs(t, G, M), Ordering::MAM,
                                          identity_norm<double>());
    StateXV<double> ama = step_prk_verlet(t.input(x0), t.input(v0), c,
                                          stubs(t, M, G), Ordering::AMA,
                                          identity_norm<double>());
    CHECK(mam.x.value() == ama.x.value());
    CHECK(mam.v.value() == ama.v.value());
  }
}

TEST_CASE("hamiltonian kicks subtract and the state ignores the mlp") {
  int64_t n = 3, d = 4;
  Td x0 = randn({n, d}, 190, 0.7);
  Td v0 = randn({n, d}, 191, 0.5);
  Td G = randn({n, d}, 192, 0.4);
  Td M = randn({n, d}, 193, 0.4);
  double mu = 0.3, beta = 0.6, gamma = 0.8, gamma_half = 0.5, delta = 0.9;

  {
    Tape<double> t;
    StateXV<double> s = step_hamiltonian(
        t.input(x0), t.input(Td::zeros({n, d})),
        coeffs(t, mu, 0, beta, 0, gamma, gamma_half, delta),
        stubs(t, Td::zeros({n, d}), Td::zeros({n, d})), identity_norm<double>());
    CHECK(s.x.value() == x0);
    CHECK(s.v.value() == Td::zeros({n, d}));
  }

  Td x_with_m, v_with_m;
  {
    Tape<double> t;
    std::vector<Td> aargs, margs;
    StateXV<double> s = step_hamiltonian(
        t.input(x0), t.input(v0),
        coeffs(t, mu, 0, beta, 0, gamma, gamma_half, delta),
        stubs(t, G, M, &aargs, &margs), identity_norm<double>());
    REQUIRE(aargs.size() == 1);
    REQUIRE(margs.size() == 1);
    for (int64_t i = 0; i < n * d; ++i) {
      CHECK(aargs[0][i] == x0[i] + mu * v0[i]);
      double vhalf = beta * v0[i] - gamma * G[i];  // kick subtracts
      double xhalf = x0[i] + delta * vhalf;
      CHECK(margs[0][i] == xhalf + mu * vhalf);  // same mu for both kicks
      double vn = beta * vhalf - gamma_half * M[i];
      CHECK(s.x.value()[i] == xhalf);  // mlp kick moves momentum only
      CHECK(s.v.value()[i] == vn);
    }
    x_with_m = s.x.value();
    v_with_m = s.v.value();
  }
  {
    Tape<double> t;
    Td M2 = randn({n, d}, 194, 0.8);
    StateXV<double> s = step_hamiltonian(
        t.input(x0), t.input(v0),
        coeffs(t, mu, 0, beta, 0, gamma, gamma_half, delta), stubs(t, G, M2),
        identity_norm<double>());
    CHECK(s.x.value() == x_with_m);        // state blind to the mlp direction
    CHECK_FALSE(s.v.value() == v_with_m);  // momentum is not
  }
}

TEST_CASE("every variant preserves shapes and causality") {
  std::vector<UpdateVariant> variants;
  for (const std::string& name : all_variant_names()) variants.push_back(make_variant(name));
  variants.push_back(make_variant("imex", std::string("ama"), 2,
                                  std::string("every_update")));
  variants.push_back(make_variant("imex", std::string("mam"), 1));
  variants.push_back(make_variant("prk_verlet", std::string("mam")));

  int64_t n = 6, d = 8;
  RealBlock block = make_block(d, 2, 200);
  Td x0 = randn({n, d}, 201, 0.6);
  Td v0 = randn({n, d}, 202, 0.4);

  for (const UpdateVariant& var : variants) {
    CAPTURE(variant_name(var));
    auto run = [&](const Td& xin, const Td& vin) {
      Tape<double> t;
      BoundBlock b = bind_block(t, block);
      StateXV<double> s =
          step_variant(var, t.input(xin), t.input(vin),
                       coeffs(t, 0.4, 0.3, 0.5, 0.6, 0.8, 0.7, 0.9), b.oracles,
                       b.lnv);
      return std::pair<Td, Td>(s.x.value(),
                               s.v.valid() ? s.v.value() : Td());
    };
    auto base = run(x0, v0);
    CHECK(base.first.shape() == x0.shape());
    if (uses_velocity(var)) CHECK(base.second.shape() == v0.shape());

    // perturb the suffix starting at row 3; the prefix must not move
    Rng rng(203);
    Td xp = x0, vp = v0;
    for (int64_t r = 3; r < n; ++r) {
      for (int64_t c = 0; c < d; ++c) {
        xp.at(r, c) += rng.normal();
        vp.at(r, c) += rng.normal();
      }
    }
    auto moved = run(xp, vp);
    for (int64_t r = 0; r < 3; ++r) {
      for (int64_t c = 0; c < d; ++c) {
        CHECK(moved.first.at(r, c) == base.first.at(r, c));
        if (uses_velocity(var)) {
          CHECK(moved.second.at(r, c) == base.second.at(r, c));
        }
      }
    }
  }
}

TEST_CASE("nesterov lt full block matches finite differences") {
  int64_t n = 3, d = 4;
  std::vector<Td> inputs = {
      randn({n, d}, 210, 0.6),       // x
      randn({n, d}, 211, 0.4),       // v
      randn({d, 3 * d}, 212, 0.3),   // w_qkv
      randn({d, d}, 213, 0.3),       // w_out
      randn({d, 4 * d}, 214, 0.3),   // w_in
      randn({4 * d, d}, 215, 0.3),   // mlp w_out
      Td::full({d}, 1.0),            // attn ln gain
      Td::full({d}, 1.0),            // mlp ln gain
      Td::full({d}, 1.0),            // velocity ln gain
      Td({1}, {0.2}),                // mu_raw
      Td({1}, {-0.1}),               // mu_half_raw
      Td({1}, {0.3}),                // beta_raw
      Td({1}, {-0.2}),               // beta_half_raw
      Td({1}, {0.4}),                // gamma_raw
      Td({1}, {0.1}),                // gamma_half_raw
  };

  auto build = [&](Tape<double>& t, const std::vector<Td>& in,
                   std::vector<Vd>* vars_out) {
    std::vector<Vd> vars;
    for (const Td& tensor : in) vars.push_back(t.input(tensor));
    AttnParams<double> ap;
    ap.ln_gain = vars[6];
    ap.w_qkv = vars[2];
    ap.w_out = vars[3];
    ap.heads = 1;
    MlpParams<double> mp;
    mp.ln_gain = vars[7];
    mp.w_in = vars[4];
    mp.w_out = vars[5];
    OraclePair<double> o;
    o.attn = [ap](Vd xx) { return attn_forward(xx, ap, true); };
    o.mlp = [mp](Vd xx) { return mlp_forward(xx, mp); };
    Vd lg = vars[8];
    VNorm<double> lnv = [lg](Vd vv) { return vv.tape->layernorm(vv, lg); };
    BlockCoeffs<double> c;
    c.mu = t.sigmoid(vars[9]);
    c.mu_half = t.sigmoid(vars[10]);
    c.beta = t.sigmoid(vars[11]);
    c.beta_half = t.sigmoid(vars[12]);
    c.gamma = t.softplus(vars[13]);
    c.gamma_half = t.softplus(vars[14]);
    StateXV<double> s = step_nesterov_lt(vars[0], vars[1], c, o, lnv);
    if (vars_out) *vars_out = vars;
    return t.sum(t.add(s.x, s.v));
  };

  Tape<double> tape;
  std::vector<Vd> vars;
  Vd loss = build(tape, inputs, &vars);
  tape.backward(loss);

  const double eps = 1e-5;
  double worst = 0;
  for (size_t k = 0; k < inputs.size(); ++k) {
    Td analytic = tape.grad(vars[k]);
    for (int64_t c = 0; c < inputs[k].numel(); ++c) {
      double keep = inputs[k][c];
      auto eval = [&](double val) {
        std::vector<Td> in = inputs;
        in[k][c] = val;
        Tape<double> t;
        return build(t, in, nullptr).value()[0];
      };
      double fd = (eval(keep + eps) - eval(keep - eps)) / (2.0 * eps);
      double rel = std::abs(fd - analytic[c]) / std::max(1.0, std::abs(fd));
      if (rel > worst) worst = rel;
      if (rel > 1e-5) {
        CAPTURE(k);
        CAPTURE(c);
        CHECK(rel <= 1e-5);
      }
    }
  }
  CHECK(worst <= 1e-5);
}
