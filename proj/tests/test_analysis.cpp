#include <doctest.h>

#include <cmath>

#include "adaponder/analysis.hpp"

using namespace adaponder;

namespace {

TokenHaltRecord rec(int halt, double nll) {
  TokenHaltRecord r;
  r.halt_iter = halt;
  r.nll = nll;
  return r;
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("halt_nll_stats: single group, arithmetic mean, counts") {
  // all tokens at K-1: one group with the global mean
  auto all_last = halt_nll_stats({rec(3, 1.0), rec(3, 2.0), rec(3, 3.0)}, 4);
  CHECK(all_last.groups[0].count == 0);
  CHECK(all_last.groups[3].count == 3);
  CHECK(all_last.groups[3].mean_nll == doctest::Approx(2.0));

  // two tokens NLL {1,3} halting at 0: group-0 mean 2
  auto g0 = halt_nll_stats({rec(0, 1.0), rec(0, 3.0)}, 4);
  CHECK(g0.groups[0].count == 2);
  CHECK(g0.groups[0].mean_nll == doctest::Approx(2.0));

  // counts sum to token total; clipped histogram sums to group count
  auto mixed = halt_nll_stats({rec(0, 0.5), rec(1, 2.0), rec(1, 99.0), rec(3, 4.0)}, 4);
  int64_t total = 0;
  for (const auto& g : mixed.groups) total += g.count;
  CHECK(total == 4);
  int64_t h1 = 0;
  for (auto c : mixed.groups[1].hist) h1 += c;
  CHECK(h1 == 2);  // the 99-nat outlier lands in the top (clipped) bin
  CHECK(mixed.groups[1].hist.back() == 1);
}

TEST_CASE("halt CSV: exact header, absent groups omitted") {
  auto stats = halt_nll_stats({rec(0, 1.0), rec(2, 2.0)}, 4);
  const std::string csv = halt_stats_csv(stats);
  CHECK(csv.substr(0, 24) == "halt_step,count,mean_nll");
  CHECK(csv.find("\n0,1,") != std::string::npos);
  CHECK(csv.find("\n2,1,") != std::string::npos);
  CHECK(csv.find("\n1,") == std::string::npos);  // absent, not zero
  CHECK(csv.find("\n3,") == std::string::npos);
}

TEST_CASE("fixed-policy multiplier closed forms and boundary policies") {
  // uniform p=1: no pruning, multiplier = K
  CHECK(expected_multiplier(PruningPolicy::Kind::uniform, 1.0, 4) == doctest::Approx(4.0));
  // geometric r=0: everything halts after the first pass
  CHECK(expected_multiplier(PruningPolicy::Kind::geometric, 0.0, 4) == doctest::Approx(1.0));
  // uniform closed form: 1 + p + p^2 + p^3
  const double p = 0.7;
  CHECK(expected_multiplier(PruningPolicy::Kind::uniform, p, 4) ==
        doctest::Approx(1 + p + p * p + p * p * p).epsilon(1e-12));
  // geometric closed form: survival r^{j(j+1)/2}
  const double r = 0.8;
  CHECK(expected_multiplier(PruningPolicy::Kind::geometric, r, 4) ==
        doctest::Approx(1 + r + std::pow(r, 3) + std::pow(r, 6)).epsilon(1e-12));
}

TEST_CASE("policy parameter solving hits the target (bisection oracle)") {
  // uniform at target 3.0, K=4: root of 1+p+p^2+p^3 = 3  ->  p ~ 0.81054
  const double p = solve_policy_param(PruningPolicy::Kind::uniform, 3.0, 4);
  CHECK(1 + p + p * p + p * p * p == doctest::Approx(3.0).epsilon(1e-6));
  CHECK(p == doctest::Approx(0.81054).epsilon(1e-3));
  // geometric at target 3.0, K=4: keep schedule [1, r, r^2, r^3]
  //   survival [1, r, r^3, r^6], root of 1+r+r^3+r^6 = 3  ->  r ~ 0.87597
  const double r = solve_policy_param(PruningPolicy::Kind::geometric, 3.0, 4);
  CHECK(1 + r + std::pow(r, 3) + std::pow(r, 6) == doctest::Approx(3.0).epsilon(1e-6));
  CHECK(r == doctest::Approx(0.87597).epsilon(1e-3));
  // adaptive uses the uniform root for its deterministic per-step fractions
  const double a = solve_policy_param(PruningPolicy::Kind::adaptive, 2.0, 4);
  CHECK(expected_multiplier(PruningPolicy::Kind::adaptive, a, 4) ==
        doctest::Approx(2.0).epsilon(1e-6));
  CHECK_THROWS_AS(solve_policy_param(PruningPolicy::Kind::uniform, 0.5, 4),
                  std::invalid_argument);
  CHECK_THROWS_AS(solve_policy_param(PruningPolicy::Kind::uniform, 4.5, 4),
                  std::invalid_argument);
}

TEST_CASE("sampled multiplier of random policies matches the closed form") {
  Config cfg;
  cfg.K = 4;
  cfg.validate();
  const int64_t M = 20000;
  for (auto kind : {PruningPolicy::Kind::uniform, PruningPolicy::Kind::geometric}) {
    PruningPolicy pol;
    pol.kind = kind;
    pol.param = 0.75;
    auto mp = make_mask_policy<float>(pol, cfg, 123);
    Tensor<float> m = Tensor<float>::full({M}, 1.0f);
    Tensor<float> s = Tensor<float>::full({M}, 0.5f);
    double mult = 1.0;  // everyone runs iteration 0
    for (int i = 0; i + 1 < cfg.K; ++i) {
      m = mp(i, s, m);
      double active = 0;
      for (int64_t t = 0; t < M; ++t) active += m.at(t);
      mult += active / static_cast<double>(M);
    }
    const double expect = expected_multiplier(kind, 0.75, cfg.K);
    CHECK(mult == doctest::Approx(expect).epsilon(0.02));  // sampling error only
  }
}

TEST_CASE("adaptive policy prunes exactly the lowest gate values") {
  Config cfg;
  cfg.K = 3;
  cfg.validate();
  PruningPolicy pol;
  pol.kind = PruningPolicy::Kind::adaptive;
  pol.param = 0.5;  // keep half per step
  auto mp = make_mask_policy<float>(pol, cfg, 1);
  Tensor<float> s({8}, {0.9f, 0.1f, 0.8f, 0.2f, 0.7f, 0.3f, 0.6f, 0.4f});
  Tensor<float> m = Tensor<float>::full({8}, 1.0f);
  Tensor<float> next = mp(0, s, m);
  // keep the top 4 by gate value: indices 0,2,4,6
  for (int64_t t : {0, 2, 4, 6}) CHECK(next.at(t) == 1.0f);
  for (int64_t t : {1, 3, 5, 7}) CHECK(next.at(t) == 0.0f);
}

TEST_CASE("explicit step fractions reproduce a measured survival pattern") {
  Config cfg;
  cfg.K = 4;
  cfg.validate();
  PruningPolicy pol;
  pol.kind = PruningPolicy::Kind::adaptive;
  pol.step_fractions = {0.75, 0.5, 0.25};
  auto mp = make_mask_policy<float>(pol, cfg, 1);
  const int64_t M = 16;
  Rng rng(3);
  Tensor<float> s({M});
  for (int64_t i = 0; i < M; ++i) s.at(i) = static_cast<float>(rng.uniform());
  Tensor<float> m = Tensor<float>::full({M}, 1.0f);
  for (int i = 0; i < 3; ++i) {
    m = mp(i, s, m);
    double active = 0;
    for (int64_t t = 0; t < M; ++t) active += m.at(t);
    CHECK(active == doctest::Approx(pol.step_fractions[static_cast<size_t>(i)] * M));
  }
}

TEST_CASE("iso-FLOP CSV: exact header and |policies| x |multipliers| rows") {
  std::vector<IsoFlopRow> rows = {{"adaptive", 3.0, 3.01, 1.5}, {"uniform", 3.0, 2.99, 1.7}};
  const std::string csv = iso_flop_csv(rows);
  const std::string header = "policy,target_multiplier,achieved_multiplier,eval_loss\n";
  CHECK(csv.substr(0, header.size()) == header);
  int64_t lines = 0;
  for (char c : csv) lines += c == '\n' ? 1 : 0;
  CHECK(lines == 3);  // header + 2 rows
}

}  // TEST_SUITE
