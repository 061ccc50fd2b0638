#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "adaponder/gradcheck.hpp"
#include "adaponder/kernels.hpp"
#include "adaponder/tape.hpp"

using namespace adaponder;

namespace {

Tensor<double> randt(Rng& rng, std::vector<int64_t> shape, double s = 1.0) {
  Tensor<double> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.gaussian() * s;
  return t;
}

// FD-checks one tape primitive: builder maps input leaf ids to an output id;
// the scalar objective is sum(out * W) for a fixed random W.
void check_primitive(const char* name, std::vector<Tensor<double>> inputs,
                     const std::function<Tape<double>::Id(Tape<double>&, const std::vector<Tape<double>::Id>&)>& builder,
                     double tol = 1e-7) {
  CAPTURE(name);
  Rng wrng(99);
  Tensor<double> W;
  auto run = [&](const std::vector<Tensor<double>>& ins, bool want_grads,
                 std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    tape.recording = want_grads;
    std::vector<Tape<double>::Id> ids;
    for (const auto& t : ins) ids.push_back(tape.leaf(t));
    Tape<double>::Id out = builder(tape, ids);
    if (W.numel() == 0) W = randt(wrng, tape.val(out).shape);
    Tape<double>::Id loss = tape.sum_all(tape.mul(out, tape.leaf(W)));
    const double val = tape.val(loss).at(0);
    if (want_grads) {
      tape.backward(loss);
      grads->clear();
      for (auto id : ids) grads->push_back(tape.grad(id));
    }
    return val;
  };

  std::vector<Tensor<double>> grads;
  run(inputs, true, &grads);

  const double eps = 1e-6;
  double max_rel = 0;
  for (size_t pi = 0; pi < inputs.size(); ++pi) {
    for (int64_t i = 0; i < inputs[pi].numel(); ++i) {
      const double orig = inputs[pi].at(i);
      inputs[pi].at(i) = orig + eps;
      const double lp = run(inputs, false, nullptr);
      inputs[pi].at(i) = orig - eps;
      const double lm = run(inputs, false, nullptr);
      inputs[pi].at(i) = orig;
      const double fd = (lp - lm) / (2 * eps);
      const double an = grads[pi].at(i);
      const double rel = std::fabs(fd - an) / std::max({1.0, std::fabs(fd), std::fabs(an)});
      max_rel = std::max(max_rel, rel);
    }
  }
  CHECK_MESSAGE(max_rel < tol, name << ": max rel err " << max_rel);
}

}  // namespace

TEST_SUITE("numerics") {

TEST_CASE("matmul: identity, hand oracle, annihilator") {
  Tape<double> tape;
  auto I = tape.leaf(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  auto B = tape.leaf(Tensor<double>({2, 2}, {3.5, -1, 2, 7}));
  auto IB = tape.matmul(I, B);
  for (int64_t i = 0; i < 4; ++i) CHECK(tape.val(IB).at(i) == tape.val(B).at(i));

  auto A = tape.leaf(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  auto ones = tape.leaf(Tensor<double>({2, 1}, {1, 1}));
  auto Av = tape.matmul(A, ones);
  CHECK(tape.val(Av).at(0) == 3.0);  // hand multiplication: [[1,2],[3,4]] x [[1],[1]]
  CHECK(tape.val(Av).at(1) == 7.0);

  auto Z = tape.leaf(Tensor<double>::zeros({2, 3}));
  auto AZ = tape.matmul(A, Z);
  for (int64_t i = 0; i < 6; ++i) CHECK(tape.val(AZ).at(i) == 0.0);

  CHECK_THROWS_AS((void)tape.matmul(A, tape.leaf(Tensor<double>::zeros({3, 2}))),
                  std::invalid_argument);
}

TEST_CASE("softmax: symmetry, stabilization, closed form") {
  Tape<double> tape;
  auto flat = tape.softmax(tape.leaf(Tensor<double>({1, 3}, {0, 0, 0})));
  for (int64_t i = 0; i < 3; ++i) CHECK(tape.val(flat).at(i) == doctest::Approx(1.0 / 3));

  auto big = tape.softmax(tape.leaf(Tensor<double>({1, 2}, {1000, 0})));
  CHECK(tape.val(big).at(0) == doctest::Approx(1.0));
  CHECK(tape.val(big).at(1) == doctest::Approx(0.0));

  // closed form: softmax([ln1, ln2, ln3]) = [1/6, 2/6, 3/6]
  auto lns = tape.softmax(
      tape.leaf(Tensor<double>({1, 3}, {std::log(1.0), std::log(2.0), std::log(3.0)})));
  CHECK(tape.val(lns).at(0) == doctest::Approx(1.0 / 6).epsilon(1e-12));
  CHECK(tape.val(lns).at(1) == doctest::Approx(2.0 / 6).epsilon(1e-12));
  CHECK(tape.val(lns).at(2) == doctest::Approx(3.0 / 6).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to 1 for random inputs") {
  Rng rng(11);
  for (int rep = 0; rep < 50; ++rep) {
    const int64_t rows = 1 + static_cast<int64_t>(rng.below(6));
    const int64_t cols = 2 + static_cast<int64_t>(rng.below(40));
    Tape<double> tape;
    auto y = tape.softmax(tape.leaf(randt(rng, {rows, cols}, 5.0)));
    for (int64_t r = 0; r < rows; ++r) {
      double sum = 0;
      for (int64_t c = 0; c < cols; ++c) {
        const double p = tape.val(y).at(r, c);
        CHECK(p > 0.0);
        CHECK(p < 1.0 + 1e-12);
        sum += p;
      }
      CHECK(std::fabs(sum - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("sigmoid: center, scalar oracle, symmetry identity") {
  Tape<double> tape;
  auto y = tape.sigmoid(tape.leaf(Tensor<double>({3}, {0.0, 4.0, -4.0})));
  CHECK(tape.val(y).at(0) == 0.5);
  CHECK(tape.val(y).at(1) == doctest::Approx(1.0 / (1.0 + std::exp(-4.0))).epsilon(1e-15));
  CHECK(tape.val(y).at(1) == doctest::Approx(0.9820137900379085).epsilon(1e-12));
  // sigmoid(x) + sigmoid(-x) = 1
  Rng rng(7);
  for (int i = 0; i < 20; ++i) {
    const double x = rng.gaussian() * 3;
    Tape<double> t2;
    auto s = t2.sigmoid(t2.leaf(Tensor<double>({2}, {x, -x})));
    CHECK(t2.val(s).at(0) + t2.val(s).at(1) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("where: trivial masks, elementwise oracle, idempotence") {
  Tape<double> tape;
  auto a = tape.leaf(Tensor<double>({2}, {5, 5}));
  auto b = tape.leaf(Tensor<double>({2}, {7, 7}));
  Tensor<double> m10({2}, {1, 0});
  auto sel = tape.where(m10, a, b);
  CHECK(tape.val(sel).at(0) == 5.0);
  CHECK(tape.val(sel).at(1) == 7.0);

  Rng rng(13);
  auto x = randt(rng, {4, 3});
  auto yv = randt(rng, {4, 3});
  Tensor<double> ones = Tensor<double>::full({4, 3}, 1.0);
  Tensor<double> zeros = Tensor<double>::zeros({4, 3});
  Tape<double> t2;
  auto xa = t2.leaf(x), yb = t2.leaf(yv);
  auto w1 = t2.where(ones, xa, yb);
  auto w0 = t2.where(zeros, xa, yb);
  for (int64_t i = 0; i < 12; ++i) {
    CHECK(t2.val(w1).at(i) == x.at(i));  // exactly a
    CHECK(t2.val(w0).at(i) == yv.at(i));
  }
  // idempotence: applying twice with the same mask equals once
  Tensor<double> m({4, 3});
  for (int64_t i = 0; i < 12; ++i) m.at(i) = rng.below(2) ? 1.0 : 0.0;
  auto once = t2.where(m, xa, yb);
  auto twice = t2.where(m, once, yb);
  for (int64_t i = 0; i < 12; ++i) CHECK(t2.val(twice).at(i) == t2.val(once).at(i));
}

TEST_CASE("masked_scaled_add freezes masked rows bitwise") {
  Rng rng(17);
  Tape<double> tape;
  auto E = tape.leaf(randt(rng, {4, 5}));
  auto U = tape.leaf(randt(rng, {4, 5}));
  auto s = tape.leaf(randt(rng, {4}, 0.3));
  Tensor<double> mask({4}, {1, 0, 1, 0});
  auto out = tape.masked_scaled_add(E, U, s, mask);
  for (int64_t r = 0; r < 4; ++r) {
    for (int64_t c = 0; c < 5; ++c) {
      if (mask.at(r) == 0.0) {
        CHECK(tape.val(out).at(r, c) == tape.val(E).at(r, c));  // bitwise copy
      } else {
        CHECK(tape.val(out).at(r, c) ==
              doctest::Approx(tape.val(E).at(r, c) + tape.val(s).at(r) * tape.val(U).at(r, c)));
      }
    }
  }
}

TEST_CASE("every primitive matches central finite differences (float64)") {
  Rng rng(23);
  using Ids = std::vector<Tape<double>::Id>;

  check_primitive("matmul", {randt(rng, {3, 4}), randt(rng, {4, 5})},
                  [](Tape<double>& t, const Ids& in) { return t.matmul(in[0], in[1]); });
  check_primitive("linear", {randt(rng, {3, 4}), randt(rng, {5, 4}), randt(rng, {5})},
                  [](Tape<double>& t, const Ids& in) { return t.linear(in[0], in[1], in[2]); });
  check_primitive("add", {randt(rng, {2, 3}), randt(rng, {2, 3})},
                  [](Tape<double>& t, const Ids& in) { return t.add(in[0], in[1]); });
  check_primitive("mul", {randt(rng, {2, 3}), randt(rng, {2, 3})},
                  [](Tape<double>& t, const Ids& in) { return t.mul(in[0], in[1]); });
  check_primitive("scale", {randt(rng, {2, 3})},
                  [](Tape<double>& t, const Ids& in) { return t.scale(in[0], 1.7); });
  check_primitive("sigmoid", {randt(rng, {2, 3})},
                  [](Tape<double>& t, const Ids& in) { return t.sigmoid(in[0]); });
  check_primitive("gelu", {randt(rng, {2, 3})},
                  [](Tape<double>& t, const Ids& in) { return t.gelu(in[0]); });
  check_primitive("softmax", {randt(rng, {3, 5})},
                  [](Tape<double>& t, const Ids& in) { return t.softmax(in[0]); });
  check_primitive("layernorm", {randt(rng, {3, 6}), randt(rng, {6}), randt(rng, {6})},
                  [](Tape<double>& t, const Ids& in) { return t.layernorm(in[0], in[1], in[2]); },
                  1e-6);
  check_primitive("rotary", {randt(rng, {2 * 5, 2 * 6})},
                  [](Tape<double>& t, const Ids& in) { return t.rotary(in[0], 2, 5, 2); });
  check_primitive("attention",
                  {randt(rng, {2 * 4, 6}), randt(rng, {2 * 4, 6}), randt(rng, {2 * 4, 6})},
                  [](Tape<double>& t, const Ids& in) {
                    return t.attention(in[0], in[1], in[2], 2, 4, 3);
                  },
                  1e-6);
  Tensor<double> mask({3, 4});
  Rng mrng(5);
  for (int64_t i = 0; i < 12; ++i) mask.at(i) = mrng.below(2) ? 1.0 : 0.0;
  check_primitive("where", {randt(rng, {3, 4}), randt(rng, {3, 4})},
                  [mask](Tape<double>& t, const Ids& in) { return t.where(mask, in[0], in[1]); });
  Tensor<double> rowmask({3}, {1, 0, 1});
  check_primitive("where_rows", {randt(rng, {3, 4}), randt(rng, {3, 4})},
                  [rowmask](Tape<double>& t, const Ids& in) {
                    return t.where(rowmask, in[0], in[1]);
                  });
  check_primitive("embedding", {randt(rng, {6, 4})},
                  [](Tape<double>& t, const Ids& in) {
                    return t.embedding(in[0], {0, 3, 3, 5, 1});
                  });
  check_primitive("masked_scaled_add",
                  {randt(rng, {3, 4}), randt(rng, {3, 4}), randt(rng, {3}, 0.4)},
                  [rowmask](Tape<double>& t, const Ids& in) {
                    return t.masked_scaled_add(in[0], in[1], in[2], rowmask);
                  });
  check_primitive("reshape", {randt(rng, {3, 4})},
                  [](Tape<double>& t, const Ids& in) { return t.reshape(in[0], {12}); });
  check_primitive("concat1d", {randt(rng, {3}), randt(rng, {4})},
                  [](Tape<double>& t, const Ids& in) { return t.concat1d({in[0], in[1]}); });
  check_primitive("gather1d", {randt(rng, {7})},
                  [](Tape<double>& t, const Ids& in) {
                    return t.gather1d(in[0], {6, 0, 0, 2});
                  });
  check_primitive("sum_all", {randt(rng, {3, 4})},
                  [](Tape<double>& t, const Ids& in) { return t.sum_all(in[0]); });
  check_primitive("mean_all", {randt(rng, {3, 4})},
                  [](Tape<double>& t, const Ids& in) { return t.mean_all(in[0]); });
  check_primitive("cross_entropy", {randt(rng, {4, 6})},
                  [](Tape<double>& t, const Ids& in) {
                    return t.cross_entropy(in[0], {1, 5, 0, 2}, {0.25, 0.25, 0.0, 0.5});
                  });
}

TEST_CASE("grad_check: quadratic, small net, constant") {
  // f(x) = x^2 at x=3: analytic 6
  ParameterStore<double> ps;
  ps.add("x", Tensor<double>({1}, {3.0}), false, false);
  auto loss_fn = [](const ParameterStore<double>& p) {
    const double x = p.get("x").value.at(0);
    return x * x;
  };
  auto grad_fn = [](ParameterStore<double>& p) {
    Tape<double> t;
    auto x = t.leaf(p.get("x").value);
    auto l = t.sum_all(t.mul(x, x));
    t.backward(l);
    p.get("x").grad = t.grad(x);
  };
  GradCheckReport rep = grad_check<double>(ps, loss_fn, grad_fn, 1e-5);
  CHECK(ps.get("x").grad.at(0) == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(rep.max_rel_err < 1e-8);

  // CE loss of a 2-layer net, d=4, float64: max rel err < 1e-6
  Rng rng(31);
  ParameterStore<double> net;
  net.add("W1", randt(rng, {4, 4}, 0.5), true, false);
  net.add("b1", randt(rng, {4}, 0.1), false, false);
  net.add("W2", randt(rng, {5, 4}, 0.5), true, false);
  net.add("b2", randt(rng, {5}, 0.1), false, false);
  const Tensor<double> X = randt(rng, {3, 4});
  const std::vector<int32_t> targets = {2, 0, 4};
  const std::vector<double> w = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  auto net_builder = [&](Tape<double>& t, const ParameterStore<double>& p, bool bw,
                         ParameterStore<double>* out) {
    auto W1 = t.leaf(p.get("W1").value);
    auto b1 = t.leaf(p.get("b1").value);
    auto W2 = t.leaf(p.get("W2").value);
    auto b2 = t.leaf(p.get("b2").value);
    auto h = t.gelu(t.linear(t.leaf(X), W1, b1));
    auto z = t.linear(h, W2, b2);
    auto l = t.cross_entropy(z, targets, w);
    if (bw) {
      t.backward(l);
      out->get("W1").grad = t.grad(W1);
      out->get("b1").grad = t.grad(b1);
      out->get("W2").grad = t.grad(W2);
      out->get("b2").grad = t.grad(b2);
    }
    return t.val(l).at(0);
  };
  auto net_loss = [&](const ParameterStore<double>& p) {
    Tape<double> t;
    t.recording = false;
    return net_builder(t, p, false, nullptr);
  };
  auto net_grads = [&](ParameterStore<double>& p) {
    Tape<double> t;
    net_builder(t, p, true, &p);
  };
  GradCheckReport net_rep = grad_check<double>(net, net_loss, net_grads, 1e-5);
  CHECK_MESSAGE(net_rep.max_rel_err < 1e-6, "worst " << net_rep.worst_param);

  // constant objective: gradient exactly 0
  ParameterStore<double> cp;
  cp.add("x", Tensor<double>({3}, {1, 2, 3}), false, false);
  auto const_loss = [](const ParameterStore<double>&) { return 4.25; };
  auto const_grads = [](ParameterStore<double>& p) { p.zero_grads(); };
  GradCheckReport crep = grad_check<double>(cp, const_loss, const_grads, 1e-4);
  CHECK(crep.max_rel_err == 0.0);
  for (int64_t i = 0; i < 3; ++i) CHECK(cp.get("x").grad.at(i) == 0.0);
}

TEST_CASE("non-finite values are surfaced, not propagated") {
  Tape<double> tape;
  CHECK_THROWS_AS((void)tape.leaf(Tensor<double>({1}, {std::nan("")})), std::runtime_error);
  auto big = tape.leaf(Tensor<double>({1, 1}, {1e308}));
  CHECK_THROWS_AS((void)tape.mul(big, big), std::runtime_error);
}

TEST_CASE("deterministic: identical inputs give bit-identical outputs single-threaded") {
  kernels::set_threads(1);
  Rng rng(41);
  auto run = [&](uint64_t seed) {
    Rng r(seed);
    Tape<float> tape;
    Tensor<float> x({16, 24});
    for (int64_t i = 0; i < x.numel(); ++i) x.at(i) = static_cast<float>(r.gaussian());
    Tensor<float> w({24, 24});
    for (int64_t i = 0; i < w.numel(); ++i) w.at(i) = static_cast<float>(r.gaussian() * 0.1);
    auto out = tape.softmax(tape.matmul(tape.leaf(x), tape.leaf(w)));
    return tape.val(out).data;
  };
  auto a = run(5);
  auto b = run(5);
  CHECK(a == b);
  kernels::set_threads(2);
}

TEST_CASE("tape replays closures in strict reverse creation order") {
  // d/dx of ((x*x)*x) = 3x^2 needs the reverse order to chain correctly
  Tape<double> t;
  auto x = t.leaf(Tensor<double>({1}, {2.0}));
  auto x2 = t.mul(x, x);
  auto x3 = t.mul(x2, x);
  t.backward(x3);
  CHECK(t.grad(x).at(0) == doctest::Approx(12.0).epsilon(1e-14));
  // gradient of a value with respect to itself is the identity seed
  Tape<double> t2;
  auto y = t2.leaf(Tensor<double>({1}, {7.0}));
  t2.backward(y);
  CHECK(t2.grad(y).at(0) == 1.0);
}

}  // TEST_SUITE
