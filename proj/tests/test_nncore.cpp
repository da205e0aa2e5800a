#include "doctest.h"
#include "test_util.hpp"

#include "rpm_align/errors.hpp"
#include "rpm_align/gradcheck_suites.hpp"
#include "rpm_align/nn/gradcheck.hpp"
#include "rpm_align/nn/ops.hpp"
#include "rpm_align/nn/params.hpp"

using namespace rpm_align;
using namespace rpm_align::nn;

namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor({r, c}, std::move(v)); }

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double lo = -1, double hi = 1) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("tensor shapes") {
  Tensor t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rows() == 6);
  CHECK(t.cols() == 4);
  CHECK(Tensor::scalar(3.5).item() == 3.5);
  CHECK_THROWS(Tensor({2, 2}, std::vector<double>{1, 2, 3}));
  CHECK_THROWS(Tensor({2}).item());
}

TEST_CASE("dense") {
  Tape tape;
  Var x = tape.constant(mat(2, 2, {1, 2, 3, 4}));
  Var I = tape.constant(mat(2, 2, {1, 0, 0, 1}));
  Var z = tape.constant(Tensor::vector({0, 0}));
  CHECK(dense(x, I, z).value().matrix() == x.value().matrix());

  Var in = tape.constant(mat(1, 2, {1, 2}));
  Var W = tape.constant(mat(2, 2, {1, 0, 0, 2}));
  Var b = tape.constant(Tensor::vector({1, 1}));
  const Tensor out = dense(in, W, b).value();
  CHECK(out[0] == 2.0);
  CHECK(out[1] == 5.0);

  Var batched = tape.constant(Tensor({2, 3, 2}, 1.0));
  CHECK(dense(batched, W, b).value().shape() == std::vector<std::size_t>{2, 3, 2});
  CHECK_THROWS_AS(dense(tape.constant(Tensor({1, 3})), W, b), InvalidArgument);

  // Finite differences on a random 4x3 -> 2 layer.
  Rng rng(30);
  ParamBundle p;
  p.tensors["x"] = random_tensor(rng, {4, 3});
  p.tensors["w"] = random_tensor(rng, {3, 2});
  p.tensors["b"] = random_tensor(rng, {2});
  const Tensor coef = random_tensor(rng, {4, 2});
  auto graph = [&](Tape& t, const BoundParams& bp) {
    Var y = dense(bp.at("x"), bp.at("w"), bp.at("b"));
    Var c = t.constant(coef);
    return sum(t.record(Tensor(y.value().shape(), [&] {
                          std::vector<double> v(y.value().size());
                          for (std::size_t i = 0; i < v.size(); ++i) v[i] = y.value()[i] * coef[i];
                          return v;
                        }()),
                        {y, c},
                        [](Tape& tp, std::size_t self) {
                          const Tensor& g = tp.grad(self);
                          Tensor* gy = tp.grad_slot(tp.parent(self, 0));
                          const Tensor& cc = tp.value(tp.parent(self, 1));
                          if (gy)
                            for (std::size_t i = 0; i < g.size(); ++i) (*gy)[i] += g[i] * cc[i];
                        }));
  };
  CHECK(grad_check(graph, p).max_rel_error <= 1e-6);
}

TEST_CASE("activations") {
  Tape tape;
  const Tensor r = relu(tape.constant(Tensor::vector({-1, 0, 2}))).value();
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 2.0);
  const Tensor s = softplus(tape.constant(Tensor::vector({0, 50, -800, 800}))).value();
  CHECK(s[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(std::abs(s[1] - 50.0) < 1e-9);
  CHECK(s[2] > 0.0);
  CHECK(s[3] == 800.0);
  Rng rng(31);
  const Tensor many = softplus(tape.constant(random_tensor(rng, {1000}, -700, 700))).value();
  for (double v : many.values()) CHECK(v > 0.0);
}

TEST_CASE("group_norm") {
  Tape tape;
  Var gain = tape.constant(Tensor({4}, 1.0));
  Var shift = tape.constant(Tensor({4}, 0.0));
  const Tensor c = group_norm(tape.constant(Tensor({3, 4}, 5.0)), gain, shift, 2).value();
  for (double v : c.values()) CHECK(v == 0.0);

  // Population variance of (1, 3) is 1, of (10, 30) is 100.
  const Tensor h = group_norm(tape.constant(mat(1, 4, {1, 3, 10, 30})), gain, shift, 2).value();
  CHECK(h[0] == doctest::Approx(-1.0 / std::sqrt(1.0 + kGroupNormEps)).epsilon(1e-14));
  CHECK(h[1] == doctest::Approx(1.0 / std::sqrt(1.0 + kGroupNormEps)).epsilon(1e-14));
  CHECK(h[2] == doctest::Approx(-10.0 / std::sqrt(100.0 + kGroupNormEps)).epsilon(1e-14));
  CHECK(h[3] == doctest::Approx(10.0 / std::sqrt(100.0 + kGroupNormEps)).epsilon(1e-14));
  CHECK_THROWS_AS(group_norm(tape.constant(Tensor({2, 4})), gain, shift, 3), InvalidArgument);

  // Rescaling invariance is exact only without the eps floor.
  Rng rng(32);
  for (int t = 0; t < 20; ++t) {
    const Tensor in = random_tensor(rng, {5, 8});
    const double k = rng.uniform(0.5, 20.0);
    Tensor scaled = in;
    for (auto& v : scaled.values()) v *= k;
    Var g8 = tape.constant(Tensor({8}, 1.0)), s8 = tape.constant(Tensor({8}, 0.0));
    const Tensor a0 = group_norm(tape.constant(in), g8, s8, 4, 0.0).value();
    const Tensor b0 = group_norm(tape.constant(scaled), g8, s8, 4, 0.0).value();
    for (std::size_t i = 0; i < a0.size(); ++i) CHECK(std::abs(a0[i] - b0[i]) <= 1e-9);
  }
}

TEST_CASE("pooling, normalisation, distances") {
  Tape tape;
  const Tensor one = max_pool(tape.constant(mat(1, 2, {4, -1}))).value();
  CHECK(one[0] == 4.0);
  CHECK(one[1] == -1.0);
  const Tensor mp = max_pool(tape.constant(mat(2, 2, {1, 5, 3, 2}))).value();
  CHECK(mp[0] == 3.0);
  CHECK(mp[1] == 5.0);

  // Ties route the gradient to the first row.
  Var tie = tape.parameter(mat(2, 1, {7, 7}));
  tape.backward(sum(max_pool(tie)));
  CHECK(tie.grad()[0] == 1.0);
  CHECK(tie.grad()[1] == 0.0);

  const Tensor seg = segment_max_pool(tape.constant(mat(3, 1, {1, 4, 2})), {0, 1, 3}).value();
  CHECK(seg[0] == 1.0);
  CHECK(seg[1] == 4.0);

  const Tensor l2 = l2_normalize(tape.constant(mat(2, 2, {3, 4, 0, 0}))).value();
  CHECK(l2[0] == doctest::Approx(0.6));
  CHECK(l2[1] == doctest::Approx(0.8));
  CHECK(l2[2] == 0.0);
  CHECK(l2[3] == 0.0);

  const Tensor d = pairwise_sq_dist(tape.constant(mat(1, 2, {0, 0})), tape.constant(mat(2, 2, {3, 4, 1, 0}))).value();
  CHECK(d[0] == 25.0);
  CHECK(d[1] == 1.0);
  const Tensor sc = slice_cols(tape.constant(mat(2, 3, {1, 2, 3, 4, 5, 6})), 1, 3).value();
  CHECK(sc.matrix() == (RowMatrix(2, 2) << 2, 3, 5, 6).finished());
}

TEST_CASE("tape accumulates fan-out gradients") {
  Tape tape;
  Var x = tape.parameter(Tensor::vector({2.0}));
  Var y = add(x, scale(x, 3.0));
  tape.backward(sum(y));
  CHECK(x.grad()[0] == 4.0);

  Tape inference;
  inference.set_grad_enabled(false);
  Var p = inference.parameter(Tensor::vector({1.0}));
  CHECK_FALSE(p.requires_grad());
}

TEST_CASE("grad_check") {
  ParamBundle p;
  p.tensors["x"] = Tensor::vector({3.0});
  auto sq = [](Tape& t, const BoundParams& b) {
    Var x = b.at("x");
    return t.record(Tensor::scalar(x.value()[0] * x.value()[0]), {x}, [](Tape& tp, std::size_t self) {
      Tensor* g = tp.grad_slot(tp.parent(self, 0));
      if (g) (*g)[0] += 2.0 * tp.value(tp.parent(self, 0))[0] * tp.grad(self)[0];
    });
  };
  const GradCheckReport r = grad_check(sq, p);
  CHECK(std::abs(r.worst.analytic - 6.0) < 1e-9);
  CHECK(std::abs(r.worst.numeric - 6.0) < 1e-9);
  CHECK(r.checked == 1);

  auto bad = [](Tape& t, const BoundParams& b) {
    return t.record(Tensor::scalar(std::log(-b.at("x").value()[0])), {b.at("x")}, [](Tape&, std::size_t) {});
  };
  CHECK_THROWS_AS(grad_check(bad, p), Error);
}

TEST_CASE("layer gradient suites") {
  for (const auto& s : gradcheck_layers(5)) {
    INFO(s.name << " worst " << s.worst << " err " << s.max_rel_error);
    CHECK(s.cases == 5);
    CHECK(s.max_rel_error <= 1e-5);
  }
}

TEST_CASE("adam") {
  ParamBundle p;
  p.tensors["w"] = Tensor::vector({0.0});
  AdamState st = AdamState::zeros_like(p);
  AdamConfig cfg;
  cfg.lr = 0.1;
  ParamBundle g = p.zeros_like();
  g.at("w")[0] = 1.0;
  adam_step(p, g, st, cfg);
  CHECK(st.step == 1);
  CHECK(p.at("w")[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-12));

  ParamBundle q;
  q.tensors["w"] = Tensor::vector({1.5, -2.0});
  AdamState sq = AdamState::zeros_like(q);
  adam_step(q, q.zeros_like(), sq, cfg);
  CHECK(q.at("w")[0] == 1.5);
  CHECK(q.at("w")[1] == -2.0);
  CHECK(sq.step == 1);

  auto run = [] {
    Rng rng(33);
    ParamBundle r;
    r.tensors["a"] = random_tensor(rng, {3, 2});
    AdamState s = AdamState::zeros_like(r);
    for (int i = 0; i < 100; ++i) {
      ParamBundle gr = r.zeros_like();
      for (auto& v : gr.at("a").values()) v = rng.normal();
      adam_step(r, gr, s, {});
    }
    return r;
  };
  const ParamBundle a = run(), b = run();
  for (std::size_t i = 0; i < 6; ++i) CHECK(a.at("a")[i] == b.at("a")[i]);
}

TEST_CASE("parameter JSON round trip is exact") {
  Rng rng(34);
  ParamBundle p;
  p.tensors["feat/pre0/weight"] = random_tensor(rng, {10, 4});
  p.tensors["x"] = Tensor::vector({0.1, 1.0 / 3.0, -1e-300});
  const auto back = params_from_json(params_to_json(p.tensors));
  for (const auto& [name, t] : p.tensors) {
    REQUIRE(back.count(name));
    CHECK(back.at(name).shape() == t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(back.at(name)[i] == t[i]);
  }
  AdamState st = AdamState::zeros_like(p);
  st.step = 7;
  st.first_moment.at("x")[1] = 0.25;
  const AdamState st2 = adam_from_json(nlohmann::json::parse(adam_to_json(st).dump()));
  CHECK(st2.step == 7);
  CHECK(st2.first_moment.at("x")[1] == 0.25);
}
