#include "wf/gradcheck.hpp"

#include "wf/models.hpp"
#include "wf/ops.hpp"
#include "wf/wf_layer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace wf {
namespace {

uint64_t mix(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor randn(std::mt19937_64& rng, const Shape& shape, double sd = 1.0) {
  Tensor t(shape);
  std::normal_distribution<double> d(0.0, sd);
  for (Index i = 0; i < t.numel(); ++i) t[i] = d(rng);
  return t;
}

// Pushes every entry at least `margin` away from zero so FD never straddles
// a relu/argmax kink.
Tensor randn_offset(std::mt19937_64& rng, const Shape& shape, double margin) {
  Tensor t = randn(rng, shape);
  for (Index i = 0; i < t.numel(); ++i) t[i] += t[i] >= 0.0 ? margin : -margin;
  return t;
}

// Random linear functional of x: gives non-degenerate output gradients.
Var project(Tape& t, Var x, const Tensor& w) { return sum_all(mul(x, t.constant(w))); }

struct Row {
  std::string name;
  std::function<double(uint64_t)> run;  // seed -> max rel err
};

}  // namespace

double grad_check(const LossBuilder& build, const std::vector<Parameter*>& params, double eps,
                  int max_coords_per_param, uint64_t seed) {
  if (!(eps >= 1e-7 && eps <= 1e-3))
    throw std::invalid_argument("grad_check: eps " + std::to_string(eps) +
                                " outside [1e-7, 1e-3]");
  if (params.empty()) throw std::invalid_argument("grad_check: no parameters given");
  for (Parameter* p : params) p->zero_grad();
  {
    Tape t;
    t.backward(build(t));
  }
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (Parameter* p : params) {
    const Index n = p->value.numel();
    std::vector<Index> coords(static_cast<size_t>(n));
    std::iota(coords.begin(), coords.end(), Index{0});
    if (max_coords_per_param > 0 && n > max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<size_t>(max_coords_per_param));
    }
    for (Index c : coords) {
      const double saved = p->value[c];
      double lp = 0.0, lm = 0.0;
      p->value[c] = saved + eps;
      {
        Tape t;
        lp = build(t).scalar();
      }
      p->value[c] = saved - eps;
      {
        Tape t;
        lm = build(t).scalar();
      }
      p->value[c] = saved;
      const double numeric = (lp - lm) / (2.0 * eps);
      const double analytic = p->grad[c];
      const double rel = std::abs(analytic - numeric) /
                         std::max({1e-6, std::abs(analytic), std::abs(numeric)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

std::vector<GradCheckRow> gradcheck_table(uint64_t seed, double tolerance) {
  std::vector<Row> rows;

  auto elementwise = [](std::string name, Var (*op)(Var), double margin) {
    return Row{std::move(name), [op, margin](uint64_t s) {
                 double worst = 0.0;
                 const std::vector<Shape> shapes = {{4}, {2, 3}, {2, 2, 3}};
                 for (size_t i = 0; i < shapes.size(); ++i) {
                   std::mt19937_64 rng(mix(s, i));
                   Parameter x("x", margin > 0.0 ? randn_offset(rng, shapes[i], margin)
                                                 : randn(rng, shapes[i]));
                   Tensor w = randn(rng, shapes[i]);
                   double e = grad_check(
                       [&](Tape& t) { return project(t, op(t.leaf(x)), w); }, {&x}, 1e-5, 25,
                       mix(s, 100 + i));
                   worst = std::max(worst, e);
                 }
                 return worst;
               }};
  };
  auto binary = [](std::string name, Var (*op)(Var, Var)) {
    return Row{std::move(name), [op](uint64_t s) {
                 double worst = 0.0;
                 const std::vector<Shape> shapes = {{4}, {2, 3}, {2, 2, 3}};
                 for (size_t i = 0; i < shapes.size(); ++i) {
                   std::mt19937_64 rng(mix(s, i));
                   Parameter a("a", randn(rng, shapes[i])), b("b", randn(rng, shapes[i]));
                   Tensor w = randn(rng, shapes[i]);
                   double e = grad_check(
                       [&](Tape& t) { return project(t, op(t.leaf(a), t.leaf(b)), w); }, {&a, &b},
                       1e-5, 25, mix(s, 100 + i));
                   worst = std::max(worst, e);
                 }
                 return worst;
               }};
  };

  rows.push_back(binary("add", add));
  rows.push_back(binary("sub", sub));
  rows.push_back(binary("mul", mul));
  rows.push_back(elementwise("sigmoid", sigmoid, 0.0));
  rows.push_back(elementwise("relu", relu, 0.3));
  rows.push_back(elementwise("gelu", gelu, 0.0));

  rows.push_back({"affine", [](uint64_t s) {
                    double worst = 0.0;
                    const std::vector<Shape> shapes = {{4}, {2, 3}, {2, 2, 3}};
                    for (size_t i = 0; i < shapes.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, shapes[i]));
                      Tensor w = randn(rng, shapes[i]);
                      double e = grad_check(
                          [&](Tape& t) { return project(t, affine(t.leaf(x), 1.7, -0.3), w); },
                          {&x}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"reciprocal", [](uint64_t s) {
                    double worst = 0.0;
                    const std::vector<Shape> shapes = {{4}, {2, 3}, {2, 2, 3}};
                    for (size_t i = 0; i < shapes.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn_offset(rng, shapes[i], 1.2));
                      Tensor w = randn(rng, shapes[i]);
                      double e = grad_check(
                          [&](Tape& t) { return project(t, reciprocal(t.leaf(x)), w); }, {&x},
                          1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"sum_all", [](uint64_t s) {
                    double worst = 0.0;
                    const std::vector<Shape> shapes = {{4}, {2, 3}, {2, 2, 3}};
                    for (size_t i = 0; i < shapes.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, shapes[i]));
                      Tensor w = randn(rng, shapes[i]);
                      double e = grad_check(
                          [&](Tape& t) { return sum_all(mul(t.leaf(x), t.constant(w))); }, {&x},
                          1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"mean_all", [](uint64_t s) {
                    double worst = 0.0;
                    const std::vector<Shape> shapes = {{4}, {2, 3}, {2, 2, 3}};
                    for (size_t i = 0; i < shapes.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, shapes[i]));
                      Tensor w = randn(rng, shapes[i]);
                      double e = grad_check(
                          [&](Tape& t) { return mean_all(mul(t.leaf(x), t.constant(w))); }, {&x},
                          1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"reshape", [](uint64_t s) {
                    struct C {
                      Shape in, out;
                    };
                    const std::vector<C> cases = {{{2, 6}, {3, 4}}, {{8}, {2, 4}}, {{2, 2, 3}, {12}}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, cases[i].in));
                      Tensor w = randn(rng, cases[i].out);
                      Shape out = cases[i].out;
                      double e = grad_check(
                          [&](Tape& t) { return project(t, reshape(t.leaf(x), out), w); }, {&x},
                          1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"select_row", [](uint64_t s) {
                    struct C {
                      Shape in;
                      Index row;
                    };
                    const std::vector<C> cases = {{{3, 5}, 1}, {{4, 2}, 3}, {{2, 7}, 0}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, cases[i].in));
                      Tensor w = randn(rng, {cases[i].in[1]});
                      Index row = cases[i].row;
                      double e = grad_check(
                          [&](Tape& t) { return project(t, select_row(t.leaf(x), row), w); }, {&x},
                          1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"slice_cols", [](uint64_t s) {
                    struct C {
                      Shape in;
                      Index start, count;
                    };
                    const std::vector<C> cases = {{{3, 6}, 1, 3}, {{2, 4}, 0, 4}, {{4, 5}, 2, 2}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, cases[i].in));
                      Tensor w = randn(rng, {cases[i].in[0], cases[i].count});
                      Index st = cases[i].start, ct = cases[i].count;
                      double e = grad_check(
                          [&](Tape& t) { return project(t, slice_cols(t.leaf(x), st, ct), w); },
                          {&x}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"gather", [](uint64_t s) {
                    struct C {
                      Shape in, out;
                      std::vector<Index> map;
                    };
                    // second case repeats a source index to exercise grad accumulation
                    const std::vector<C> cases = {{{6}, {4}, {0, 5, 2, 1}},
                                                  {{5}, {4}, {4, 0, 4, 2}},
                                                  {{2, 3}, {3, 2}, {5, 4, 3, 2, 1, 0}}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, cases[i].in));
                      Tensor w = randn(rng, cases[i].out);
                      Shape out = cases[i].out;
                      auto map = std::make_shared<const std::vector<Index>>(cases[i].map);
                      double e = grad_check(
                          [&](Tape& t) { return project(t, gather(t.leaf(x), out, map), w); },
                          {&x}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"scale_axis0", [](uint64_t s) {
                    const std::vector<Shape> shapes = {{4, 3}, {3, 2, 2}, {5}};
                    double worst = 0.0;
                    for (size_t i = 0; i < shapes.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, shapes[i]));
                      Parameter v("v", randn(rng, {shapes[i][0]}));
                      Tensor w = randn(rng, shapes[i]);
                      double e = grad_check(
                          [&](Tape& t) {
                            return project(t, scale_axis0(t.leaf(x), t.leaf(v)), w);
                          },
                          {&x, &v}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"scale_last", [](uint64_t s) {
                    const std::vector<Shape> shapes = {{4, 3}, {2, 6}, {5, 2}};
                    double worst = 0.0;
                    for (size_t i = 0; i < shapes.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, shapes[i]));
                      Parameter v("v", randn(rng, {shapes[i].back()}));
                      Tensor w = randn(rng, shapes[i]);
                      double e = grad_check(
                          [&](Tape& t) { return project(t, scale_last(t.leaf(x), t.leaf(v)), w); },
                          {&x, &v}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"matmul", [](uint64_t s) {
                    struct C {
                      Index m, k, n;
                    };
                    const std::vector<C> cases = {{2, 3, 4}, {1, 5, 2}, {3, 3, 3}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter a("a", randn(rng, {cases[i].m, cases[i].k}));
                      Parameter b("b", randn(rng, {cases[i].k, cases[i].n}));
                      Tensor w = randn(rng, {cases[i].m, cases[i].n});
                      double e = grad_check(
                          [&](Tape& t) { return project(t, matmul(t.leaf(a), t.leaf(b)), w); },
                          {&a, &b}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"linear", [](uint64_t s) {
                    struct C {
                      Index b, fin, fout;
                    };
                    const std::vector<C> cases = {{2, 3, 4}, {1, 6, 2}, {4, 2, 5}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, {cases[i].b, cases[i].fin}));
                      Parameter w("w", randn(rng, {cases[i].fin, cases[i].fout}));
                      Parameter b("b", randn(rng, {cases[i].fout}));
                      Tensor pw = randn(rng, {cases[i].b, cases[i].fout});
                      double e = grad_check(
                          [&](Tape& t) {
                            return project(t, linear(t.leaf(x), t.leaf(w), t.leaf(b)), pw);
                          },
                          {&x, &w, &b}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"conv2d", [](uint64_t s) {
                    struct C {
                      Shape x, k;
                      int stride, pad;
                    };
                    const std::vector<C> cases = {{{2, 1, 5, 5}, {3, 1, 3, 3}, 1, 1},
                                                  {{1, 2, 6, 6}, {4, 2, 3, 3}, 1, 0},
                                                  {{2, 3, 4, 4}, {2, 3, 3, 3}, 2, 1}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, cases[i].x));
                      Parameter k("k", randn(rng, cases[i].k));
                      Parameter b("b", randn(rng, {cases[i].k[0]}));
                      const Index ho =
                          (cases[i].x[2] + 2 * cases[i].pad - cases[i].k[2]) / cases[i].stride + 1;
                      const Index wo =
                          (cases[i].x[3] + 2 * cases[i].pad - cases[i].k[3]) / cases[i].stride + 1;
                      Tensor w = randn(rng, {cases[i].x[0], cases[i].k[0], ho, wo});
                      int stride = cases[i].stride, pad = cases[i].pad;
                      double e = grad_check(
                          [&](Tape& t) {
                            return project(
                                t, conv2d(t.leaf(x), t.leaf(k), t.leaf(b), stride, pad), w);
                          },
                          {&x, &k, &b}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"maxpool2d", [](uint64_t s) {
                    struct C {
                      Shape x;
                      int w;
                    };
                    const std::vector<C> cases = {
                        {{2, 2, 4, 4}, 2}, {{1, 3, 6, 6}, 3}, {{2, 1, 8, 8}, 2}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, cases[i].x));
                      const Index ho = cases[i].x[2] / cases[i].w, wo = cases[i].x[3] / cases[i].w;
                      Tensor w = randn(rng, {cases[i].x[0], cases[i].x[1], ho, wo});
                      int win = cases[i].w;
                      double e = grad_check(
                          [&](Tape& t) { return project(t, maxpool2d(t.leaf(x), win), w); }, {&x},
                          1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"layer_norm", [](uint64_t s) {
                    const std::vector<Shape> shapes = {{4, 6}, {2, 3}, {3, 5}};
                    double worst = 0.0;
                    for (size_t i = 0; i < shapes.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, shapes[i]));
                      Parameter g("g", randn_offset(rng, {shapes[i][1]}, 0.5));
                      Parameter b("b", randn(rng, {shapes[i][1]}));
                      Tensor w = randn(rng, shapes[i]);
                      double e = grad_check(
                          [&](Tape& t) {
                            return project(t, layer_norm(t.leaf(x), t.leaf(g), t.leaf(b)), w);
                          },
                          {&x, &g, &b}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"softmax_lastdim", [](uint64_t s) {
                    const std::vector<Shape> shapes = {{2, 5}, {3, 3}, {1, 7}};
                    double worst = 0.0;
                    for (size_t i = 0; i < shapes.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, shapes[i]));
                      Tensor w = randn(rng, shapes[i]);
                      double e = grad_check(
                          [&](Tape& t) { return project(t, softmax_lastdim(t.leaf(x)), w); },
                          {&x}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"softmax_cross_entropy", [](uint64_t s) {
                    struct C {
                      Shape logits;
                      std::vector<int> labels;
                    };
                    const std::vector<C> cases = {{{4, 5}, {0, 3, 2, 4}},
                                                  {{2, 3}, {1, 0}},
                                                  {{6, 4}, {0, 1, 2, 3, 0, 1}}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, cases[i].logits));
                      std::vector<int> labels = cases[i].labels;
                      double e = grad_check(
                          [&](Tape& t) { return softmax_cross_entropy(t.leaf(x), labels); }, {&x},
                          1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"bmm", [](uint64_t s) {
                    struct C {
                      Shape a, b;
                      bool tb;
                    };
                    const std::vector<C> cases = {{{2, 3, 4}, {2, 4, 5}, false},
                                                  {{3, 2, 2}, {3, 2, 2}, false},
                                                  {{2, 3, 4}, {2, 5, 4}, true}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter a("a", randn(rng, cases[i].a));
                      Parameter b("b", randn(rng, cases[i].b));
                      const Index n = cases[i].tb ? cases[i].b[1] : cases[i].b[2];
                      Tensor w = randn(rng, {cases[i].a[0], cases[i].a[1], n});
                      bool tb = cases[i].tb;
                      double e = grad_check(
                          [&](Tape& t) { return project(t, bmm(t.leaf(a), t.leaf(b), tb), w); },
                          {&a, &b}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"patchify", [](uint64_t s) {
                    struct C {
                      Shape x;
                      int p;
                    };
                    const std::vector<C> cases = {
                        {{2, 1, 4, 4}, 2}, {{1, 2, 6, 6}, 3}, {{2, 1, 8, 8}, 4}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, cases[i].x));
                      const Index g = cases[i].x[2] / cases[i].p;
                      const Index tkn = g * g;
                      const Index d = cases[i].x[1] * cases[i].p * cases[i].p;
                      Tensor w = randn(rng, {cases[i].x[0] * tkn, d});
                      int p = cases[i].p;
                      double e = grad_check(
                          [&](Tape& t) { return project(t, patchify(t.leaf(x), p), w); }, {&x},
                          1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"prepend_cls", [](uint64_t s) {
                    struct C {
                      Index b, tkn, d;
                    };
                    const std::vector<C> cases = {{2, 3, 4}, {1, 5, 2}, {3, 2, 6}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, {cases[i].b * cases[i].tkn, cases[i].d}));
                      Parameter c("c", randn(rng, {Index{1}, cases[i].d}));
                      Tensor w = randn(rng, {cases[i].b * (cases[i].tkn + 1), cases[i].d});
                      Index tkn = cases[i].tkn;
                      double e = grad_check(
                          [&](Tape& t) {
                            return project(t, prepend_cls(t.leaf(x), t.leaf(c), tkn), w);
                          },
                          {&x, &c}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"add_pos", [](uint64_t s) {
                    struct C {
                      Index b, tkn, d;
                    };
                    const std::vector<C> cases = {{2, 3, 4}, {1, 5, 2}, {3, 2, 6}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, {cases[i].b * cases[i].tkn, cases[i].d}));
                      Parameter p("p", randn(rng, {cases[i].tkn, cases[i].d}));
                      Tensor w = randn(rng, {cases[i].b * cases[i].tkn, cases[i].d});
                      Index tkn = cases[i].tkn;
                      double e = grad_check(
                          [&](Tape& t) { return project(t, add_pos(t.leaf(x), t.leaf(p), tkn), w); },
                          {&x, &p}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"split_heads", [](uint64_t s) {
                    struct C {
                      Index b, tkn, d;
                      int h;
                    };
                    const std::vector<C> cases = {{2, 4, 6, 2}, {1, 3, 4, 2}, {2, 2, 6, 3}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, {cases[i].b * cases[i].tkn, cases[i].d}));
                      Tensor w = randn(rng, {cases[i].b * cases[i].h, cases[i].tkn,
                                             cases[i].d / cases[i].h});
                      Index tkn = cases[i].tkn;
                      int h = cases[i].h;
                      double e = grad_check(
                          [&](Tape& t) { return project(t, split_heads(t.leaf(x), h, tkn), w); },
                          {&x}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"merge_heads", [](uint64_t s) {
                    struct C {
                      Index b, tkn, d;
                      int h;
                    };
                    const std::vector<C> cases = {{2, 4, 6, 2}, {1, 3, 4, 2}, {2, 2, 6, 3}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, {cases[i].b * cases[i].h, cases[i].tkn,
                                                   cases[i].d / cases[i].h}));
                      Tensor w = randn(rng, {cases[i].b * cases[i].tkn, cases[i].d});
                      Index tkn = cases[i].tkn;
                      int h = cases[i].h;
                      double e = grad_check(
                          [&](Tape& t) { return project(t, merge_heads(t.leaf(x), h, tkn), w); },
                          {&x}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"take_cls", [](uint64_t s) {
                    struct C {
                      Index b, tkn, d;
                    };
                    const std::vector<C> cases = {{2, 3, 4}, {1, 5, 2}, {3, 2, 6}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter x("x", randn(rng, {cases[i].b * cases[i].tkn, cases[i].d}));
                      Tensor w = randn(rng, {cases[i].b, cases[i].d});
                      Index tkn = cases[i].tkn;
                      double e = grad_check(
                          [&](Tape& t) { return project(t, take_cls(t.leaf(x), tkn), w); }, {&x},
                          1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"attention", [](uint64_t s) {
                    struct C {
                      Index b, tkn, d;
                      int h;
                    };
                    const std::vector<C> cases = {{2, 3, 4, 2}, {1, 4, 6, 3}, {2, 2, 8, 2}};
                    double worst = 0.0;
                    for (size_t i = 0; i < cases.size(); ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      Parameter qkv("qkv", randn(rng, {cases[i].b * cases[i].tkn, 3 * cases[i].d}));
                      Tensor w = randn(rng, {cases[i].b * cases[i].tkn, cases[i].d});
                      Index tkn = cases[i].tkn;
                      int h = cases[i].h;
                      double e = grad_check(
                          [&](Tape& t) { return project(t, attention(t.leaf(qkv), h, tkn), w); },
                          {&qkv}, 1e-5, 25, mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});

  // Raw gate logits through the two masking granularities.
  rows.push_back({"wf_conv_gate", [](uint64_t s) {
                    double worst = 0.0;
                    for (size_t i = 0; i < 3; ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      const Index cout = 3 + static_cast<Index>(i);
                      WFLayer layer{"c", GateGranularity::ConvOutChannel,
                                    make_alpha("c.w", 4, cout), make_alpha("c.b", 4, cout), true};
                      layer.weight_gate.raw.value = randn(rng, {4, cout});
                      layer.bias_gate.raw.value = randn(rng, {4, cout});
                      Parameter k("k", randn(rng, {cout, 2, 3, 3}));
                      Parameter b("b", randn(rng, {cout}));
                      Tensor x = randn(rng, {2, 2, 5, 5});
                      Tensor w = randn(rng, {2, cout, 5, 5});
                      Index row = static_cast<Index>(i % 4);
                      double e = grad_check(
                          [&](Tape& t) {
                            Var gw = gate_weights(t, layer, t.leaf(k), row);
                            Var gb = gate_bias(t, layer, t.leaf(b), row);
                            return project(t, conv2d(t.constant(x), gw, gb, 1, 1), w);
                          },
                          {&layer.weight_gate.raw, &layer.bias_gate.raw, &k, &b}, 1e-5, 25,
                          mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});
  rows.push_back({"wf_projection_gate", [](uint64_t s) {
                    double worst = 0.0;
                    for (size_t i = 0; i < 3; ++i) {
                      std::mt19937_64 rng(mix(s, i));
                      const Index fout = 4 + 2 * static_cast<Index>(i);
                      WFLayer layer{"q", GateGranularity::ProjectionOutFeature,
                                    make_alpha("q.w", 3, fout), make_alpha("q.b", 3, fout), true};
                      layer.weight_gate.raw.value = randn(rng, {3, fout});
                      layer.bias_gate.raw.value = randn(rng, {3, fout});
                      Parameter w("w", randn(rng, {Index{3}, fout}));
                      Parameter b("b", randn(rng, {fout}));
                      Tensor x = randn(rng, {2, 3});
                      Tensor pw = randn(rng, {2, fout});
                      Index row = static_cast<Index>(i % 3);
                      double e = grad_check(
                          [&](Tape& t) {
                            Var gw = gate_weights(t, layer, t.leaf(w), row);
                            Var gb = gate_bias(t, layer, t.leaf(b), row);
                            return project(t, linear(t.constant(x), gw, gb), pw);
                          },
                          {&layer.weight_gate.raw, &layer.bias_gate.raw, &w, &b}, 1e-5, 25,
                          mix(s, 100 + i));
                      worst = std::max(worst, e);
                    }
                    return worst;
                  }});

  // Full architectures under a cross-entropy head, and raw alpha end to end.
  rows.push_back({"small_cnn_end_to_end", [](uint64_t s) {
                    std::mt19937_64 rng(mix(s, 0));
                    SmallCnn net(3, 8, mix(s, 1));
                    Tensor images = randn(rng, {2, 1, 8, 8}, 0.5);
                    std::vector<int> labels = {0, 2};
                    return grad_check(
                        [&](Tape& t) {
                          return softmax_cross_entropy(
                              net.forward(t, images, Network::kNoSelector), labels);
                        },
                        net.parameters(), 1e-5, 12, mix(s, 2));
                  }});
  rows.push_back({"tiny_vit_end_to_end", [](uint64_t s) {
                    std::mt19937_64 rng(mix(s, 0));
                    TinyVit net(3, 8, mix(s, 1));
                    Tensor images = randn(rng, {2, 1, 8, 8}, 0.5);
                    std::vector<int> labels = {1, 0};
                    return grad_check(
                        [&](Tape& t) {
                          return softmax_cross_entropy(
                              net.forward(t, images, Network::kNoSelector), labels);
                        },
                        net.parameters(), 1e-5, 8, mix(s, 2));
                  }});
  rows.push_back({"wf_alpha_end_to_end", [](uint64_t s) {
                    std::mt19937_64 rng(mix(s, 0));
                    SmallCnn base(3, 8, mix(s, 1));
                    std::unique_ptr<Network> wrapped = wf_wrap(base);
                    // move the logits off the flat clip plateau so grads are O(1)
                    std::vector<Parameter*> alphas;
                    for (WFLayer& l : wrapped->wf_layers()) {
                      l.weight_gate.raw.value = randn(rng, l.weight_gate.raw.value.shape());
                      l.bias_gate.raw.value = randn(rng, l.bias_gate.raw.value.shape());
                      alphas.push_back(&l.weight_gate.raw);
                      alphas.push_back(&l.bias_gate.raw);
                    }
                    Tensor images = randn(rng, {2, 1, 8, 8}, 0.5);
                    std::vector<int> labels = {2, 1};
                    return grad_check(
                        [&](Tape& t) {
                          return softmax_cross_entropy(wrapped->forward(t, images, 1), labels);
                        },
                        alphas, 1e-5, 12, mix(s, 2));
                  }});

  std::vector<GradCheckRow> table;
  table.reserve(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    GradCheckRow r;
    r.name = rows[i].name;
    r.max_rel_err = rows[i].run(mix(seed, 7000 + i));
    r.pass = r.max_rel_err < tolerance;
    table.push_back(std::move(r));
  }
  return table;
}

}  // namespace wf
