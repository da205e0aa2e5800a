#include "rpm_align/nn/ops.hpp"

#include "rpm_align/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rpm_align::nn {

namespace {

std::vector<std::size_t> with_last_dim(const Tensor& t, std::size_t last) {
  std::vector<std::size_t> shape = t.shape();
  if (shape.empty()) shape.push_back(last);
  else shape.back() = last;
  return shape;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

}  // namespace

Var add(Var a, Var b) {
  require(a.value().same_shape(b.value()), "add: shape mismatch " + a.value().shape_string() +
                                               " vs " + b.value().shape_string());
  Tensor out = a.value();
  out.matrix() += b.value().matrix();
  return a.tape->record(std::move(out), {a, b}, [](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* gp = t.grad_slot(t.parent(self, k))) gp->matrix() += g.matrix();
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  out.matrix() *= factor;
  return a.tape->record(std::move(out), {a}, [factor](Tape& t, std::size_t self) {
    if (Tensor* gp = t.grad_slot(t.parent(self, 0))) gp->matrix() += factor * t.grad(self).matrix();
  });
}

Var sum(Var a) {
  const double s = a.value().matrix().sum();
  return a.tape->record(Tensor::scalar(s), {a}, [](Tape& t, std::size_t self) {
    if (Tensor* gp = t.grad_slot(t.parent(self, 0))) gp->matrix().array() += t.grad(self)[0];
  });
}

Var exp(Var a) {
  Tensor out = a.value();
  out.matrix() = out.matrix().array().exp().matrix();
  return a.tape->record(std::move(out), {a}, [](Tape& t, std::size_t self) {
    if (Tensor* gp = t.grad_slot(t.parent(self, 0)))
      gp->matrix().array() += t.grad(self).matrix().array() * t.value(self).matrix().array();
  });
}

Var dense(Var in, Var weight, Var bias) {
  const Tensor& x = in.value();
  const Tensor& w = weight.value();
  const Tensor& b = bias.value();
  require(w.rank() == 2, "dense: weight must be 2-d");
  require(x.cols() == static_cast<Eigen::Index>(w.dim(0)),
          "dense: input trailing dim " + std::to_string(x.cols()) + " != weight rows " +
              std::to_string(w.dim(0)));
  require(b.size() == w.dim(1), "dense: bias size mismatch");

  Tensor out(with_last_dim(x, w.dim(1)));
  auto o = out.matrix();
  o.noalias() = x.matrix() * w.matrix();
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data(), b.size());

  return in.tape->record(std::move(out), {in, weight, bias}, [](Tape& t, std::size_t self) {
    const auto g = t.grad(self).matrix();
    const auto xv = t.value(t.parent(self, 0)).matrix();
    const auto wv = t.value(t.parent(self, 1)).matrix();
    if (Tensor* gx = t.grad_slot(t.parent(self, 0))) gx->matrix().noalias() += g * wv.transpose();
    if (Tensor* gw = t.grad_slot(t.parent(self, 1))) gw->matrix().noalias() += xv.transpose() * g;
    if (Tensor* gb = t.grad_slot(t.parent(self, 2))) {
      Eigen::Map<Eigen::RowVectorXd>(gb->data(), gb->size()) += g.colwise().sum();
    }
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return a.tape->record(std::move(out), {a}, [](Tape& t, std::size_t self) {
    Tensor* gp = t.grad_slot(t.parent(self, 0));
    if (!gp) return;
    const Tensor& x = t.value(t.parent(self, 0));
    const Tensor& g = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) (*gp)[i] += g[i];
    }
  });
}

Var softplus(Var a) {
  Tensor out = a.value();
  // Below about -745 the exact value underflows; the floor keeps it positive.
  for (double& v : out.values())
    v = std::max(v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)),
                 std::numeric_limits<double>::denorm_min());
  return a.tape->record(std::move(out), {a}, [](Tape& t, std::size_t self) {
    Tensor* gp = t.grad_slot(t.parent(self, 0));
    if (!gp) return;
    const Tensor& x = t.value(t.parent(self, 0));
    const Tensor& g = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
      (*gp)[i] += g[i] * s;
    }
  });
}

Var group_norm(Var in, Var gain, Var shift, int groups, double eps) {
  const Tensor& x = in.value();
  const Eigen::Index n = x.rows(), c = x.cols();
  require(groups >= 1 && c % groups == 0,
          "group_norm: " + std::to_string(c) + " channels not divisible into " + std::to_string(groups) +
              " groups");
  require(gain.value().size() == static_cast<std::size_t>(c) &&
              shift.value().size() == static_cast<std::size_t>(c),
          "group_norm: gain/shift size mismatch");
  const Eigen::Index gs = c / groups;

  // Normalised values and per-(row, group) inverse std, kept for backward.
  Tensor xhat(x.shape());
  RowMatrix inv_std(n, groups);
  const auto xm = x.matrix();
  auto xh = xhat.matrix();
  for (Eigen::Index r = 0; r < n; ++r) {
    for (int g = 0; g < groups; ++g) {
      const auto seg = xm.row(r).segment(g * gs, gs);
      const double mean = seg.mean();
      const double var = (seg.array() - mean).square().mean();
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std(r, g) = is;
      xh.row(r).segment(g * gs, gs) = (seg.array() - mean) * is;
    }
  }
  Tensor out(x.shape());
  const Eigen::Map<const Eigen::RowVectorXd> gam(gain.value().data(), c);
  const Eigen::Map<const Eigen::RowVectorXd> bet(shift.value().data(), c);
  out.matrix() = (xh.array().rowwise() * gam.array()).rowwise() + bet.array();

  return in.tape->record(
      std::move(out), {in, gain, shift},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), groups, gs](Tape& t, std::size_t self) {
        const auto g = t.grad(self).matrix();
        const auto xh = xhat.matrix();
        const Eigen::Index c = g.cols();
        if (Tensor* gg = t.grad_slot(t.parent(self, 1))) {
          Eigen::Map<Eigen::RowVectorXd>(gg->data(), c) += (g.array() * xh.array()).colwise().sum().matrix();
        }
        if (Tensor* gb = t.grad_slot(t.parent(self, 2))) {
          Eigen::Map<Eigen::RowVectorXd>(gb->data(), c) += g.colwise().sum();
        }
        if (Tensor* gx = t.grad_slot(t.parent(self, 0))) {
          const Tensor& gain_v = t.value(t.parent(self, 1));
          const Eigen::Map<const Eigen::RowVectorXd> gam(gain_v.data(), c);
          auto gxm = gx->matrix();
          for (Eigen::Index r = 0; r < g.rows(); ++r) {
            for (int k = 0; k < groups; ++k) {
              const Eigen::RowVectorXd dxh =
                  (g.row(r).segment(k * gs, gs).array() * gam.segment(k * gs, gs).array()).matrix();
              const auto xhs = xh.row(r).segment(k * gs, gs);
              const double m1 = dxh.mean();
              const double m2 = (dxh.array() * xhs.array()).mean();
              gxm.row(r).segment(k * gs, gs).array() +=
                  inv_std(r, k) * (dxh.array() - m1 - xhs.array() * m2);
            }
          }
        }
      });
}

Var segment_max_pool(Var in, std::vector<std::size_t> offsets) {
  const Tensor& x = in.value();
  require(offsets.size() >= 2 && offsets.front() == 0 &&
              offsets.back() == static_cast<std::size_t>(x.rows()),
          "segment_max_pool: offsets must cover all rows");
  const auto xm = x.matrix();
  const Eigen::Index segs = static_cast<Eigen::Index>(offsets.size() - 1), d = x.cols();
  Tensor out({static_cast<std::size_t>(segs), static_cast<std::size_t>(d)});
  auto o = out.matrix();
  std::vector<Eigen::Index> argmax(static_cast<std::size_t>(segs * d));
  for (Eigen::Index s = 0; s < segs; ++s) {
    const auto b = static_cast<Eigen::Index>(offsets[s]), e = static_cast<Eigen::Index>(offsets[s + 1]);
    require(e > b, "segment_max_pool: empty segment");
    for (Eigen::Index j = 0; j < d; ++j) {
      Eigen::Index best = b;
      for (Eigen::Index r = b + 1; r < e; ++r) {
        if (xm(r, j) > xm(best, j)) best = r;
      }
      o(s, j) = xm(best, j);
      argmax[static_cast<std::size_t>(s * d + j)] = best;
    }
  }
  return in.tape->record(std::move(out), {in}, [argmax = std::move(argmax), d](Tape& t, std::size_t self) {
    Tensor* gp = t.grad_slot(t.parent(self, 0));
    if (!gp) return;
    const Tensor& g = t.grad(self);
    auto gm = gp->matrix();
    for (std::size_t k = 0; k < argmax.size(); ++k) {
      gm(argmax[k], static_cast<Eigen::Index>(k) % d) += g[k];
    }
  });
}

Var max_pool(Var in) {
  const auto rows = static_cast<std::size_t>(in.value().rows());
  require(rows >= 1, "max_pool: empty input");
  Var pooled = segment_max_pool(in, {0, rows});
  // Drop the leading singleton axis: [1, D] -> [D].
  Tensor flat({static_cast<std::size_t>(in.value().cols())},
              std::vector<double>(pooled.value().values().begin(), pooled.value().values().end()));
  return in.tape->record(std::move(flat), {pooled}, [](Tape& t, std::size_t self) {
    Tensor* gp = t.grad_slot(t.parent(self, 0));
    if (!gp) return;
    const Tensor& g = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*gp)[i] += g[i];
  });
}

Var l2_normalize(Var in) {
  Tensor out = in.value();
  auto o = out.matrix();
  Eigen::VectorXd denom(o.rows());
  for (Eigen::Index r = 0; r < o.rows(); ++r) {
    denom(r) = std::max(o.row(r).norm(), kL2NormEps);
    o.row(r) /= denom(r);
  }
  return in.tape->record(std::move(out), {in}, [denom = std::move(denom)](Tape& t, std::size_t self) {
    Tensor* gp = t.grad_slot(t.parent(self, 0));
    if (!gp) return;
    const auto g = t.grad(self).matrix();
    const auto y = t.value(self).matrix();
    auto gm = gp->matrix();
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      if (denom(r) > kL2NormEps) {
        gm.row(r) += (g.row(r) - y.row(r) * y.row(r).dot(g.row(r))) / denom(r);
      } else {
        gm.row(r) += g.row(r) / kL2NormEps;
      }
    }
  });
}

Var pairwise_sq_dist(Var a, Var b) {
  const auto am = a.value().matrix();
  const auto bm = b.value().matrix();
  require(am.cols() == bm.cols(), "pairwise_sq_dist: feature dimension mismatch");
  Tensor out({static_cast<std::size_t>(am.rows()), static_cast<std::size_t>(bm.rows())});
  auto o = out.matrix();
  o.noalias() = -2.0 * am * bm.transpose();
  o.colwise() += am.rowwise().squaredNorm();
  o.rowwise() += bm.rowwise().squaredNorm().transpose();
  o = o.cwiseMax(0.0);
  return a.tape->record(std::move(out), {a, b}, [](Tape& t, std::size_t self) {
    const auto g = t.grad(self).matrix();
    const auto av = t.value(t.parent(self, 0)).matrix();
    const auto bv = t.value(t.parent(self, 1)).matrix();
    if (Tensor* ga = t.grad_slot(t.parent(self, 0))) {
      auto gm = ga->matrix();
      gm += 2.0 * (av.array().colwise() * g.rowwise().sum().array()).matrix();
      gm.noalias() -= 2.0 * g * bv;
    }
    if (Tensor* gb = t.grad_slot(t.parent(self, 1))) {
      auto gm = gb->matrix();
      gm += 2.0 * (bv.array().colwise() * g.colwise().sum().transpose().array()).matrix();
      gm.noalias() -= 2.0 * g.transpose() * av;
    }
  });
}

Var slice_cols(Var in, Eigen::Index begin, Eigen::Index end) {
  const auto x = in.value().matrix();
  require(begin >= 0 && end <= x.cols() && begin < end, "slice_cols: bad range");
  Tensor out({static_cast<std::size_t>(x.rows()), static_cast<std::size_t>(end - begin)});
  out.matrix() = x.middleCols(begin, end - begin);
  return in.tape->record(std::move(out), {in}, [begin, end](Tape& t, std::size_t self) {
    if (Tensor* gp = t.grad_slot(t.parent(self, 0)))
      gp->matrix().middleCols(begin, end - begin) += t.grad(self).matrix();
  });
}

}  // namespace rpm_align::nn
