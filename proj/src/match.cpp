#include "rpm_align/match.hpp"

#include "rpm_align/errors.hpp"

#include <cmath>

namespace rpm_align {

namespace {

Matrix sq_dist(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw InvalidArgument("feature dimension mismatch");
  Matrix d(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < a.rows(); ++j) {
    for (Eigen::Index k = 0; k < b.rows(); ++k) d(j, k) = (a.row(j) - b.row(k)).squaredNorm();
  }
  return d;
}

template <typename Vec>
double log_sum_exp(const Vec& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

double regularized_inverse(double gap) { return gap / (gap * gap + kSvdGapEps * kSvdGapEps); }

}  // namespace

Matrix MatchMatrix::augmented() const {
  const Eigen::Index J = values.rows(), K = values.cols();
  if (slack_row.size() == 0) return values;
  Matrix a(J + 1, K + 1);
  a.topLeftCorner(J, K) = values;
  a.row(J).head(K) = slack_row.transpose();
  a.col(K).head(J) = slack_col;
  a(J, K) = slack_corner;
  return a;
}

double MatchMatrix::row_residual() const {
  Eigen::VectorXd sums = values.rowwise().sum();
  if (slack_col.size() == values.rows()) sums += slack_col;
  return (sums.array() - 1.0).abs().maxCoeff();
}

double MatchMatrix::col_residual() const {
  Eigen::RowVectorXd sums = values.colwise().sum();
  if (slack_row.size() == values.cols()) sums += slack_row.transpose();
  return (sums.array() - 1.0).abs().maxCoeff();
}

Matrix log_match_spatial(const Points& x, const Points& y, const AnnealParams& p) {
  return (-p.beta * (sq_dist(x, y).array() - p.alpha)).matrix();
}

Matrix log_match_feature(const Matrix& fx, const Matrix& fy, const AnnealParams& p) {
  return (-p.beta * (sq_dist(fx, fy).array() - p.alpha)).matrix();
}

Matrix init_match_spatial(const Points& x, const Points& y, const AnnealParams& p) {
  return log_match_spatial(x, y, p).array().exp().matrix();
}

Matrix init_match_feature(const Matrix& fx, const Matrix& fy, const AnnealParams& p) {
  return log_match_feature(fx, fy, p).array().exp().matrix();
}

Matrix sinkhorn_log(const Matrix& log_raw, int n_iters, SlackMode slack, std::vector<Matrix>* states) {
  if (n_iters < 1) throw InvalidArgument("sinkhorn requires n_iters >= 1");
  const Eigen::Index J = log_raw.rows(), K = log_raw.cols();
  const bool pad = slack == SlackMode::kWithSlack;
  Matrix L = pad ? Matrix::Zero(J + 1, K + 1) : Matrix(log_raw);
  if (pad) L.topLeftCorner(J, K) = log_raw;
  if (states) {
    states->clear();
    states->reserve(static_cast<std::size_t>(2 * n_iters + 1));
    states->push_back(L);
  }
  for (int it = 0; it < n_iters; ++it) {
    for (Eigen::Index r = 0; r < J; ++r) L.row(r).array() -= log_sum_exp(L.row(r));
    if (states) states->push_back(L);
    for (Eigen::Index c = 0; c < K; ++c) L.col(c).array() -= log_sum_exp(L.col(c));
    if (states) states->push_back(L);
  }
  return L;
}

Matrix sinkhorn_log_backward(const std::vector<Matrix>& states, const Matrix& grad_out, SlackMode slack) {
  if (states.size() < 3 || states.size() % 2 == 0)
    throw InvalidArgument("sinkhorn_log_backward: bad state trace");
  const bool pad = slack == SlackMode::kWithSlack;
  const Eigen::Index J = states.front().rows() - (pad ? 1 : 0);
  const Eigen::Index K = states.front().cols() - (pad ? 1 : 0);
  Matrix G = grad_out;
  // states[h] is the output of half pass h (odd: row pass, even: column pass).
  for (std::size_t h = states.size() - 1; h >= 1; --h) {
    const Matrix& Y = states[h];
    if (h % 2 == 0) {
      for (Eigen::Index c = 0; c < K; ++c) {
        const double s = G.col(c).sum();
        G.col(c).array() -= Y.col(c).array().exp() * s;
      }
    } else {
      for (Eigen::Index r = 0; r < J; ++r) {
        const double s = G.row(r).sum();
        G.row(r).array() -= Y.row(r).array().exp() * s;
      }
    }
  }
  return G.topLeftCorner(J, K);
}

MatchMatrix match_from_augmented(const Matrix& a) {
  MatchMatrix m;
  const Eigen::Index J = a.rows() - 1, K = a.cols() - 1;
  m.values = a.topLeftCorner(J, K);
  m.slack_row = a.row(J).head(K).transpose();
  m.slack_col = a.col(K).head(J);
  m.slack_corner = a(J, K);
  return m;
}

MatchMatrix sinkhorn(const Matrix& raw, int n_iters, SlackMode slack) {
  if ((raw.array() <= 0.0).any() || !raw.allFinite())
    throw InvalidArgument("sinkhorn requires a strictly positive, finite matrix");
  const Matrix out = sinkhorn_log(raw.array().log().matrix(), n_iters, slack).array().exp().matrix();
  if (slack == SlackMode::kWithSlack) return match_from_augmented(out);
  MatchMatrix m;
  m.values = out;
  m.slack_corner = 0.0;
  return m;
}

Correspondences extract_correspondences(const Matrix& m, const Points& y) {
  if (m.cols() != y.rows()) throw InvalidArgument("match matrix columns must equal |Y|");
  Correspondences c;
  c.weights = m.rowwise().sum();
  c.targets = Points::Zero(m.rows(), 3);
  bool any = false;
  for (Eigen::Index j = 0; j < m.rows(); ++j) {
    if (c.weights(j) > kWeightFloor) {
      c.targets.row(j) = (m.row(j) * y) / c.weights(j);
      any = true;
    } else {
      c.weights(j) = 0.0;
    }
  }
  if (!any) throw SolverError(SolverError::Kind::kNoInliers);
  return c;
}

Correspondences extract_correspondences(const MatchMatrix& m, const Points& y) {
  return extract_correspondences(m.values, y);
}

ProcrustesSolution solve_weighted_procrustes(const Points& x, const Points& targets,
                                             const Eigen::VectorXd& weights) {
  const Eigen::Index J = x.rows();
  if (targets.rows() != J || weights.size() != J)
    throw InvalidArgument("weighted_procrustes: input sizes differ");

  Eigen::VectorXd w = weights;
  for (Eigen::Index j = 0; j < J; ++j) {
    if (!(w(j) > kWeightFloor)) w(j) = 0.0;
  }
  ProcrustesSolution sol;
  sol.weight_sum = w.sum();
  if (!(sol.weight_sum > kWeightFloor)) throw SolverError(SolverError::Kind::kNoInliers);
  const Eigen::VectorXd wn = w / sol.weight_sum;

  sol.x_centroid = (x.transpose() * wn);
  sol.y_centroid = (targets.transpose() * wn);
  Mat3 H = Mat3::Zero();
  for (Eigen::Index j = 0; j < J; ++j) {
    if (wn(j) == 0.0) continue;
    H += wn(j) * (x.row(j).transpose() - sol.x_centroid) * (targets.row(j) - sol.y_centroid.transpose());
  }

  const Eigen::JacobiSVD<Mat3> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  sol.U = svd.matrixU();
  sol.V = svd.matrixV();
  sol.singular_values = svd.singularValues();
  if (sol.singular_values(1) < kRankTolerance) throw SolverError(SolverError::Kind::kRankDeficient);

  sol.det_sign = (sol.V * sol.U.transpose()).determinant() > 0.0 ? 1.0 : -1.0;
  const Vec3 d(1.0, 1.0, sol.det_sign);
  sol.transform.rotation = sol.V * d.asDiagonal() * sol.U.transpose();
  sol.transform.translation = sol.y_centroid - sol.transform.rotation * sol.x_centroid;
  return sol;
}

RigidTransform weighted_procrustes(const Points& x, const Correspondences& c) {
  return solve_weighted_procrustes(x, c.targets, c.weights).transform;
}

ProcrustesGradients procrustes_backward(const ProcrustesSolution& sol, const Points& x,
                                        const Points& targets, const Eigen::VectorXd& weights,
                                        const Mat3& grad_rotation, const Vec3& grad_translation) {
  const Eigen::Index J = x.rows();
  const Mat3& R = sol.transform.rotation;
  const Vec3 d(1.0, 1.0, sol.det_sign);
  const Vec3& s = sol.singular_values;

  // t = y_c - R x_c
  const Vec3 g_xc = -R.transpose() * grad_translation;
  const Vec3 g_yc = grad_translation;
  const Mat3 gR = grad_rotation - grad_translation * sol.x_centroid.transpose();

  // dR = R U Omega U^T with Omega_ab (d_a s_b + d_b s_a) = d_b H'_ba - d_a H'_ab,
  // H' = U^T dH V. Transposing that linear map gives dL/dH = U G V^T.
  const Mat3 A = sol.U.transpose() * R.transpose() * gR * sol.U;
  Mat3 G = Mat3::Zero();
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      if (a == b) continue;
      const double c = regularized_inverse(d(a) * s(b) + d(b) * s(a));
      G(a, b) = d(a) * c * (A(b, a) - A(a, b));
    }
  }
  const Mat3 gH = sol.U * G * sol.V.transpose();

  ProcrustesGradients out;
  out.x = Points::Zero(J, 3);
  out.targets = Points::Zero(J, 3);
  out.weights = Eigen::VectorXd::Zero(J);
  Eigen::VectorXd g_wn = Eigen::VectorXd::Zero(J);
  double mean_g = 0.0;
  for (Eigen::Index j = 0; j < J; ++j) {
    if (!(weights(j) > kWeightFloor)) continue;
    const double wn = weights(j) / sol.weight_sum;
    const Vec3 xc = x.row(j).transpose() - sol.x_centroid;
    const Vec3 yc = targets.row(j).transpose() - sol.y_centroid;
    out.x.row(j) = (wn * (gH * yc + g_xc)).transpose();
    out.targets.row(j) = (wn * (gH.transpose() * xc + g_yc)).transpose();
    g_wn(j) = xc.dot(gH * yc) + x.row(j).dot(g_xc) + targets.row(j).dot(g_yc);
    mean_g += wn * g_wn(j);
  }
  for (Eigen::Index j = 0; j < J; ++j) {
    if (!(weights(j) > kWeightFloor)) continue;
    out.weights(j) = (g_wn(j) - mean_g) / sol.weight_sum;
  }
  return out;
}

RigidTransform transform_from_tensor(const nn::Tensor& t) {
  if (t.size() != 12) throw InvalidArgument("transform tensor must have 12 entries");
  RigidTransform T;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) T.rotation(r, c) = t[static_cast<std::size_t>(3 * r + c)];
    T.translation(r) = t[static_cast<std::size_t>(9 + r)];
  }
  return T;
}

namespace ops {

using nn::Tape;
using nn::Tensor;
using nn::Var;

Var anneal_affinity(Var dist, Var anneal) {
  if (anneal.value().size() != 2) throw InvalidArgument("anneal_affinity: expected [alpha, beta]");
  const double alpha = anneal.value()[0], beta = anneal.value()[1];
  Tensor out = dist.value();
  out.matrix().array() = -beta * (out.matrix().array() - alpha);
  return dist.tape->record(std::move(out), {dist, anneal}, [](Tape& t, std::size_t self) {
    const auto g = t.grad(self).matrix();
    const Tensor& ab = t.value(t.parent(self, 1));
    const double alpha = ab[0], beta = ab[1];
    if (Tensor* gd = t.grad_slot(t.parent(self, 0))) gd->matrix() += -beta * g;
    if (Tensor* ga = t.grad_slot(t.parent(self, 1))) {
      const auto d = t.value(t.parent(self, 0)).matrix();
      (*ga)[0] += beta * g.sum();
      (*ga)[1] += -(g.array() * (d.array() - alpha)).sum();
    }
  });
}

Var sinkhorn_log(Var log_raw, int n_iters, SlackMode slack) {
  std::vector<Matrix> states;
  const Matrix out = rpm_align::sinkhorn_log(log_raw.value().matrix(), n_iters, slack, &states);
  return log_raw.tape->record(
      Tensor::from_matrix(out), {log_raw},
      [states = std::move(states), slack](Tape& t, std::size_t self) {
        Tensor* gp = t.grad_slot(t.parent(self, 0));
        if (!gp) return;
        gp->matrix() += sinkhorn_log_backward(states, t.grad(self).matrix(), slack);
      });
}

Var correspondences(Var match, const Points& y, bool has_slack) {
  const auto m = match.value().matrix();
  const Eigen::Index J = m.rows() - (has_slack ? 1 : 0);
  const Eigen::Index K = m.cols() - (has_slack ? 1 : 0);
  if (K != y.rows()) throw InvalidArgument("correspondences: match columns must equal |Y|");
  const Matrix block = m.topLeftCorner(J, K);
  Tensor out({static_cast<std::size_t>(J), 4});
  auto o = out.matrix();
  for (Eigen::Index j = 0; j < J; ++j) {
    const double w = block.row(j).sum();
    if (w > kWeightFloor) {
      o.row(j).head(3) = (block.row(j) * y) / w;
      o(j, 3) = w;
    } else {
      o.row(j).setZero();
    }
  }
  return match.tape->record(std::move(out), {match}, [y, J, K](Tape& t, std::size_t self) {
    Tensor* gp = t.grad_slot(t.parent(self, 0));
    if (!gp) return;
    const auto g = t.grad(self).matrix();
    const auto o = t.value(self).matrix();
    auto gm = gp->matrix();
    for (Eigen::Index j = 0; j < J; ++j) {
      const double w = o(j, 3);
      if (!(w > kWeightFloor)) continue;
      const Eigen::RowVector3d gy = g.row(j).head(3);
      const Eigen::RowVector3d yhat = o.row(j).head(3);
      for (Eigen::Index k = 0; k < K; ++k) {
        gm(j, k) += gy.dot(y.row(k) - yhat) / w + g(j, 3);
      }
    }
  });
}

Var weighted_procrustes(Var x, Var targets, Var weights) {
  const Points xv = x.value().matrix();
  const Points tv = targets.value().matrix();
  const Eigen::VectorXd wv = Eigen::Map<const Eigen::VectorXd>(weights.value().data(),
                                                               static_cast<Eigen::Index>(weights.value().size()));
  ProcrustesSolution sol = solve_weighted_procrustes(xv, tv, wv);
  Tensor out({4, 3});
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) out[static_cast<std::size_t>(3 * r + c)] = sol.transform.rotation(r, c);
    out[static_cast<std::size_t>(9 + r)] = sol.transform.translation(r);
  }
  return x.tape->record(std::move(out), {x, targets, weights}, [sol](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Mat3 gR;
    Vec3 gt;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) gR(r, c) = g[static_cast<std::size_t>(3 * r + c)];
      gt(r) = g[static_cast<std::size_t>(9 + r)];
    }
    const Points xv = t.value(t.parent(self, 0)).matrix();
    const Points tv = t.value(t.parent(self, 1)).matrix();
    const Tensor& wt = t.value(t.parent(self, 2));
    const Eigen::VectorXd wv =
        Eigen::Map<const Eigen::VectorXd>(wt.data(), static_cast<Eigen::Index>(wt.size()));
    const ProcrustesGradients pg = procrustes_backward(sol, xv, tv, wv, gR, gt);
    if (Tensor* gx = t.grad_slot(t.parent(self, 0))) gx->matrix() += pg.x;
    if (Tensor* gy = t.grad_slot(t.parent(self, 1))) gy->matrix() += pg.targets;
    if (Tensor* gw = t.grad_slot(t.parent(self, 2))) {
      for (std::size_t j = 0; j < gw->size(); ++j) (*gw)[j] += pg.weights(static_cast<Eigen::Index>(j));
    }
  });
}

}  // namespace ops

}  // namespace rpm_align
