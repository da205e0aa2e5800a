#pragma once

#include "rpm_align/geom.hpp"
#include "rpm_align/nn/tape.hpp"

#include <vector>

namespace rpm_align {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Outlier threshold alpha (squared-distance units) and inverse temperature
/// beta of the softassign step.
struct AnnealParams {
  double alpha = 0.0;
  double beta = 1.0;

  bool is_valid() const { return alpha >= 0.0 && beta > 0.0; }
};

/// Soft assignment between J source and K reference points, augmented with a
/// slack row (reference points matched to nothing) and a slack column
/// (source points matched to nothing).
struct MatchMatrix {
  Matrix values;              ///< J x K real block
  Eigen::VectorXd slack_row;  ///< K entries
  Eigen::VectorXd slack_col;  ///< J entries
  double slack_corner = 1.0;

  /// (J+1) x (K+1) matrix with the slack row and column appended.
  Matrix augmented() const;
  /// max_j |sum of real row j over K+1 entries - 1|
  double row_residual() const;
  /// max_k |sum of real column k over J+1 entries - 1|
  double col_residual() const;
};

enum class SlackMode { kWithSlack, kNoSlack };

inline constexpr double kWeightFloor = 1e-12;
inline constexpr double kSvdGapEps = 1e-8;
inline constexpr double kRankTolerance = 1e-12;

/// exp(-beta * (|x_j - y_k|^2 - alpha)).
Matrix init_match_spatial(const Points& x, const Points& y, const AnnealParams& p);
/// exp(-beta * (|fx_j - fy_k|^2 - alpha)) over feature rows.
Matrix init_match_feature(const Matrix& fx, const Matrix& fy, const AnnealParams& p);
/// Log-domain counterparts, -beta * (d^2 - alpha); these never under/overflow.
Matrix log_match_spatial(const Points& x, const Points& y, const AnnealParams& p);
Matrix log_match_feature(const Matrix& fx, const Matrix& fy, const AnnealParams& p);

/// Log-domain alternating normalisation. With slack the input is padded by
/// a row and column of log(1) = 0; each iteration normalises the J real rows
/// over K+1 entries, then the K real columns over J+1 entries. The slack row
/// and column are never normalised themselves.
///
/// Returns the (J+1) x (K+1) log matrix with slack, J x K without. When
/// `states` is non-null it receives the matrix after every half pass (input
/// first), which is what sinkhorn_log_backward needs.
Matrix sinkhorn_log(const Matrix& log_raw, int n_iters, SlackMode slack,
                    std::vector<Matrix>* states = nullptr);

/// Vector-Jacobian product of sinkhorn_log: gradient w.r.t. `log_raw` given
/// the gradient w.r.t. its output.
Matrix sinkhorn_log_backward(const std::vector<Matrix>& states, const Matrix& grad_out, SlackMode slack);

/// Sinkhorn on a strictly positive matrix. In kNoSlack mode the slack
/// fields of the result are empty.
MatchMatrix sinkhorn(const Matrix& raw, int n_iters, SlackMode slack = SlackMode::kWithSlack);

/// Splits an exponentiated augmented matrix into a MatchMatrix.
MatchMatrix match_from_augmented(const Matrix& augmented);

/// Per-source-point soft targets and weights.
struct Correspondences {
  Points targets;           ///< J x 3, y_hat_j
  Eigen::VectorXd weights;  ///< J, w_j = sum_k m_jk (0 where below the floor)
};

/// y_hat_j = sum_k m_jk y_k / w_j. Rows with w_j <= 1e-12 get w_j = 0 and a
/// zero target. Throws SolverError(kNoInliers) when every row is dropped.
Correspondences extract_correspondences(const Matrix& real_block, const Points& y);
Correspondences extract_correspondences(const MatchMatrix& m, const Points& y);

/// Forward quantities of the weighted Procrustes solve, kept for backward.
struct ProcrustesSolution {
  RigidTransform transform;
  Mat3 U;
  Mat3 V;
  Vec3 singular_values;
  double det_sign = 1.0;
  Vec3 x_centroid;
  Vec3 y_centroid;
  double weight_sum = 0.0;
};

/// argmin over SE(3) of sum_j w_j |R x_j + t - y_j|^2 via SVD of the
/// normalised-weight cross-covariance H = U S V^T, R = V diag(1,1,d) U^T.
/// Throws SolverError(kRankDeficient) when the second singular value of H is
/// below 1e-12 and SolverError(kNoInliers) when all weights vanish.
ProcrustesSolution solve_weighted_procrustes(const Points& x, const Points& targets,
                                             const Eigen::VectorXd& weights);
RigidTransform weighted_procrustes(const Points& x, const Correspondences& c);

struct ProcrustesGradients {
  Points x;                 ///< J x 3
  Points targets;           ///< J x 3
  Eigen::VectorXd weights;  ///< J
};

/// Gradients of a scalar loss w.r.t. the Procrustes inputs, given dL/dR and
/// dL/dt. The inverse singular-value gaps 1/g are regularised to
/// g / (g^2 + eps_svd^2), which keeps the map total at ties.
ProcrustesGradients procrustes_backward(const ProcrustesSolution& sol, const Points& x,
                                        const Points& targets, const Eigen::VectorXd& weights,
                                        const Mat3& grad_rotation, const Vec3& grad_translation);

namespace ops {

/// -beta * (dist - alpha) with `anneal` = [alpha, beta].
nn::Var anneal_affinity(nn::Var dist, nn::Var anneal);

/// Differentiable sinkhorn_log (unrolled iterations).
nn::Var sinkhorn_log(nn::Var log_raw, int n_iters, SlackMode slack);

/// From the (J+1)x(K+1) or JxK match matrix (not log) to a J x 4 tensor
/// [y_hat_j, w_j]. `has_slack` says whether the last row/column are slack.
nn::Var correspondences(nn::Var match, const Points& y, bool has_slack);

/// Weighted Procrustes over J x 3 sources, J x 3 targets and J weights.
/// Output is [4, 3]: rows 0..2 the rotation, row 3 the translation.
nn::Var weighted_procrustes(nn::Var x, nn::Var targets, nn::Var weights);

}  // namespace ops

/// Unpacks the [4, 3] tensor produced by ops::weighted_procrustes.
RigidTransform transform_from_tensor(const nn::Tensor& t);

}  // namespace rpm_align
