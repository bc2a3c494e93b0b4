#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace nesc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

class SingularMatrixError : public std::runtime_error {
 public:
  int pivot;
  explicit SingularMatrixError(int k)
      : std::runtime_error("matrix is singular to working precision at pivot " + std::to_string(k)), pivot(k) {}
};

// LU with partial pivoting; the factorization is kept for repeated solves.
class LUFactor {
 public:
  LUFactor() = default;
  explicit LUFactor(MatrixXd A) { factor(std::move(A)); }

  void factor(MatrixXd A) {
    const int n = static_cast<int>(A.rows());
    if (A.cols() != n) throw std::invalid_argument("LUFactor: matrix must be square");
    double amax = n ? A.cwiseAbs().maxCoeff() : 0.0;
    double thresh = n * std::numeric_limits<double>::epsilon() * amax;
    perm_.resize(n);
    for (int k = 0; k < n; ++k) {
      Eigen::Index r;
      double p = A.col(k).tail(n - k).cwiseAbs().maxCoeff(&r);
      r += k;
      if (!(p > thresh)) throw SingularMatrixError(k);
      perm_[k] = static_cast<int>(r);
      if (r != k) A.row(k).swap(A.row(r));
      A.col(k).tail(n - k - 1) /= A(k, k);
      A.bottomRightCorner(n - k - 1, n - k - 1).noalias() -=
          A.col(k).tail(n - k - 1) * A.row(k).tail(n - k - 1);
    }
    lu_ = std::move(A);
  }

  int size() const { return static_cast<int>(lu_.rows()); }
  const MatrixXd& packed() const { return lu_; }
  const std::vector<int>& pivots() const { return perm_; }

  template <class Derived>
  MatrixXd solve(const Eigen::MatrixBase<Derived>& b) const {
    MatrixXd x = b;
    for (int k = 0; k < size(); ++k)
      if (perm_[k] != k) x.row(k).swap(x.row(perm_[k]));
    lu_.triangularView<Eigen::UnitLower>().solveInPlace(x);
    lu_.triangularView<Eigen::Upper>().solveInPlace(x);
    return x;
  }

  double min_abs_pivot() const { return lu_.diagonal().cwiseAbs().minCoeff(); }

  void set(MatrixXd lu, std::vector<int> perm) {
    lu_ = std::move(lu);
    perm_ = std::move(perm);
  }

 private:
  MatrixXd lu_;
  std::vector<int> perm_;
};

inline VectorXd solve_dense(const MatrixXd& A, const VectorXd& b) { return LUFactor(A).solve(b); }

struct GmresResult {
  VectorXd x;
  std::vector<double> history;  // relative residual after each iteration, history[0] = 1
  int iterations = 0;
  bool converged = false;
};

using LinearOp = std::function<void(const VectorXd&, VectorXd&)>;

// Full GMRES (no restart), modified Gram-Schmidt with one reorthogonalization pass.
inline GmresResult gmres(const LinearOp& apply, const VectorXd& b, double tol, int max_iter,
                         const std::function<void(int, double)>& progress = {}) {
  const Eigen::Index n = b.size();
  GmresResult res;
  res.x = VectorXd::Zero(n);
  double beta = b.norm();
  res.history.push_back(1.0);
  if (beta == 0.0) {
    res.converged = true;
    return res;
  }
  std::vector<VectorXd> V;
  V.push_back(b / beta);
  MatrixXd H = MatrixXd::Zero(max_iter + 1, max_iter);
  std::vector<double> cs(max_iter), sn(max_iter);
  VectorXd g = VectorXd::Zero(max_iter + 1);
  g(0) = beta;
  VectorXd w(n);
  int k = 0;
  double rel = 1.0;
  while (k < max_iter) {
    apply(V[k], w);
    for (int pass = 0; pass < 2; ++pass)
      for (int j = 0; j <= k; ++j) {
        double h = V[j].dot(w);
        H(j, k) += h;
        w.noalias() -= h * V[j];
      }
    double hn = w.norm();
    H(k + 1, k) = hn;
    for (int j = 0; j < k; ++j) {
      double t = cs[j] * H(j, k) + sn[j] * H(j + 1, k);
      H(j + 1, k) = -sn[j] * H(j, k) + cs[j] * H(j + 1, k);
      H(j, k) = t;
    }
    double r = std::hypot(H(k, k), H(k + 1, k));
    cs[k] = H(k, k) / r;
    sn[k] = H(k + 1, k) / r;
    H(k, k) = r;
    H(k + 1, k) = 0.0;
    g(k + 1) = -sn[k] * g(k);
    g(k) = cs[k] * g(k);
    ++k;
    rel = std::abs(g(k)) / beta;
    res.history.push_back(std::min(rel, res.history.back()));
    if (progress) progress(k, rel);
    if (rel <= tol || hn == 0.0) break;
    V.push_back(w / hn);
  }
  VectorXd y = H.topLeftCorner(k, k).triangularView<Eigen::Upper>().solve(g.head(k));
  for (int j = 0; j < k; ++j) res.x.noalias() += y(j) * V[j];
  res.iterations = k;
  res.converged = rel <= tol;
  return res;
}

struct IDResult {
  int rank = 0;
  std::vector<int> skeleton;  // column indices of A forming the skeleton
  MatrixXd coeffs;            // rank x n, with A ~= A(:, skeleton) * coeffs
};

// Interpolative decomposition via column-pivoted Householder QR, stopped once the
// largest remaining column norm falls below tol * |R_00|.
inline IDResult interp_decomp(MatrixXd A, double tol) {
  const Eigen::Index m = A.rows(), n = A.cols();
  IDResult id;
  if (m == 0 || n == 0) return id;
  std::vector<int> perm(n);
  for (Eigen::Index j = 0; j < n; ++j) perm[j] = static_cast<int>(j);
  VectorXd norms2 = A.colwise().squaredNorm().transpose();
  VectorXd exact2 = norms2;
  const Eigen::Index kmax = std::min(m, n);
  double r00 = 0;
  Eigen::Index k = 0;
  VectorXd v(m), wrow(n);
  for (; k < kmax; ++k) {
    Eigen::Index jp;
    norms2.tail(n - k).maxCoeff(&jp);
    jp += k;
    // refresh a norm whose downdate lost too many digits
    double cand = std::sqrt(std::max(0.0, norms2(jp)));
    if (norms2(jp) < 1e-10 * exact2(jp)) {
      norms2(jp) = A.col(jp).tail(m - k).squaredNorm();
      exact2(jp) = norms2(jp);
      --k;
      continue;
    }
    if (k == 0) r00 = cand;
    if (cand <= tol * r00 || cand == 0.0) break;
    if (jp != k) {
      A.col(k).swap(A.col(jp));
      std::swap(norms2(k), norms2(jp));
      std::swap(exact2(k), exact2(jp));
      std::swap(perm[k], perm[jp]);
    }
    auto x = A.col(k).tail(m - k);
    double alpha = x.norm();
    if (x(0) > 0) alpha = -alpha;
    v.head(m - k) = x;
    v(0) -= alpha;
    double vn2 = v.head(m - k).squaredNorm();
    if (vn2 > 0 && k + 1 < n) {
      double tau = 2.0 / vn2;
      auto rest = A.bottomRightCorner(m - k, n - k - 1);
      wrow.head(n - k - 1).noalias() = rest.transpose() * v.head(m - k);
      rest.noalias() -= (tau * v.head(m - k)) * wrow.head(n - k - 1).transpose();
    }
    A(k, k) = alpha;
    A.col(k).tail(m - k - 1).setZero();
    if (k + 1 < n) {
      auto row = A.row(k).tail(n - k - 1);
      norms2.tail(n - k - 1) -= row.cwiseAbs2().transpose();
      // downdated norms that lost half their digits are recomputed
      for (Eigen::Index j = k + 1; j < n; ++j)
        if (norms2(j) <= 1e-8 * exact2(j)) {
          norms2(j) = A.col(j).tail(m - k - 1).squaredNorm();
          exact2(j) = norms2(j);
        }
    }
  }
  const int p = static_cast<int>(k);
  id.rank = p;
  id.skeleton.assign(perm.begin(), perm.begin() + p);
  id.coeffs = MatrixXd::Zero(p, n);
  if (p == 0) return id;
  MatrixXd T = A.topLeftCorner(p, p).triangularView<Eigen::Upper>().solve(A.topRightCorner(p, n - p));
  for (int j = 0; j < p; ++j) id.coeffs(j, perm[j]) = 1.0;
  for (Eigen::Index j = p; j < n; ++j) id.coeffs.col(perm[j]) = T.col(j - p);
  return id;
}

}  // namespace nesc
