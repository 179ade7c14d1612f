#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "engshift/common.hpp"
#include "engshift/stats.hpp"

namespace engshift {

struct OlsFit {
    Eigen::VectorXd coef;
    Eigen::VectorXd se;
    Eigen::MatrixXd vcov;
    double sigma2 = 0.0;
    double r2 = 0.0;
    double adjusted_r2 = 0.0;
    long n = 0;
    long rank = 0;
};

// Ordinary least squares with classical standard errors. Throws
// SingularError when the design is rank deficient.
inline OlsFit ols(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
    const long n = X.rows(), p = X.cols();
    if (n < p) throw InsufficientDataError("ols: fewer rows than columns");
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    qr.setThreshold(1e-10);
    if (qr.rank() < p) throw SingularError("ols: singular design matrix");
    OlsFit fit;
    fit.coef = qr.solve(y);
    fit.n = n;
    fit.rank = p;
    const Eigen::VectorXd resid = y - X * fit.coef;
    const double rss = resid.squaredNorm();
    const double dof = static_cast<double>(n - p);
    fit.sigma2 = dof > 0 ? rss / dof : 0.0;
    const Eigen::MatrixXd xtx_inv =
        (X.transpose() * X).ldlt().solve(Eigen::MatrixXd::Identity(p, p));
    fit.vcov = fit.sigma2 * xtx_inv;
    fit.se = fit.vcov.diagonal().array().max(0.0).sqrt();
    const double ybar = y.mean();
    const double tss = (y.array() - ybar).square().sum();
    fit.r2 = tss > 0 ? 1.0 - rss / tss : 1.0;
    fit.adjusted_r2 =
        dof > 0 && tss > 0 ? 1.0 - (rss / dof) / (tss / static_cast<double>(n - 1)) : fit.r2;
    return fit;
}

} // namespace engshift
