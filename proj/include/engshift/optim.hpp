#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "engshift/common.hpp"

namespace engshift {

// Quasi-Newton (BFGS) minimizer with Armijo backtracking and optional lower
// bounds (projection with gradient masking at active bounds). The objective
// callback fills the gradient only when grad != nullptr; non-finite values
// reject the trial step.

struct BfgsOptions {
    int max_iter = 500;
    double grad_tol = 1e-5;      // max-norm of the (masked) gradient
    double rel_obj_tol = 1e-9;   // relative objective change stop
    double first_step_cap = 1.0; // cap on the very first step length
    double step_norm_cap = 30.0; // cap on any proposed step length
    int max_backtracks = 28;
};

struct BfgsResult {
    Eigen::VectorXd x;
    double fx = std::numeric_limits<double>::quiet_NaN();
    Eigen::VectorXd grad;
    int iterations = 0;
    bool converged = false;   // gradient criterion met
    bool stalled = false;     // stopped on relative objective change
    std::vector<double> trace;  // accepted objective values
};

using Objective = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

inline BfgsResult bfgs_minimize(const Objective& f, Eigen::VectorXd x0,
                                const BfgsOptions& opt = {},
                                const Eigen::VectorXd* lower_bounds = nullptr,
                                const Eigen::VectorXd* upper_bounds = nullptr) {
    const long n = x0.size();
    BfgsResult res;
    auto project = [&](Eigen::VectorXd& x) {
        for (long i = 0; i < n; ++i) {
            if (lower_bounds) x(i) = std::max(x(i), (*lower_bounds)(i));
            if (upper_bounds) x(i) = std::min(x(i), (*upper_bounds)(i));
        }
    };
    auto mask_grad = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
        for (long i = 0; i < n; ++i) {
            if (lower_bounds && x(i) <= (*lower_bounds)(i) + 1e-12 && g(i) > 0.0) g(i) = 0.0;
            if (upper_bounds && x(i) >= (*upper_bounds)(i) - 1e-12 && g(i) < 0.0) g(i) = 0.0;
        }
    };

    project(x0);
    Eigen::VectorXd x = x0, g(n);
    double fx = f(x, &g);
    if (!std::isfinite(fx)) throw ConvergenceError("bfgs: objective not finite at start");
    mask_grad(x, g);
    res.trace.push_back(fx);

    Eigen::MatrixXd B = Eigen::MatrixXd::Identity(n, n);  // inverse Hessian approx
    bool first = true;
    int small_changes = 0, restarts = 0;
    for (int it = 0; it < opt.max_iter; ++it) {
        res.iterations = it;
        if (g.cwiseAbs().maxCoeff() <= opt.grad_tol) {
            res.converged = true;
            break;
        }
        Eigen::VectorXd d = -B * g;
        if (d.dot(g) >= 0.0) {  // not a descent direction; reset
            B.setIdentity();
            d = -g;
        }
        if (first && d.norm() > opt.first_step_cap) d *= opt.first_step_cap / d.norm();
        if (d.norm() > opt.step_norm_cap) d *= opt.step_norm_cap / d.norm();

        const double slope = g.dot(d);
        double alpha = 1.0;
        double fnew = std::numeric_limits<double>::infinity();
        Eigen::VectorXd xnew, gnew(n);
        bool accepted = false;
        for (int bt = 0; bt < opt.max_backtracks; ++bt) {
            xnew = x + alpha * d;
            project(xnew);
            const double ft = f(xnew, nullptr);
            if (std::isfinite(ft) && ft <= fx + 1e-4 * alpha * slope) {
                fnew = ft;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted) {
            res.stalled = true;
            break;
        }
        fnew = f(xnew, &gnew);
        mask_grad(xnew, gnew);

        const Eigen::VectorXd s = xnew - x, yv = gnew - g;
        const double sy = s.dot(yv);
        if (sy > 1e-12 * s.norm() * yv.norm()) {
            if (first) B *= sy / yv.squaredNorm();  // initial curvature scaling
            const Eigen::VectorXd By = B * yv;
            const double yBy = yv.dot(By);
            // BFGS inverse update
            B += ((sy + yBy) / (sy * sy)) * (s * s.transpose()) -
                 (By * s.transpose() + s * By.transpose()) / sy;
        }
        const double rel = std::fabs(fx - fnew) / std::max(1.0, std::fabs(fx));
        x = xnew;
        g = gnew;
        fx = fnew;
        res.trace.push_back(fx);
        first = false;
        // the relative-change stop must persist: tiny steps near the optimum
        // are normal while the gradient criterion is still being polished
        small_changes = rel <= opt.rel_obj_tol ? small_changes + 1 : 0;
        if (small_changes >= 10) {
            if (g.cwiseAbs().maxCoeff() <= opt.grad_tol) {
                res.converged = true;
                break;
            }
            if (restarts < 2) {  // curvature resets before declaring a stall
                B.setIdentity();
                ++restarts;
                small_changes = 0;
                continue;
            }
            res.stalled = true;
            break;
        }
    }
    if (!res.converged) res.converged = g.cwiseAbs().maxCoeff() <= opt.grad_tol;
    res.x = x;
    res.fx = fx;
    res.grad = g;
    return res;
}

// Brent minimizer for one-dimensional profiles.
inline double brent_minimize(const std::function<double(double)>& f, double a, double b,
                             double tol = 1e-9, int max_iter = 200) {
    const double gold = 0.3819660112501051;
    double x = a + gold * (b - a), w = x, v = x;
    double fx = f(x), fw = fx, fv = fx;
    double d = 0.0, e = 0.0;
    for (int it = 0; it < max_iter; ++it) {
        const double m = 0.5 * (a + b);
        const double tol1 = tol * std::fabs(x) + 1e-12, tol2 = 2 * tol1;
        if (std::fabs(x - m) <= tol2 - 0.5 * (b - a)) break;
        double p = 0, q = 0, r = 0;
        bool parabolic = false;
        if (std::fabs(e) > tol1) {
            r = (x - w) * (fx - fv);
            q = (x - v) * (fx - fw);
            p = (x - v) * q - (x - w) * r;
            q = 2 * (q - r);
            if (q > 0) p = -p;
            q = std::fabs(q);
            if (std::fabs(p) < std::fabs(0.5 * q * e) && p > q * (a - x) && p < q * (b - x)) {
                e = d;
                d = p / q;
                parabolic = true;
            }
        }
        if (!parabolic) {
            e = (x < m) ? b - x : a - x;
            d = gold * e;
        }
        const double u = (std::fabs(d) >= tol1) ? x + d : x + (d > 0 ? tol1 : -tol1);
        const double fu = f(u);
        if (fu <= fx) {
            if (u < x) b = x; else a = x;
            v = w; fv = fw;
            w = x; fw = fx;
            x = u; fx = fu;
        } else {
            if (u < x) a = u; else b = u;
            if (fu <= fw || w == x) {
                v = w; fv = fw;
                w = u; fw = fu;
            } else if (fu <= fv || v == x || v == w) {
                v = u; fv = fu;
            }
        }
    }
    return x;
}

} // namespace engshift
