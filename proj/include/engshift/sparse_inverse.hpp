#pragma once

#include <Eigen/Sparse>
#include <algorithm>
#include <vector>

#include "engshift/common.hpp"

namespace engshift {

using SpMat = Eigen::SparseMatrix<double>;

// Selected inverse of a sparse SPD matrix from its simplicial LDL^T factor
// (Takahashi equations). Computes every entry of the inverse lying in the
// filled pattern of L, which covers all pairs that are structurally nonzero
// in the original matrix. Lookup handles are stable across refactorizations
// with the same pattern.
class SelectedInverse {
public:
    void compute(const Eigen::SimplicialLDLT<SpMat>& ldlt) {
        const SpMat L = ldlt.matrixL();
        if (!built_) build_pattern(ldlt, L);
        // refresh numeric values of L and D
        size_t pos = 0;
        for (long j = 0; j < n_; ++j) {
            for (SpMat::InnerIterator it(L, j); it; ++it) {
                if (it.row() == j) continue;
                lval_[pos++] = it.value();
            }
        }
        if (pos != lval_.size()) throw Error("internal", "selected inverse: pattern changed");
        const auto& D = ldlt.vectorD();

        // Takahashi recursion, columns processed last to first
        for (long j = n_ - 1; j >= 0; --j) {
            const long begin = colptr_[static_cast<size_t>(j)];
            const long end = colptr_[static_cast<size_t>(j) + 1];
            for (long idx = begin; idx < end; ++idx) {
                const long i = rowidx_[static_cast<size_t>(idx)];
                double s = 0.0;
                for (long k2 = begin; k2 < end; ++k2) {
                    const long k = rowidx_[static_cast<size_t>(k2)];
                    s += lval_[static_cast<size_t>(k2)] * sigma_permuted(k, i);
                }
                sval_[static_cast<size_t>(idx)] = -s;
            }
            double sd = 1.0 / D(j);
            for (long k2 = begin; k2 < end; ++k2)
                sd -= lval_[static_cast<size_t>(k2)] * sval_[static_cast<size_t>(k2)];
            sdiag_[static_cast<size_t>(j)] = sd;
        }
    }

    // stable lookup handle for entry (i, j) in original (unpermuted) indices;
    // the pair must be structurally present in the factor pattern
    long handle(long i, long j) const {
        long pi = perm_[static_cast<size_t>(i)], pj = perm_[static_cast<size_t>(j)];
        if (pi == pj) return static_cast<long>(sval_.size()) + pi;
        if (pi < pj) std::swap(pi, pj);
        const long begin = colptr_[static_cast<size_t>(pj)], end = colptr_[static_cast<size_t>(pj) + 1];
        const auto it = std::lower_bound(rowidx_.begin() + begin, rowidx_.begin() + end, pi);
        if (it == rowidx_.begin() + end || *it != pi)
            throw Error("internal", "selected inverse: entry outside factor pattern");
        return static_cast<long>(it - rowidx_.begin());
    }

    double value(long h) const {
        const auto nz = static_cast<long>(sval_.size());
        return h < nz ? sval_[static_cast<size_t>(h)] : sdiag_[static_cast<size_t>(h - nz)];
    }

    double entry(long i, long j) const { return value(handle(i, j)); }

    long size() const { return n_; }

private:
    void build_pattern(const Eigen::SimplicialLDLT<SpMat>& ldlt, const SpMat& L) {
        n_ = L.rows();
        const auto& P = ldlt.permutationP();
        perm_.assign(static_cast<size_t>(n_), 0);
        for (long i = 0; i < n_; ++i) perm_[static_cast<size_t>(i)] = P.indices()(i);
        colptr_.assign(static_cast<size_t>(n_) + 1, 0);
        rowidx_.clear();
        for (long j = 0; j < n_; ++j) {
            colptr_[static_cast<size_t>(j)] = static_cast<long>(rowidx_.size());
            for (SpMat::InnerIterator it(L, j); it; ++it) {
                if (it.row() == j) continue;  // unit diagonal
                rowidx_.push_back(it.row());
            }
        }
        colptr_[static_cast<size_t>(n_)] = static_cast<long>(rowidx_.size());
        lval_.assign(rowidx_.size(), 0.0);
        sval_.assign(rowidx_.size(), 0.0);
        sdiag_.assign(static_cast<size_t>(n_), 0.0);
        built_ = true;
    }

    // entry of the permuted-space inverse; (k, i) must be in the pattern
    double sigma_permuted(long k, long i) const {
        if (k == i) return sdiag_[static_cast<size_t>(k)];
        long hi = std::max(k, i), lo = std::min(k, i);
        const long begin = colptr_[static_cast<size_t>(lo)], end = colptr_[static_cast<size_t>(lo) + 1];
        const auto it = std::lower_bound(rowidx_.begin() + begin, rowidx_.begin() + end, hi);
        if (it == rowidx_.begin() + end || *it != hi)
            throw Error("internal", "selected inverse: fill pattern not chordal");
        return sval_[static_cast<size_t>(it - rowidx_.begin())];
    }

    bool built_ = false;
    long n_ = 0;
    std::vector<long> perm_;
    std::vector<long> colptr_;
    std::vector<long> rowidx_;
    std::vector<double> lval_;
    std::vector<double> sval_;
    std::vector<double> sdiag_;
};

} // namespace engshift
