#ifndef GEOWALK_TESTUTIL_HPP
#define GEOWALK_TESTUTIL_HPP

#include <cmath>
#include <functional>
#include <vector>

#include "geowalk/rng.hpp"
#include "geowalk/tensor.hpp"

// Shared helpers for the test binaries; not part of the library.

namespace geowalk::testutil {

using DMat = ad::Mat<double>;

inline DMat random_mat(Rng& rng, int r, int c, double scale = 1.0) {
    DMat m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = rng.normal() * scale;
    return m;
}

inline double max_abs_diff(const DMat& a, const DMat& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return 1e300;
    return (a - b).cwiseAbs().maxCoeff();
}

// Compares tape gradients against central finite differences on a scalar
// loss.  `build` must construct the identical graph from the leaf ids it is
// handed (one per parameter, in order) and return the loss node.
struct GradCheck {
    std::vector<DMat*> params;
    std::function<int(ad::Tape<double>&, const std::vector<int>&)> build;
    double h = 1e-5;

    double eval() const {
        ad::Tape<double> tape;
        std::vector<int> ids;
        ids.reserve(params.size());
        for (DMat* p : params) ids.push_back(tape.leaf(*p));
        const int loss = build(tape, ids);
        return tape.val(loss)(0, 0);
    }

    // Returns the worst relative error across every parameter entry.
    double run() const {
        ad::Tape<double> tape;
        std::vector<int> ids;
        ids.reserve(params.size());
        for (DMat* p : params) ids.push_back(tape.leaf(*p));
        const int loss = build(tape, ids);
        tape.backward(loss);
        std::vector<DMat> analytic;
        analytic.reserve(ids.size());
        for (int id : ids) analytic.push_back(tape.grad(id));

        double worst = 0.0;
        for (std::size_t k = 0; k < params.size(); ++k) {
            DMat& p = *params[k];
            for (Eigen::Index i = 0; i < p.rows(); ++i)
                for (Eigen::Index j = 0; j < p.cols(); ++j) {
                    const double orig = p(i, j);
                    p(i, j) = orig + h;
                    const double up = eval();
                    p(i, j) = orig - h;
                    const double dn = eval();
                    p(i, j) = orig;
                    const double fd = (up - dn) / (2.0 * h);
                    const double an = analytic[k](i, j);
                    const double rel =
                        std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
                    worst = std::max(worst, rel);
                }
        }
        return worst;
    }
};

}  // namespace geowalk::testutil

#endif
