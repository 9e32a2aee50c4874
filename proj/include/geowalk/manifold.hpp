#ifndef GEOWALK_MANIFOLD_HPP
#define GEOWALK_MANIFOLD_HPP

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "geowalk/error.hpp"

// Closed-form kernels for the three constant-curvature spaces used
// throughout: flat R^d, the hyperboloid (Lorentz) model for c < 0 and the
// round sphere of radius 1/sqrt(c) for c > 0.  Curved points live in an
// ambient R^{d+1}; tangent vectors are ambient vectors satisfying the
// orthogonality constraint of the respective metric.

namespace geowalk {

inline constexpr double kPi = 3.14159265358979323846;

enum class Kind { Euclidean, Hyperbolic, Spherical };

inline const char* kind_name(Kind k) {
    switch (k) {
        case Kind::Euclidean: return "euclidean";
        case Kind::Hyperbolic: return "hyperbolic";
        case Kind::Spherical: return "spherical";
    }
    return "?";
}

inline Kind kind_from_name(const std::string& s) {
    if (s == "euclidean") return Kind::Euclidean;
    if (s == "hyperbolic") return Kind::Hyperbolic;
    if (s == "spherical") return Kind::Spherical;
    throw ValidationError("unknown geometry kind '" + s + "'");
}

struct ManifoldSpec {
    Kind kind = Kind::Euclidean;
    double curvature = 0.0;

    static ManifoldSpec euclidean() { return {Kind::Euclidean, 0.0}; }
    static ManifoldSpec hyperbolic(double c = -1.0) { return {Kind::Hyperbolic, c}; }
    static ManifoldSpec spherical(double c = 1.0) { return {Kind::Spherical, c}; }

    void validate() const {
        switch (kind) {
            case Kind::Euclidean:
                if (curvature != 0.0)
                    throw ValidationError("euclidean space requires curvature 0, got " +
                                          std::to_string(curvature));
                break;
            case Kind::Hyperbolic:
                if (!(curvature < 0.0) || !std::isfinite(curvature))
                    throw ValidationError("hyperbolic space requires curvature < 0, got " +
                                          std::to_string(curvature));
                break;
            case Kind::Spherical:
                if (!(curvature > 0.0) || !std::isfinite(curvature))
                    throw ValidationError("spherical space requires curvature > 0, got " +
                                          std::to_string(curvature));
                break;
        }
    }

    bool curved() const { return kind != Kind::Euclidean; }
    // Points of an intrinsically d-dimensional space need d (flat) or d+1
    // (curved) stored coordinates.
    int ambient_dim(int dim) const { return curved() ? dim + 1 : dim; }
    int intrinsic_dim(int ambient) const { return curved() ? ambient - 1 : ambient; }

    bool operator==(const ManifoldSpec& o) const {
        return kind == o.kind && curvature == o.curvature;
    }
};

struct Point {
    ManifoldSpec spec;
    Eigen::VectorXd coords;  // ambient coordinates
};

struct Tangent {
    Point base;
    Eigen::VectorXd vec;  // ambient coordinates, metric-orthogonal to base
};

// --- guarded ratio functions -------------------------------------------
// Each has a removable singularity at 0; below the cutoff the Taylor series
// is exact to double precision.

namespace series {

inline double sinhc(double s) {  // sinh(s)/s
    if (std::abs(s) < 1e-4) {
        const double s2 = s * s;
        return 1.0 + s2 / 6.0 + s2 * s2 / 120.0;
    }
    return std::sinh(s) / s;
}

inline double sinc(double s) {  // sin(s)/s
    if (std::abs(s) < 1e-4) {
        const double s2 = s * s;
        return 1.0 - s2 / 6.0 + s2 * s2 / 120.0;
    }
    return std::sin(s) / s;
}

inline double inv_sinhc(double s) {  // s/sinh(s)
    if (std::abs(s) < 1e-4) {
        const double s2 = s * s;
        return 1.0 - s2 / 6.0 + 7.0 * s2 * s2 / 360.0;
    }
    return s / std::sinh(s);
}

inline double inv_sinc(double s) {  // s/sin(s)
    if (std::abs(s) < 1e-4) {
        const double s2 = s * s;
        return 1.0 + s2 / 6.0 + 7.0 * s2 * s2 / 360.0;
    }
    return s / std::sin(s);
}

inline double tanhc(double s) {  // tanh(s)/s
    if (std::abs(s) < 1e-4) {
        const double s2 = s * s;
        return 1.0 - s2 / 3.0 + 2.0 * s2 * s2 / 15.0;
    }
    return std::tanh(s) / s;
}

inline double atanhc(double s) {  // artanh(s)/s
    if (std::abs(s) < 1e-4) {
        const double s2 = s * s;
        return 1.0 + s2 / 3.0 + s2 * s2 / 5.0;
    }
    return std::atanh(s) / s;
}

// Derivative ratios used by the reverse-mode rules of the fused map ops.
// Each equals d(ratio)/ds / s and is again even in s.

inline double d_sinhc(double s) {  // (s*cosh - sinh)/s^3
    if (std::abs(s) < 1e-3) {
        const double s2 = s * s;
        return 1.0 / 3.0 + s2 / 30.0 + s2 * s2 / 840.0;
    }
    return (s * std::cosh(s) - std::sinh(s)) / (s * s * s);
}

inline double d_sinc(double s) {  // (s*cos - sin)/s^3
    if (std::abs(s) < 1e-3) {
        const double s2 = s * s;
        return -1.0 / 3.0 + s2 / 30.0 - s2 * s2 / 840.0;
    }
    return (s * std::cos(s) - std::sin(s)) / (s * s * s);
}

inline double d_inv_sinhc(double s) {  // d(s/sinh)/ds / s = (sinh - s*cosh)/(s*sinh^2)/s... see below
    // derivative of s/sinh(s) is (sinh - s*cosh)/sinh^2; dividing by s gives
    // an even function with limit -1/3.
    if (std::abs(s) < 1e-3) {
        const double s2 = s * s;
        return -1.0 / 3.0 + 7.0 * s2 / 90.0;
    }
    const double sh = std::sinh(s);
    return (sh - s * std::cosh(s)) / (s * sh * sh);
}

inline double d_inv_sinc(double s) {  // derivative of s/sin(s), over s
    if (std::abs(s) < 1e-3) {
        const double s2 = s * s;
        return 1.0 / 3.0 + 7.0 * s2 / 90.0;
    }
    const double sn = std::sin(s);
    return (sn - s * std::cos(s)) / (s * sn * sn);
}

inline double d_tanhc(double s) {  // d(tanh/s)/ds / s
    if (std::abs(s) < 1e-3) {
        const double s2 = s * s;
        return -2.0 / 3.0 + 8.0 * s2 / 15.0;
    }
    const double t = std::tanh(s);
    return ((1.0 - t * t) - t / s) / (s * s);
}

inline double d_atanhc(double s) {  // d(artanh/s)/ds / s
    if (std::abs(s) < 1e-3) {
        const double s2 = s * s;
        return 2.0 / 3.0 + 4.0 * s2 / 5.0;
    }
    return (1.0 / (1.0 - s * s) - std::atanh(s) / s) / (s * s);
}

}  // namespace series

namespace detail {

inline void require_same_spec(const ManifoldSpec& a, const ManifoldSpec& b, const char* op) {
    if (!(a == b))
        throw ValidationError(std::string(op) + ": operands live on different manifolds (" +
                              kind_name(a.kind) + " c=" + std::to_string(a.curvature) + " vs " +
                              kind_name(b.kind) + " c=" + std::to_string(b.curvature) + ")");
}

inline void require_same_size(Eigen::Index a, Eigen::Index b, const char* op) {
    if (a != b)
        throw DimensionError(std::string(op) + ": size mismatch " + std::to_string(a) + " vs " +
                             std::to_string(b));
}

}  // namespace detail

// Minkowski bilinear form <x,y> = -x0*y0 + sum_{i>=1} xi*yi.
inline double lorentz_inner(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    detail::require_same_size(x.size(), y.size(), "lorentz_inner");
    if (x.size() < 2) throw DimensionError("lorentz_inner: needs at least two components");
    return x.tail(x.size() - 1).dot(y.tail(y.size() - 1)) - x(0) * y(0);
}

// Inner product of the metric the spec's kind uses on ambient vectors.
inline double metric_inner(const ManifoldSpec& spec, const Eigen::VectorXd& x,
                           const Eigen::VectorXd& y) {
    if (spec.kind == Kind::Hyperbolic) return lorentz_inner(x, y);
    detail::require_same_size(x.size(), y.size(), "metric_inner");
    return x.dot(y);
}

// Base point of the exponential chart: the coordinate origin for flat space,
// (1/sqrt|c|, 0, ..., 0) for both curved models.
inline Point origin(const ManifoldSpec& spec, int dim) {
    spec.validate();
    if (dim <= 0) throw DimensionError("origin: dimension must be positive");
    Point p{spec, Eigen::VectorXd::Zero(spec.ambient_dim(dim))};
    if (spec.curved()) p.coords(0) = 1.0 / std::sqrt(std::abs(spec.curvature));
    return p;
}

// Distance of a stored point from exact membership, used by invariant checks:
// |<x,x> - 1/c| for curved spaces (plus sheet check), 0 for flat space.  The
// residual is scaled by the point's squared coordinate magnitude once that
// exceeds 1, because the constraint is a difference of squared coordinates
// and inherits their rounding: a far-out point can never satisfy the raw
// constraint to fixed absolute precision in floating point.
inline double manifold_residual(const Point& p) {
    switch (p.spec.kind) {
        case Kind::Euclidean:
            return 0.0;
        case Kind::Hyperbolic: {
            if (p.coords(0) <= 0.0) return std::abs(p.coords(0)) + 1.0;  // wrong sheet
            return std::abs(lorentz_inner(p.coords, p.coords) - 1.0 / p.spec.curvature) /
                   std::max(1.0, p.coords.squaredNorm());
        }
        case Kind::Spherical:
            return std::abs(p.coords.dot(p.coords) - 1.0 / p.spec.curvature) /
                   std::max(1.0, p.coords.squaredNorm());
    }
    return 0.0;
}

inline void check_on_manifold(const Point& p, const char* op, double tol = 1e-6) {
    const double r = manifold_residual(p);
    if (!(r <= tol))
        throw DomainError(std::string(op) + ": point off the " + kind_name(p.spec.kind) +
                          " manifold, constraint residual " + std::to_string(r));
}

inline double tangency_residual(const Tangent& t) {
    if (!t.base.spec.curved()) return 0.0;
    return std::abs(metric_inner(t.base.spec, t.base.coords, t.vec));
}

inline void check_tangent(const Tangent& t, const char* op, double tol = 1e-6) {
    detail::require_same_size(t.base.coords.size(), t.vec.size(), op);
    const double r = tangency_residual(t);
    if (!(r <= tol))
        throw DomainError(std::string(op) + ": vector not tangent at base point, <p,v> = " +
                          std::to_string(r));
}

// Metric-orthogonal projection of an ambient vector onto T_p M.  For both
// curved models this is w - c*<p,w>*p with the model's inner product; the
// result satisfies <p, proj(w)> = 0 because <p,p> = 1/c.
inline Tangent project_to_tangent(const Point& p, const Eigen::VectorXd& w) {
    detail::require_same_size(p.coords.size(), w.size(), "project_to_tangent");
    Tangent t{p, w};
    if (p.spec.curved()) {
        const double ip = metric_inner(p.spec, p.coords, w);
        t.vec = w - p.spec.curvature * ip * p.coords;
    }
    return t;
}

inline double tangent_norm(const Tangent& t) {
    switch (t.base.spec.kind) {
        case Kind::Euclidean:
            return t.vec.norm();
        case Kind::Hyperbolic: {
            // Tangent vectors of the upper sheet are spacelike; tiny negative
            // values from rounding are flushed to zero.
            const double q = lorentz_inner(t.vec, t.vec);
            return std::sqrt(std::max(q, 0.0));
        }
        case Kind::Spherical:
            return t.vec.norm();
    }
    return 0.0;
}

// exp_p(v): walk the geodesic from p with initial velocity v for unit time.
inline Point exp_map(const Tangent& v) {
    check_tangent(v, "exp_map");
    const ManifoldSpec& spec = v.base.spec;
    if (!spec.curved()) return Point{spec, v.base.coords + v.vec};

    const double root_c = std::sqrt(std::abs(spec.curvature));
    const double s = root_c * tangent_norm(v);
    Point out{spec, Eigen::VectorXd()};
    if (spec.kind == Kind::Hyperbolic) {
        out.coords = std::cosh(s) * v.base.coords + series::sinhc(s) * v.vec;
    } else {
        out.coords = std::cos(s) * v.base.coords + series::sinc(s) * v.vec;
    }
    return out;
}

inline Point exp_map(const Point& p, const Tangent& v) {
    detail::require_same_spec(p.spec, v.base.spec, "exp_map");
    if ((p.coords - v.base.coords).norm() > 1e-9)
        throw ValidationError("exp_map: tangent vector is based at a different point");
    return exp_map(v);
}

// Scaled geodesic angle theta = sqrt(|c|) * distance, computed through the
// ambient chord.  Algebraically equal to arccosh(c<x,y>_L) respectively
// arccos(c<x,y>_S) for on-manifold points (the clamped closed forms), but
// exactly symmetric, exactly zero for identical inputs, and free of the
// arccosh/arccos precision cliff near coincident points.
namespace detail {

// Two branches trade precision: the chord identity 2*asinh(sqrt(-c*Q)/2) is
// exact for nearby points where acosh has no precision left, while the plain
// acosh of the Lorentz product is the stable form once the points are far
// apart and the chord computation starts cancelling.
inline double hyperbolic_angle(const Eigen::VectorXd& x, const Eigen::VectorXd& y, double c) {
    // The regime test keys on c*<x,y> = cosh(angle), which never cancels;
    // testing the chord itself would misfire exactly where it cancels.
    const double ch = c * lorentz_inner(x, y);
    if (ch >= 2.0) return std::acosh(ch);
    const Eigen::VectorXd diff = x - y;
    const double q = std::max(lorentz_inner(diff, diff), 0.0);
    return 2.0 * std::asinh(0.5 * std::sqrt(-c * q));
}

inline double spherical_angle(const Eigen::VectorXd& x, const Eigen::VectorXd& y, double c) {
    const double half_chord = 0.5 * std::sqrt(c) * (x - y).norm();
    return 2.0 * std::asin(std::min(half_chord, 1.0));
}

}  // namespace detail

// log_p(x): the initial velocity of the unit-time geodesic from p to x.
// Throws DomainError for antipodal spherical pairs, where no unique
// geodesic exists.
inline Tangent log_map(const Point& p, const Point& x) {
    detail::require_same_spec(p.spec, x.spec, "log_map");
    detail::require_same_size(p.coords.size(), x.coords.size(), "log_map");
    const ManifoldSpec& spec = p.spec;
    if (!spec.curved()) return Tangent{p, x.coords - p.coords};

    const double c = spec.curvature;
    if (spec.kind == Kind::Hyperbolic) {
        const double ch = std::max(c * lorentz_inner(p.coords, x.coords), 1.0);
        const double s = detail::hyperbolic_angle(p.coords, x.coords, c);
        Eigen::VectorXd u = x.coords - ch * p.coords;
        return Tangent{p, series::inv_sinhc(s) * u};
    }
    const double cs = std::clamp(c * p.coords.dot(x.coords), -1.0, 1.0);
    const double s = detail::spherical_angle(p.coords, x.coords, c);
    // No unique direction once the points are (numerically) antipodal: the
    // cutoff is a geodesic distance within 1e-9 of pi/sqrt(c).
    if (kPi - s <= 1e-9 * std::sqrt(c))
        throw DomainError("log_map: antipodal points on the sphere have no unique geodesic");
    Eigen::VectorXd u = x.coords - cs * p.coords;
    return Tangent{p, series::inv_sinc(s) * u};
}

inline double geodesic_distance(const Point& x, const Point& y) {
    detail::require_same_spec(x.spec, y.spec, "geodesic_distance");
    detail::require_same_size(x.coords.size(), y.coords.size(), "geodesic_distance");
    switch (x.spec.kind) {
        case Kind::Euclidean:
            return (x.coords - y.coords).norm();
        case Kind::Hyperbolic: {
            const double c = x.spec.curvature;
            return detail::hyperbolic_angle(x.coords, y.coords, c) / std::sqrt(-c);
        }
        case Kind::Spherical: {
            const double c = x.spec.curvature;
            return detail::spherical_angle(x.coords, y.coords, c) / std::sqrt(c);
        }
    }
    return 0.0;
}

// --- origin charts -------------------------------------------------------
// Tangent vectors at the origin have first ambient coordinate 0 in both
// curved models, so T_o M is identified with R^d by dropping it.  These
// charts carry catalog features onto the manifolds and bring encoder
// activations back to flat coordinates.

inline Point exp0(const ManifoldSpec& spec, const Eigen::VectorXd& w) {
    spec.validate();
    if (!spec.curved()) return Point{spec, w};
    const double root_c = std::sqrt(std::abs(spec.curvature));
    const double s = root_c * w.norm();
    Eigen::VectorXd out(w.size() + 1);
    if (spec.kind == Kind::Hyperbolic) {
        out(0) = std::cosh(s) / root_c;
        out.tail(w.size()) = series::sinhc(s) * w;
    } else {
        out(0) = std::cos(s) / root_c;
        out.tail(w.size()) = series::sinc(s) * w;
    }
    return Point{spec, out};
}

inline Eigen::VectorXd log0(const Point& x) {
    if (!x.spec.curved()) return x.coords;
    const Point o = origin(x.spec, static_cast<int>(x.coords.size()) - 1);
    const Eigen::Index d = x.coords.size() - 1;
    if (x.spec.kind == Kind::Hyperbolic) {
        const double s = detail::hyperbolic_angle(x.coords, o.coords, x.spec.curvature);
        return (series::inv_sinhc(s) * x.coords.tail(d)).eval();
    }
    const double s = detail::spherical_angle(x.coords, o.coords, x.spec.curvature);
    if (kPi - s <= 1e-9 * std::sqrt(x.spec.curvature))
        throw DomainError("log0: point antipodal to the origin");
    return (series::inv_sinc(s) * x.coords.tail(d)).eval();
}

// --- Poincare ball (c < 0) ----------------------------------------------
// The hyperbolic expert works in the ball model, where Mobius operations
// give closed-form analogues of affine maps.

inline void require_ball_curvature(double c, const char* op) {
    if (!(c < 0.0) || !std::isfinite(c))
        throw ValidationError(std::string(op) + ": ball operations need curvature < 0, got " +
                              std::to_string(c));
}

// Rejects points on or outside the sphere of radius 1/sqrt(-c); "on" means
// within 1e-12 of the boundary, where artanh has no usable precision left.
inline void require_in_ball(const Eigen::VectorXd& x, double c, const char* op) {
    const double bound = 1.0 / std::sqrt(-c);
    if (bound - x.norm() <= 1e-12)
        throw DomainError(std::string(op) + ": point not strictly inside the Poincare ball (|x| = " +
                          std::to_string(x.norm()) + ", radius " + std::to_string(bound) + ")");
}

inline Eigen::VectorXd poincare_exp0(const Eigen::VectorXd& v, double c) {
    require_ball_curvature(c, "poincare_exp0");
    const double s = std::sqrt(-c) * v.norm();
    return (series::tanhc(s) * v).eval();
}

inline Eigen::VectorXd poincare_log0(const Eigen::VectorXd& y, double c) {
    require_ball_curvature(c, "poincare_log0");
    require_in_ball(y, c, "poincare_log0");
    const double s = std::sqrt(-c) * y.norm();
    return (series::atanhc(s) * y).eval();
}

inline Eigen::VectorXd mobius_add(const Eigen::VectorXd& x, const Eigen::VectorXd& y, double c) {
    require_ball_curvature(c, "mobius_add");
    detail::require_same_size(x.size(), y.size(), "mobius_add");
    require_in_ball(x, c, "mobius_add");
    require_in_ball(y, c, "mobius_add");
    const double k = -c;  // |c|
    const double xy = x.dot(y);
    const double x2 = x.squaredNorm();
    const double y2 = y.squaredNorm();
    const double den = 1.0 + 2.0 * k * xy + k * k * x2 * y2;
    return (((1.0 + 2.0 * k * xy + k * y2) * x + (1.0 - k * x2) * y) / den).eval();
}

// M (x) := exp0(M log0(x)), the isometry-compatible matrix action on the ball.
inline Eigen::VectorXd mobius_matvec(const Eigen::MatrixXd& m, const Eigen::VectorXd& x,
                                     double c) {
    require_ball_curvature(c, "mobius_matvec");
    detail::require_same_size(m.cols(), x.size(), "mobius_matvec");
    return poincare_exp0((m * poincare_log0(x, c)).eval(), c);
}

}  // namespace geowalk

#endif
