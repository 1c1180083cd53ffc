#pragma once

// Special functions, deterministic quadrature and root finding shared by the
// rest of the library. Everything here is a pure function of its arguments.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace basket {

struct bracketing_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool ok, const char* msg) {
    if (!ok) throw std::domain_error(msg);
}

}  // namespace detail

// ln Gamma(x) for x > 0.
inline double ln_gamma(double x) {
    detail::require(std::isfinite(x) && x > 0.0, "ln_gamma: x must be positive and finite");
    return std::lgamma(x);
}

// Beta function B(a,b) = Gamma(a)Gamma(b)/Gamma(a+b).
inline double beta_fn(double a, double b) {
    detail::require(std::isfinite(a) && a > 0.0 && std::isfinite(b) && b > 0.0,
                    "beta_fn: arguments must be positive and finite");
    return std::exp(ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
}

namespace detail {

// Continued fraction for the incomplete beta (Lentz's algorithm).
inline double beta_cont_frac(double a, double b, double x) {
    constexpr double tiny = 1e-300;
    constexpr double eps = 1e-15;
    constexpr int max_iter = 500;

    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;

    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;

    for (int m = 1; m <= max_iter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;

        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) break;
    }
    return h;
}

}  // namespace detail

// Regularized incomplete beta I(x; a, b). Continued fraction with the
// symmetry switch at x = (a+1)/(a+b+2) so both tails converge quickly.
inline double reg_inc_beta(double x, double a, double b) {
    detail::require(std::isfinite(a) && a > 0.0 && std::isfinite(b) && b > 0.0,
                    "reg_inc_beta: shape parameters must be positive");
    detail::require(std::isfinite(x) && x >= 0.0 && x <= 1.0, "reg_inc_beta: x must lie in [0,1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;

    const double ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) +
                            a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * detail::beta_cont_frac(a, b, x) / a;
    }
    return 1.0 - front * detail::beta_cont_frac(b, a, 1.0 - x) / b;
}

// Bisection root finder on [lo, hi]; requires a sign change.
template <class F>
double find_root(F&& f, double lo, double hi, double tol) {
    detail::require(std::isfinite(lo) && std::isfinite(hi) && lo < hi, "find_root: bad bracket");
    detail::require(std::isfinite(tol) && tol > 0.0, "find_root: tol must be positive");
    double flo = f(lo);
    double fhi = f(hi);
    if (!std::isfinite(flo) || !std::isfinite(fhi)) {
        throw bracketing_error("find_root: non-finite function value at bracket endpoint");
    }
    if (flo == 0.0) return lo;
    if (fhi == 0.0) return hi;
    if ((flo > 0.0) == (fhi > 0.0)) {
        throw bracketing_error("find_root: no sign change over [lo, hi]");
    }
    while (hi - lo > tol) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;  // bracket at floating point resolution
        const double fm = f(mid);
        if (fm == 0.0) return mid;
        if ((fm > 0.0) == (flo > 0.0)) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

// Golden-section maximizer for a unimodal function on [lo, hi].
template <class F>
double golden_section_max(F&& f, double lo, double hi, double tol) {
    detail::require(lo < hi && tol > 0.0, "golden_section_max: bad interval");
    constexpr double inv_phi = 0.6180339887498949;
    double a = lo, b = hi;
    double x1 = b - inv_phi * (b - a);
    double x2 = a + inv_phi * (b - a);
    double f1 = f(x1), f2 = f(x2);
    while (b - a > tol) {
        if (f1 < f2) {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        }
    }
    return 0.5 * (a + b);
}

// ---------------------------------------------------------------------------
// Elementary logistic helpers
// ---------------------------------------------------------------------------

inline double logit(double p) {
    detail::require(p > 0.0 && p < 1.0, "logit: p must lie in (0,1)");
    return std::log(p / (1.0 - p));
}

inline double expit(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log(1 + e^x), overflow-safe.
inline double log1p_exp(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

inline double log_normal_pdf(double x, double mean, double var) {
    const double d = x - mean;
    return -0.5 * (d * d / var + std::log(2.0 * M_PI * var));
}

// ---------------------------------------------------------------------------
// Quadrature
// ---------------------------------------------------------------------------

struct QuadratureRule {
    enum class Kind { trapezoid, gauss_legendre };

    std::vector<double> nodes;
    std::vector<double> weights;
    Kind kind = Kind::trapezoid;

    static QuadratureRule trapezoid_rule(double lo, double hi, std::size_t n);
    static QuadratureRule gauss_legendre_rule(double lo, double hi, std::size_t n);

    template <class F>
    double integrate(F&& f) const {
        double s = 0.0;
        for (std::size_t i = 0; i < nodes.size(); ++i) s += weights[i] * f(nodes[i]);
        return s;
    }
};

namespace detail {

// Nodes/weights of the n-point Gauss-Legendre rule on [-1, 1], by Newton
// iteration on the Legendre polynomial.
inline void gauss_legendre_unit(std::size_t n, std::vector<double>& x, std::vector<double>& w) {
    x.assign(n, 0.0);
    w.assign(n, 0.0);
    const std::size_t m = (n + 1) / 2;
    for (std::size_t i = 0; i < m; ++i) {
        double z = std::cos(M_PI * (static_cast<double>(i) + 0.75) /
                            (static_cast<double>(n) + 0.5));
        double pp = 0.0;
        for (int iter = 0; iter < 100; ++iter) {
            double p1 = 1.0, p2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double p3 = p2;
                p2 = p1;
                p1 = ((2.0 * j + 1.0) * z * p2 - j * p3) / (j + 1.0);
            }
            pp = n * (z * p1 - p2) / (z * z - 1.0);
            const double z1 = z;
            z = z1 - p1 / pp;
            if (std::fabs(z - z1) < 1e-15) break;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
}

// Cached 64-point unit rule; this is the workhorse of the posterior engine.
inline const std::pair<std::vector<double>, std::vector<double>>& gl64_unit() {
    static const auto rule = [] {
        std::pair<std::vector<double>, std::vector<double>> r;
        gauss_legendre_unit(64, r.first, r.second);
        return r;
    }();
    return rule;
}

inline const std::pair<std::vector<double>, std::vector<double>>& gl32_unit() {
    static const auto rule = [] {
        std::pair<std::vector<double>, std::vector<double>> r;
        gauss_legendre_unit(32, r.first, r.second);
        return r;
    }();
    return rule;
}

// Gauss-Kronrod (7,15) pair on [-1,1]. The odd-indexed nodes carry the
// embedded 7-point Gauss rule, so one sweep yields both the value and an
// error estimate.
struct GaussKronrod15 {
    static constexpr std::array<double, 15> nodes = {
        -0.991455371120813, -0.949107912342759, -0.864864423359769, -0.741531185599394,
        -0.586087235467691, -0.405845151377397, -0.207784955007898, 0.0,
        0.207784955007898,  0.405845151377397,  0.586087235467691,  0.741531185599394,
        0.864864423359769,  0.949107912342759,  0.991455371120813};
    static constexpr std::array<double, 15> kronrod_w = {
        0.022935322010529, 0.063092092629979, 0.104790010322250, 0.140653259715525,
        0.169004726639267, 0.190350578064785, 0.204432940075298, 0.209482141084728,
        0.204432940075298, 0.190350578064785, 0.169004726639267, 0.140653259715525,
        0.104790010322250, 0.063092092629979, 0.022935322010529};
    // Gauss-7 weights aligned with nodes 1, 3, 5, 7, 9, 11, 13; zero elsewhere.
    static constexpr std::array<double, 15> gauss_w = {
        0.0, 0.129484966168870, 0.0, 0.279705391489277, 0.0, 0.381830050505119, 0.0,
        0.417959183673469,
        0.0, 0.381830050505119, 0.0, 0.279705391489277, 0.0, 0.129484966168870, 0.0};
};

}  // namespace detail

inline QuadratureRule QuadratureRule::trapezoid_rule(double lo, double hi, std::size_t n) {
    detail::require(n >= 2 && lo < hi, "trapezoid_rule: need n >= 2 and lo < hi");
    QuadratureRule r;
    r.kind = Kind::trapezoid;
    r.nodes.resize(n);
    r.weights.resize(n);
    const double h = (hi - lo) / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        r.nodes[i] = lo + h * static_cast<double>(i);
        r.weights[i] = (i == 0 || i == n - 1) ? 0.5 * h : h;
    }
    r.nodes.back() = hi;
    return r;
}

inline QuadratureRule QuadratureRule::gauss_legendre_rule(double lo, double hi, std::size_t n) {
    detail::require(n >= 1 && lo < hi, "gauss_legendre_rule: need n >= 1 and lo < hi");
    QuadratureRule r;
    r.kind = Kind::gauss_legendre;
    std::vector<double> x, w;
    if (n == 64) {
        x = detail::gl64_unit().first;
        w = detail::gl64_unit().second;
    } else {
        detail::gauss_legendre_unit(n, x, w);
    }
    const double mid = 0.5 * (lo + hi);
    const double hw = 0.5 * (hi - lo);
    r.nodes.resize(n);
    r.weights.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        r.nodes[i] = mid + hw * x[i];
        r.weights[i] = hw * w[i];
    }
    return r;
}

// Composite Simpson weights for n equally spaced nodes (n odd) with spacing h.
inline std::vector<double> simpson_weights(std::size_t n, double h) {
    detail::require(n >= 3 && n % 2 == 1, "simpson_weights: n must be odd and >= 3");
    std::vector<double> w(n, h / 3.0);
    for (std::size_t i = 1; i + 1 < n; ++i) w[i] *= (i % 2 == 1) ? 4.0 : 2.0;
    return w;
}

}  // namespace basket
