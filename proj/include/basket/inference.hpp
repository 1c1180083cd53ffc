#pragma once

// Deterministic posterior engine for the hierarchical binomial-logit model.
//
// The model:  y_j ~ Binomial(n_j, p_j),  logit(p_j) = mu + theta_j,
//             mu ~ Normal(mu_mean, mu_var),  theta_j | sigma ~ Normal(0, sigma^2),
//             sigma ~ PriorSpec.
//
// fit() integrates the hyperparameters over 41 log-sigma rows spanning the
// marginal mode +/- 8 Laplace sd; within each row, mu is integrated by
// adaptive Gauss-Kronrod panels over the row's own conditional mode +/- 7 sd.
// The per-row recentering matters: at large sigma the conditional spread of
// mu is an order of magnitude wider than at the joint mode, and a fixed
// rectangle truncates that funnel. The panels are pre-split at each
// threshold's logit because the tail fraction steps from 0 to 1 there over
// the conditional theta scale, which can be arbitrarily narrow. Given
// (mu, sigma) the conditional posterior factorizes across arms; each arm's
// theta integral is resolved with mode-centered Gauss-Legendre quadrature,
// adaptively refined when the window is much wider than the likelihood.
//
// oracle_fit() recomputes the same quantities with dense fixed-range
// trapezoid grids and no adaptive machinery; it is the reference the engine
// is tested against (arms <= 3 only).

#include <array>
#include <cstdint>
#include <cstring>
#include <memory>
#include <mutex>
#include <numeric>
#include <shared_mutex>
#include <span>
#include <unordered_map>
#include <vector>

#include "basket/numerics.hpp"
#include "basket/priors.hpp"

namespace basket {

struct numerical_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Per-arm responder/enrollment counts at one analysis.
struct ModelData {
    std::vector<int> responders;
    std::vector<int> enrolled;

    std::size_t arms() const { return responders.size(); }

    void validate() const {
        if (responders.size() != enrolled.size() || responders.empty()) {
            throw std::domain_error("ModelData: responders/enrolled must be nonempty and equally sized");
        }
        for (std::size_t j = 0; j < responders.size(); ++j) {
            if (enrolled[j] < 0 || responders[j] < 0 || responders[j] > enrolled[j]) {
                throw std::domain_error("ModelData: need 0 <= y_j <= n_j in every arm");
            }
        }
    }
};

struct HyperPrior {
    double mu_mean = 0.0;
    double mu_var = 100.0;
    PriorSpec sigma_prior = PcPrior{1.0};

    void validate() const {
        detail::require(std::isfinite(mu_mean) && std::isfinite(mu_var) && mu_var > 0.0,
                        "HyperPrior: mu_var must be positive");
        validate_prior(sigma_prior);
    }
};

struct GridDiagnostics {
    double mu_lo = 0.0, mu_hi = 0.0;            // union over rows
    double log_sigma_lo = 0.0, log_sigma_hi = 0.0;
    double mass_capture = 1.0;                   // weight fraction away from the grid perimeter
    bool accuracy_warning = false;
};

class PosteriorResult {
  public:
    PosteriorResult() = default;
    PosteriorResult(std::vector<double> thresholds, std::size_t arms)
        : thresholds_(std::move(thresholds)),
          tails_(arms * thresholds_.size(), 0.0),
          post_mean_p_(arms, 0.0),
          arms_(arms) {}

    std::size_t arms() const { return arms_; }
    const std::vector<double>& thresholds() const { return thresholds_; }

    double& tail_at(std::size_t arm, std::size_t ti) { return tails_[arm * thresholds_.size() + ti]; }
    double tail_at(std::size_t arm, std::size_t ti) const { return tails_[arm * thresholds_.size() + ti]; }

    // Pr(p_arm > threshold | data); the threshold must be one the fit was run with.
    double tail_prob(std::size_t arm, double threshold) const {
        detail::require(arm < arms_, "tail_prob: arm index out of range");
        for (std::size_t ti = 0; ti < thresholds_.size(); ++ti) {
            if (std::fabs(thresholds_[ti] - threshold) <= 1e-12) return tail_at(arm, ti);
        }
        throw std::domain_error("tail_prob: threshold was not part of the fit");
    }

    double& post_mean_p(std::size_t arm) { return post_mean_p_[arm]; }
    double post_mean_p(std::size_t arm) const { return post_mean_p_[arm]; }

    double log_evidence = 0.0;
    GridDiagnostics grid_diag;

  private:
    std::vector<double> thresholds_;
    std::vector<double> tails_;
    std::vector<double> post_mean_p_;
    std::size_t arms_ = 0;
};

// Unnormalized log joint density in the (mu, log sigma, theta) parameterization,
// binomial coefficients omitted.
inline double log_joint(const ModelData& data, const HyperPrior& hp, double mu, double log_sigma,
                        std::span<const double> theta) {
    data.validate();
    hp.validate();
    if (theta.size() != data.arms()) {
        throw std::domain_error("log_joint: theta dimension must equal the number of arms");
    }
    const double sigma = std::exp(log_sigma);
    double lp = log_normal_pdf(mu, hp.mu_mean, hp.mu_var);
    lp += log_density_sd(hp.sigma_prior, sigma) + log_sigma;  // Jacobian d sigma / d log sigma
    const double var = sigma * sigma;
    for (std::size_t j = 0; j < data.arms(); ++j) {
        const double eta = mu + theta[j];
        lp += data.responders[j] * eta - data.enrolled[j] * log1p_exp(eta);
        lp += log_normal_pdf(theta[j], 0.0, var);
    }
    return lp;
}

namespace detail {

// log sigma exploration bounds per prior family. The diffuse Gamma gets a
// widened range; the Uniform is truncated at its own support.
inline std::pair<double, double> log_sigma_bounds(const PriorSpec& prior) {
    if (std::holds_alternative<GammaOnPrecision>(prior)) {
        return {std::log(1e-6), std::log(1e4)};
    }
    if (const auto* u = std::get_if<UniformOnSd>(&prior)) {
        const double lo = std::max(u->lower, std::min(1e-4, u->upper / 100.0));
        return {std::log(lo), std::log(u->upper)};
    }
    return {std::log(1e-4), std::log(1e3)};
}

// Root of g(theta) = y - n expit(mu + theta) - theta / sigma^2, the stationarity
// condition of the conditional log density. g is strictly decreasing; plain
// Newton diverges in the flat logistic tails, so keep a bracket and fall back
// to bisection whenever a step leaves it.
inline double cond_mode(double y, double n, double mu, double inv_s2) {
    const auto g = [&](double th) { return y - n * expit(mu + th) - th * inv_s2; };
    double lo = -1.0, hi = 1.0;
    while (g(lo) <= 0.0) lo *= 2.0;
    while (g(hi) >= 0.0) hi *= 2.0;
    double th = 0.5 * (lo + hi);
    for (int iter = 0; iter < 200; ++iter) {
        const double p = expit(mu + th);
        const double gv = y - n * p - th * inv_s2;
        if (gv > 0.0) {
            lo = th;
        } else {
            hi = th;
        }
        const double h = -n * p * (1.0 - p) - inv_s2;
        double next = th - gv / h;
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        if (std::fabs(next - th) < 1e-12 * (1.0 + std::fabs(th))) return next;
        th = next;
    }
    return th;
}

inline double cond_kernel(double y, double n, double mu, double inv_s2, double th) {
    const double eta = mu + th;
    return y * eta - n * log1p_exp(eta) - 0.5 * th * th * inv_s2;
}

struct PairSum {
    double f = 0.0;   // integral of the scaled kernel
    double fp = 0.0;  // integral of kernel * expit(eta)
};

// Adaptive composite Gauss-Kronrod over [a, b] for the scaled conditional
// kernel exp(ll - ll_ref). Initial panels are split at the conditional mode
// and at the likelihood center, so refinement only has to chase residual
// structure (a likelihood edge inside a wide prior window).
inline PairSum adaptive_cond_integral(double y, double n, double mu, double inv_s2, double ll_ref,
                                      double a, double b, double split_at, double tol) {
    struct Item {
        double a, b;
        int depth;
    };
    std::vector<Item> stack;
    if (split_at > a && split_at < b) {
        stack.push_back({a, split_at, 0});
        stack.push_back({split_at, b, 0});
    } else {
        stack.push_back({a, b, 0});
    }
    PairSum out;
    int panels = 0;
    while (!stack.empty()) {
        const Item it = stack.back();
        stack.pop_back();
        const double mid = 0.5 * (it.a + it.b), hw = 0.5 * (it.b - it.a);
        PairSum k, g;
        for (std::size_t q = 0; q < 15; ++q) {
            const double th = mid + hw * GaussKronrod15::nodes[q];
            const double f = std::exp(cond_kernel(y, n, mu, inv_s2, th) - ll_ref);
            const double fp = f * expit(mu + th);
            k.f += GaussKronrod15::kronrod_w[q] * f;
            k.fp += GaussKronrod15::kronrod_w[q] * fp;
            g.f += GaussKronrod15::gauss_w[q] * f;
            g.fp += GaussKronrod15::gauss_w[q] * fp;
        }
        ++panels;
        if (std::fabs(k.f - g.f) * hw <= tol || it.depth >= 24 || panels > 512) {
            out.f += hw * k.f;
            out.fp += hw * k.fp;
        } else {
            stack.push_back({it.a, mid, it.depth + 1});
            stack.push_back({mid, it.b, it.depth + 1});
        }
    }
    return out;
}

// One arm's conditional integral at fixed (mu, sigma). log_integral is
// log of the integral of exp(y eta - n log(1+e^eta) - theta^2/(2 sigma^2));
// the Gaussian normalizer is accounted for by the caller.
//
// When the conditional sd is small the mode sits where the likelihood is
// informative, the kernel decays super-exponentially within a few sd, and a
// single 64-node rule over +/-8 sd is exact for practical purposes. When the
// sd is of prior scale (flat likelihood at the mode) the window can hide a
// likelihood edge between nodes, so the adaptive integrator takes over.
struct CondEval {
    double mode = 0.0;
    double sd = 0.0;
    double ll_mode = 0.0;      // conditional log kernel at the mode
    double total = 0.0;        // integral scaled by exp(-ll_mode)
    double log_integral = 0.0;
    double mean_p = 0.0;       // conditional posterior mean of expit(eta)
    bool adaptive = false;
};

constexpr double kCondAdaptiveSd = 3.0;

inline CondEval cond_eval(double y, double n, double mu, double sigma) {
    const double inv_s2 = 1.0 / (sigma * sigma);
    CondEval ce;
    ce.mode = cond_mode(y, n, mu, inv_s2);
    const double pm = expit(mu + ce.mode);
    ce.sd = 1.0 / std::sqrt(n * pm * (1.0 - pm) + inv_s2);
    ce.ll_mode = cond_kernel(y, n, mu, inv_s2, ce.mode);
    ce.adaptive = ce.sd > kCondAdaptiveSd && n > 0.0;
    const double half = 8.0 * ce.sd;
    if (ce.adaptive) {
        const double lik_center = std::log((y + 0.5) / (n - y + 0.5)) - mu;
        const PairSum s = adaptive_cond_integral(y, n, mu, inv_s2, ce.ll_mode, ce.mode - half,
                                                 ce.mode + half, lik_center, 1e-7 * ce.sd);
        ce.total = s.f;
        ce.mean_p = s.fp / s.f;
    } else {
        const auto& [gx, gw] = gl32_unit();
        double total = 0.0, mean = 0.0;
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const double th = ce.mode + half * gx[i];
            const double f = std::exp(cond_kernel(y, n, mu, inv_s2, th) - ce.ll_mode);
            total += gw[i] * f;
            mean += gw[i] * f * expit(mu + th);
        }
        ce.total = total * half;
        ce.mean_p = mean / total;
    }
    ce.log_integral = std::log(ce.total) + ce.ll_mode;
    return ce;
}

// Pr(theta > c | mu, sigma, y) for one arm, over the smaller of the two
// pieces split exactly at c.
inline double cond_tail_frac(double y, double n, double mu, double inv_s2, const CondEval& ce,
                             double c) {
    const double lo = ce.mode - 8.0 * ce.sd;
    const double hi = ce.mode + 8.0 * ce.sd;
    if (c <= lo) return 1.0;
    if (c >= hi) return 0.0;
    const auto piece = [&](double a, double b) {
        if (ce.adaptive) {
            const double lik_center = std::log((y + 0.5) / (n - y + 0.5)) - mu;
            return adaptive_cond_integral(y, n, mu, inv_s2, ce.ll_mode, a, b, lik_center,
                                          1e-7 * ce.sd)
                .f;
        }
        const auto& [gx, gw] = gl32_unit();
        const double mid = 0.5 * (a + b), hw = 0.5 * (b - a);
        double s = 0.0;
        for (std::size_t i = 0; i < gx.size(); ++i) {
            s += gw[i] * std::exp(cond_kernel(y, n, mu, inv_s2, mid + hw * gx[i]) - ce.ll_mode);
        }
        return s * hw;
    };
    double frac;
    if (c <= ce.mode) {
        frac = 1.0 - piece(lo, c) / ce.total;
    } else {
        frac = piece(c, hi) / ce.total;
    }
    return std::clamp(frac, 0.0, 1.0);
}

// Distinct (enrolled, responders) pairs of the canonically sorted data; arms
// with identical counts share every conditional computation.
struct ArmGroup {
    int y = 0;
    int n = 0;
    int mult = 0;
};

struct CanonicalData {
    std::vector<std::size_t> order;      // canonical position -> original arm
    std::vector<ArmGroup> groups;
    std::vector<std::size_t> group_of;   // canonical position -> group index
};

inline CanonicalData canonicalize(const ModelData& data) {
    CanonicalData cd;
    cd.order.resize(data.arms());
    std::iota(cd.order.begin(), cd.order.end(), std::size_t{0});
    std::sort(cd.order.begin(), cd.order.end(), [&](std::size_t a, std::size_t b) {
        if (data.enrolled[a] != data.enrolled[b]) return data.enrolled[a] < data.enrolled[b];
        if (data.responders[a] != data.responders[b]) return data.responders[a] < data.responders[b];
        return a < b;
    });
    cd.group_of.resize(data.arms());
    for (std::size_t pos = 0; pos < cd.order.size(); ++pos) {
        const int y = data.responders[cd.order[pos]];
        const int n = data.enrolled[cd.order[pos]];
        if (cd.groups.empty() || cd.groups.back().y != y || cd.groups.back().n != n) {
            cd.groups.push_back({y, n, 0});
        }
        cd.groups.back().mult += 1;
        cd.group_of[pos] = cd.groups.size() - 1;
    }
    return cd;
}

constexpr std::size_t kLogSigmaNodes = 41;
constexpr double kMuBox = 40.0;          // hard bounds on the mu exploration box
constexpr double kMuSpanSds = 7.0;       // per-row mu half-span in conditional sds
constexpr double kLogSigmaSpanSds = 8.0; // log-sigma half-span in Laplace sds
constexpr double kRowSkipRatio = 1e-10;  // rows this far below the mode are dropped
constexpr double kPanelTol = 1e-6;       // per-unit-width Gauss-Kronrod tolerance

}  // namespace detail

// Grid posterior fit. Returns Pr(p_j > t | data) for every arm and threshold,
// the per-arm posterior mean response rates, and grid diagnostics. Accuracy
// contract: within 1e-3 of oracle_fit.
inline PosteriorResult fit(const ModelData& data, const HyperPrior& hp,
                           std::span<const double> thresholds) {
    data.validate();
    hp.validate();
    if (thresholds.empty()) throw std::domain_error("fit: at least one threshold is required");
    for (double t : thresholds) {
        detail::require(t > 0.0 && t < 1.0, "fit: thresholds must lie in (0,1)");
    }

    const std::size_t J = data.arms();
    const std::size_t T = thresholds.size();
    const auto cd = detail::canonicalize(data);
    const auto& groups = cd.groups;
    const std::size_t G = groups.size();
    const auto [u_lo, u_hi] = detail::log_sigma_bounds(hp.sigma_prior);
    constexpr double kBox = detail::kMuBox;

    // Marginal log posterior of (mu, log sigma), every theta integrated out,
    // and its exact mu-gradient (the conditional means make it free).
    struct MargEval {
        double logpost;
        double dmu;
    };
    const auto marginal = [&](double mu, double u) -> MargEval {
        const double sigma = std::exp(u);
        const double lps = log_density_sd(hp.sigma_prior, sigma);
        if (lps == -std::numeric_limits<double>::infinity()) {
            return {lps, 0.0};
        }
        double lp = log_normal_pdf(mu, hp.mu_mean, hp.mu_var) + lps + u;
        double dmu = -(mu - hp.mu_mean) / hp.mu_var;
        const double log_norm = -0.5 * std::log(2.0 * M_PI * sigma * sigma);
        for (const auto& g : groups) {
            const auto ce = detail::cond_eval(g.y, g.n, mu, sigma);
            lp += g.mult * (ce.log_integral + log_norm);
            dmu += g.mult * (g.y - g.n * ce.mean_p);
        }
        return {lp, dmu};
    };

    // The mu-gradient is strictly decreasing (the marginal is log-concave),
    // so the conditional mu mode of a row is a bracketed root.
    const auto mu_mode_of_row = [&](double u, double guess, double scale) {
        double lo = std::max(guess - 4.0 * scale, -kBox);
        double hi = std::min(guess + 4.0 * scale, kBox);
        while (lo > -kBox && marginal(lo, u).dmu <= 0.0) lo = std::max(lo - (hi - lo), -kBox);
        while (hi < kBox && marginal(hi, u).dmu >= 0.0) hi = std::min(hi + (hi - lo), kBox);
        if (marginal(lo, u).dmu <= 0.0) return lo;
        if (marginal(hi, u).dmu >= 0.0) return hi;
        for (int iter = 0; iter < 60 && hi - lo > 1e-4; ++iter) {
            const double mid = 0.5 * (lo + hi);
            (marginal(mid, u).dmu > 0.0 ? lo : hi) = mid;
        }
        return 0.5 * (lo + hi);
    };
    const auto mu_sd_of_row = [&](double u, double mode) {
        const double h = 1e-2;
        const double slope = (marginal(mode + h, u).dmu - marginal(mode - h, u).dmu) / (2.0 * h);
        if (!std::isfinite(slope) || slope >= -1e-10) return 1e6;
        return 1.0 / std::sqrt(-slope);
    };

    // Joint mode by coordinate ascent, to center the log-sigma rows.
    long long total_y = 0, total_n = 0;
    for (std::size_t j = 0; j < J; ++j) {
        total_y += data.responders[j];
        total_n += data.enrolled[j];
    }
    double mu_hat = 0.0;
    if (total_n > 0) {
        const double p_hat = (total_y + 0.5) / (total_n + 1.0);
        mu_hat = std::clamp(std::log(p_hat / (1.0 - p_hat)), -5.0, 5.0);
    }
    double u_hat = std::clamp(0.0, u_lo, u_hi);
    for (int sweep = 0; sweep < 40; ++sweep) {
        const double mu_next = mu_mode_of_row(u_hat, mu_hat, 2.0);
        const double u_next = golden_section_max(
            [&](double u) { return marginal(mu_next, u).logpost; }, u_lo, u_hi, 1e-6);
        const bool done = std::fabs(mu_next - mu_hat) < 1e-4 && std::fabs(u_next - u_hat) < 1e-4;
        mu_hat = mu_next;
        u_hat = u_next;
        if (done) break;
    }
    const double sd_u = [&] {
        const double h = 1e-2;
        const double x0 = std::clamp(u_hat, u_lo + h, u_hi - h);
        const auto f = [&](double u) { return marginal(mu_hat, u).logpost; };
        const double curv = (f(x0 + h) - 2.0 * f(x0) + f(x0 - h)) / (h * h);
        if (!std::isfinite(curv) || curv >= -1e-10) return 1e6;
        return 1.0 / std::sqrt(-curv);
    }();

    const double u_grid_lo = std::max(u_hat - detail::kLogSigmaSpanSds * sd_u, u_lo);
    const double u_grid_hi = std::min(u_hat + detail::kLogSigmaSpanSds * sd_u, u_hi);

    // Row nodes along log sigma: composite Simpson blocks. The diffuse Gamma
    // prior has a shoulder at log sigma = ln(rate)/2 where exp(-rate/sigma^2)
    // switches on over a few tenths of a unit, so that region gets its own
    // dense block; everything else is one block of the standard resolution.
    std::vector<std::pair<double, double>> u_nodes;  // (node, weight)
    {
        const auto add_block = [&u_nodes](double lo, double hi, std::size_t n) {
            if (hi - lo < 1e-12) return;
            const double h = (hi - lo) / static_cast<double>(n - 1);
            const auto w = simpson_weights(n, h);
            for (std::size_t q = 0; q < n; ++q) {
                u_nodes.emplace_back(lo + h * static_cast<double>(q), w[q]);
            }
        };
        constexpr std::size_t NU = detail::kLogSigmaNodes;
        const auto* gamma_prior = std::get_if<GammaOnPrecision>(&hp.sigma_prior);
        const double shoulder = gamma_prior ? 0.5 * std::log(gamma_prior->rate) : 0.0;
        if (gamma_prior && shoulder - 2.0 > u_grid_lo && shoulder + 2.0 < u_grid_hi) {
            add_block(u_grid_lo, shoulder - 2.0, 21);
            add_block(shoulder - 2.0, shoulder + 2.0, NU);
            add_block(shoulder + 2.0, u_grid_hi, NU);
        } else {
            add_block(u_grid_lo, u_grid_hi, NU);
        }
    }
    const std::size_t NR = u_nodes.size();

    std::vector<double> cs(T);
    for (std::size_t t = 0; t < T; ++t) cs[t] = logit(thresholds[t]);

    // All weights are scaled by the joint-mode posterior value.
    const double m_scale = marginal(mu_hat, u_hat).logpost;

    // One integrand evaluation at (mu, u): scaled weight, per-group tail
    // fractions, per-group conditional means. Layout: [w, frac..., mean...].
    const std::size_t NC = 1 + G * T + G;  // components per node
    const auto eval_node = [&](double mu, double sigma, double inv_s2, double base,
                               double* out) {
        double lp = base + log_normal_pdf(mu, hp.mu_mean, hp.mu_var);
        for (std::size_t g = 0; g < G; ++g) {
            const auto ce = detail::cond_eval(groups[g].y, groups[g].n, mu, sigma);
            lp += groups[g].mult * ce.log_integral;
            out[1 + G * T + g] = ce.mean_p;
            for (std::size_t t = 0; t < T; ++t) {
                out[1 + g * T + t] =
                    detail::cond_tail_frac(groups[g].y, groups[g].n, mu, inv_s2, ce, cs[t] - mu);
            }
        }
        if (std::isnan(lp) || lp == std::numeric_limits<double>::infinity()) {
            throw numerical_error("fit: non-finite log joint on the grid under prior " +
                                  prior_label(hp.sigma_prior));
        }
        const double w = std::exp(lp - m_scale);
        out[0] = w;
        for (std::size_t c = 1; c < NC; ++c) out[c] *= w;
    };

    // Per-row integration over mu with adaptive Gauss-Kronrod panels. The
    // panels are pre-split at each threshold's logit (and, when the
    // conditional theta scale is narrow, around it): there the tail fraction
    // crosses from 0 to 1 over a width of roughly that scale, which a fixed
    // node layout cannot see.
    std::vector<double> row_sum(NR * NC, 0.0);
    std::vector<double> row_edge(NR, 0.0);
    std::vector<bool> row_alive(NR, false);
    std::vector<double> nodev(NC), ksum(NC), gsum(NC), scratch(NC);
    struct Panel {
        double a, b;
        int depth;
    };
    std::vector<Panel> panels;
    double mu_union_lo = mu_hat, mu_union_hi = mu_hat;
    double row_mode = mu_hat, row_scale = 2.0;

    for (std::size_t j = 0; j < NR; ++j) {
        const double u = u_nodes[j].first;
        const double sigma = std::exp(u);
        const double inv_s2 = 1.0 / (sigma * sigma);
        const double lps = log_density_sd(hp.sigma_prior, sigma);
        if (lps == -std::numeric_limits<double>::infinity()) continue;
        row_mode = mu_mode_of_row(u, row_mode, row_scale);
        const double sd_row = mu_sd_of_row(u, row_mode);
        row_scale = std::clamp(sd_row, 0.5, 10.0);
        if (marginal(row_mode, u).logpost - m_scale < std::log(detail::kRowSkipRatio)) {
            continue;  // whole row carries negligible posterior mass
        }
        const double row_lo = std::max(row_mode - detail::kMuSpanSds * sd_row, -kBox);
        const double row_hi = std::min(row_mode + detail::kMuSpanSds * sd_row, kBox);
        mu_union_lo = std::min(mu_union_lo, row_lo);
        mu_union_hi = std::max(mu_union_hi, row_hi);
        const double base = lps + u -
                            0.5 * static_cast<double>(J) * std::log(2.0 * M_PI * sigma * sigma);

        // Width of the tail-fraction transition in mu: the narrowest
        // conditional theta scale across groups.
        double trans = sd_row;
        for (const auto& g : groups) {
            const double pt = (g.y + 0.5) / (g.n + 1.0);
            trans = std::min(trans, 1.0 / std::sqrt(g.n * pt * (1.0 - pt) + inv_s2));
        }

        std::vector<double> cuts = {row_lo, row_hi};
        for (double c : cs) {
            if (c <= row_lo || c >= row_hi) continue;
            if (trans * 30.0 < row_hi - row_lo && std::fabs(c - row_mode) < 5.0 * sd_row) {
                cuts.push_back(std::max(c - 5.0 * trans, row_lo));
                cuts.push_back(std::min(c + 5.0 * trans, row_hi));
            } else {
                cuts.push_back(c);
            }
        }
        std::sort(cuts.begin(), cuts.end());
        panels.clear();
        for (std::size_t q = 0; q + 1 < cuts.size(); ++q) {
            if (cuts[q + 1] - cuts[q] > 0.2 * trans) panels.push_back({cuts[q], cuts[q + 1], 0});
            else if (!panels.empty()) panels.back().b = cuts[q + 1];
            else panels.push_back({cuts[q], cuts[q + 1], 0});
        }

        double* row = row_sum.data() + j * NC;
        int evaluated = 0;
        while (!panels.empty()) {
            const Panel p = panels.back();
            panels.pop_back();
            const double mid = 0.5 * (p.a + p.b), hw = 0.5 * (p.b - p.a);
            std::fill(ksum.begin(), ksum.end(), 0.0);
            std::fill(gsum.begin(), gsum.end(), 0.0);
            for (std::size_t q = 0; q < 15; ++q) {
                eval_node(mid + hw * detail::GaussKronrod15::nodes[q], sigma, inv_s2, base, nodev.data());
                for (std::size_t c = 0; c < NC; ++c) {
                    ksum[c] += detail::GaussKronrod15::kronrod_w[q] * nodev[c];
                    gsum[c] += detail::GaussKronrod15::gauss_w[q] * nodev[c];
                }
            }
            double err = 0.0;
            for (std::size_t c = 0; c < NC; ++c) err = std::max(err, std::fabs(ksum[c] - gsum[c]));
            ++evaluated;
            if (err * hw <= detail::kPanelTol * (p.b - p.a) || p.depth >= 18 || evaluated > 256) {
                for (std::size_t c = 0; c < NC; ++c) row[c] += hw * ksum[c];
            } else {
                panels.push_back({p.a, mid, p.depth + 1});
                panels.push_back({mid, p.b, p.depth + 1});
            }
        }
        row_alive[j] = true;
        eval_node(row_lo, sigma, inv_s2, base, nodev.data());
        eval_node(row_hi, sigma, inv_s2, base, scratch.data());
        row_edge[j] = (nodev[0] + scratch[0]) * (row_hi - row_lo) / 50.0;
    }

    // Mix rows with their Simpson weights along log sigma.
    PosteriorResult res(std::vector<double>(thresholds.begin(), thresholds.end()), J);
    std::vector<double> acc(NC, 0.0);
    double perimeter_w = 0.0;
    std::size_t first_row = NR, last_row = NR;
    for (std::size_t j = 0; j < NR; ++j) {
        if (!row_alive[j]) continue;
        if (first_row == NR) first_row = j;
        last_row = j;
        for (std::size_t c = 0; c < NC; ++c) acc[c] += u_nodes[j].second * row_sum[j * NC + c];
        perimeter_w += u_nodes[j].second * row_edge[j];
    }
    if (first_row < NR) {
        perimeter_w += u_nodes[first_row].second * row_sum[first_row * NC + 0];
        if (last_row != first_row) perimeter_w += u_nodes[last_row].second * row_sum[last_row * NC + 0];
    }
    const double total_w = acc[0];
    if (!(total_w > 0.0) || !std::isfinite(total_w)) {
        throw numerical_error("fit: posterior mass vanished on the whole grid under prior " +
                              prior_label(hp.sigma_prior));
    }

    for (std::size_t pos = 0; pos < J; ++pos) {
        const std::size_t arm = cd.order[pos];
        const std::size_t g = cd.group_of[pos];
        res.post_mean_p(arm) = acc[1 + G * T + g] / total_w;
        for (std::size_t t = 0; t < T; ++t) {
            res.tail_at(arm, t) = std::clamp(acc[1 + g * T + t] / total_w, 0.0, 1.0);
        }
    }
    res.log_evidence = m_scale + std::log(total_w);
    res.grid_diag.mu_lo = mu_union_lo;
    res.grid_diag.mu_hi = mu_union_hi;
    res.grid_diag.log_sigma_lo = u_grid_lo;
    res.grid_diag.log_sigma_hi = u_grid_hi;
    res.grid_diag.mass_capture = 1.0 - std::min(perimeter_w / total_w, 1.0);
    res.grid_diag.accuracy_warning = res.grid_diag.mass_capture < 1.0 - 1e-4;
    return res;
}

// Dense brute-force reference: fixed trapezoid grids over (mu, log sigma) --
// a fine core around the pooled estimate plus coarse wings out to the prior
// scale -- and a merged two-scale trapezoid grid per arm conditional. Only
// intended for validation; cost grows quickly with the number of arms.
inline PosteriorResult oracle_fit(const ModelData& data, const HyperPrior& hp,
                                  std::span<const double> thresholds) {
    data.validate();
    hp.validate();
    if (data.arms() > 3) {
        throw std::invalid_argument("oracle_fit: refusing more than 3 arms");
    }
    if (thresholds.empty()) throw std::domain_error("oracle_fit: at least one threshold is required");
    for (double t : thresholds) {
        detail::require(t > 0.0 && t < 1.0, "oracle_fit: thresholds must lie in (0,1)");
    }

    const std::size_t J = data.arms();
    const std::size_t T = thresholds.size();

    double u_min = std::log(1e-6), u_max = std::log(1e4);
    if (const auto* uni = std::get_if<UniformOnSd>(&hp.sigma_prior)) {
        u_min = std::log(std::max(uni->lower, 1e-6));
        u_max = std::log(uni->upper);
    }
    constexpr std::size_t NU = 201;
    const double h_u = (u_max - u_min) / static_cast<double>(NU - 1);

    long long ty = 0, tn = 0;
    for (std::size_t k = 0; k < J; ++k) {
        ty += data.responders[k];
        tn += data.enrolled[k];
    }
    double m0 = 0.0;
    if (tn > 0) {
        const double ph = (ty + 0.5) / (tn + 1.0);
        m0 = std::clamp(std::log(ph / (1.0 - ph)), -6.0, 6.0);
    }

    // Base mu grid: fine core of 361 nodes on [m0-18, m0+18], unit-step wings
    // to +/-45. Rows at small sigma additionally refine around each
    // threshold's logit, where the tail fraction steps over a width of the
    // conditional theta scale.
    std::vector<double> mu_base;
    for (double m = -45.0; m < m0 - 18.0 - 1e-9; m += 1.0) mu_base.push_back(m);
    for (std::size_t q = 0; q < 301; ++q) {
        mu_base.push_back(m0 - 18.0 + 36.0 * static_cast<double>(q) / 300.0);
    }
    for (double m = m0 + 19.0; m <= 45.0 + 1e-9; m += 1.0) mu_base.push_back(m);

    std::vector<double> cs(T);
    for (std::size_t t = 0; t < T; ++t) cs[t] = logit(thresholds[t]);

    std::vector<double> eta_center(J, 0.0);
    for (std::size_t k = 0; k < J; ++k) {
        if (data.enrolled[k] > 0) {
            const double ph = (data.responders[k] + 0.5) / (data.enrolled[k] + 1.0);
            eta_center[k] = std::log(ph / (1.0 - ph));
        }
    }

    constexpr std::size_t NP = 501;  // prior-scale theta nodes over +/-10 sigma
    constexpr std::size_t NL = 421;  // likelihood-scale theta nodes over +/-25

    // Such values of eta keep the arm log likelihood within 120 nats of its
    // maximum; beyond them the integrand is dead relative to the conditional
    // peak and the prior-scale grid can be clipped.
    std::vector<double> alive_lo(J, -1e300), alive_hi(J, 1e300);
    for (std::size_t k = 0; k < J; ++k) {
        const int y = data.responders[k];
        const int n = data.enrolled[k];
        if (y > 0) alive_lo[k] = eta_center[k] - 3.0 - 134.0 / y;
        if (n - y > 0) alive_hi[k] = eta_center[k] + 3.0 + 134.0 / (n - y);
    }

    // Per-row accumulators, scaled by the row's own maximum.
    std::vector<double> row_logmax(NU, -std::numeric_limits<double>::infinity());
    std::vector<double> row_acc(NU * (1 + J * T + J), 0.0);
    std::vector<double> row_edge(NU, 0.0);
    const std::size_t RC = 1 + J * T + J;

    std::vector<double> prior_nodes, lik_nodes, cut_nodes(T), merged, grid, f;
    std::vector<double> mus, cell_logw, cell_tail, cell_mean;
    prior_nodes.reserve(NP);
    merged.reserve(NP + NL + T);
    grid.reserve(NP + NL + T);
    f.reserve(NP + NL + T);

    for (std::size_t j = 0; j < NU; ++j) {
        const double u = u_min + h_u * static_cast<double>(j);
        const double sigma = std::exp(u);
        const double lps = log_density_sd(hp.sigma_prior, sigma);
        if (lps == -std::numeric_limits<double>::infinity()) continue;
        const double inv_s2 = 1.0 / (sigma * sigma);
        const double log_norm = -0.5 * std::log(2.0 * M_PI * sigma * sigma);
        const double h_theta = 20.0 * sigma / static_cast<double>(NP - 1);

        // Row mu grid: base plus refinement clusters around thresholds whose
        // step is too narrow for the base spacing.
        mus = mu_base;
        double step_w = 1e300;
        for (std::size_t k = 0; k < J; ++k) {
            const double pt = (data.responders[k] + 0.5) / (data.enrolled[k] + 1.0);
            step_w = std::min(step_w,
                              1.0 / std::sqrt(data.enrolled[k] * pt * (1.0 - pt) + inv_s2));
        }
        if (step_w * 8.0 < 4.0) {
            for (std::size_t t = 0; t < T; ++t) {
                for (int q = 0; q < 65; ++q) {
                    mus.push_back(cs[t] - 8.0 * step_w + 16.0 * step_w * q / 64.0);
                }
            }
            std::sort(mus.begin(), mus.end());
        }
        const std::size_t NMU = mus.size();
        cell_logw.assign(NMU, -std::numeric_limits<double>::infinity());
        cell_tail.assign(NMU * J * T, 0.0);
        cell_mean.assign(NMU * J, 0.0);

        for (std::size_t i = 0; i < NMU; ++i) {
            const double mu = mus[i];
            double lp = log_normal_pdf(mu, hp.mu_mean, hp.mu_var) + lps + u;
            for (std::size_t k = 0; k < J; ++k) {
                const double plo = std::max(-10.0 * sigma, alive_lo[k] - mu);
                const double phi = std::min(10.0 * sigma, alive_hi[k] - mu);
                prior_nodes.clear();
                if (phi > plo) {
                    const std::size_t np = std::max<std::size_t>(
                        33, static_cast<std::size_t>((phi - plo) / h_theta) + 2);
                    for (std::size_t q = 0; q < np; ++q) {
                        prior_nodes.push_back(plo + (phi - plo) * static_cast<double>(q) / (np - 1));
                    }
                }
                lik_nodes.clear();
                if (data.enrolled[k] > 0) {
                    // Clip against the Gaussian factor: beyond this the kernel
                    // sits 170+ nats under the conditional peak.
                    const double n_k = data.enrolled[k];
                    const double reach = 2.0 * sigma * sigma * n_k + 19.0 * sigma + 8.0;
                    const double la = std::max(eta_center[k] - 25.0 - mu, -reach);
                    const double lb = std::min(eta_center[k] + 25.0 - mu, reach);
                    if (lb > la) {
                        const std::size_t nl = std::max<std::size_t>(
                            33, static_cast<std::size_t>((lb - la) / (50.0 / (NL - 1))) + 2);
                        for (std::size_t q = 0; q < nl; ++q) {
                            lik_nodes.push_back(la + (lb - la) * static_cast<double>(q) / (nl - 1));
                        }
                    }
                }
                for (std::size_t t = 0; t < T; ++t) cut_nodes[t] = cs[t] - mu;
                std::sort(cut_nodes.begin(), cut_nodes.end());
                merged.resize(prior_nodes.size() + lik_nodes.size());
                std::merge(prior_nodes.begin(), prior_nodes.end(), lik_nodes.begin(),
                           lik_nodes.end(), merged.begin());
                grid.resize(merged.size() + cut_nodes.size());
                std::merge(merged.begin(), merged.end(), cut_nodes.begin(), cut_nodes.end(),
                           grid.begin());

                f.resize(grid.size());
                double ll_max = -std::numeric_limits<double>::infinity();
                for (std::size_t q = 0; q < grid.size(); ++q) {
                    f[q] = detail::cond_kernel(data.responders[k], data.enrolled[k], mu, inv_s2,
                                               grid[q]);
                    ll_max = std::max(ll_max, f[q]);
                }
                for (std::size_t q = 0; q < grid.size(); ++q) f[q] = std::exp(f[q] - ll_max);
                double total = 0.0, mean = 0.0;
                for (std::size_t q = 0; q + 1 < grid.size(); ++q) {
                    const double dw = 0.5 * (grid[q + 1] - grid[q]);
                    total += dw * (f[q] + f[q + 1]);
                    mean += dw * (f[q] * expit(mu + grid[q]) + f[q + 1] * expit(mu + grid[q + 1]));
                }
                for (std::size_t t = 0; t < T; ++t) {
                    const double c = cs[t] - mu;
                    double upper = 0.0;
                    for (std::size_t q = 0; q + 1 < grid.size(); ++q) {
                        if (grid[q] >= c) upper += 0.5 * (grid[q + 1] - grid[q]) * (f[q] + f[q + 1]);
                    }
                    cell_tail[(i * J + k) * T + t] = std::clamp(upper / total, 0.0, 1.0);
                }
                cell_mean[i * J + k] = mean / total;
                lp += std::log(total) + ll_max + log_norm;
            }
            cell_logw[i] = lp;
        }

        double rmax = -std::numeric_limits<double>::infinity();
        for (double v : cell_logw) rmax = std::max(rmax, v);
        if (rmax == -std::numeric_limits<double>::infinity()) continue;
        row_logmax[j] = rmax;
        double* racc = row_acc.data() + j * RC;
        for (std::size_t i = 0; i < NMU; ++i) {
            if (cell_logw[i] == -std::numeric_limits<double>::infinity()) continue;
            const double left = (i == 0) ? 0.0 : mus[i] - mus[i - 1];
            const double right = (i + 1 == NMU) ? 0.0 : mus[i + 1] - mus[i];
            const double w = std::exp(cell_logw[i] - rmax) * 0.5 * (left + right);
            racc[0] += w;
            for (std::size_t k = 0; k < J; ++k) {
                racc[1 + J * T + k] += w * cell_mean[i * J + k];
                for (std::size_t t = 0; t < T; ++t) {
                    racc[1 + k * T + t] += w * cell_tail[(i * J + k) * T + t];
                }
            }
        }
        row_edge[j] = (std::exp(cell_logw.front() - rmax) + std::exp(cell_logw.back() - rmax)) *
                      0.5 * (mus[1] - mus[0] + mus[NMU - 1] - mus[NMU - 2]);
    }

    double g_max = -std::numeric_limits<double>::infinity();
    for (double v : row_logmax) g_max = std::max(g_max, v);
    PosteriorResult res(std::vector<double>(thresholds.begin(), thresholds.end()), J);
    double total_w = 0.0, perimeter_w = 0.0;
    std::vector<double> acc(RC, 0.0);
    std::size_t first_row = NU, last_row = NU;
    for (std::size_t j = 0; j < NU; ++j) {
        if (row_logmax[j] == -std::numeric_limits<double>::infinity()) continue;
        if (first_row == NU) first_row = j;
        last_row = j;
        const double wu = (j == 0 || j == NU - 1) ? 0.5 * h_u : h_u;
        const double scale = std::exp(row_logmax[j] - g_max) * wu;
        for (std::size_t c = 0; c < RC; ++c) acc[c] += scale * row_acc[j * RC + c];
        perimeter_w += scale * row_edge[j];
    }
    total_w = acc[0];
    if (first_row < NU) {
        const double wu0 = (first_row == 0 || first_row == NU - 1) ? 0.5 * h_u : h_u;
        perimeter_w += std::exp(row_logmax[first_row] - g_max) * wu0 * row_acc[first_row * RC];
        if (last_row != first_row) {
            const double wu1 = (last_row == 0 || last_row == NU - 1) ? 0.5 * h_u : h_u;
            perimeter_w += std::exp(row_logmax[last_row] - g_max) * wu1 * row_acc[last_row * RC];
        }
    }
    for (std::size_t k = 0; k < J; ++k) {
        res.post_mean_p(k) = acc[1 + J * T + k] / total_w;
        for (std::size_t t = 0; t < T; ++t) {
            res.tail_at(k, t) = std::clamp(acc[1 + k * T + t] / total_w, 0.0, 1.0);
        }
    }
    res.log_evidence = g_max + std::log(total_w);
    res.grid_diag.mu_lo = -45.0;
    res.grid_diag.mu_hi = 45.0;
    res.grid_diag.log_sigma_lo = u_min;
    res.grid_diag.log_sigma_hi = u_max;
    res.grid_diag.mass_capture = 1.0 - perimeter_w / total_w;
    res.grid_diag.accuracy_warning = res.grid_diag.mass_capture < 1.0 - 1e-4;
    return res;
}

// Content-addressed cache of fit results. Arms are keyed in canonical order,
// so permuted datasets and replicates that happen to land on the same counts
// share one computation. Lookups never change the numbers a caller sees: a
// hit returns exactly what fit() would have produced.
class FitCache {
  public:
    std::shared_ptr<const PosteriorResult> find(const std::string& key) const {
        std::shared_lock lock(mutex_);
        const auto it = map_.find(key);
        return it == map_.end() ? nullptr : it->second;
    }

    void store(const std::string& key, std::shared_ptr<const PosteriorResult> value) {
        std::unique_lock lock(mutex_);
        map_.emplace(key, std::move(value));
    }

    std::size_t size() const {
        std::shared_lock lock(mutex_);
        return map_.size();
    }

    static std::string make_key(const ModelData& data, const HyperPrior& hp,
                                std::span<const double> thresholds) {
        const auto cd = detail::canonicalize(data);
        std::string key;
        key.reserve(16 * (cd.groups.size() + thresholds.size() + 4));
        const auto put_double = [&key](double v) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof(bits));
            key.append(reinterpret_cast<const char*>(&bits), sizeof(bits));
        };
        const auto put_int = [&key](std::int64_t v) {
            key.append(reinterpret_cast<const char*>(&v), sizeof(v));
        };
        for (const auto& g : cd.groups) {
            put_int(g.n);
            put_int(g.y);
            put_int(g.mult);
        }
        put_int(-1);
        put_int(static_cast<std::int64_t>(hp.sigma_prior.index()));
        std::visit(
            [&](const auto& p) {
                using P = std::decay_t<decltype(p)>;
                if constexpr (std::is_same_v<P, GammaOnPrecision>) {
                    put_double(p.shape);
                    put_double(p.rate);
                } else if constexpr (std::is_same_v<P, UniformOnSd>) {
                    put_double(p.lower);
                    put_double(p.upper);
                } else if constexpr (std::is_same_v<P, HalfT>) {
                    put_double(p.scale);
                    put_double(p.dof);
                } else {
                    put_double(p.rate);
                }
            },
            hp.sigma_prior);
        put_double(hp.mu_mean);
        put_double(hp.mu_var);
        for (double t : thresholds) put_double(t);
        return key;
    }

  private:
    mutable std::shared_mutex mutex_;
    std::unordered_map<std::string, std::shared_ptr<const PosteriorResult>> map_;
};

// fit() with optional memoization. The cache stores the canonical (sorted)
// result; this wrapper maps it back to the caller's arm order.
inline PosteriorResult fit_cached(const ModelData& data, const HyperPrior& hp,
                                  std::span<const double> thresholds, FitCache* cache) {
    if (cache == nullptr) return fit(data, hp, thresholds);
    data.validate();
    const auto cd = detail::canonicalize(data);
    ModelData canonical;
    canonical.responders.resize(data.arms());
    canonical.enrolled.resize(data.arms());
    for (std::size_t pos = 0; pos < data.arms(); ++pos) {
        canonical.responders[pos] = data.responders[cd.order[pos]];
        canonical.enrolled[pos] = data.enrolled[cd.order[pos]];
    }
    const std::string key = FitCache::make_key(canonical, hp, thresholds);
    std::shared_ptr<const PosteriorResult> hit = cache->find(key);
    if (!hit) {
        hit = std::make_shared<const PosteriorResult>(fit(canonical, hp, thresholds));
        cache->store(key, hit);
    }
    PosteriorResult res(std::vector<double>(thresholds.begin(), thresholds.end()), data.arms());
    for (std::size_t pos = 0; pos < data.arms(); ++pos) {
        const std::size_t arm = cd.order[pos];
        res.post_mean_p(arm) = hit->post_mean_p(pos);
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            res.tail_at(arm, t) = hit->tail_at(pos, t);
        }
    }
    res.log_evidence = hit->log_evidence;
    res.grid_diag = hit->grid_diag;
    return res;
}

}  // namespace basket
