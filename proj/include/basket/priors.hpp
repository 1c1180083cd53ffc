#pragma once

// Arm-level variance priors for the hierarchical logit model, the two
// rate-scaling procedures for the exponential (PC-type) prior, and the
// distance calculus behind it. All densities are expressed on the standard
// deviation scale so the posterior engine integrates a single variable.

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>

#include "basket/numerics.hpp"

namespace basket {

// Gamma(shape, rate) on the precision tau = 1/sigma^2.
struct GammaOnPrecision {
    double shape = 1.0;
    double rate = 1.0;
};

// Uniform on sigma over [lower, upper].
struct UniformOnSd {
    double lower = 0.0;
    double upper = 1.0;
};

// Half-t on sigma with scale gamma and dof nu (nu = 1 gives half-Cauchy).
struct HalfT {
    double scale = 1.0;
    double dof = 1.0;
};

// Exponential on sigma with the given rate; mass near sigma = 0 grows with
// the rate, which is how the shrinkage strength is tuned.
struct PcPrior {
    double rate = 1.0;
};

using PriorSpec = std::variant<GammaOnPrecision, UniformOnSd, HalfT, PcPrior>;

inline void validate_prior(const PriorSpec& prior) {
    std::visit(
        [](const auto& p) {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, GammaOnPrecision>) {
                detail::require(std::isfinite(p.shape) && p.shape > 0.0 &&
                                    std::isfinite(p.rate) && p.rate > 0.0,
                                "GammaOnPrecision: shape and rate must be positive");
            } else if constexpr (std::is_same_v<T, UniformOnSd>) {
                detail::require(std::isfinite(p.lower) && p.lower >= 0.0 &&
                                    std::isfinite(p.upper) && p.upper > p.lower,
                                "UniformOnSd: need 0 <= lower < upper");
            } else if constexpr (std::is_same_v<T, HalfT>) {
                detail::require(std::isfinite(p.scale) && p.scale > 0.0 &&
                                    std::isfinite(p.dof) && p.dof > 0.0,
                                "HalfT: scale and dof must be positive");
            } else {
                detail::require(std::isfinite(p.rate) && p.rate > 0.0,
                                "PcPrior: rate must be positive");
            }
        },
        prior);
}

inline std::string prior_label(const PriorSpec& prior) {
    return std::visit(
        [](const auto& p) -> std::string {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, GammaOnPrecision>) {
                return "gamma(shape=" + std::to_string(p.shape) + ", rate=" + std::to_string(p.rate) + ")";
            } else if constexpr (std::is_same_v<T, UniformOnSd>) {
                return "uniform(" + std::to_string(p.lower) + ", " + std::to_string(p.upper) + ")";
            } else if constexpr (std::is_same_v<T, HalfT>) {
                return "half-t(scale=" + std::to_string(p.scale) + ", dof=" + std::to_string(p.dof) + ")";
            } else {
                return "pc(rate=" + std::to_string(p.rate) + ")";
            }
        },
        prior);
}

// log pi(sigma). The Gamma family is parameterized on the precision, so its
// density is transported to the sigma scale: pi(sigma) = pi_tau(sigma^-2) * 2 sigma^-3.
inline double log_density_sd(const PriorSpec& prior, double sigma) {
    detail::require(std::isfinite(sigma) && sigma > 0.0, "log_density_sd: sigma must be positive");
    validate_prior(prior);
    return std::visit(
        [sigma](const auto& p) -> double {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, GammaOnPrecision>) {
                return p.shape * std::log(p.rate) - ln_gamma(p.shape) + std::log(2.0) -
                       (2.0 * p.shape + 1.0) * std::log(sigma) - p.rate / (sigma * sigma);
            } else if constexpr (std::is_same_v<T, UniformOnSd>) {
                if (sigma < p.lower || sigma > p.upper) {
                    return -std::numeric_limits<double>::infinity();
                }
                return -std::log(p.upper - p.lower);
            } else if constexpr (std::is_same_v<T, HalfT>) {
                const double norm = 2.0 / (p.scale * std::sqrt(p.dof) * beta_fn(0.5, 0.5 * p.dof));
                const double z = sigma / p.scale;
                return std::log(norm) - 0.5 * (p.dof + 1.0) * std::log1p(z * z / p.dof);
            } else {
                return std::log(p.rate) - p.rate * sigma;
            }
        },
        prior);
}

// Half-t c.d.f.: G(x) = I(x^2 / (x^2 + gamma^2 nu); 1/2, nu/2) for x >= 0.
inline double halft_cdf(double gamma, double nu, double x) {
    detail::require(std::isfinite(gamma) && gamma > 0.0 && std::isfinite(nu) && nu > 0.0,
                    "halft_cdf: scale and dof must be positive");
    detail::require(std::isfinite(x) && x >= 0.0, "halft_cdf: x must be nonnegative");
    if (x == 0.0) return 0.0;
    const double x2 = x * x;
    return reg_inc_beta(x2 / (x2 + gamma * gamma * nu), 0.5, 0.5 * nu);
}

// Rate from a guess on the marginal standard deviation of the arm effects:
// lambda = -0.31 ln(0.01) / sd.
inline double lambda_from_sd(double sd) {
    detail::require(std::isfinite(sd) && sd > 0.0, "lambda_from_sd: sd must be positive");
    return -0.31 * std::log(0.01) / sd;
}

// Rate of the exponential prior that puts the same mass as half-t(gamma, nu)
// on the tail interval [x, infinity):
//   lambda(x) = -ln[1 - I(x^2/(x^2 + gamma^2 nu); 1/2, nu/2)] / x.
// The survival is evaluated in complement form on the upper branch so the
// result stays accurate when it underflows toward zero.
inline double lambda_htd(double gamma, double nu, double x) {
    detail::require(std::isfinite(gamma) && gamma > 0.0 && std::isfinite(nu) && nu > 0.0,
                    "lambda_htd: scale and dof must be positive");
    detail::require(std::isfinite(x) && x > 0.0, "lambda_htd: x must be positive");
    const double g2nu = gamma * gamma * nu;
    const double z = x * x / (x * x + g2nu);
    double log_survival;
    if (z <= 0.5) {
        log_survival = std::log1p(-reg_inc_beta(z, 0.5, 0.5 * nu));
    } else {
        const double survival = reg_inc_beta(g2nu / (x * x + g2nu), 0.5 * nu, 0.5);
        if (survival <= 0.0) {
            throw std::range_error("lambda_htd: half-t survival underflows at x = " + std::to_string(x));
        }
        log_survival = std::log(survival);
    }
    return -log_survival / x;
}

// Small-x limit of lambda_htd: lambda0 = 2 / (gamma sqrt(nu) B(1/2, nu/2)).
inline double lambda0(double gamma, double nu) {
    detail::require(std::isfinite(gamma) && gamma > 0.0 && std::isfinite(nu) && nu > 0.0,
                    "lambda0: scale and dof must be positive");
    return 2.0 / (gamma * std::sqrt(nu) * beta_fn(0.5, 0.5 * nu));
}

// Result of matching an exponential prior to the tail of a half-t. x_star is
// the left endpoint of the widest tail interval on which the matched rate
// does not exceed its small-x limit; the returned rate is that limit.
struct EpcDerivation {
    double gamma = 0.0;
    double nu = 0.0;
    double lambda0 = 0.0;
    double x_star = 0.0;
    double lambda = 0.0;
};

// lambda_htd(gamma, nu, .) rises from lambda0 to a single peak and then decays
// to zero, so the matching equation lambda(x) = lambda0 has exactly one root
// beyond the peak. Locate the peak by golden section, then bisect.
inline EpcDerivation epc_from_halft(double gamma, double nu) {
    const double l0 = lambda0(gamma, nu);
    const double x_peak = golden_section_max(
        [&](double x) { return lambda_htd(gamma, nu, x); }, 1e-6 * gamma, 1e3 * gamma,
        1e-10 * gamma);
    const double hi = 1e6 * gamma;
    double x_star;
    try {
        x_star = find_root([&](double x) { return lambda_htd(gamma, nu, x) - l0; }, x_peak, hi, 1e-8);
    } catch (const bracketing_error&) {
        throw bracketing_error("epc_from_halft: tail-matching rate never crosses its limit in [peak, 1e6*scale]");
    }
    EpcDerivation d;
    d.gamma = gamma;
    d.nu = nu;
    d.lambda0 = l0;
    d.x_star = x_star;
    d.lambda = l0;  // the rate at the interval boundary is the limit itself
    return d;
}

namespace detail {

// Marginal density of the arm effect theta under an exponential prior on
// sigma: pi(theta) = integral N(theta; 0, sigma^2) lambda e^(-lambda sigma) d sigma,
// truncated where the exponential carries less than 1e-10 of its mass.
// Integrated in log(sigma) with composite Gauss-Legendre panels.
inline double effect_marginal_density(double lambda, double theta) {
    const double sigma_max = -std::log(1e-10) / lambda;
    const double at = std::fabs(theta);
    const double sigma_min = std::max(at / 50.0, sigma_max * 1e-12);
    const double v_lo = std::log(sigma_min);
    const double v_hi = std::log(sigma_max);
    constexpr int panels = 24;
    constexpr std::size_t nodes_per_panel = 16;
    double total = 0.0;
    const double width = (v_hi - v_lo) / panels;
    for (int p = 0; p < panels; ++p) {
        const auto rule = QuadratureRule::gauss_legendre_rule(v_lo + p * width,
                                                              v_lo + (p + 1) * width,
                                                              nodes_per_panel);
        total += rule.integrate([&](double v) {
            const double sigma = std::exp(v);
            // N(theta; 0, sigma^2) * lambda e^(-lambda sigma) * sigma  (Jacobian)
            return std::exp(-0.5 * at * at / (sigma * sigma)) / std::sqrt(2.0 * M_PI) *
                   lambda * std::exp(-lambda * sigma);
        });
    }
    return total;
}

}  // namespace detail

// Prior induced on the odds ratio r = e^theta by an exponential prior on
// sigma: pi_R(r) = pi_theta(ln r) / r.
inline double implied_or_density(double lambda, double r) {
    detail::require(std::isfinite(lambda) && lambda > 0.0, "implied_or_density: lambda must be positive");
    detail::require(std::isfinite(r) && r > 0.0, "implied_or_density: r must be positive");
    return detail::effect_marginal_density(lambda, std::log(r)) / r;
}

// KLD between N(0, sigma^2 I_J) and N(0, sigma0^2 I_J):
//   (J/2) [sigma^2/sigma0^2 - 1 - ln(sigma^2/sigma0^2)].
inline double kld_gauss(double sigma, double sigma0, int dim) {
    detail::require(std::isfinite(sigma) && sigma > 0.0 && std::isfinite(sigma0) && sigma0 > 0.0,
                    "kld_gauss: standard deviations must be positive");
    detail::require(dim >= 1, "kld_gauss: dimension must be a positive integer");
    const double rho = (sigma * sigma) / (sigma0 * sigma0);
    return 0.5 * dim * (rho - 1.0 - std::log(rho));
}

// Distance from the base model: d(sigma) = (sigma/sigma0) sqrt(J). This is
// the limit of sqrt(2 KLD) as sigma0/sigma -> 0.
inline double pc_distance(double sigma, double sigma0, int dim) {
    detail::require(std::isfinite(sigma) && sigma > 0.0 && std::isfinite(sigma0) && sigma0 > 0.0,
                    "pc_distance: standard deviations must be positive");
    detail::require(dim >= 1, "pc_distance: dimension must be a positive integer");
    return sigma / sigma0 * std::sqrt(static_cast<double>(dim));
}

// ---------------------------------------------------------------------------
// Named presets used throughout the simulation study
// ---------------------------------------------------------------------------

inline PriorSpec preset_prior(std::string_view name) {
    if (name == "G") return GammaOnPrecision{0.0005, 0.000005};
    if (name == "U") return UniformOnSd{0.0, 100.0};
    if (name == "HT") return HalfT{10.0, 1.0};
    if (name == "PC1") return PcPrior{lambda_from_sd(1.0)};
    if (name == "PC5") return PcPrior{lambda_from_sd(5.0)};
    if (name == "PC10") return PcPrior{lambda_from_sd(10.0)};
    if (name == "EPC") return PcPrior{lambda0(10.0, 1.0)};
    throw std::domain_error("unknown prior preset: " + std::string(name));
}

inline const std::vector<std::string>& preset_prior_names() {
    static const std::vector<std::string> names = {"G", "U", "HT", "PC1", "PC5", "PC10", "EPC"};
    return names;
}

}  // namespace basket
