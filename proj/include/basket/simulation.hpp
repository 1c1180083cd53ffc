#pragma once

// Monte Carlo layer: scenario replication, probability-cutoff calibration,
// and operating-characteristics aggregation. Replicate i always draws from a
// stream derived from (seed, i), so results are identical for any thread
// count; aggregation is a fold in replicate order.

#include <atomic>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "basket/trial.hpp"

namespace basket {

struct simulation_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Scenario {
    std::string name;
    std::vector<double> p_true;

    void validate(std::size_t arms) const {
        detail::require(p_true.size() == arms, "Scenario: one true rate per arm required");
        for (double p : p_true) detail::require(p > 0.0 && p < 1.0, "Scenario: rates must lie in (0,1)");
    }
};

// The five four-armed study scenarios, ordered by the number of active arms.
inline const std::vector<Scenario>& scenario_presets() {
    static const std::vector<Scenario> presets = {
        {"scenario1", {0.20, 0.20, 0.20, 0.20}},
        {"scenario2", {0.20, 0.20, 0.20, 0.35}},
        {"scenario3", {0.35, 0.20, 0.20, 0.35}},
        {"scenario4", {0.35, 0.35, 0.20, 0.35}},
        {"scenario5", {0.35, 0.35, 0.35, 0.35}},
    };
    return presets;
}

inline const Scenario& scenario_preset(const std::string& name) {
    for (const auto& s : scenario_presets()) {
        if (s.name == name) return s;
    }
    throw std::domain_error("unknown scenario preset: " + name);
}

struct ReplicateResult {
    std::size_t index = 0;
    std::optional<TrialOutcome> outcome;
    std::string error;
};

inline unsigned resolve_threads(unsigned requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? hw : 1;
}

namespace detail {

inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& body) {
    threads = std::min<std::size_t>(resolve_threads(threads), n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) body(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace detail

// Run nsim independent replicates of the design under a scenario. Individual
// replicate failures are recorded in place; the batch aborts only if more
// than 5% of replicates fail.
inline std::vector<ReplicateResult> simulate_batch(const TrialDesign& design,
                                                   const Scenario& scenario, int nsim,
                                                   std::uint64_t master_seed,
                                                   unsigned threads = 0,
                                                   FitCache* cache = nullptr) {
    design.validate();
    scenario.validate(design.arms);
    detail::require(nsim >= 1, "simulate_batch: nsim must be >= 1");

    std::vector<ReplicateResult> results(nsim);
    detail::parallel_for(static_cast<std::size_t>(nsim), threads, [&](std::size_t i) {
        results[i].index = i;
        ReplicateRng rng(master_seed, i);
        try {
            results[i].outcome = run_trial(design, scenario.p_true, rng, cache);
        } catch (const std::exception& e) {
            results[i].error = e.what();
        }
    });

    int failures = 0;
    for (const auto& r : results) {
        if (!r.outcome) ++failures;
    }
    if (failures * 20 > nsim) {
        throw simulation_error("simulate_batch: " + std::to_string(failures) + " of " +
                               std::to_string(nsim) + " replicates failed (first error: " +
                               [&] {
                                   for (const auto& r : results) {
                                       if (!r.outcome) return r.error;
                                   }
                                   return std::string("none");
                               }() +
                               ")");
    }
    return results;
}

// Empirical (1 - alpha) quantile, right-continuous, of the pooled
// per-(replicate, arm) final tail probabilities, rounded to 3 decimals.
inline double find_cutoff(const std::vector<double>& pooled_tail_probs, double alpha) {
    detail::require(!pooled_tail_probs.empty(), "find_cutoff: no tail probabilities given");
    detail::require(alpha > 0.0 && alpha < 1.0, "find_cutoff: alpha must lie in (0,1)");
    std::vector<double> sorted = pooled_tail_probs;
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    std::size_t rank = static_cast<std::size_t>(std::ceil((1.0 - alpha) * n));
    rank = std::min(std::max<std::size_t>(rank, 1), sorted.size());
    return std::round(sorted[rank - 1] * 1000.0) / 1000.0;
}

inline double find_cutoff(const std::vector<ReplicateResult>& null_results, double alpha) {
    std::vector<double> pooled;
    for (const auto& r : null_results) {
        if (!r.outcome) continue;
        pooled.insert(pooled.end(), r.outcome->final_tail_probs.begin(),
                      r.outcome->final_tail_probs.end());
    }
    return find_cutoff(pooled, alpha);
}

struct OperatingCharacteristics {
    std::vector<double> rejection_prob;  // per arm
    std::vector<double> mc_se;           // per arm, sqrt(r(1-r)/n)
    std::vector<std::string> labels;     // per arm: "typeI" or "power"
    double ess = 0.0;                    // mean total enrollment
    int n_replicates = 0;
    int failures = 0;
};

// Per-arm rejection proportions under the design's cutoff, Monte Carlo
// standard errors, and expected sample size. Decisions are recomputed from
// the stored tail probabilities so one batch can be scored under any zeta.
inline OperatingCharacteristics operating_chars(const std::vector<ReplicateResult>& results,
                                                const TrialDesign& design,
                                                const Scenario& scenario) {
    detail::require(!results.empty(), "operating_chars: no replicates");
    scenario.validate(design.arms);
    OperatingCharacteristics oc;
    oc.rejection_prob.assign(design.arms, 0.0);
    oc.mc_se.assign(design.arms, 0.0);
    oc.labels.resize(design.arms);
    long long total_enrolled = 0;
    for (const auto& r : results) {
        if (!r.outcome) {
            ++oc.failures;
            continue;
        }
        ++oc.n_replicates;
        total_enrolled += r.outcome->total_enrolled;
        for (std::size_t j = 0; j < design.arms; ++j) {
            if (r.outcome->final_tail_probs[j] > design.zeta) oc.rejection_prob[j] += 1.0;
        }
    }
    detail::require(oc.n_replicates > 0, "operating_chars: every replicate failed");
    for (std::size_t j = 0; j < design.arms; ++j) {
        const double r = oc.rejection_prob[j] / oc.n_replicates;
        oc.rejection_prob[j] = r;
        oc.mc_se[j] = std::sqrt(r * (1.0 - r) / oc.n_replicates);
        oc.labels[j] = scenario.p_true[j] <= design.q0 ? "typeI" : "power";
    }
    oc.ess = static_cast<double>(total_enrolled) / oc.n_replicates;
    return oc;
}

// ---------------------------------------------------------------------------
// The full study pipeline: calibrate in the all-null scenario, then evaluate
// ---------------------------------------------------------------------------

struct StudyCell {
    std::string prior_name;
    int scenario = 1;
    double zeta = 0.0;
    OperatingCharacteristics oc;
    std::uint64_t seed = 0;
    int nsim = 0;
};

struct StudyExclusion {
    std::string prior_name;
    std::string reason;
};

struct StudyResult {
    std::vector<StudyCell> cells;
    std::vector<StudyExclusion> excluded;
    std::vector<std::pair<std::string, double>> zetas;  // per prior
    int max_per_arm = 0;
    int nsim = 0;
    double alpha = 0.1;
    std::uint64_t master_seed = 0;

    // One row per (prior, scenario, arm); probabilities to 3 decimals, ESS to 1.
    std::string to_csv() const {
        std::string out = "prior,scenario,arm,rejection_prob,mc_se,label,ess,nsim,seed\n";
        char line[256];
        for (const auto& cell : cells) {
            for (std::size_t j = 0; j < cell.oc.rejection_prob.size(); ++j) {
                std::snprintf(line, sizeof(line), "%s,%d,%zu,%.3f,%.3f,%s,%.1f,%d,%llu\n",
                              cell.prior_name.c_str(), cell.scenario, j + 1,
                              cell.oc.rejection_prob[j], cell.oc.mc_se[j],
                              cell.oc.labels[j].c_str(), cell.oc.ess, cell.nsim,
                              static_cast<unsigned long long>(cell.seed));
                out += line;
            }
        }
        return out;
    }

    const StudyCell* cell(const std::string& prior, int scenario_index) const {
        for (const auto& c : cells) {
            if (c.prior_name == prior && c.scenario == scenario_index) return &c;
        }
        return nullptr;
    }

    double zeta_for(const std::string& prior) const {
        for (const auto& [name, z] : zetas) {
            if (name == prior) return z;
        }
        throw std::domain_error("no calibrated cutoff for prior " + prior);
    }
};

inline TrialDesign standard_design(int max_per_arm, const PriorSpec& prior) {
    TrialDesign design;
    design.arms = 4;
    design.max_per_arm.assign(4, max_per_arm);
    design.hp.sigma_prior = prior;
    return design;
}

// For each prior: simulate the all-null scenario, calibrate the cutoff at the
// target alpha, score scenario 1 on those same replicates, then evaluate the
// remaining scenarios with fresh seeds. Calibration and evaluation seeds are
// derived from the master seed only, so every prior sees identical patient
// streams and comparisons between priors share their Monte Carlo noise.
inline StudyResult standard_study(const std::vector<std::pair<std::string, PriorSpec>>& priors,
                                  int max_per_arm, int nsim, std::uint64_t master_seed,
                                  double alpha = 0.1, unsigned threads = 0,
                                  const std::vector<int>& scenario_subset = {1, 2, 3, 4, 5}) {
    detail::require(!priors.empty(), "standard_study: no priors given");
    detail::require(nsim >= 1, "standard_study: nsim must be >= 1");
    StudyResult study;
    study.max_per_arm = max_per_arm;
    study.nsim = nsim;
    study.alpha = alpha;
    study.master_seed = master_seed;

    const std::uint64_t calib_seed = derive_stream_seed(master_seed, 0x0c001);
    const auto eval_seed = [master_seed](int scenario_index) {
        return derive_stream_seed(master_seed, 0x0e000 + static_cast<std::uint64_t>(scenario_index));
    };

    for (const auto& [name, prior] : priors) {
        TrialDesign design = standard_design(max_per_arm, prior);
        FitCache cache;  // shared across all scenarios of this prior
        std::vector<ReplicateResult> calib;
        double zeta;
        try {
            calib = simulate_batch(design, scenario_presets()[0], nsim, calib_seed, threads, &cache);
            zeta = find_cutoff(calib, alpha);
        } catch (const std::exception& e) {
            study.excluded.push_back({name, e.what()});
            continue;
        }
        study.zetas.emplace_back(name, zeta);
        design.zeta = zeta;
        for (int s : scenario_subset) {
            detail::require(s >= 1 && s <= 5, "standard_study: scenario index must be 1..5");
            const Scenario& scenario = scenario_presets()[s - 1];
            StudyCell cell;
            cell.prior_name = name;
            cell.scenario = s;
            cell.zeta = zeta;
            cell.nsim = nsim;
            if (s == 1) {
                cell.seed = calib_seed;
                cell.oc = operating_chars(calib, design, scenario);
            } else {
                cell.seed = eval_seed(s);
                try {
                    const auto results =
                        simulate_batch(design, scenario, nsim, cell.seed, threads, &cache);
                    cell.oc = operating_chars(results, design, scenario);
                } catch (const std::exception& e) {
                    study.excluded.push_back({name + "/scenario" + std::to_string(s), e.what()});
                    continue;
                }
            }
            study.cells.push_back(std::move(cell));
        }
    }
    return study;
}

inline StudyResult standard_study(const std::vector<std::string>& prior_names, int max_per_arm,
                                  int nsim, std::uint64_t master_seed, double alpha = 0.1,
                                  unsigned threads = 0,
                                  const std::vector<int>& scenario_subset = {1, 2, 3, 4, 5}) {
    std::vector<std::pair<std::string, PriorSpec>> priors;
    priors.reserve(prior_names.size());
    for (const auto& name : prior_names) priors.emplace_back(name, preset_prior(name));
    return standard_study(priors, max_per_arm, nsim, master_seed, alpha, threads, scenario_subset);
}

}  // namespace basket
