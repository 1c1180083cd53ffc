#pragma once

// Sequential basket-trial engine: synchronized enrollment, interim looks
// with futility/efficacy closure per arm, and the final analysis on all
// accrued data.

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "basket/inference.hpp"
#include "basket/rng.hpp"

namespace basket {

enum class ArmStatus : std::uint8_t {
    open,
    closed_futility,
    closed_efficacy,
    closed_max_n,
};

inline const char* arm_status_name(ArmStatus s) {
    switch (s) {
        case ArmStatus::open: return "open";
        case ArmStatus::closed_futility: return "futility";
        case ArmStatus::closed_efficacy: return "efficacy";
        case ArmStatus::closed_max_n: return "max_n";
    }
    return "unknown";
}

inline ArmStatus arm_status_from_name(const std::string& name) {
    if (name == "open") return ArmStatus::open;
    if (name == "futility") return ArmStatus::closed_futility;
    if (name == "efficacy") return ArmStatus::closed_efficacy;
    if (name == "max_n") return ArmStatus::closed_max_n;
    throw std::domain_error("unknown arm status: " + name);
}

struct TrialDesign {
    std::size_t arms = 4;
    std::vector<int> max_per_arm = {37, 37, 37, 37};
    double q0 = 0.20;             // uninteresting response rate
    double q1 = 0.35;             // desirable response rate
    double ia1_fraction = 0.4;    // fraction of each arm enrolled before the first look
    double step = 0.5;            // later looks every ceil(step * n1) patients
    double futility_threshold = 0.05;
    double efficacy_threshold = 0.90;
    double zeta = 1.0;            // final cutoff; 1.0 declares nothing effective
    HyperPrior hp;

    double qbar() const { return 0.5 * (q0 + q1); }

    void validate() const {
        detail::require(arms >= 1 && max_per_arm.size() == arms,
                        "TrialDesign: max_per_arm must have one entry per arm");
        for (int n : max_per_arm) detail::require(n >= 1, "TrialDesign: max sample sizes must be >= 1");
        detail::require(q0 > 0.0 && q0 < q1 && q1 < 1.0, "TrialDesign: need 0 < q0 < q1 < 1");
        detail::require(ia1_fraction > 0.0 && ia1_fraction < 1.0,
                        "TrialDesign: ia1_fraction must lie in (0,1)");
        detail::require(step > 0.0 && step < 1.0, "TrialDesign: step must lie in (0,1)");
        detail::require(futility_threshold > 0.0 && futility_threshold < 1.0,
                        "TrialDesign: futility_threshold must lie in (0,1)");
        detail::require(efficacy_threshold > 0.0 && efficacy_threshold < 1.0,
                        "TrialDesign: efficacy_threshold must lie in (0,1)");
        detail::require(zeta > 0.0 && zeta <= 1.0, "TrialDesign: zeta must lie in (0,1]");
        hp.validate();
    }
};

struct TrialState {
    std::vector<int> enrolled;
    std::vector<int> responders;
    std::vector<ArmStatus> status;
    int analyses_done = 0;
    int n1_total = 0;  // total enrollment at the first interim, set once

    explicit TrialState(std::size_t arms = 0)
        : enrolled(arms, 0), responders(arms, 0), status(arms, ArmStatus::open) {}

    bool any_open() const {
        for (ArmStatus s : status) {
            if (s == ArmStatus::open) return true;
        }
        return false;
    }

    ModelData data() const { return ModelData{responders, enrolled}; }
};

struct TrialOutcome {
    std::vector<bool> effective;
    std::vector<double> final_tail_probs;  // Pr(p_j > q0 | all data)
    std::vector<int> per_arm_enrolled;
    std::vector<int> per_arm_responders;
    std::vector<ArmStatus> stop_reasons;
    int total_enrolled = 0;
    int analyses_done = 0;
};

// Enrollment targets for the first interim: ceil(ia1_fraction * N_j).
inline std::vector<int> first_interim_target(const TrialDesign& design) {
    design.validate();
    std::vector<int> target(design.arms);
    for (std::size_t j = 0; j < design.arms; ++j) {
        target[j] = static_cast<int>(std::ceil(design.ia1_fraction * design.max_per_arm[j]));
    }
    return target;
}

// Distribute batch_total patients over the open arms: equal shares with the
// remainder round-robin by ascending arm index, each arm capped at its
// remaining headroom. Undistributable patients are dropped. Responses are
// drawn per patient in arm order.
inline TrialState enroll(TrialState state, const TrialDesign& design, int batch_total,
                         ReplicateRng& rng, const std::vector<double>& p_true) {
    detail::require(batch_total >= 0, "enroll: batch_total must be nonnegative");
    detail::require(p_true.size() == design.arms, "enroll: p_true must have one rate per arm");
    std::vector<std::size_t> open;
    for (std::size_t j = 0; j < design.arms; ++j) {
        if (state.status[j] == ArmStatus::open) open.push_back(j);
    }
    if (open.empty() || batch_total == 0) return state;

    const int share = batch_total / static_cast<int>(open.size());
    const int remainder = batch_total % static_cast<int>(open.size());
    for (std::size_t idx = 0; idx < open.size(); ++idx) {
        const std::size_t j = open[idx];
        int allocation = share + (static_cast<int>(idx) < remainder ? 1 : 0);
        allocation = std::min(allocation, design.max_per_arm[j] - state.enrolled[j]);
        for (int q = 0; q < allocation; ++q) {
            state.enrolled[j] += 1;
            if (rng.bernoulli(p_true[j])) state.responders[j] += 1;
        }
    }
    return state;
}

// The interim decision rule on one arm's posterior tail probability at qbar.
// Both comparisons are strict, so a probability sitting exactly on a
// threshold leaves the arm open.
inline ArmStatus interim_decision(double tail_prob, double futility_threshold,
                                  double efficacy_threshold) {
    if (tail_prob < futility_threshold) return ArmStatus::closed_futility;
    if (tail_prob > efficacy_threshold) return ArmStatus::closed_efficacy;
    return ArmStatus::open;
}

// One interim analysis: fit the model on all accrued data (closed arms
// included; the hierarchy pools everything observed) and apply the
// futility/efficacy rules to each open arm. The returned fit carries tail
// probabilities at both qbar and q0 so the caller can reuse it for the final
// rule when no further data arrives.
inline TrialState interim_analysis(TrialState state, const TrialDesign& design,
                                   FitCache* cache = nullptr,
                                   PosteriorResult* fit_out = nullptr) {
    design.validate();
    detail::require(state.any_open(), "interim_analysis: no open arms");
    const double thresholds[2] = {design.qbar(), design.q0};
    PosteriorResult post;
    try {
        post = fit_cached(state.data(), design.hp, thresholds, cache);
    } catch (const numerical_error& e) {
        throw numerical_error("interim analysis " + std::to_string(state.analyses_done + 1) +
                              ": " + e.what());
    }
    for (std::size_t j = 0; j < design.arms; ++j) {
        if (state.status[j] != ArmStatus::open) continue;
        state.status[j] = interim_decision(post.tail_at(j, 0), design.futility_threshold,
                                           design.efficacy_threshold);
    }
    state.analyses_done += 1;
    if (fit_out != nullptr) *fit_out = std::move(post);
    return state;
}

// Run one complete trial: enroll to the first-interim targets, look, then
// alternate batches of ceil(step * n1) with further looks while any arm is
// open. Arms reaching their cap close as max_n. The final rule
// Pr(p_j > q0 | y) > zeta is applied to every arm on the full data set.
inline TrialOutcome run_trial(const TrialDesign& design, const std::vector<double>& p_true,
                              ReplicateRng& rng, FitCache* cache = nullptr) {
    design.validate();
    detail::require(p_true.size() == design.arms, "run_trial: p_true must have one rate per arm");
    for (double p : p_true) detail::require(p > 0.0 && p < 1.0, "run_trial: rates must lie in (0,1)");

    TrialState state(design.arms);
    const std::vector<int> first_target = first_interim_target(design);
    for (std::size_t j = 0; j < design.arms; ++j) {
        for (int q = 0; q < first_target[j]; ++q) {
            state.enrolled[j] += 1;
            if (rng.bernoulli(p_true[j])) state.responders[j] += 1;
        }
    }
    state.n1_total = std::accumulate(state.enrolled.begin(), state.enrolled.end(), 0);
    const int batch = static_cast<int>(std::ceil(design.step * state.n1_total));

    PosteriorResult last_fit;
    state = interim_analysis(std::move(state), design, cache, &last_fit);
    for (std::size_t j = 0; j < design.arms; ++j) {
        if (state.status[j] == ArmStatus::open && state.enrolled[j] >= design.max_per_arm[j]) {
            state.status[j] = ArmStatus::closed_max_n;
        }
    }
    while (state.any_open()) {
        state = enroll(std::move(state), design, batch, rng, p_true);
        state = interim_analysis(std::move(state), design, cache, &last_fit);
        for (std::size_t j = 0; j < design.arms; ++j) {
            if (state.status[j] == ArmStatus::open && state.enrolled[j] >= design.max_per_arm[j]) {
                state.status[j] = ArmStatus::closed_max_n;
            }
        }
    }

    // The trial always ends right after an interim, so the accrued data equal
    // the last fit's data and the final analysis can reuse it.
    TrialOutcome out;
    out.effective.resize(design.arms);
    out.final_tail_probs.resize(design.arms);
    for (std::size_t j = 0; j < design.arms; ++j) {
        out.final_tail_probs[j] = last_fit.tail_at(j, 1);  // threshold q0
        out.effective[j] = out.final_tail_probs[j] > design.zeta;
    }
    out.per_arm_enrolled = state.enrolled;
    out.per_arm_responders = state.responders;
    out.stop_reasons = state.status;
    out.total_enrolled = std::accumulate(state.enrolled.begin(), state.enrolled.end(), 0);
    out.analyses_done = state.analyses_done;
    return out;
}

}  // namespace basket
