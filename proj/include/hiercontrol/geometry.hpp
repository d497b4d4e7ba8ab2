#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "grid.hpp"

namespace hiercontrol {

enum class CaseTag { SameObservation, DisjointOverlap, NestedOverlap };

inline const char* case_name(CaseTag c) {
    switch (c) {
        case CaseTag::SameObservation: return "SameObservation";
        case CaseTag::DisjointOverlap: return "DisjointOverlap";
        case CaseTag::NestedOverlap: return "NestedOverlap";
    }
    return "?";
}

using Span = std::pair<double, double>;

/// Raw interval endpoints as read from a config. Aux sets are optional and
/// derived when absent.
struct GeometrySpec {
    Span O{0.3, 0.7};
    Span O1{0.1, 0.2};
    Span O2{0.8, 0.9};
    Span O1d{0.4, 0.6};
    Span O2d{0.4, 0.6};
    std::optional<Span> O_tilde;
    std::optional<Span> omega0;
    std::optional<Span> omega1;
    std::optional<Span> omega2;
};

struct ControlGeometry {
    Interval O;
    std::array<Interval, 2> Oi;
    std::array<Interval, 2> Oid;
    Interval O_tilde;
    /// omega0 alone (SameObservation) or omega1, omega2.
    std::vector<Interval> omega;
    CaseTag case_tag = CaseTag::SameObservation;
    /// Set when the aux sets could not be derived.
    std::string aux_note;

    bool two_eta() const { return case_tag != CaseTag::SameObservation; }
};

struct ConditionCheck {
    std::string name;
    bool pass = false;
    double measure = 0.0;  // overlap length in space units, where meaningful
    std::string detail;
};

struct ValidationReport {
    std::vector<ConditionCheck> checks;
    CaseTag case_tag = CaseTag::SameObservation;
    bool ok = true;

    const ConditionCheck* find(const std::string& name) const {
        for (const auto& c : checks)
            if (c.name == name) return &c;
        return nullptr;
    }
    std::string first_failure() const {
        for (const auto& c : checks)
            if (!c.pass) return c.name + (c.detail.empty() ? "" : " (" + c.detail + ")");
        return {};
    }
};

namespace detail {

inline Interval node_run_interval(const Mask& allowed, const SpaceTimeGrid& g) {
    // Longest run of allowed nodes, returned as the open interval whose mask
    // is exactly that run.
    int best_lo = -1, best_len = 0;
    for (int j = 0; j < g.nodes();) {
        if (allowed[static_cast<std::size_t>(j)] == 0.0) {
            ++j;
            continue;
        }
        int k = j;
        while (k < g.nodes() && allowed[static_cast<std::size_t>(k)] != 0.0) ++k;
        if (k - j > best_len) {
            best_len = k - j;
            best_lo = j;
        }
        j = k;
    }
    if (best_len == 0) return {};
    // Keep a margin of one node on each side when the run is long enough.
    int lo = best_lo, hi = best_lo + best_len - 1;
    if (best_len >= 5) {
        ++lo;
        --hi;
    }
    return Interval::from_nodes(lo - 1, hi + 1, g);
}

inline double overlap_length(const Mask& m, const SpaceTimeGrid& g) { return mask_count(m) * g.dx(); }

}  // namespace detail

/// Snap the five control sets and derive Õ and the omega sets when they are
/// not supplied. Hypothesis failures are not thrown here; validate_geometry
/// reports them.
inline ControlGeometry assemble_geometry(const GeometrySpec& s, const SpaceTimeGrid& g) {
    ControlGeometry geo;
    geo.O = Interval(s.O.first, s.O.second, g, "geometry.O");
    geo.Oi[0] = Interval(s.O1.first, s.O1.second, g, "geometry.O1");
    geo.Oi[1] = Interval(s.O2.first, s.O2.second, g, "geometry.O2");
    geo.Oid[0] = Interval(s.O1d.first, s.O1d.second, g, "geometry.O1d");
    geo.Oid[1] = Interval(s.O2d.first, s.O2d.second, g, "geometry.O2d");

    if (s.O_tilde)
        geo.O_tilde = Interval(s.O_tilde->first, s.O_tilde->second, g, "geometry.O_tilde");
    else
        geo.O_tilde = Interval::from_nodes(geo.O.jlo() + 1, geo.O.jhi() - 1, g);

    const Mask m1d = geo.Oid[0].mask(), m2d = geo.Oid[1].mask();
    const Mask mt = geo.O_tilde.mask();

    if (m1d == m2d) {
        geo.case_tag = CaseTag::SameObservation;
        if (s.omega0)
            geo.omega = {Interval(s.omega0->first, s.omega0->second, g, "geometry.omega0")};
        else
            geo.omega = {detail::node_run_interval(mask_and(m1d, mt), g)};
        return geo;
    }

    if (s.omega1 && s.omega2) {
        geo.omega = {Interval(s.omega1->first, s.omega1->second, g, "geometry.omega1"),
                     Interval(s.omega2->first, s.omega2->second, g, "geometry.omega2")};
        const Mask w1 = geo.omega[0].mask(), w2 = geo.omega[1].mask();
        if (mask_disjoint(w1, m2d) && mask_disjoint(w2, m1d))
            geo.case_tag = CaseTag::DisjointOverlap;
        else
            geo.case_tag = CaseTag::NestedOverlap;
        return geo;
    }

    // Disjoint variant first: omega_i inside O_id ∩ Õ, away from O_jd.
    const Interval w1 = detail::node_run_interval(mask_andnot(mask_and(m1d, mt), m2d), g);
    const Interval w2 = detail::node_run_interval(mask_andnot(mask_and(m2d, mt), m1d), g);
    if (w1.valid() && w2.valid() && !mask_empty(w1.mask()) && !mask_empty(w2.mask())) {
        geo.case_tag = CaseTag::DisjointOverlap;
        geo.omega = {w1, w2};
        return geo;
    }
    // Nested variant: omega_i inside O_id ∩ O_jd ∩ Õ, omega_j away from O_id.
    for (int i = 0; i < 2; ++i) {
        const int j = 1 - i;
        const Mask mi = i == 0 ? m1d : m2d, mj = i == 0 ? m2d : m1d;
        const Interval wi = detail::node_run_interval(mask_and(mask_and(mi, mj), mt), g);
        const Interval wj = detail::node_run_interval(mask_andnot(mask_and(mj, mt), mi), g);
        if (wi.valid() && wj.valid()) {
            geo.case_tag = CaseTag::NestedOverlap;
            geo.omega.resize(2);
            geo.omega[static_cast<std::size_t>(i)] = wi;
            geo.omega[static_cast<std::size_t>(j)] = wj;
            return geo;
        }
    }
    geo.case_tag = CaseTag::DisjointOverlap;
    geo.omega = {w1, w2};
    geo.aux_note = "no admissible omega sets found";
    return geo;
}

/// Check every standing hypothesis on the snapped sets. Deterministic and
/// idempotent; never throws.
inline ValidationReport validate_geometry(const ControlGeometry& geo, const SpaceTimeGrid& g) {
    ValidationReport rep;
    rep.case_tag = geo.case_tag;
    auto add = [&](std::string name, bool pass, double measure, std::string detail = {}) {
        rep.checks.push_back({std::move(name), pass, measure, std::move(detail)});
        rep.ok = rep.ok && pass;
    };

    const Mask mO = geo.O.mask();
    const Mask m1d = geo.Oid[0].mask(), m2d = geo.Oid[1].mask();
    add("O nonempty", !mask_empty(mO), detail::overlap_length(mO, g));
    for (int i = 0; i < 2; ++i) {
        const std::string k = std::to_string(i + 1);
        add("O" + k + " nonempty", !mask_empty(geo.Oi[i].mask()), detail::overlap_length(geo.Oi[i].mask(), g));
        add("O" + k + "d nonempty", !mask_empty(geo.Oid[i].mask()), detail::overlap_length(geo.Oid[i].mask(), g));
    }

    for (int i = 0; i < 2; ++i) {
        const Mask inter = mask_and(i == 0 ? m1d : m2d, mO);
        add("O" + std::to_string(i + 1) + "d meets O", !mask_empty(inter), detail::overlap_length(inter, g));
    }

    // Same observation set, or distinct observed parts inside O; exactly one.
    const bool same = m1d == m2d;
    const Mask i1 = mask_and(m1d, mO), i2 = mask_and(m2d, mO);
    const bool distinct = i1 != i2;
    add("O1d equals O2d", true, same ? 1.0 : 0.0, same ? "holds" : "does not hold");
    add("O1d∩O differs from O2d∩O", true, distinct ? 1.0 : 0.0, distinct ? "holds" : "does not hold");
    add("exactly one observation condition", same != distinct, 0.0, same || distinct ? "" : "neither holds");
    const bool tag_ok = same ? geo.case_tag == CaseTag::SameObservation : geo.case_tag != CaseTag::SameObservation;
    add("case tag consistent", tag_ok, 0.0, case_name(geo.case_tag));

    // Õ ⊂⊂ O and Õ ∩ O_id != ∅.
    const Mask mt = geo.O_tilde.mask();
    const bool inner = geo.O_tilde.valid() && geo.O_tilde.jlo() > geo.O.jlo() && geo.O_tilde.jhi() < geo.O.jhi() &&
                       !mask_empty(mt);
    add("O_tilde strictly inside O", inner, detail::overlap_length(mt, g));
    for (int i = 0; i < 2; ++i) {
        const Mask inter = mask_and(mt, i == 0 ? m1d : m2d);
        add("O_tilde meets O" + std::to_string(i + 1) + "d", !mask_empty(inter), detail::overlap_length(inter, g));
    }

    // Omega sets. Compact inclusion is checked as node-mask inclusion.
    if (geo.case_tag == CaseTag::SameObservation) {
        const bool have = geo.omega.size() == 1 && geo.omega[0].valid() && !mask_empty(geo.omega[0].mask());
        const Mask target = mask_and(m1d, mt);
        add("omega0 inside Od∩O_tilde", have && mask_subset(geo.omega[0].mask(), target),
            have ? detail::overlap_length(geo.omega[0].mask(), g) : 0.0, geo.aux_note);
    } else {
        const bool have = geo.omega.size() == 2 && geo.omega[0].valid() && geo.omega[1].valid() &&
                          !mask_empty(geo.omega[0].mask()) && !mask_empty(geo.omega[1].mask());
        if (!have) {
            add("omega_i inside Oid∩O_tilde", false, 0.0, geo.aux_note.empty() ? "omega sets missing" : geo.aux_note);
        } else {
            const Mask w1 = geo.omega[0].mask(), w2 = geo.omega[1].mask();
            const bool in1 = mask_subset(w1, mask_and(m1d, mt)), in2 = mask_subset(w2, mask_and(m2d, mt));
            add("omega1 inside O1d∩O_tilde", in1, detail::overlap_length(w1, g));
            add("omega2 inside O2d∩O_tilde", in2, detail::overlap_length(w2, g));
            add("omega1∩omega2 (reported)", true, detail::overlap_length(mask_and(w1, w2), g));
            if (geo.case_tag == CaseTag::DisjointOverlap) {
                add("omega1 avoids O2d", mask_disjoint(w1, m2d), detail::overlap_length(mask_and(w1, m2d), g));
                add("omega2 avoids O1d", mask_disjoint(w2, m1d), detail::overlap_length(mask_and(w2, m1d), g));
            } else {
                bool any = false;
                for (int i = 0; i < 2; ++i) {
                    const Mask wi = i == 0 ? w1 : w2, wj = i == 0 ? w2 : w1;
                    const Mask mi = i == 0 ? m1d : m2d, mj = i == 0 ? m2d : m1d;
                    any = any || (mask_subset(wi, mj) && mask_disjoint(wj, mi));
                }
                add("nested: omega_i inside Ojd, omega_j avoids Oid", any, 0.0);
            }
        }
    }
    return rep;
}

/// assemble + validate; throws GeometryRejected on any failure.
inline ControlGeometry checked_geometry(const GeometrySpec& s, const SpaceTimeGrid& g) {
    ControlGeometry geo = assemble_geometry(s, g);
    const ValidationReport rep = validate_geometry(geo, g);
    if (!rep.ok) throw geometry_rejected("geometry fails " + rep.first_failure());
    return geo;
}

}  // namespace hiercontrol
