#pragma once
// Named gradient and invariant suites runnable from the command line: each
// suite compares recorded gradients (or pinned closed forms) against central
// finite differences and reports the worst error it saw. A mutation hook
// temporarily flips one backward rule so callers can demonstrate that the
// suites catch a broken rule and name the offender.

#include <string>
#include <vector>

namespace stssad::gradcheck {

struct CheckResult {
    std::string label;
    double err = 0.0;  // relative for FD checks, absolute for pinned values
    double tol = 0.0;
    bool ok = true;
};

struct SuiteResult {
    std::string name;
    bool ok = true;
    double worst_err = 0.0;
    std::string worst_label;
    std::vector<CheckResult> checks;

    std::vector<std::string> failing() const;
};

// {"primitives", "augment", "valloss", "hypergradient"}
const std::vector<std::string>& suite_names();

SuiteResult run_suite(const std::string& name);

// Runs the named suites in order; an empty list means all of them.
std::vector<SuiteResult> run_suites(const std::vector<std::string>& names = {});

// Runs `suite` with the named primitive's backward rule sign-flipped, then
// restores it. The result is expected to fail, with the op's own check among
// the failing labels.
SuiteResult run_suite_mutated(const std::string& suite, const std::string& op);

}  // namespace stssad::gradcheck
