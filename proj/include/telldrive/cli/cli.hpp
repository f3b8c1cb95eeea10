#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "telldrive/trainer/trainer.hpp"

namespace telldrive::cli {

enum ExitCode : int { kOk = 0, kRuntimeError = 1, kConfigError = 2, kArtifactMismatch = 3 };

/// Entry point behind the `telldrive` binary. args[0] is the program name.
/// Subcommands: train, eval, teacher, ablate.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
        trainer::BackendFactory factory = trainer::make_backend);

/// Trapezoid area under (steps, values), divided by the step span so it reads
/// as a mean return over training. A single point gives that point's value.
double normalized_auc(const std::vector<double>& steps, const std::vector<double>& values);

}  // namespace telldrive::cli
