#pragma once

namespace caw::cli {

/// Entry point for the `caw` binary. Subcommands: train, eval, attack,
/// ablate, gradcheck. Exit codes: 0 success, 2 config error, 3 numeric
/// failure, 4 I/O failure, 5 gradcheck tolerance violation, 1 otherwise.
int run(int argc, char** argv);

} // namespace caw::cli
