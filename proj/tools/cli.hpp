#pragma once

#include <resfim/federation.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace resfim::cli {

enum ExitCode : int {
    kOk = 0,
    kConfigError = 1,
    kDivergence = 2,
};

/// Environment variable naming the directory relative output paths resolve against.
inline constexpr const char* kOutputRootVar = "RESFIM_OUTPUT_ROOT";

/// Entry point shared by the binary and the tests. `args[0]` is the program name.
int main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::filesystem::path output_root();

// Writers used by the subcommands. Floats are printed with 17 significant
// digits so equal values always produce equal text.
std::string rounds_csv(const std::vector<RoundRecord>& records);
std::string layers_csv(const std::vector<RoundRecord>& records);

struct LayerMean {
    int client = 0;
    std::string layer;
    double rate = 0.0;
};

/// Mean masking rate per (client, layer) over every row of one or more
/// layers.csv files; clients ascending, layers in depth (first-seen) order.
std::vector<LayerMean> aggregate_layers(const std::vector<std::filesystem::path>& layer_files);

/// Invariant suite behind `verify`: one line per check, true when all pass.
bool run_invariant_suite(std::ostream& out);

} // namespace resfim::cli
