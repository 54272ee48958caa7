#pragma once
// Command runner behind the CLI: assembles module inputs from a structured
// text config, executes one subcommand, and writes a per-run output
// directory (manifest.json plus per-command files).  Every manifest carries
// the config hash and seed; nothing in it depends on wall-clock time or
// thread count, so identical config + seed reproduces identical bytes.

#include <cstdint>
#include <string>
#include <vector>

namespace kinlb {

struct RunOptions {
  std::string command;
  std::string config_path;  // empty: built-in defaults
  std::string out_dir;      // empty: runs/<command>
  std::string golden_path;  // empty: no regression compare
  uint64_t seed = 0;        // honored when seed_set
  bool seed_set = false;
  int threads = 0;          // honored when threads_set
  bool threads_set = false;
};

// Valid subcommand names, in help order.
const std::vector<std::string>& command_names();

// Runs one subcommand end to end.  Returns the process exit code: 0 success,
// 1 validation failure or golden mismatch, 2 numerical failure.  On failure
// the output directory still receives a report.json naming the error code.
int run_command(const RunOptions& opts);

}  // namespace kinlb
