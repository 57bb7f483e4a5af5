#pragma once

// Entry points backing the depthkit binary.  Each returns a process exit
// code: 0 success, 2 configuration error, 3 numerical failure.  Output goes
// to the supplied streams so tests can capture it without spawning.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace depthkit {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

struct CliOverrides {
  std::optional<std::string> variant;
  std::optional<std::string> out_dir;
  std::optional<uint64_t> seed;
  std::optional<int64_t> steps;
};

int cmd_train(const std::string& config_path, const CliOverrides& ov,
              std::ostream& out, std::ostream& err);

// Empty variant list means all of them.
int cmd_compare(const std::string& config_path,
                const std::vector<std::string>& variants,
                const CliOverrides& ov, std::ostream& out, std::ostream& err);

int cmd_paramcount(int64_t n_layers, int64_t n_heads, int64_t dim,
                   int64_t vocab, const std::string& variant, int64_t context,
                   std::ostream& out, std::ostream& err);

struct GradcheckOptions {
  std::string variant = "all";  // a config name, or "all"
  uint64_t seed = 1;
  std::optional<std::string> ordering;
  std::optional<int> k;
  std::optional<std::string> lnv_mode;
  std::string corrupt_grad;  // fault injection: negate this gradient
};

int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& out,
                  std::ostream& err);

// Diagnostic: print the deterministic training-batch token windows so runs in
// separate processes can be compared byte for byte.
struct DatapipeDumpOptions {
  std::string corpus_path;
  std::string separator;
  int64_t context = 64;
  int64_t batch_sequences = 4;
  int64_t batches = 8;
  double val_fraction = 0.05;
  uint64_t seed = 1;
};

int cmd_datapipe_dump(const DatapipeDumpOptions& opt, std::ostream& out,
                      std::ostream& err);

}  // namespace depthkit
