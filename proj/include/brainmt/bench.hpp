#pragma once

#include "brainmt/model.hpp"

namespace brainmt {

struct BenchRow {
  int T = 0;
  int64_t L = 0;
  int64_t param_count = 0;
  int64_t param_count_no_pt = 0;  // excluding the T-dependent P_t embedding
  int64_t activation_elems = 0;   // Mamba + transformer stack, analytic
  int64_t workspace_elems = 0;    // peak transient per-worker buffer, analytic
  double forward_ms = 0.0;        // median over the measured repetitions
};

// Pinned column order; downstream plotting parses this bit-exactly.
extern const char* const kBenchCsvHeader;

// Analytic counts from shapes only; mirrors the no-grad forward pass of the
// Mamba + transformer stack.
int64_t stack_activation_elems(const ModelConfig& cfg, int T);
int64_t workspace_estimate(const ModelConfig& cfg, int T);

// Fresh model + synthetic input per T; wall time is a median over `reps`
// forwards after one warmup.
std::vector<BenchRow> run_bench(const ModelConfig& base, const std::vector<int>& Ts,
                                int reps = 5);

void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows);

}  // namespace brainmt
