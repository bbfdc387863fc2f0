#pragma once

namespace ensldm {

/// Worker cap used by the OpenMP kernels. Resolution order: value set by
/// set_max_threads (the CLI --threads flag), else ENSEMBLE_LDM_THREADS,
/// else the OpenMP default. Always >= 1.
int max_threads();

/// n <= 0 resets to automatic.
void set_max_threads(int n);

/// True when called from inside an OpenMP parallel region; kernels then run
/// their serial path instead of nesting.
bool in_parallel_region();

}  // namespace ensldm
