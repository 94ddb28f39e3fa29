"""Pin BLAS to one thread before numpy loads: runtime budgets in the
acceptance suite are specified for a single core, and fixed thread count
keeps reductions bit-reproducible across runs."""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(var, "1")
