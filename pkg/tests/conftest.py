"""Pin numeric kernels to one thread.

Must run before numpy is first imported anywhere in the test process:
the acceptance timings and bitwise-reproducibility checks assume
single-threaded execution.
"""

import os

for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    os.environ.setdefault(_var, "1")
