import os
import sys

# cap BLAS threads before numpy loads
_threads = os.environ.get("EGONN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from .cli import main  # noqa: E402

sys.exit(main())
