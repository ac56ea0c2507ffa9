"""Cross-decoupled two-tower retrieval for long-tail recommendation.

The package is numpy-only: a small reverse-mode tape (:mod:`cdnrec.numerics`)
trains every model, from the plain two-tower baseline to the gated,
bilateral CDN, and :mod:`cdnrec.evaluation` scores them by full-catalog
ranking sliced into head and tail items.
"""

__version__ = "0.1.0"
