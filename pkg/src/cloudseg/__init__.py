"""From-scratch point-cloud semantic segmentation.

A numpy-backed library implementing similarity-weighted point
convolution, multi-head attention over downsampled keys/values,
orthogonal local-global feature fusion, and the surrounding machinery:
reverse-mode differentiation with finite-difference checking, exact
spatial queries, desk-scale training, and binary scan I/O.
"""

__version__ = "0.1.0"
