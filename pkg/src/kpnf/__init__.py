"""kpnf: keypoint-conditioned neural radiance fields from sparse calibrated views.

A self-contained engine: pinhole cameras and DLT keypoint lifting,
keypoint-relative spatial encodings, convolutional pixel-aligned features,
permutation-invariant multi-view fusion, volume rendering with proxy-bounded
rays, and an L1/Adam training loop — all on a small reverse-mode autodiff
core over numpy arrays.
"""

__version__ = "0.1.0"
