"""Simulated parallel lensless-imaging dataset pipeline.

Modules: ``imgcore`` (rasters and I/O), ``optics`` (forward model and
sensor), ``recon`` (FISTA), ``metrology`` (PSF autocorrelation and image
fidelity), ``geometry`` (distortion, homographies, calibration grids),
``acquisition`` (simulated capture runs and manifests) and ``cli``.
"""
__version__ = "0.1.0"
