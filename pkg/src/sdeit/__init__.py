"""Paired-data-free EIT reconstruction toolkit.

Complete Electrode Model forward solver, adjoint sensitivities, an implicit
neural representation of the conductivity, TV and SSIM regularization, and a
pluggable guidance prior (deterministic stub or remote diffusion service).
"""

__version__ = "0.1.0"
