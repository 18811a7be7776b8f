"""Two-stage shadow removal.

Stage one predicts a clean latent from a shadowed image with an
image-conditioned latent diffusion model; stage two decodes that latent
through a frozen decoder while injecting encoder detail back in through
zero-initialized residual branches.
"""

__version__ = "0.1.0"
