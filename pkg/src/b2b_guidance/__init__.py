"""B2B guidance.

Training-free steering of a latent during denoising: object-generation and
attribute-binding rewards are computed over cross-attention maps and their
gradient is ascended at scheduled timesteps of a toy, analytically
differentiable denoiser.
"""

__version__ = "0.3.0"
