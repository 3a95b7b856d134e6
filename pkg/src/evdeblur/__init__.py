"""Event-based image deblurring toolkit.

Simulates blurry images plus event streams from latent sharp sequences,
implements the analytic double-integral deblurring baseline, and trains a
motion-aware deformable-convolution network on a minimal autodiff engine.
"""

__version__ = "0.1.0"
