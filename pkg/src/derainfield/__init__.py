"""Unsupervised multi-view deraining with a radiance field and a latent rain predictor.

Modules:

- ``dataset``: camera CSV, ray generation, patch sampling and scene directories
- ``rainsim``: procedural rainy multi-view scenes with clean ground truth
- ``renderer``: radiance-field MLP with coarse-to-fine volume rendering
- ``rainpred``: learnable rain embeddings decoded to per-view rain maps
- ``dirgrad``: directional gradients and dominant rain orientations
- ``losses``: likelihood, reconstruction, TV and gradient-rotation losses
- ``trainer`` / ``checkpoint``: alternating optimization and persistence
- ``evalpost``: PSNR/SSIM, rain masks and selective fusion
- ``cli``: command-line entry point
"""

__version__ = "0.1.0"
