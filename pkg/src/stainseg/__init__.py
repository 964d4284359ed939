"""Multi-stain histopathology tissue segmentation toolkit.

Implements a UNET-style segmentation network with an optional learned
color-deconvolution front-end, a Beer-Lambert virtual-slide generator for
producing labeled multi-stain training data, the full training pipeline
(tiling, class balancing, augmentation, simulated synchronous data-parallel
SGD, F1 evaluation), and gradient-based network introspection tools.
"""

__version__ = "0.1.0"
