"""Siamese U-Net building damage assessment on paired pre/post imagery.

The package is organized by pipeline stage:

- ``scene_data``: scene pairs, polygon rasterization, manifests, synthetic scenes
- ``raster_ops``: degrade/restore resampling and augmentation
- ``losses``: Dice plus focal loss with analytic gradients
- ``network``: a numpy U-Net with reverse-mode gradients and the Siamese head
- ``training``: AdamW, oversampling, two-stage training and fine-tuning
- ``metrics``: confusion matrices, F1 scores and grade schemes
- ``analysis``: resolution sweeps, event cross-validation, adaptation curves
"""

__version__ = "0.1.0"
