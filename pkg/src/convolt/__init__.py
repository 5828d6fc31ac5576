"""Conformal volumetry for template-based segmentation.

Deformation-derived volumes from displacement fields, wrapped in split
conformal prediction intervals calibrated on a learned multiplicative
correction of the baseline volume.
"""

__version__ = "0.1.0"
