"""Audio-driven talking-head synthesis at desk scale.

Stages: audio features to neutral landmarks (VAE), neutral to emotional
landmarks (deformation MLP), emotional landmarks to frames (conditioned
volume rendering), plus idle-state pose sampling and evaluation metrics.
"""

__version__ = "0.1.0"
