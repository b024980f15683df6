"""
SpotIQ
Precise event spotting in video: spatio-temporal refinement, soft instance
contrastive training, sharpness-aware optimization and tolerance mAP.
"""

__version__ = "0.1.0"
