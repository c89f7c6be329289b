"""Single-pass uncertainty estimation for segmentation, guided by rater disagreement.

A small numpy-backed stack: a reverse-mode tensor engine, a multi-head
encoder-decoder whose head variance is trained to match the variance of
multiple annotators' masks, ensemble and layer-ensemble baselines, the
evaluation metrics, a synthetic multi-rater data generator, and the
quality-control / out-of-distribution harnesses.
"""

__version__ = "0.1.0"
