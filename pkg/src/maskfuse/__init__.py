"""Nuclei instance-segmentation tooling: targets, post-processing, region
features, gradient-boosted IoU regression for two-source mask fusion, and
Kaggle-style evaluation."""

__version__ = "0.1.0"
