# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""Harmonizing classification and localization in object detectors.

The package provides the building blocks of mutual labeling (per-object
Otsu thresholding of the *other* task's quality), IoU rescoring at NMS
time, and a Spearman rank-correlation measure of the divergence between
confidence and localization quality. A seeded synthetic-scene simulator
and a toy linear detector head make it possible to train and benchmark
these mechanisms at desk scale.
"""

# Version used by setup.cfg and docs/conf.py (parsed with a regular
# expression).
#
# Release checklist:
# 1.  Ensure that tests pass for all supported Python versions (tox);
# 2.  Update the release notes;
# 3.  Bump the version number in this file, commit and tag (git tag -a vX.Y.Z);
# 4.  python3 -m build && twine upload dist/*
# 5.  Bump the version number in this file to something that ends with .dev0
__version__ = "0.1.0.dev0"
