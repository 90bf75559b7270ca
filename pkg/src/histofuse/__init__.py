"""Breast-histology benign/malignant classification pipeline.

Stages: dataset ingestion into a labeled manifest, Macenko stain
normalization, seeded offline augmentation, per-backbone feature
extraction, feature fusion, MLP training, and metric reporting. Every
stage is deterministic given its config and seed.
"""

__version__ = "0.1.0"
