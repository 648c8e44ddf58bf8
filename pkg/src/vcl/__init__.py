"""Desk-scale brain-MRI classification lab: a Vision Transformer and a
residual CNN on a small reverse-mode autodiff engine, with SMOTE and
augmentation preprocessing and five class-activation-map explainers."""

__version__ = "0.1.0"
