"""Multimodal pulmonary-hypertension classifier: CNN-transformer image
encoder, node-split GCN fusion with clinical scalars, and the repeated
holdout evaluation harness, exercised on a synthetic phantom cohort."""

__version__ = "0.1.0"
