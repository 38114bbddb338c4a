"""Bidirectional-attention relation parsing for human-object interaction
detection: a self-contained float64 autodiff core, an encoder-decoder scoring
model, a synthetic scene generator, and a role-mAP evaluation harness."""

__version__ = "0.1.0"
