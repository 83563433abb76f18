"""Desk-scale egocentric body-motion estimator: single-query two-stage
transformer decoding over multi-view headset cameras, with streaming
temporal attention, Cholesky-parameterized keypoint uncertainty, and a
teacher-student auto-labeling training pipeline."""

__version__ = "0.1.0"
