"""Multi-label transformer for action-unit-style detection.

Patch self-attention encoder, label-token cross-attention decoder,
imbalance-aware objective, AdamW with per-group schedules, temporal
smoothing, and a synthetic patch-grid task — all on a self-contained
float64 autodiff core that is verified against central finite differences.
"""

__version__ = "0.1.0"
