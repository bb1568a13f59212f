"""Multi-view 3D detection toolkit.

Deterministic pinhole multi-camera geometry, feature-pyramid sampling, a
query-based decoder with dynamic graph feature aggregation, depth-invariant
multi-scale augmentation, set-based matching losses, and region-split
detection metrics, driven by synthetic oracle-checkable scenes.
"""

__version__ = "0.1.0"
