"""novakv: a disaggregated, component-based LSM-tree key-value store.

Processing nodes (LTCs) keep per-range LSM-trees with dynamically
rebalanced sub-ranges; storage nodes (StoCs) serve append-only block files
over an emulated one-sided memory fabric; a logging library replicates
write-ahead records across StoCs for availability and durability.
"""

__version__ = "0.1.0"
