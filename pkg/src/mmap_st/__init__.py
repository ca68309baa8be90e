"""Two-phase gene-expression regression from histology patches.

Phase 1 fuses three magnifications of each spot patch into one feature;
phase 2 enriches that feature with per-slide K-means prototypes.
"""

__version__ = "0.1.0"
