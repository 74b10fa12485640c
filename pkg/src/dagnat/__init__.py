"""DAG-lattice non-autoregressive generation with contrastive ranking training."""

__version__ = "0.1.0"
