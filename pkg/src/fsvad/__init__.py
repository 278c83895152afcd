"""Cross-domain few-shot video anomaly detection at desk scale.

Stages: supervised clip-encoder pretraining on a labeled source corpus,
contrastive adaptation on normal target videos, and a per-episode
semantic/temporal graph over clip features evaluated on 2-way K-shot episodes.
"""

__version__ = "0.1.0"
