"""Relation embeddings from a prompted transformer encoder fine-tuned with contrastive losses."""

__version__ = "0.1.0"
