"""Desk-scale disentangled-attention encoder: autodiff, tokenizer, pre-training, fine-tuning and BM25 open-domain QA."""

__version__ = "0.1.0"
