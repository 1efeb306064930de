"""Compact BERT-style encoders pretrained with masked LM plus optional treebank supervision."""

__version__ = "0.1.0"
