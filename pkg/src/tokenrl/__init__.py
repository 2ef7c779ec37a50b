"""Transferable visual control: a policy-token pyramid transformer trained
with soft actor-critic and momentum contrastive co-training."""

__version__ = "0.1.0"
