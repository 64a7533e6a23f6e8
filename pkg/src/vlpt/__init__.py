"""Desk-scale unified vision-language pretraining.

One transformer consumes images (as detected-region features), texts (as
byte-level BPE tokens) and image-text pairs, trained jointly with a
cross-modal contrastive objective over rewritten/retrieved augmentations,
masked-region prediction, and bidirectional + seq2seq language modeling.
"""

__version__ = "0.1.0"

from .tensor import Parameter, Tensor  # noqa: F401
