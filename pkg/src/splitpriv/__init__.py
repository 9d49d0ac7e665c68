"""Two-party split-learning fine-tuning with dχ-privatised text representations.

Modules: ``numerics`` (reverse-mode autodiff), ``model`` (desk-scale encoder,
split, LoRA, AdamW), ``privatizer`` (noise, remap, contributing tokens),
``protocol`` (wire format and party state machines), ``attacks`` (inversion
and attribute inference), ``data`` (corpora), ``harness`` / ``cli``
(experiments).
"""

__version__ = "0.1.0"
