"""Desk-scale person re-identification: a from-scratch numpy training recipe.

Submodules: ``ndtensor`` (autodiff), ``model``, ``synthdata``, ``augment``,
``mining``, ``trainer``, ``evalrank``, ``rerank``, ``attribution``,
``persist``/``config``/``cli``.
"""

__version__ = "0.1.0"
