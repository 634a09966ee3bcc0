"""Permutation-equivariant adapter generation for mitigating backdoors across models.

Modules: ``tensor`` (einsum engine), ``autodiff`` (tape), ``symmetry``
(parameter sharing and pooling ops), ``einnet`` (equivariant backbone),
``adapters`` (LoRA algebra and the generator), ``zoo`` (toy target models),
``harness`` (training, baselines, metrics), ``benchmark``, ``checkpoint``,
``config``, ``report`` and ``cli``.
"""

__version__ = "0.1.0"
