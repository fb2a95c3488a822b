"""Graph-structured encoders for encounter records.

Modules: ``numerics`` (autodiff tensors and Adam), ``synthgen`` (synthetic
encounters with known structure), ``graph`` (per-encounter matrices),
``models`` (the encoder zoo), ``tasks`` (heads, losses, metrics),
``harness`` (training and evaluation) and ``cli``.
"""

__version__ = "0.1.0"
