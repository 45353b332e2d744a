"""Multi-fidelity temperature-field surrogate for cylindrical-cell battery packs.

Modules: ``fields`` (grids, fields, file formats), ``layout`` (cell placement
and rasterization), ``solver`` (finite-difference / finite-volume solvers),
``autodiff`` (reverse-mode engine), ``nets`` (UNets), ``training`` (losses
and training loops), ``metrics`` (error indices) and ``cli``.
"""

__version__ = "0.1.0"
