"""Dynamic convolution via matrix decomposition.

Library layers: deterministic tensor kernels, a tape autodiff engine,
dynamic-convolution layer generators, exact decomposition identities,
parameter/MAdds accounting, model builders, and the experiment CLI.
"""

__version__ = "0.1.0"
