"""Neural basis function surrogates for steady 2D Euler flow past a cylinder.

Modules
-------
autodiff     dense networks, stacked training kernels, Adam, ZMUV scaling
euler        state closures, fluxes, interior and boundary residual operators
fv_solver    quarter-annulus grid and pseudo-time finite-volume solver
pod          snapshot sets and POD bases
nbf          basis networks, coefficient networks and the NBF surrogate
deeponet     branch/trunk operator-learning baseline
evaluation   error sweeps, training-size ablation, solver warm starts
io, config, cli
             artifact formats, pipeline configuration, ``nbf-lab`` command
"""

__version__ = "0.1.0"
