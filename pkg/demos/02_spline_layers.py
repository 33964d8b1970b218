"""B-spline bases and the spline-parameterized dense layer.

Run: python demos/02_spline_layers.py
"""

import numpy as np

from stormkan import (SplineGrid, Tape, bspline_basis_values,
                      eval_basis_piecewise, kan_init,
                      precompute_basis_coefficients)

grid = SplineGrid()  # 5 intervals, cubic, domain [-1, 1]
print("knots:", grid.knots)
print("basis count:", grid.basis_count)

# partition of unity across the domain
xs = np.linspace(-1, 1, 9)
bases = bspline_basis_values(xs, grid)
print("basis sums:", bases.sum(axis=-1))

# at most order+1 bases are active anywhere (local support)
print("active bases per x:", (bases > 1e-12).sum(axis=-1))

# the deployment path evaluates the same bases from precomputed
# per-interval polynomial coefficients via Horner's rule
coeffs = precompute_basis_coefficients(grid)
sample = np.random.default_rng(1).uniform(-1, 1, 10_000)
direct = bspline_basis_values(sample, grid)
horner = eval_basis_piecewise(sample, grid, coeffs)
print("max |direct - horner|:", np.abs(direct - horner).max())

# a spline-dense layer: silu base path + learnable spline per edge
layer = kan_init("demo", in_dim=4, out_dim=3, grid=grid, seed_or_rng=0)
tape = Tape()
x = tape.leaf(np.random.default_rng(2).uniform(-1, 1, (5, 4)),
              requires_grad=True)
y = layer.forward(x)
print("layer output shape:", y.shape)

# with zero spline weights the layer is a silu-activated linear map
layer.spline_weight.data[:] = 0
y2 = layer.forward(Tape().constant(x.data))
manual = (x.data / (1 + np.exp(-x.data))) @ layer.base_weight.data.T
print("reduction check:", np.abs(y2.data - manual).max())
