"""Synthetic datasets shared across test modules."""
import numpy as np

from tmo import dataset_from_arrays

CAL_RHO = np.array([
    # 0     1     2     3     4     5     6     7
    [1.00, 0.60, 0.50, 0.10, 0.05, 0.00, 0.10, -0.20],
    [0.60, 1.00, 0.70, 0.05, 0.10, 0.20, 0.00, 0.00],
    [0.50, 0.70, 1.00, 0.55, 0.30, 0.00, 0.10, 0.00],
    [0.10, 0.05, 0.55, 1.00, -0.80, 0.20, 0.00, 0.10],
    [0.05, 0.10, 0.30, -0.80, 1.00, 0.46, 0.40, 0.00],
    [0.00, 0.20, 0.00, 0.20, 0.46, 1.00, 0.90, 0.30],
    [0.10, 0.00, 0.10, 0.00, 0.40, 0.90, 1.00, 0.47],
    [-0.20, 0.00, 0.00, 0.10, 0.00, 0.30, 0.47, 1.00],
])
# worked by hand at cutoff 0.45:
#   degrees 2,2,3,2,2,2,2,1 -> unit 2 is the first center, block {0,1,2,3}
#   among 4..7 the degrees are 1,2,2,1 -> tie 5/6 goes to 5, block {4,5,6}
#   unit 7 has no free neighbour left; 6 of the 8 links fall inside blocks
CAL_BLOCKS = [[0, 1, 2, 3], [4, 5, 6]]
CAL_RETAINED = 6 / 8


def random_dataset(n=30, d=6, t=1, k=0, seed=0, clusters=None, coords=False, weights=False,
                   factor=0.0):
    """Gaussian dataset; ``factor`` adds a shared component to neighbouring units' outcomes."""
    rng = np.random.default_rng(seed)
    shape = (n,) if t == 1 else (n, t)
    w = rng.standard_normal(shape)
    y0 = 0.5 * w + rng.standard_normal(shape)
    aux_shape = (n, d) if t == 1 else (n, t, d)
    aux = rng.standard_normal(aux_shape)
    if factor:
        common = rng.standard_normal(aux_shape[1:])
        aux[: n // 3] += factor * common
        y0[: n // 3] += factor * rng.standard_normal()
    x = rng.standard_normal(shape + (k,)) if k else None
    kw = {}
    if clusters is not None:
        kw["clusters"] = np.arange(n) % clusters
    if coords:
        kw["coords"] = np.column_stack([rng.uniform(30, 45, n), rng.uniform(-110, -80, n)])
    if weights:
        kw["weights"] = rng.uniform(0.5, 2.0, shape)
    return dataset_from_arrays(y0, aux, w, x, **kw)
