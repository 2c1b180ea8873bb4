"""numpy versions of the compiled kernels (same signatures, single-threaded)."""
import numpy as np


def element_means(tri, u, out, nthreads=1):
    out[:] = u[tri].sum(axis=1) / 3.0


def depth_coefficients(tri, u, hb_mean, g, eps_dry, out, nthreads=1):
    out[:] = g * np.maximum(u[tri].sum(axis=1) / 3.0 - hb_mean, eps_dry)


def gather_assemble(ptr, src, elem_vals, coef, out, nthreads=1):
    contrib = np.repeat(coef, 9)[src] * elem_vals[src]
    out[:] = np.add.reduceat(contrib, ptr[:-1]) if contrib.size else 0.0


def csr_matvec(indptr, indices, data, x, out, nthreads=1):
    prod = data * x[indices]
    out[:] = np.add.reduceat(prod, indptr[:-1]) if prod.size else 0.0
    out[indptr[:-1] == indptr[1:]] = 0.0


def dot(x, y, nthreads=1):
    return float(np.dot(x, y))


def lincomb3(a, x, b, y, c, z, out, nthreads=1):
    np.multiply(x, a, out=out)
    out += b * y
    out += c * z
