"""Central finite-difference oracle, independent of the tape."""
import numpy as np

H = 1e-5


def numerical_grad(f, arr, h=H, index=None):
    """d f / d arr by central differences; ``f`` reads ``arr`` in place.

    With ``index`` (a list of flat positions) only those entries are
    perturbed and a dense array with NaN elsewhere is returned.
    """
    flat = arr.reshape(-1)
    out = np.full(flat.shape, np.nan) if index is not None else np.zeros(flat.shape)
    for i in range(flat.size) if index is None else index:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape)


def rel_err(a, b):
    """``||a - b|| / max(||a||, ||b||)`` over the finite entries of ``b``."""
    a, b = np.asarray(a), np.asarray(b)
    keep = np.isfinite(b)
    a, b = a[keep], b[keep]
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
