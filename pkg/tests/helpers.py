import numpy as np


def grad_rel_error(analytic, numeric) -> float:
    """Norm-wise relative error between two gradient arrays."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def kink_free(x, margin):
    """Push values away from zero so relu kinks sit outside the FD stencil."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * (margin + np.abs(x)), x)
