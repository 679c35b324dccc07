from functools import lru_cache

import numpy as np


def gram_schmidt(draws: np.ndarray) -> np.ndarray:
    """Rows of ``draws`` orthonormalized (modified Gram-Schmidt, two passes)."""
    q = np.array(draws, dtype=np.float64)
    for i in range(q.shape[0]):
        for _ in range(2):
            for j in range(i):
                q[i] -= (q[j] @ q[i]) * q[j]
        q[i] /= np.linalg.norm(q[i])
    return q


@lru_cache(maxsize=64)
def seeded_orthonormal(seed: int, rows: int, cols: int) -> np.ndarray:
    q = gram_schmidt(np.random.default_rng(seed).standard_normal((rows, cols)))
    q.setflags(write=False)
    return q
