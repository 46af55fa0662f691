"""Block-sparse (3x3) Hessian assembly with fixed-vertex elimination."""
from __future__ import annotations

import numba as nb
import numpy as np
import scipy.sparse as sp


@nb.njit(cache=True)
def _stencil_keys(ids, fmap, nf):
    m = ids.shape[0]
    w = ids.shape[1]
    keys = np.empty(m * w * w + nf, dtype=np.int64)
    k = 0
    for s in range(m):
        for a in range(w):
            ia = ids[s, a]
            if ia < 0:
                continue
            fa = fmap[ia]
            if fa < 0:
                continue
            for b in range(w):
                ib = ids[s, b]
                if ib < 0:
                    continue
                fb = fmap[ib]
                if fb < 0:
                    continue
                keys[k] = fa * nf + fb
                k += 1
    for i in range(nf):
        keys[k] = i * nf + i
        k += 1
    return keys[:k]


def stencil_keys(ids: np.ndarray, fmap: np.ndarray, nf: int) -> np.ndarray:
    """Sorted unique block keys ``row * nf + col`` touched by the stencils."""
    if ids.size == 0:
        keys = np.arange(nf, dtype=np.int64) * (nf + 1)
        return keys
    return np.unique(_stencil_keys(np.ascontiguousarray(ids, dtype=np.int64), fmap, nf))


class BlockPattern:
    """CSR layout of 3x3 blocks over the free vertices."""

    def __init__(self, keys: np.ndarray, nf: int):
        self.nf = nf
        rows = keys // nf
        self.indices = (keys % nf).astype(np.int64)
        self.indptr = np.zeros(nf + 1, dtype=np.int64)
        np.add.at(self.indptr, rows + 1, 1)
        self.indptr = np.cumsum(self.indptr)
        self.data = np.zeros((len(keys), 3, 3))

    @classmethod
    def union(cls, key_sets, nf: int) -> "BlockPattern":
        keys = np.unique(np.concatenate(key_sets)) if len(key_sets) > 1 else key_sets[0]
        return cls(keys, nf)

    def zero(self) -> None:
        self.data[:] = 0.0

    def add_diagonal(self, diag3: np.ndarray) -> None:
        """Add per-free-vertex scalar times identity to the diagonal blocks."""
        _add_diag(self.indptr, self.indices, self.data, diag3)

    def tocsr(self) -> sp.csr_matrix:
        m = sp.bsr_matrix((self.data, self.indices, self.indptr), shape=(3 * self.nf, 3 * self.nf))
        return m.tocsr()


@nb.njit(cache=True)
def _add_diag(indptr, indices, data, diag):
    for i in range(len(indptr) - 1):
        k = find_block(indptr, indices, i, i)
        for d in range(3):
            data[k, d, d] += diag[i]


@nb.njit(cache=True)
def find_block(indptr, indices, i, j):
    lo = indptr[i]
    hi = indptr[i + 1]
    while lo < hi:
        mid = (lo + hi) // 2
        if indices[mid] < j:
            lo = mid + 1
        else:
            hi = mid
    return lo


@nb.njit(cache=True)
def scatter_local(indptr, indices, data, fmap, vids, nv, H, weight):
    """Add ``weight * H`` (3nv x 3nv, vertex order ``vids``) into the blocks."""
    for a in range(nv):
        fa = fmap[vids[a]]
        if fa < 0:
            continue
        for b in range(nv):
            fb = fmap[vids[b]]
            if fb < 0:
                continue
            k = find_block(indptr, indices, fa, fb)
            for d in range(3):
                for e in range(3):
                    data[k, d, e] += weight * H[3 * a + d, 3 * b + e]


@nb.njit(cache=True)
def project_psd(H):
    """Clamp negative eigenvalues of a symmetric matrix to zero."""
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    if w[0] >= 0.0:
        return H
    for k in range(len(w)):
        if w[k] < 0.0:
            w[k] = 0.0
    return (V * w) @ V.T
