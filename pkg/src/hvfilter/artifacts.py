"""Matrix Market, CSV and manifest writers for run outputs."""
from __future__ import annotations

import hashlib
import os

import numpy as np
import scipy.io
import scipy.sparse as sp

from .evaluation import write_rows
from .sparse import SparseLowerTri, SparseUpperTri, SparsityPattern


def write_pattern(path, pattern: SparsityPattern) -> None:
    """Lower-triangular pattern as a coordinate ``pattern general`` file."""
    scipy.io.mmwrite(path, pattern.to_scipy().tocoo(), field="pattern", symmetry="general")


def write_factor(path, factor: SparseLowerTri | SparseUpperTri) -> None:
    """Triangular factor as a coordinate ``real general`` file (1-based indices)."""
    scipy.io.mmwrite(path, factor.to_scipy().tocoo(), field="real", symmetry="general", precision=17)


def read_factor(path, upper: bool = False) -> SparseLowerTri | SparseUpperTri:
    m = sp.csr_matrix(scipy.io.mmread(path))
    if upper:
        m = m.T.tocsr()
    m.sort_indices()
    lower = SparseLowerTri(SparsityPattern(m.indptr, m.indices), m.data)
    return SparseUpperTri(lower) if upper else lower


def read_pattern(path) -> SparsityPattern:
    m = sp.csr_matrix(scipy.io.mmread(path))
    m.sort_indices()
    return SparsityPattern(m.indptr, m.indices)


def trajectory_rows(states, method: str, replicate: int, order) -> list[dict]:
    """``(t, index, mean, sd)`` rows in the original variable numbering."""
    rows = []
    order = np.asarray(order)
    for st in states:
        sd = np.sqrt(st.marginal_variances())
        mean = np.empty_like(st.mean)
        sdev = np.empty_like(sd)
        mean[order] = st.mean
        sdev[order] = sd
        for i in range(mean.size):
            rows.append(dict(method=method, replicate=replicate, t=st.t, index=i, mean=float(mean[i]),
                             sd=float(sdev[i])))
    return rows


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, files, header: list[str]) -> str:
    """List every emitted file with its SHA-256 hash; returns the manifest path."""
    path = os.path.join(out_dir, "manifest.txt")
    files = set(files)
    # keep files listed by earlier commands in the same directory
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split("  ", 1)
                if len(parts) == 2 and len(parts[0]) == 64 and os.path.exists(os.path.join(out_dir, parts[1])):
                    files.add(parts[1])
    lines = list(header)
    for f in sorted(files):
        lines.append(f"{sha256(os.path.join(out_dir, f))}  {f}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


__all__ = [
    "write_pattern",
    "write_factor",
    "read_factor",
    "read_pattern",
    "trajectory_rows",
    "write_rows",
    "sha256",
    "write_manifest",
]
