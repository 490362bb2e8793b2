"""Tetromino orientation tables.

Orientations are listed as 4 (column, row) cells normalised so the minimum
column and row are 0; rows count upward from the bottom.  Only distinct
orientations are kept (O: 1, I/S/Z: 2, T/J/L: 4).
"""

from __future__ import annotations

import numpy as np

PIECE_NAMES = ("I", "O", "T", "S", "Z", "J", "L")
N_PIECES = 7
MAX_ROT = 4

# one base orientation per piece as (col, row) pairs
_BASE = {
    "I": [(0, 0), (1, 0), (2, 0), (3, 0)],
    "O": [(0, 0), (1, 0), (0, 1), (1, 1)],
    "T": [(0, 1), (1, 1), (2, 1), (1, 0)],
    "S": [(0, 0), (1, 0), (1, 1), (2, 1)],
    "Z": [(0, 1), (1, 1), (1, 0), (2, 0)],
    "J": [(0, 1), (0, 0), (1, 0), (2, 0)],
    "L": [(0, 0), (1, 0), (2, 0), (2, 1)],
}


def _normalise(cells):
    cells = np.asarray(cells, dtype=np.int64)
    cells = cells - cells.min(axis=0)
    order = np.lexsort((cells[:, 0], cells[:, 1]))
    return cells[order]


def orientations(name: str) -> list[np.ndarray]:
    """Distinct orientations of a piece, each a (4, 2) array of (col, row)."""
    out: list[np.ndarray] = []
    cells = np.asarray(_BASE[name], dtype=np.int64)
    for _ in range(4):
        cand = _normalise(cells)
        if not any(np.array_equal(cand, o) for o in out):
            out.append(cand)
        # quarter turn: (c, r) -> (r, -c)
        cells = np.column_stack([cells[:, 1], -cells[:, 0]])
    return out


def _tables():
    n_rot = np.zeros(N_PIECES, dtype=np.int64)
    width = np.zeros((N_PIECES, MAX_ROT), dtype=np.int64)
    height = np.zeros((N_PIECES, MAX_ROT), dtype=np.int64)
    bottom = np.zeros((N_PIECES, MAX_ROT, 4), dtype=np.int64)  # lowest cell row per piece column
    top = np.zeros((N_PIECES, MAX_ROT, 4), dtype=np.int64)  # highest cell row + 1 per piece column
    rowmask = np.zeros((N_PIECES, MAX_ROT, 4), dtype=np.uint16)  # column bits per piece row
    for p, name in enumerate(PIECE_NAMES):
        ors = orientations(name)
        n_rot[p] = len(ors)
        for k, cells in enumerate(ors):
            w = int(cells[:, 0].max()) + 1
            width[p, k] = w
            height[p, k] = int(cells[:, 1].max()) + 1
            for j in range(w):
                rows = cells[cells[:, 0] == j, 1]
                bottom[p, k, j] = rows.min()
                top[p, k, j] = rows.max() + 1
            for c, r in cells:
                rowmask[p, k, r] |= np.uint16(1 << int(c))
    return n_rot, width, height, bottom, top, rowmask


N_ROT, WIDTH, HEIGHT, BOTTOM, TOP, ROWMASK = _tables()
