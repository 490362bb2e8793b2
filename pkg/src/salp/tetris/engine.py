"""Numba kernels for the Tetris MDP.

A board is a ``uint16[20]`` array, row 0 at the bottom, bit ``c`` set when
column ``c`` is occupied.  Placements are enumerated rotation-major, then by
the leftmost column; a piece dropped at column ``c`` rests at the lowest
height where it clears the current column tops.
"""

from __future__ import annotations

import numba
import numpy as np

from .pieces import BOTTOM, HEIGHT, N_PIECES, N_ROT, ROWMASK, WIDTH

ROWS = 20
COLS = 10
FULL_ROW = (1 << COLS) - 1
N_FEATURES = 22
MAX_PLACEMENTS = 34

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

jit = numba.njit(cache=True, nogil=True)


@jit
def splitmix64(x):
    z = np.uint64(x) + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@jit
def piece_at(key, t):
    return np.int64(splitmix64(np.uint64(key) + np.uint64(t)) % np.uint64(N_PIECES))


@jit
def column_heights(board, h):
    for c in range(COLS):
        h[c] = 0
    for row in range(ROWS - 1, -1, -1):
        bits = board[row]
        if bits == 0:
            continue
        for c in range(COLS):
            if h[c] == 0 and (bits >> c) & 1:
                h[c] = row + 1


@jit
def landing_row(h, p, k, c):
    y = 0
    for j in range(WIDTH[p, k]):
        v = h[c + j] - BOTTOM[p, k, j]
        if v > y:
            y = v
    return y


@jit
def enumerate_placements(h, p, rot, col):
    """Fill (rot, col) with legal placements of piece p; returns the count."""
    n = 0
    for k in range(N_ROT[p]):
        for c in range(COLS - WIDTH[p, k] + 1):
            if landing_row(h, p, k, c) + HEIGHT[p, k] <= ROWS:
                rot[n] = k
                col[n] = c
                n += 1
    return n


@jit
def has_placement(h, p):
    for k in range(N_ROT[p]):
        for c in range(COLS - WIDTH[p, k] + 1):
            if landing_row(h, p, k, c) + HEIGHT[p, k] <= ROWS:
                return True
    return False


@jit
def live_piece_count(board, h):
    """Number of pieces that still have a legal placement on ``board``."""
    column_heights(board, h)
    n = 0
    for p in range(N_PIECES):
        if has_placement(h, p):
            n += 1
    return n


@jit
def drop(board, h, p, k, c, out):
    """Copy ``board`` to ``out`` with the piece placed; returns lines cleared."""
    y = landing_row(h, p, k, c)
    for row in range(ROWS):
        out[row] = board[row]
    for r in range(HEIGHT[p, k]):
        out[y + r] |= np.uint16(ROWMASK[p, k, r] << c)
    lines = 0
    dst = 0
    for row in range(ROWS):
        if out[row] == FULL_ROW:
            lines += 1
        else:
            out[dst] = out[row]
            dst += 1
    for row in range(dst, ROWS):
        out[row] = 0
    return lines


@jit
def board_features(board, phi):
    """[h_1..h_10, |h_{k+1}-h_k|, max h, holes, 1]."""
    h = np.zeros(COLS, dtype=np.int64)
    filled = np.zeros(COLS, dtype=np.int64)
    for row in range(ROWS):
        bits = board[row]
        if bits == 0:
            continue
        for c in range(COLS):
            if (bits >> c) & 1:
                h[c] = row + 1
                filled[c] += 1
    hmax = 0
    holes = 0
    for c in range(COLS):
        phi[c] = h[c]
        if h[c] > hmax:
            hmax = h[c]
        holes += h[c] - filled[c]
    for c in range(COLS - 1):
        phi[COLS + c] = abs(h[c + 1] - h[c])
    phi[19] = hmax
    phi[20] = holes
    phi[21] = 1.0


@jit
def placement_value(board, h, p, k, c, r, alpha, nxt, phi, h2):
    """-lines + alpha * P(next piece can be placed) * phi(board') . r."""
    lines = drop(board, h, p, k, c, nxt)
    live = live_piece_count(nxt, h2)
    if live == 0:
        return -float(lines)
    board_features(nxt, phi)
    v = 0.0
    for i in range(N_FEATURES):
        v += phi[i] * r[i]
    return -float(lines) + alpha * (live / N_PIECES) * v


@jit
def greedy_index(board, p, r, alpha):
    """Index of the cost-minimising placement (first on ties); -1 if none."""
    h = np.zeros(COLS, dtype=np.int64)
    h2 = np.zeros(COLS, dtype=np.int64)
    rot = np.zeros(MAX_PLACEMENTS, dtype=np.int64)
    col = np.zeros(MAX_PLACEMENTS, dtype=np.int64)
    nxt = np.zeros(ROWS, dtype=np.uint16)
    phi = np.zeros(N_FEATURES)
    column_heights(board, h)
    n = enumerate_placements(h, p, rot, col)
    best = -1
    best_v = np.inf
    for i in range(n):
        v = placement_value(board, h, p, rot[i], col[i], r, alpha, nxt, phi, h2)
        if v < best_v:
            best_v = v
            best = i
    return best


@jit
def _step(board, h, p, i, rot, col, scratch):
    lines = drop(board, h, p, rot[i], col[i], scratch)
    for row in range(ROWS):
        board[row] = scratch[row]
    return lines


@jit
def play_greedy(r, alpha, key, max_steps):
    """(lines, steps, terminated) for the greedy policy of weights r."""
    board = np.zeros(ROWS, dtype=np.uint16)
    scratch = np.zeros(ROWS, dtype=np.uint16)
    h = np.zeros(COLS, dtype=np.int64)
    rot = np.zeros(MAX_PLACEMENTS, dtype=np.int64)
    col = np.zeros(MAX_PLACEMENTS, dtype=np.int64)
    total = 0
    for t in range(max_steps):
        p = piece_at(key, t)
        i = greedy_index(board, p, r, alpha)
        if i < 0:
            return total, t, True
        column_heights(board, h)
        enumerate_placements(h, p, rot, col)
        total += _step(board, h, p, i, rot, col, scratch)
    return total, max_steps, False


@jit
def play_random(key, action_key, max_steps):
    """Uniformly random placements; choices come from a second stream."""
    board = np.zeros(ROWS, dtype=np.uint16)
    scratch = np.zeros(ROWS, dtype=np.uint16)
    h = np.zeros(COLS, dtype=np.int64)
    rot = np.zeros(MAX_PLACEMENTS, dtype=np.int64)
    col = np.zeros(MAX_PLACEMENTS, dtype=np.int64)
    total = 0
    for t in range(max_steps):
        p = piece_at(key, t)
        column_heights(board, h)
        n = enumerate_placements(h, p, rot, col)
        if n == 0:
            return total, t, True
        i = np.int64(splitmix64(np.uint64(action_key) + np.uint64(t)) % np.uint64(n))
        total += _step(board, h, p, i, rot, col, scratch)
    return total, max_steps, False


@numba.njit(cache=True, parallel=True)
def play_greedy_many(r, alpha, keys, max_steps):
    n = keys.shape[0]
    lines = np.zeros(n, dtype=np.int64)
    steps = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=np.bool_)
    for g in numba.prange(n):
        a, b, c = play_greedy(r, alpha, keys[g], max_steps)
        lines[g] = a
        steps[g] = b
        done[g] = c
    return lines, steps, done


@jit
def trace_greedy(r, alpha, key, burn_in, stride, limit, max_steps, out):
    """Record (board rows, piece) every ``stride`` steps after ``burn_in``.

    Writes up to ``limit`` states into ``out`` (shape (>=limit, 21)); returns
    (recorded, steps).
    """
    board = np.zeros(ROWS, dtype=np.uint16)
    scratch = np.zeros(ROWS, dtype=np.uint16)
    h = np.zeros(COLS, dtype=np.int64)
    rot = np.zeros(MAX_PLACEMENTS, dtype=np.int64)
    col = np.zeros(MAX_PLACEMENTS, dtype=np.int64)
    n_out = 0
    for t in range(max_steps):
        p = piece_at(key, t)
        i = greedy_index(board, p, r, alpha)
        if i < 0:
            return n_out, t
        if t >= burn_in and (t - burn_in) % stride == 0:
            for row in range(ROWS):
                out[n_out, row] = board[row]
            out[n_out, ROWS] = p
            n_out += 1
            if n_out >= limit:
                return n_out, t
        column_heights(board, h)
        enumerate_placements(h, p, rot, col)
        _step(board, h, p, i, rot, col, scratch)
    return n_out, max_steps


@jit
def constraint_rows(states, alpha):
    """Rows phi(x) - alpha * P(live) * phi(board') and costs -lines.

    ``states`` is (n, 21): 20 board rows and the piece to place.  Returns
    (A, b, row_state, n_rows).
    """
    n = states.shape[0]
    A = np.zeros((n * MAX_PLACEMENTS, N_FEATURES))
    b = np.zeros(n * MAX_PLACEMENTS)
    row_state = np.zeros(n * MAX_PLACEMENTS, dtype=np.int64)
    board = np.zeros(ROWS, dtype=np.uint16)
    nxt = np.zeros(ROWS, dtype=np.uint16)
    h = np.zeros(COLS, dtype=np.int64)
    h2 = np.zeros(COLS, dtype=np.int64)
    rot = np.zeros(MAX_PLACEMENTS, dtype=np.int64)
    col = np.zeros(MAX_PLACEMENTS, dtype=np.int64)
    phi_x = np.zeros(N_FEATURES)
    phi_n = np.zeros(N_FEATURES)
    m = 0
    for s in range(n):
        for row in range(ROWS):
            board[row] = states[s, row]
        p = states[s, ROWS]
        board_features(board, phi_x)
        column_heights(board, h)
        cnt = enumerate_placements(h, p, rot, col)
        for i in range(cnt):
            lines = drop(board, h, p, rot[i], col[i], nxt)
            live = live_piece_count(nxt, h2)
            w = alpha * live / N_PIECES
            if live > 0:
                board_features(nxt, phi_n)
            for j in range(N_FEATURES):
                A[m, j] = phi_x[j] - (w * phi_n[j] if live > 0 else 0.0)
            b[m] = -float(lines)
            row_state[m] = s
            m += 1
    return A[:m], b[:m], row_state[:m], m
