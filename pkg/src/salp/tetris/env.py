"""Python-facing Tetris MDP: states, placements, features and episodes.

A state is a board plus the piece about to be placed.  Costs are negative
line counts, so the minimisation machinery applies unchanged; scores are
reported as positive lines.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import engine
from .pieces import N_PIECES, N_ROT, PIECE_NAMES, WIDTH

ROWS, COLS = engine.ROWS, engine.COLS
N_FEATURES = engine.N_FEATURES
DEFAULT_DISCOUNT = 0.9
_ACTION_SALT = np.uint64(0xD1B54A32D192ED03)

# hand-tuned sampling policy: 0.1 per column height, 0.5 per height step, 1 per
# hole; about 128 lines per game on average
BASELINE_WEIGHTS = np.concatenate([np.full(10, 0.1), np.full(9, 0.5), [0.0, 1.0, 0.0]])


class Placement(NamedTuple):
    rotation: int
    column: int


@dataclass(frozen=True)
class TetrisState:
    board: np.ndarray
    piece: int

    def __post_init__(self):
        board = np.asarray(self.board, dtype=np.uint16)
        if board.shape != (ROWS,):
            raise ValueError(f"board must have {ROWS} rows")
        if np.any(board > engine.FULL_ROW):
            raise ValueError("board rows use only the low 10 bits")
        if not 0 <= int(self.piece) < N_PIECES:
            raise ValueError("piece id out of range")
        board = board.copy()
        board.setflags(write=False)
        object.__setattr__(self, "board", board)
        object.__setattr__(self, "piece", int(self.piece))

    def encode(self) -> np.ndarray:
        return np.concatenate([self.board, [self.piece]]).astype(np.uint16)

    @classmethod
    def decode(cls, row) -> "TetrisState":
        row = np.asarray(row)
        return cls(row[:ROWS], int(row[ROWS]))


def empty_board() -> np.ndarray:
    return np.zeros(ROWS, dtype=np.uint16)


def piece_id(piece) -> int:
    return PIECE_NAMES.index(piece) if isinstance(piece, str) else int(piece)


# -- board text format ---------------------------------------------------------

def board_to_text(board) -> str:
    """20 lines of 10 chars, top row first; '#' filled, '.' empty."""
    board = np.asarray(board)
    return "\n".join("".join("#" if (int(board[r]) >> c) & 1 else "." for c in range(COLS))
                     for r in range(ROWS - 1, -1, -1))


def board_from_text(text: str) -> np.ndarray:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) > ROWS or any(len(ln) != COLS or set(ln) - {"#", "."} for ln in lines):
        raise ValueError("board text must be at most 20 lines of 10 '#'/'.' characters")
    lines = ["." * COLS] * (ROWS - len(lines)) + lines
    board = empty_board()
    for i, ln in enumerate(lines):
        board[ROWS - 1 - i] = sum(1 << c for c, ch in enumerate(ln) if ch == "#")
    return board


def board_to_hex(board) -> list[str]:
    return [f"{int(v):03x}" for v in np.asarray(board)]


def board_from_hex(rows) -> np.ndarray:
    if len(rows) != ROWS:
        raise ValueError(f"expected {ROWS} hex rows")
    board = np.array([int(v, 16) for v in rows], dtype=np.uint16)
    if np.any(board > engine.FULL_ROW):
        raise ValueError("hex row exceeds 10 columns")
    return board


# -- placements and dynamics ---------------------------------------------------

def _heights(board) -> np.ndarray:
    h = np.zeros(COLS, dtype=np.int64)
    engine.column_heights(np.asarray(board, dtype=np.uint16), h)
    return h


def legal_placements(state: TetrisState) -> list[Placement]:
    h = _heights(state.board)
    rot = np.zeros(engine.MAX_PLACEMENTS, dtype=np.int64)
    col = np.zeros(engine.MAX_PLACEMENTS, dtype=np.int64)
    n = engine.enumerate_placements(h, state.piece, rot, col)
    return [Placement(int(rot[i]), int(col[i])) for i in range(n)]


def is_terminal(state: TetrisState) -> bool:
    return not engine.has_placement(_heights(state.board), state.piece)


def apply_placement(board, piece, placement: Placement) -> tuple[np.ndarray, int]:
    """Drop the piece, clear full rows; returns (new board, lines cleared)."""
    board = np.asarray(board, dtype=np.uint16)
    p = piece_id(piece)
    k, c = int(placement[0]), int(placement[1])
    if not (0 <= k < N_ROT[p] and 0 <= c <= COLS - WIDTH[p, k]):
        raise ValueError(f"placement {placement} out of range for piece {PIECE_NAMES[p]}")
    if placement not in legal_placements(TetrisState(board, p)):
        raise ValueError(f"placement {placement} does not fit on the board")
    out = empty_board()
    lines = engine.drop(board, _heights(board), p, k, c, out)
    return out, int(lines)


def features(board) -> np.ndarray:
    phi = np.zeros(N_FEATURES)
    engine.board_features(np.asarray(board, dtype=np.uint16), phi)
    return phi


def features_batch(states) -> np.ndarray:
    """Feature rows for an (n, 20) or (n, 21) array of encoded states."""
    states = np.asarray(states, dtype=np.uint16)
    out = np.zeros((states.shape[0], N_FEATURES))
    for i in range(states.shape[0]):
        engine.board_features(states[i, :ROWS], out[i])
    return out


def live_fraction(board) -> float:
    """Probability that the next uniformly drawn piece can be placed."""
    h = np.zeros(COLS, dtype=np.int64)
    return engine.live_piece_count(np.asarray(board, dtype=np.uint16), h) / N_PIECES


def successor_expectation(state: TetrisState, placement: Placement, r, discount: float = DEFAULT_DISCOUNT) -> float:
    """g + alpha E[Phi r(x')] with g = -lines and value 0 at terminal successors."""
    nxt, lines = apply_placement(state.board, state.piece, placement)
    frac = live_fraction(nxt)
    value = float(features(nxt) @ np.asarray(r, dtype=float)) if frac > 0 else 0.0
    return -lines + discount * frac * value


def greedy_placement(state: TetrisState, r, discount: float = DEFAULT_DISCOUNT) -> Placement | None:
    i = engine.greedy_index(np.asarray(state.board, dtype=np.uint16), state.piece,
                            np.asarray(r, dtype=float), discount)
    return None if i < 0 else legal_placements(state)[i]


# -- episodes -------------------------------------------------------------------

def piece_stream(key: int, n: int) -> np.ndarray:
    return np.array([engine.piece_at(np.uint64(key), t) for t in range(n)], dtype=np.int64)


@dataclass(frozen=True)
class EpisodeResult:
    lines: int
    steps: int
    terminated: bool


def play_episode(policy, seed: int, max_steps: int = 1_000_000,
                 discount: float = DEFAULT_DISCOUNT) -> EpisodeResult:
    """Run one game with pieces drawn from the 64-bit stream ``seed``.

    ``policy`` is a weight vector (greedy placement), the string ``"random"``,
    or a callable ``(state, placements) -> index``.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be positive")
    key = np.uint64(seed)
    if isinstance(policy, str):
        if policy != "random":
            raise ValueError(f"unknown policy {policy!r}")
        out = engine.play_random(key, key ^ _ACTION_SALT, max_steps)
    elif callable(policy):
        out = _play_callback(policy, key, max_steps)
    else:
        r = np.asarray(policy, dtype=float)
        if r.shape != (N_FEATURES,):
            raise ValueError(f"weight vector must have {N_FEATURES} entries")
        out = engine.play_greedy(r, float(discount), key, max_steps)
    return EpisodeResult(int(out[0]), int(out[1]), bool(out[2]))


def _play_callback(policy: Callable, key, max_steps):
    board = empty_board()
    total = 0
    for t in range(max_steps):
        state = TetrisState(board, engine.piece_at(key, t))
        options = legal_placements(state)
        if not options:
            return total, t, True
        board, lines = apply_placement(board, state.piece, options[int(policy(state, options))])
        total += lines
    return total, max_steps, False


class TetrisEnv:
    """Episode interface used by the state samplers."""

    kind = "tetris"

    def __init__(self, discount: float = DEFAULT_DISCOUNT, max_steps: int = 1_000_000):
        self.discount = discount
        self.max_steps = max_steps

    def trace(self, policy, key: int, burn_in: int, stride: int, limit: int) -> np.ndarray:
        """States visited by the greedy policy ``policy`` (weights) along one game."""
        r = np.asarray(policy, dtype=float)
        out = np.zeros((limit, ROWS + 1), dtype=np.uint16)
        n, _ = engine.trace_greedy(r, float(self.discount), np.uint64(key), burn_in, stride, limit,
                                   self.max_steps, out)
        return out[:n]

    @staticmethod
    def empty_states(n: int = 0) -> np.ndarray:
        return np.zeros((n, ROWS + 1), dtype=np.uint16)


class TetrisConstraints:
    """Sampled-SALP constraint generator for encoded Tetris states."""

    def __init__(self, discount: float = DEFAULT_DISCOUNT):
        self.discount = float(discount)

    def distinct(self, states):
        states = np.asarray(states, dtype=np.uint16)
        if states.ndim != 2 or states.shape[1] != ROWS + 1:
            raise ValueError("Tetris states must be an (S, 21) array")
        if np.any(states[:, ROWS] >= N_PIECES) or np.any(states[:, :ROWS] > engine.FULL_ROW):
            raise ValueError("invalid encoded Tetris state")
        return np.unique(states, axis=0, return_counts=True)

    def features(self, states) -> np.ndarray:
        return features_batch(states)

    def constraint_block(self, states):
        states = np.ascontiguousarray(states, dtype=np.uint16)
        A, b, row_state, _ = engine.constraint_rows(states, self.discount)
        terminal = np.bincount(row_state, minlength=len(states)) == 0
        return A, b, row_state, terminal
