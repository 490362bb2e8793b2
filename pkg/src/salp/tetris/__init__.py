"""Tetris as a discounted MDP with random pieces and gravity-drop placements."""

from .env import (BASELINE_WEIGHTS, DEFAULT_DISCOUNT, N_FEATURES, EpisodeResult, Placement, TetrisConstraints,
                  TetrisEnv, TetrisState, apply_placement, board_from_hex, board_from_text, board_to_hex,
                  board_to_text, empty_board, features, features_batch, greedy_placement, is_terminal,
                  legal_placements, live_fraction, piece_id, piece_stream, play_episode, successor_expectation)
from .pieces import PIECE_NAMES, orientations

__all__ = [
    "BASELINE_WEIGHTS", "DEFAULT_DISCOUNT", "N_FEATURES", "EpisodeResult", "Placement", "TetrisConstraints",
    "TetrisEnv", "TetrisState", "apply_placement", "board_from_hex", "board_from_text", "board_to_hex",
    "board_to_text", "empty_board", "features", "features_batch", "greedy_placement", "is_terminal",
    "legal_placements", "live_fraction", "piece_id", "piece_stream", "play_episode", "successor_expectation",
    "PIECE_NAMES", "orientations",
]
