"""State samples for the sampled SALP and the sample-size formula.

Two sources: simulation of a baseline policy (burn-in plus stride, restarting
episodes on termination) and exact i.i.d. draws from a discounted occupancy
measure of an explicit model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mdp import MdpModel, check_distribution, check_policy, occupancy

FORMAT = "salp-samples"
DEFAULT_BURN_IN = 50
DEFAULT_STRIDE = 20
MAX_EMPTY_EPISODES = 1000


@dataclass
class SampleSet:
    """S sampled states.

    ``states`` is an int64 vector of state indices for explicit models or an
    (S, 21) uint16 array (20 board rows, piece id) for Tetris.
    """

    states: np.ndarray
    source: str
    seed: int
    env: str = "explicit"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.env == "tetris":
            self.states = np.asarray(self.states, dtype=np.uint16).reshape(-1, 21)
        else:
            self.states = np.asarray(self.states, dtype=np.int64).ravel()
        if len(self.states) < 1:
            raise ValueError("a sample set needs at least one state")

    @property
    def S(self) -> int:
        return int(len(self.states))

    def __eq__(self, other) -> bool:
        return (isinstance(other, SampleSet) and self.source == other.source and self.seed == other.seed
                and self.env == other.env and np.array_equal(self.states, other.states))


def episode_key(seed: int, episode: int) -> int:
    """64-bit stream key for one episode, split from (seed, episode)."""
    return int(np.random.SeedSequence([int(seed), int(episode)]).generate_state(1, np.uint64)[0])


class ExplicitEnv:
    """Episode simulator for an explicit model; episodes never terminate."""

    kind = "explicit"

    def __init__(self, model: MdpModel, initial=None):
        self.model = model
        n = model.n_states
        self.initial = np.full(n, 1.0 / n) if initial is None else check_distribution(initial, n, "initial")
        self._cdf = np.cumsum(model.transitions, axis=2)

    def trace(self, policy, key: int, burn_in: int, stride: int, limit: int) -> np.ndarray:
        policy = check_policy(policy, self.model)
        rng = np.random.default_rng(key)
        x = int(rng.choice(self.model.n_states, p=self.initial))
        out = []
        t = 0
        while len(out) < limit:
            if t >= burn_in and (t - burn_in) % stride == 0:
                out.append(x)
            cdf = self._cdf[policy[x], x]
            x = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), self.model.n_states - 1)
            t += 1
        return np.asarray(out, dtype=np.int64)

    @staticmethod
    def empty_states(n: int = 0) -> np.ndarray:
        return np.zeros(n, dtype=np.int64)


def sample_baseline_states(env, policy, S: int, burn_in: int = DEFAULT_BURN_IN,
                           stride: int = DEFAULT_STRIDE, seed: int = 0) -> SampleSet:
    """Exactly S states from baseline-policy episodes.

    Each episode discards its first ``burn_in`` steps, then records every
    ``stride``-th state; a new episode starts when one terminates.  Episode
    streams are split from ``(seed, episode index)``.
    """
    if S < 1:
        raise ValueError("S must be positive")
    if burn_in < 1 or stride < 1:
        raise ValueError("burn_in and stride must be positive")
    chunks = []
    have = 0
    empty = 0
    episode = 0
    while have < S:
        got = env.trace(policy, episode_key(seed, episode), burn_in, stride, S - have)
        episode += 1
        if len(got) == 0:
            empty += 1
            if empty >= MAX_EMPTY_EPISODES:
                raise RuntimeError(f"{empty} episodes ended before the burn-in of {burn_in} steps")
            continue
        empty = 0
        chunks.append(got)
        have += len(got)
    states = np.concatenate(chunks, axis=0)
    return SampleSet(states, "baseline-policy", int(seed), env.kind,
                     {"burn_in": burn_in, "stride": stride, "episodes": episode})


def sample_occupancy_exact(model: MdpModel, policy, nu, S: int, seed: int = 0) -> SampleSet:
    """S i.i.d. draws from the discounted occupancy of ``policy`` started at ``nu``."""
    if S < 1:
        raise ValueError("S must be positive")
    pi = occupancy(model, policy, nu)
    cdf = np.cumsum(pi)
    u = np.random.default_rng(seed).random(S) * cdf[-1]
    states = np.minimum(np.searchsorted(cdf, u, side="right"), model.n_states - 1)
    return SampleSet(states, "exact-occupancy", int(seed), "explicit")


# -- sample-size formula ---------------------------------------------------------

def sample_size_bound(B: float, K: int, epsilon: float, delta: float) -> int:
    """ceil((64 B^2 / eps^2) (2 (K + 2) ln(16 e B / eps) + ln(8 / delta)))."""
    if not (math.isfinite(B) and 0 < epsilon <= B):
        raise ValueError("need 0 < epsilon <= B")
    if not 0 < delta <= 0.5:
        raise ValueError("need 0 < delta <= 1/2")
    if int(K) != K or K < 1:
        raise ValueError("K must be a positive integer")
    value = (64.0 * B * B / (epsilon * epsilon)) * (
        2.0 * (K + 2) * math.log(16.0 * math.e * B / epsilon) + math.log(8.0 / delta))
    return int(math.ceil(value))


def estimate_B(lower, upper, states, generator) -> float:
    """max over sampled (x, a) of sup over the box of (Phi r - T_a Phi r)(x), clipped at 0.

    Each constraint row is linear in r, so its box supremum picks, per
    coordinate, whichever bound makes the coefficient term larger.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise ValueError("the box on r must be finite")
    if np.any(lower > upper):
        raise ValueError("box lower bound exceeds upper bound")
    states = states.states if isinstance(states, SampleSet) else states
    distinct, _ = generator.distinct(states)
    A, b, _, _ = generator.constraint_block(distinct)
    if len(b) == 0:
        return 0.0
    sup = np.maximum(A * lower, A * upper).sum(axis=1) - b
    return float(max(np.max(sup), 0.0))


# -- serialisation -----------------------------------------------------------------

def dumps_samples(samples: SampleSet) -> str:
    from .tetris import board_to_hex

    header = {"format": FORMAT, "version": 1, "env": samples.env, "source": samples.source,
              "seed": samples.seed, "S": samples.S, "meta": samples.meta}
    lines = [json.dumps(header, sort_keys=True)]
    if samples.env == "tetris":
        for row in samples.states:
            lines.append(json.dumps({"rows": board_to_hex(row[:20]), "piece": int(row[20])}))
    else:
        lines.extend(json.dumps({"state": int(x)}) for x in samples.states)
    return "\n".join(lines) + "\n"


def loads_samples(text: str) -> SampleSet:
    from .tetris import board_from_hex

    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty sample file")
    header = json.loads(lines[0])
    if header.get("format") != FORMAT:
        raise ValueError("not a sample file")
    records = [json.loads(ln) for ln in lines[1:]]
    if len(records) != header["S"]:
        raise ValueError(f"header says S={header['S']} but {len(records)} records follow")
    if header["env"] == "tetris":
        states = np.array([np.concatenate([board_from_hex(r["rows"]), [r["piece"]]]) for r in records],
                          dtype=np.uint16)
    else:
        states = np.array([r["state"] for r in records], dtype=np.int64)
    return SampleSet(states, header["source"], int(header["seed"]), header["env"], header.get("meta", {}))


def save_samples(samples: SampleSet, path) -> None:
    Path(path).write_text(dumps_samples(samples))


def load_samples(path) -> SampleSet:
    return loads_samples(Path(path).read_text())
