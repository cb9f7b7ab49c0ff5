"""Domain types, unit conversions and round configuration."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, NamedTuple, Sequence

import numpy as np

from . import rng

log = logging.getLogger(__name__)

SCHEDULERS = ("random_fifo", "random_ff", "greedy_ff", "flooding", "distributed", "maxflow")
DEFAULT_CHUNK_BYTES = 256 * 1024


class ConfigError(ValueError):
    """Invalid or infeasible round configuration."""


class ChunkId(NamedTuple):
    """Analysis label of one chunk: ``index`` runs from 1 to the owner's chunk count."""

    owner: int
    round: int
    index: int


class Pseudonym(NamedTuple):
    node: int
    round: int
    kind: str  # "round" or "spray"


# ---------------------------------------------------------------------------
# unit conversions


def compute_k_beta(beta: float, total_chunks: int) -> int:
    """Global cover-set threshold ``ceil(beta * total_chunks)``."""
    if not (0.0 < beta <= 1.0):
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    if total_chunks < 1:
        raise ValueError(f"total_chunks must be >= 1, got {total_chunks}")
    # guard against 0.1 * 500 = 50.000000000000007 style rounding
    return max(1, int(math.ceil(round(beta * total_chunks, 9))))


def chunks_per_slot(rate_bps: float, slot_s: float, chunk_bytes: int) -> int:
    """Whole chunks a link of ``rate_bps`` moves in one slot (floored)."""
    if rate_bps <= 0 or slot_s <= 0 or chunk_bytes <= 0:
        raise ValueError("rate, slot length and chunk size must be positive")
    return int(math.floor(round(rate_bps * slot_s / (8 * chunk_bytes), 9)))


def required_nonowner_mass(k_beta: int, K_v: int) -> int:
    return max(0, int(k_beta) - int(K_v))


@dataclass(frozen=True)
class Capacities:
    uplink_bps: float
    downlink_bps: float
    up_chunks: int
    down_chunks: int

    @classmethod
    def from_rates(cls, uplink_bps: float, downlink_bps: float, slot_s: float = 1.0,
                   chunk_bytes: int = DEFAULT_CHUNK_BYTES) -> "Capacities":
        return cls(uplink_bps, downlink_bps,
                   chunks_per_slot(uplink_bps, slot_s, chunk_bytes),
                   chunks_per_slot(downlink_bps, slot_s, chunk_bytes))

    @classmethod
    def from_chunks(cls, up_chunks: int, down_chunks: int, slot_s: float = 1.0,
                    chunk_bytes: int = DEFAULT_CHUNK_BYTES) -> "Capacities":
        bits = 8 * chunk_bytes / slot_s
        return cls(up_chunks * bits, down_chunks * bits, int(up_chunks), int(down_chunks))


# ---------------------------------------------------------------------------
# chunk universe


class ChunkUniverse:
    """Maps ``ChunkId`` labels to dense global indices.

    Chunks of node ``v`` occupy the contiguous block ``offsets[v]:offsets[v+1]``.
    """

    def __init__(self, K: Sequence[int], round: int = 0):
        K = np.asarray(K, dtype=np.int64)
        if K.ndim != 1 or len(K) == 0 or (K < 1).any():
            raise ValueError("every node needs at least one chunk")
        self.K = K
        self.round = int(round)
        self.n = len(K)
        self.offsets = np.concatenate([[0], np.cumsum(K)]).astype(np.int64)
        self.size = int(self.offsets[-1])
        self.owner_of = np.repeat(np.arange(self.n, dtype=np.int32), K)
        self.index_of = (np.arange(self.size) - self.offsets[self.owner_of] + 1).astype(np.int32)

    def gid(self, owner: int, index: int) -> int:
        if not 1 <= index <= self.K[owner]:
            raise IndexError(f"chunk index {index} out of range for owner {owner}")
        return int(self.offsets[owner] + index - 1)

    def label(self, gid: int) -> ChunkId:
        return ChunkId(int(self.owner_of[gid]), self.round, int(self.index_of[gid]))

    def owner_mask(self) -> np.ndarray:
        """Boolean (n, C) matrix, True where the node owns the chunk."""
        mask = np.zeros((self.n, self.size), dtype=bool)
        mask[self.owner_of, np.arange(self.size)] = True
        return mask

    def owned(self, v: int) -> slice:
        return slice(int(self.offsets[v]), int(self.offsets[v + 1]))


@dataclass
class Inventory:
    """Read-only view of one node's holdings."""

    held: np.ndarray
    owner_mask: np.ndarray

    @property
    def count(self) -> int:
        return int(self.held.sum())

    @property
    def owner_count(self) -> int:
        return int((self.held & self.owner_mask).sum())

    @property
    def nonowner_count(self) -> int:
        return int((self.held & ~self.owner_mask).sum())


# ---------------------------------------------------------------------------
# faults and round configuration


@dataclass(frozen=True)
class ByzantineBehavior:
    lie_bitfield: float = 0.0
    withhold: float = 0.0
    delay: int = 0

    def __post_init__(self):
        for name in ("lie_bitfield", "withhold"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} probability must be in [0, 1], got {p}")
        if self.delay < 0:
            raise ConfigError("delay must be non-negative")


@dataclass(frozen=True)
class FaultSpec:
    dropouts: tuple[tuple[int, int], ...] = ()
    byzantine: Mapping[int, ByzantineBehavior] = field(default_factory=dict)
    progress_timeout: int = 0  # 0 disables the timeout

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | None) -> "FaultSpec | None":
        if not data:
            return None
        byz = {int(k): ByzantineBehavior(**v) for k, v in dict(data.get("byzantine", {})).items()}
        drops = tuple((int(a), int(b)) for a, b in data.get("dropouts", ()))
        return cls(drops, byz, int(data.get("progress_timeout", 0)))

    def to_mapping(self) -> dict:
        return {
            "dropouts": [list(d) for d in self.dropouts],
            "byzantine": {str(k): dataclasses.asdict(v) for k, v in self.byzantine.items()},
            "progress_timeout": self.progress_timeout,
        }


@dataclass(frozen=True)
class RoundConfig:
    """Everything that determines one simulated round; ``seed`` fixes all randomness."""

    n: int = 100
    m: int = 10
    K: int = 206
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    slot_seconds: float = 1.0
    s_max: int = 20000
    beta: float = 0.10
    R: float = 0.2
    T_lag: int = 3
    kappa: int = 1
    tau: int = 4
    scheduler: str = "greedy_ff"
    seed: int = 0
    fault_spec: FaultSpec | None = None
    # extensions beyond the core knobs
    round: int = 0
    K_per_node: tuple[int, ...] | None = None
    bandwidth_model: str = "chunks"  # "chunks": uniform integer budgets; "mbps": uniform rates, floored
    up_range: tuple[float, float] = (7, 12)
    down_range: tuple[float, float] = (18, 60)
    non_owner_first: bool = True
    origin_oblivious: bool = True
    emergency_release: bool = True
    update_length: int = 64

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError("need at least two nodes")
        if self.m < 1 or self.m >= self.n:
            raise ConfigError(f"minimum degree m={self.m} infeasible for n={self.n}")
        if self.K < 1 or self.chunk_bytes < 1 or self.slot_seconds <= 0 or self.s_max < 1:
            raise ConfigError("K, chunk_bytes, slot_seconds and s_max must be positive")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if not 0.0 <= self.R < 1.0:
            raise ConfigError(f"R must lie in [0, 1), got {self.R}")
        if self.T_lag < 1 or self.kappa < 1 or self.tau < 1:
            raise ConfigError("T_lag, kappa and tau must be >= 1")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {self.scheduler!r}; choose from {SCHEDULERS}")
        if self.bandwidth_model not in ("chunks", "mbps"):
            raise ConfigError(f"unknown bandwidth model {self.bandwidth_model!r}")
        if self.K_per_node is not None:
            if len(self.K_per_node) != self.n or min(self.K_per_node) < 1:
                raise ConfigError("K_per_node must list a positive count per node")
            if len(set(self.K_per_node)) > 1:
                log.warning("heterogeneous update sizes: descriptor sizes may reveal owners")
        if self.fault_spec is not None:
            for node, slot in self.fault_spec.dropouts:
                if not 0 <= node < self.n or slot < 0:
                    raise ConfigError(f"bad dropout ({node}, {slot})")
            if any(not 0 <= v < self.n for v in self.fault_spec.byzantine):
                raise ConfigError("byzantine node id out of range")

    # derived quantities -------------------------------------------------
    @property
    def K_list(self) -> tuple[int, ...]:
        return tuple(self.K_per_node) if self.K_per_node is not None else (self.K,) * self.n

    @property
    def total_chunks(self) -> int:
        return int(sum(self.K_list))

    @property
    def k_beta(self) -> int:
        return compute_k_beta(self.beta, self.total_chunks)

    def universe(self) -> ChunkUniverse:
        return ChunkUniverse(self.K_list, self.round)

    def capacities(self) -> list[Capacities]:
        """Per-node link budgets drawn from the configured bandwidth model."""
        g = rng.stream(self.seed, rng.CAPACITIES)
        lo_u, hi_u = self.up_range
        lo_d, hi_d = self.down_range
        if self.bandwidth_model == "chunks":
            ups = g.integers(int(lo_u), int(hi_u) + 1, size=self.n)
            downs = g.integers(int(lo_d), int(hi_d) + 1, size=self.n)
            return [Capacities.from_chunks(int(u), int(d), self.slot_seconds, self.chunk_bytes)
                    for u, d in zip(ups, downs)]
        ups = g.uniform(lo_u, hi_u, size=self.n) * 1e6
        downs = g.uniform(lo_d, hi_d, size=self.n) * 1e6
        return [Capacities.from_rates(float(u), float(d), self.slot_seconds, self.chunk_bytes)
                for u, d in zip(ups, downs)]

    def replace(self, **changes) -> "RoundConfig":
        return dataclasses.replace(self, **changes)

    def validate_feasible(self) -> None:
        """Raise ``ConfigError`` for configs that cannot complete warm-up by construction."""
        if self.k_beta > self.total_chunks:
            raise ConfigError(f"k_beta={self.k_beta} exceeds the chunk universe {self.total_chunks}")

    # (de)serialisation --------------------------------------------------
    def to_mapping(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if f.name == "fault_spec":
                val = val.to_mapping() if val is not None else None
            elif isinstance(val, tuple):
                val = list(val)
            out[f.name] = val
        return out

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RoundConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(data)
        if "fault_spec" in kw:
            kw["fault_spec"] = FaultSpec.from_mapping(kw["fault_spec"])
        for key in ("K_per_node", "up_range", "down_range"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def load_config(path: str | Path) -> RoundConfig:
    """Read a ``RoundConfig`` from a YAML or JSON file whose keys are the field names."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        import yaml

        data = yaml.safe_load(text)
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RoundConfig.from_mapping(data)
