"""Per-round overlay generation and the commit-then-reveal round log.

The tracker commits to ``sha256(seed)`` before the round, then reveals the seed
and a log of every tracker-issued directive.  Anyone holding the config can
regenerate the overlay from the seed and re-check the hard constraints.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from . import rng
from .config import ChunkUniverse, RoundConfig

HASH_NAME = "sha256"

# directive flag bits, shared with the engine
SCHEDULED = 1
SPRAY = 2
RETRY = 4
EMERGENCY = 8

DIRECTIVE_DTYPE = np.dtype([
    ("stage", np.int32),
    ("sender", np.int32),
    ("receiver", np.int32),
    ("chunk", np.int32),
    ("flags", np.uint8),
])


class OverlayError(ValueError):
    pass


def make_directives(stage, sender, receiver, chunk, flags=SCHEDULED) -> np.ndarray:
    """Pack parallel sequences into a directive array (broadcasting scalars)."""
    stage, sender, receiver, chunk, flags = np.broadcast_arrays(
        *(np.atleast_1d(np.asarray(a, dtype=np.int64)) for a in (stage, sender, receiver, chunk, flags)))
    out = np.zeros(len(sender), dtype=DIRECTIVE_DTYPE)
    out["stage"] = stage
    out["sender"] = sender
    out["receiver"] = receiver
    out["chunk"] = chunk
    out["flags"] = flags
    return out


# ---------------------------------------------------------------------------
# overlay


@dataclass(frozen=True, eq=False)
class Overlay:
    n: int
    adjacency: tuple[tuple[int, ...], ...]

    def __eq__(self, other):
        return isinstance(other, Overlay) and self.adjacency == other.adjacency

    def __hash__(self):
        return hash(self.adjacency)

    def neighbors(self, v: int) -> tuple[int, ...]:
        return self.adjacency[v]

    def degree(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency])

    @property
    def avg_degree(self) -> Fraction:
        return Fraction(int(self.degree().sum()), self.n)

    @property
    def min_degree(self) -> int:
        return int(self.degree().min())

    def matrix(self) -> np.ndarray:
        A = np.zeros((self.n, self.n), dtype=bool)
        for v, nbrs in enumerate(self.adjacency):
            A[v, list(nbrs)] = True
        return A

    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        indptr[1:] = np.cumsum(self.degree())
        indices = np.fromiter((u for nbrs in self.adjacency for u in nbrs), dtype=np.int32,
                              count=int(indptr[-1]))
        return indptr, indices

    def is_connected(self) -> bool:
        return len(_components(self.adjacency)) == 1

    @classmethod
    def from_edges(cls, n: int, edges) -> "Overlay":
        adj = [set() for _ in range(n)]
        for a, b in edges:
            if a == b:
                raise OverlayError("self-loop")
            adj[a].add(b)
            adj[b].add(a)
        return cls(n, tuple(tuple(sorted(s)) for s in adj))


def _components(adj) -> list[list[int]]:
    n = len(adj)
    seen = np.zeros(n, dtype=bool)
    comps = []
    for root in range(n):
        if seen[root]:
            continue
        seen[root] = True
        stack, comp = [root], []
        while stack:
            v = stack.pop()
            comp.append(v)
            for u in adj[v]:
                if not seen[u]:
                    seen[u] = True
                    stack.append(u)
        comps.append(comp)
    return comps


def generate_overlay(n: int, m: int, seed: int) -> Overlay:
    """Random connected overlay with minimum degree ``m``.

    Target degrees are uniform on ``[m, 2m]``; stubs are paired at random,
    self-loops and multi-edges dropped, under-degree nodes topped up with random
    non-neighbours, and leftover components joined by random bridges.
    """
    if m < 1 or n <= m:
        raise OverlayError(f"no simple graph on {n} nodes has minimum degree {m}")
    g = rng.stream(seed, rng.OVERLAY)
    targets = np.minimum(g.integers(m, 2 * m + 1, size=n), n - 1)
    if targets.sum() % 2:
        room = np.flatnonzero(targets < n - 1)
        if len(room):
            targets[room[g.integers(len(room))]] += 1
        else:
            targets[g.integers(n)] -= 1
    stubs = np.repeat(np.arange(n), targets)
    g.shuffle(stubs)
    adj = [set() for _ in range(n)]
    for a, b in stubs.reshape(-1, 2):
        if a != b:
            adj[a].add(int(b))
            adj[b].add(int(a))

    for v in g.permutation(n):
        v = int(v)
        while len(adj[v]) < m:
            cand = np.array([u for u in range(n) if u != v and u not in adj[v]])
            short = cand[[len(adj[u]) < targets[u] for u in cand]]
            pool = short if len(short) else cand
            u = int(pool[g.integers(len(pool))])
            adj[v].add(u)
            adj[u].add(v)

    comps = _components(adj)
    if len(comps) > 1:
        order = g.permutation(len(comps))
        for i in range(1, len(order)):
            a_comp, b_comp = comps[order[i - 1]], comps[order[i]]
            a = int(a_comp[g.integers(len(a_comp))])
            b = int(b_comp[g.integers(len(b_comp))])
            adj[a].add(b)
            adj[b].add(a)
    return Overlay(n, tuple(tuple(sorted(s)) for s in adj))


# ---------------------------------------------------------------------------
# commit / reveal


def commit_seed(seed: int) -> str:
    """Hex digest of the seed's canonical 8-byte big-endian encoding."""
    if not 0 <= seed < 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    return hashlib.sha256(int(seed).to_bytes(8, "big")).hexdigest()


def reveal_matches(commit: str, seed: int) -> bool:
    return commit_seed(seed) == commit


def config_digest(config: RoundConfig) -> str:
    blob = json.dumps(config.to_mapping(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RoundLog:
    seed_commit: str
    n: int
    m: int
    config_digest: str
    directives: np.ndarray = field(default_factory=lambda: np.zeros(0, DIRECTIVE_DTYPE))
    seed: int | None = None
    hash_name: str = HASH_NAME

    @property
    def retries(self) -> np.ndarray:
        return (self.directives["flags"] & RETRY) != 0

    def to_text(self, universe: ChunkUniverse) -> str:
        buf = io.StringIO()
        buf.write(f"# hash={self.hash_name}\n# commit={self.seed_commit}\n")
        buf.write(f"# n={self.n} m={self.m}\n# config={self.config_digest}\n")
        if self.seed is not None:
            buf.write(f"# seed={self.seed}\n")
        buf.write("stage,sender,receiver,chunk_owner,chunk_index,flags\n")
        d = self.directives
        owners = universe.owner_of[d["chunk"]]
        idx = universe.index_of[d["chunk"]]
        for row, o, i in zip(d, owners, idx):
            buf.write(f"{row['stage']},{row['sender']},{row['receiver']},{o},{i},{row['flags']}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str, universe: ChunkUniverse) -> "RoundLog":
        header, rows = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                for tok in line[1:].split():
                    k, _, v = tok.partition("=")
                    header[k] = v
            elif line and not line.startswith("stage"):
                rows.append([int(x) for x in line.split(",")])
        arr = np.array(rows, dtype=np.int64).reshape(-1, 6)
        chunks = universe.offsets[arr[:, 3]] + arr[:, 4] - 1
        d = make_directives(arr[:, 0], arr[:, 1], arr[:, 2], chunks, arr[:, 5])
        seed = int(header["seed"]) if "seed" in header else None
        return cls(header["commit"], int(header["n"]), int(header["m"]), header["config"], d,
                   seed, header.get("hash", HASH_NAME))


class Verdict(NamedTuple):
    accept: bool
    reason: str | None = None
    detail: str = ""

    def __bool__(self):
        return self.accept


def verify_round_log(commit: str, seed: int, log: RoundLog, config: RoundConfig) -> Verdict:
    """Replay the hard constraints of a revealed round log.

    Checks, in order: seed commitment, stage ordering, overlay adjacency of every
    non-spray directive, per-stage send/receive caps, and absence of repeated
    ``(receiver, chunk)`` deliveries not flagged as retries.
    """
    if log.hash_name != HASH_NAME:
        return Verdict(False, "commit", f"unsupported hash {log.hash_name}")
    if not reveal_matches(commit, seed) or log.seed_commit != commit:
        return Verdict(False, "commit", "revealed seed does not match commitment")
    if log.n != config.n or log.m != config.m or log.config_digest != config_digest(config):
        return Verdict(False, "config", "log header does not match config")
    d = log.directives
    if len(d) == 0:
        return Verdict(True)
    if (np.diff(d["stage"]) < 0).any():
        return Verdict(False, "order", "directives not ordered by stage")
    n = config.n
    if ((d["sender"] < 0) | (d["sender"] >= n) | (d["receiver"] < 0) | (d["receiver"] >= n)).any():
        return Verdict(False, "adjacency", "endpoint out of range")
    if (d["chunk"] < 0).any() or (d["chunk"] >= config.total_chunks).any():
        return Verdict(False, "chunk", "chunk id out of range")

    cfg = config.replace(seed=seed) if config.seed != seed else config
    A = generate_overlay(cfg.n, cfg.m, seed).matrix()
    spray = (d["flags"] & SPRAY) != 0
    bad = ~spray & ~A[d["sender"], d["receiver"]]
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        return Verdict(False, "adjacency", f"directive {i}: {d['sender'][i]}->{d['receiver'][i]} not adjacent")

    caps = cfg.capacities()
    up = np.array([c.up_chunks for c in caps])
    down = np.array([c.down_chunks for c in caps])
    charged = d[~spray]
    if len(charged):
        stages = charged["stage"].astype(np.int64)
        s0 = stages.min()
        width = int(stages.max() - s0 + 1)
        sends = np.bincount((stages - s0) * n + charged["sender"], minlength=width * n).reshape(width, n)
        recvs = np.bincount((stages - s0) * n + charged["receiver"], minlength=width * n).reshape(width, n)
        over_up = sends > up[None, :]
        over_down = recvs > down[None, :]
        if over_up.any() or over_down.any():
            s, v = np.argwhere(over_up | over_down)[0]
            return Verdict(False, "cap", f"stage {s + s0}: node {v} exceeds its per-stage budget")

    key = d["receiver"].astype(np.int64) * config.total_chunks + d["chunk"]
    _, first = np.unique(key, return_index=True)
    repeat = np.ones(len(d), dtype=bool)
    repeat[first] = False
    unflagged = repeat & ((d["flags"] & RETRY) == 0)
    if unflagged.any():
        i = int(np.flatnonzero(unflagged)[0])
        return Verdict(False, "duplicate", f"directive {i}: repeated delivery without retry flag")
    return Verdict(True)


# ---------------------------------------------------------------------------
# tampering (audit exercises)


def _with(log, directives):
    return RoundLog(log.seed_commit, log.n, log.m, log.config_digest, directives, log.seed,
                    log.hash_name)


def tamper_log(log: RoundLog, config: RoundConfig, kind: str, g) -> RoundLog:
    """Copy of ``log`` with one violation of ``kind`` in {adjacency, cap, duplicate}.

    Used to exercise the audit; ``g`` is a numpy ``Generator``.
    """
    d = log.directives.copy()
    A = _adjacency(config)
    caps = config.capacities()
    up = np.array([c.up_chunks for c in caps])
    down = np.array([c.down_chunks for c in caps])
    plain = np.flatnonzero((d["flags"] & SPRAY) == 0)
    if kind == "adjacency":
        i = int(g.choice(plain))
        u = int(d["sender"][i])
        far = np.flatnonzero(~A[u])
        far = far[far != u]
        d["receiver"][i] = int(g.choice(far))
        return _with(log, d)
    sends, recvs = _loads(d[plain], config.n)
    if kind == "duplicate":
        for i in g.permutation(plain):
            s, u, w = int(d["stage"][i]), int(d["sender"][i]), int(d["receiver"][i])
            if sends[s][u] < up[u] and recvs[s][w] < down[w]:
                return _with(log, np.insert(d, i + 1, d[i]))
        raise ValueError("no stage has slack for a duplicate")
    if kind == "cap":
        i = int(g.choice(plain))
        s, u = int(d["stage"][i]), int(d["sender"][i])
        extra = up[u] - sends[s][u] + 1
        got = set(zip(d["receiver"].tolist(), d["chunk"].tolist()))
        nbrs = np.flatnonzero(A[u])
        rows = []
        C = config.total_chunks
        while len(rows) < extra:
            w = int(g.choice(nbrs))
            c = int(g.integers(C))
            if (w, c) not in got:
                got.add((w, c))
                rows.append((s, u, w, c, 1))
        add = np.array(rows, dtype=DIRECTIVE_DTYPE)
        return _with(log, np.insert(d, i + 1, add))
    raise ValueError(kind)


def _adjacency(config):
    return generate_overlay(config.n, config.m, config.seed).matrix()


def _loads(d, n):
    sends, recvs = {}, {}
    for row in d:
        s = int(row["stage"])
        sends.setdefault(s, np.zeros(n, int))[row["sender"]] += 1
        recvs.setdefault(s, np.zeros(n, int))[row["receiver"]] += 1
    return sends, recvs
