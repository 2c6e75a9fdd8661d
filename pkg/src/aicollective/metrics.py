"""Emergence metrics over a PartyLog: distinct-partner ratios, pair classes,
cross-pair semantic distance and the interaction network.

Windows are trailing: the window ending at round r covers rounds
(r - window, r].  Early rounds use whatever prefix exists.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .agents import AgentId, Transcript
from .embeddings import EmbeddingService, distance
from .party import PartyLog
from .stats import RegressionResult, StatsError, ols_slope

Pair = tuple[AgentId, AgentId]

CONVERSATION_RATIO = "distinct_conversation_ratio"
INVITATION_RATIO = "distinct_invitation_ratio"


def pair_key(a: AgentId, b: AgentId) -> Pair:
    return (a, b) if a < b else (b, a)


def pair_name(pair: Pair) -> str:
    return f"{pair[0]}-{pair[1]}"


def _window_bounds(log: PartyLog, end_round: int, window: int) -> tuple[int, int]:
    if window < 1:
        raise ValueError("window must be >= 1")
    return max(1, end_round - window + 1), end_round


def _check_agent(log: PartyLog, agent: AgentId):
    if not 1 <= agent.index <= log.config.n_agents:
        raise KeyError(f"unknown agent {agent}")


def conversation_partners(log: PartyLog, agent: AgentId, first: int, last: int) -> list[AgentId]:
    return [t.other(agent) for t in log.transcripts(first, last) if t.involves(agent)]


def invitees(log: PartyLog, agent: AgentId, first: int, last: int) -> list[AgentId]:
    return [
        inv.recipient
        for rec in log.rounds
        if first <= rec.round_id <= last
        for inv in rec.invitations
        if inv.sender == agent
    ]


def _distinct_ratio(items: list[AgentId]) -> float | None:
    if not items:
        return None
    return len(set(items)) / len(items)


def distinct_conversation_ratio(log: PartyLog, agent: AgentId, end_round: int, window: int = 10) -> float | None:
    """Unique partners / conversations for ``agent`` in the window; None without conversations."""
    _check_agent(log, agent)
    return _distinct_ratio(conversation_partners(log, agent, *_window_bounds(log, end_round, window)))


def distinct_invitation_ratio(log: PartyLog, agent: AgentId, end_round: int, window: int = 10) -> float | None:
    """Unique invitees / invitations sent by ``agent`` in the window; None without invitations."""
    _check_agent(log, agent)
    return _distinct_ratio(invitees(log, agent, *_window_bounds(log, end_round, window)))


def ratio_series(log: PartyLog, window: int = 10) -> list[tuple[str, int, str, float]]:
    """Tidy (agent, round, metric, value) rows for both ratio metrics; undefined points omitted."""
    rows = []
    for fn, metric in ((distinct_conversation_ratio, CONVERSATION_RATIO), (distinct_invitation_ratio, INVITATION_RATIO)):
        for agent in log.agents:
            for rec in log.rounds:
                v = fn(log, agent, rec.round_id, window)
                if v is not None:
                    rows.append((agent.name, rec.round_id, metric, v))
    return rows


@dataclass(frozen=True)
class PairClass:
    pair: Pair
    conversation_count: int
    tight: bool

    @property
    def label(self) -> str:
        return "tight" if self.tight else "loose"


def pair_counts(log: PartyLog, first: int = 1, last: int | None = None) -> Counter:
    return Counter(t.pair for t in log.transcripts(first, last))


def classify_pairs(log: PartyLog, threshold: int = 5) -> list[PairClass]:
    """Pairs with at least one conversation; tight when the count exceeds ``threshold``."""
    counts = pair_counts(log)
    return [PairClass(p, n, n > threshold) for p, n in sorted(counts.items())]


def pair_window_texts(log: PartyLog, end_round: int, window: int) -> dict[Pair, str]:
    """Concatenated transcript text per pair over the window, chronological, one turn per line."""
    first, last = _window_bounds(log, end_round, window)
    chunks: dict[Pair, list[str]] = defaultdict(list)
    for t in log.transcripts(first, last):
        if t.turns:
            chunks[t.pair].append(t.text())
    return {p: "\n".join(c) for p, c in sorted(chunks.items())}


@dataclass
class SemanticDistanceSeries:
    window: int
    metric: str
    pair_points: list[tuple[Pair, int, str, float]] = field(default_factory=list)
    class_means: dict[str, list[tuple[int, float]]] = field(default_factory=lambda: {"tight": [], "loose": []})


def pair_semantic_distance_series(
    log: PartyLog,
    embedder: EmbeddingService,
    window: int = 10,
    threshold: int = 5,
    metric: str = "cosine",
) -> SemanticDistanceSeries:
    """Per window: embed each conversing pair's text, measure its distance to
    the centroid of all pairs' vectors, and average by tight/loose class."""
    if not isinstance(embedder, EmbeddingService):
        embedder = EmbeddingService(embedder)
    classes = {pc.pair: pc.label for pc in classify_pairs(log, threshold)}
    out = SemanticDistanceSeries(window, metric)
    for rec in log.rounds:
        texts = pair_window_texts(log, rec.round_id, window)
        if not texts:
            continue
        pairs = list(texts)
        vecs = embedder.embed_batch([texts[p] for p in pairs]).vectors
        centroid = vecs.mean(axis=0)
        by_class: dict[str, list[float]] = defaultdict(list)
        for p, v in zip(pairs, vecs):
            if metric == "cosine" and not np.any(centroid):
                d = float("nan")  # vectors cancel out; cosine to a zero centroid is undefined
            else:
                d = distance(v, centroid, metric)
            label = classes[p]
            out.pair_points.append((p, rec.round_id, label, d))
            by_class[label].append(d)
        for label in ("tight", "loose"):
            if by_class[label]:
                out.class_means[label].append((rec.round_id, float(np.mean(by_class[label]))))
    return out


@dataclass
class InteractionNetwork:
    first: int
    last: int
    activity: dict[AgentId, int]
    popularity: dict[AgentId, int]
    edges: dict[Pair, int]

    def weight(self, a: AgentId, b: AgentId) -> int:
        return self.edges.get(pair_key(a, b), 0)

    def node_rows(self) -> list[tuple[str, int, int]]:
        return [(a.name, self.activity[a], self.popularity[a]) for a in sorted(self.activity)]

    def edge_rows(self) -> list[tuple[str, str, int]]:
        return [(a.name, b.name, w) for (a, b), w in sorted(self.edges.items())]


def build_network(log: PartyLog, first: int, last: int) -> InteractionNetwork:
    """Node activity/popularity from invitations, edge weights from conversations, rounds first..last."""
    if first > last:
        raise ValueError(f"empty round range {first}..{last}")
    if first < 1 or last > len(log.rounds):
        raise ValueError(f"round range {first}..{last} outside log of {len(log.rounds)} rounds")
    activity = {a: 0 for a in log.agents}
    popularity = {a: 0 for a in log.agents}
    for rec in log.rounds:
        if first <= rec.round_id <= last:
            for inv in rec.invitations:
                activity[inv.sender] += 1
                popularity[inv.recipient] += 1
    return InteractionNetwork(first, last, activity, popularity, dict(pair_counts(log, first, last)))


def network_halves(log: PartyLog) -> list[InteractionNetwork]:
    """Networks of the first and second half of the party (one network when R = 1)."""
    r = len(log.rounds)
    if r == 0:
        return []
    if r == 1:
        return [build_network(log, 1, 1)]
    mid = r // 2
    return [build_network(log, 1, mid), build_network(log, mid + 1, r)]


def trend(points: Iterable[tuple[float, float]]) -> RegressionResult | None:
    """OLS slope over (round, value) points, or None when too few or x is constant."""
    pts = list(points)
    try:
        return ols_slope(pts)
    except StatsError:
        return None


def transcripts_between(log: PartyLog, a: AgentId, b: AgentId) -> list[Transcript]:
    key = pair_key(a, b)
    return [t for t in log.transcripts() if t.pair == key]
