"""Shared builders for tests: random logs, protocol-abusing scripted agents."""

from __future__ import annotations

import hashlib
import json
import random
import re
from typing import Sequence

from aicollective.agents import MEDIATOR, AgentId, ChatTurn, Playbook, Transcript, scripted_agent
from aicollective.party import AcceptanceDecision, Invitation, PartyConfig, PartyLog, RoundRecord

WORDS = "amber basil cedar delta ember fjord grove harbor iris juniper kelp lumen moss nectar opal".split()


def rng_for(*parts) -> random.Random:
    digest = hashlib.sha256("|".join(map(str, parts)).encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


def random_log(seed: int, n_agents: int, n_rounds: int, *, text_pool: Sequence[str] = WORDS) -> PartyLog:
    """A structurally valid PartyLog built directly, without running agents."""
    r = random.Random(seed)
    log = PartyLog(PartyConfig(n_agents=n_agents, n_rounds=n_rounds, seed=seed))
    ids = [AgentId(i) for i in range(1, n_agents + 1)]
    for rnd in range(1, n_rounds + 1):
        rec = RoundRecord(rnd)
        for a in ids:
            if r.random() < 0.8:
                rec.invitations.append(Invitation(rnd, a, r.choice([b for b in ids if b != a])))
        inviters: dict[AgentId, list[AgentId]] = {}
        for inv in rec.invitations:
            inviters.setdefault(inv.recipient, []).append(inv.sender)
        accepted: dict[AgentId, set[AgentId]] = {}
        for b, senders in sorted(inviters.items()):
            accepted[b] = {s for s in senders if r.random() < 0.6}
            rec.acceptances.append(AcceptanceDecision(rnd, b, frozenset(accepted[b])))
        for inv in sorted(rec.invitations, key=lambda i: (min(i.sender, i.recipient), max(i.sender, i.recipient), i.sender)):
            if inv.sender in accepted.get(inv.recipient, ()):
                t = Transcript(inv.sender, inv.recipient, rnd, terminated_by="leave")
                speakers = (inv.sender, inv.recipient)
                for k in range(r.randint(1, 4)):
                    text = " ".join(r.choice(text_pool) for _ in range(r.randint(1, 6)))
                    t.turns.append(ChatTurn(speakers[k % 2].name, text, rnd, k, f"r{rnd}:{inv.sender}>{inv.recipient}"))
                rec.conversations.append(t)
        log.rounds.append(rec)
    return log


def chaotic_agent(index: int, n_agents: int, seed: int):
    """Scripted agent that often breaks protocol: double invites, self invites,
    unknown names, accepting non-inviters, never leaving."""
    me = f"L{index}"

    def invite(message: str, history: Sequence[ChatTurn]) -> str:
        r = rng_for(seed, index, "invite", len(history))
        roll = r.random()
        other = r.randint(1, n_agents)
        if roll < 0.1:
            return "I'll sit this round out."
        if roll < 0.2:
            return f"To {me}, hello me. To L{n_agents + 5}, hi."
        if roll < 0.35:
            return f"To [L{other}] and also To L{r.randint(1, n_agents)}, I'd like to chat"
        return f"To L{other}, I'd like to chat with you"

    def accept(message: str, history: Sequence[ChatTurn]) -> str:
        r = rng_for(seed, index, "accept", len(history))
        names = re.findall(r"L\d+", message.split("got", 1)[-1])
        picks = [n for n in names if r.random() < 0.7]
        if r.random() < 0.2:
            picks.append(f"L{r.randint(1, n_agents)}")
        return " ".join(f"Accept {p}." for p in picks) or "No thanks."

    def chat(message: str, history: Sequence[ChatTurn]) -> str:
        r = rng_for(seed, index, "chat", len(history))
        roll = r.random()
        if roll < 0.3:
            return "Nice talking. LEAVE"
        if roll < 0.35:
            return "I will leave the topic of Leave aside."
        return f"{r.choice(WORDS)} {r.choice(WORDS)}"

    def dispatch(message: str, history: Sequence[ChatTurn]) -> str:
        last = history[-1]
        if last.speaker == MEDIATOR and "For step 1" in last.text:
            return invite(message, history)
        if last.speaker == MEDIATOR and "beginning step 2" in last.text:
            return accept(last.text, history)
        return chat(message, history)

    return scripted_agent(index, Playbook(default=dispatch))


def fixed_agent(index: int, rules: list[tuple[str, str]], default: str | None = None, **kw):
    return scripted_agent(index, Playbook(rules=list(rules), default=default), **kw)


def party_violations(log: PartyLog, agents=None) -> list[str]:
    """Every protocol invariant breach found in ``log`` (empty when clean)."""
    bad: list[str] = []
    cap = log.config.max_turns_per_conversation
    for rec in log.rounds:
        r = rec.round_id
        senders = [i.sender for i in rec.invitations]
        if len(senders) != len(set(senders)):
            bad.append(f"r{r}: an agent sent two invitations")
        sent = {(i.sender, i.recipient) for i in rec.invitations}
        inviters: dict[AgentId, set[AgentId]] = {}
        for i in rec.invitations:
            if i.sender == i.recipient:
                bad.append(f"r{r}: self invitation by {i.sender}")
            inviters.setdefault(i.recipient, set()).add(i.sender)
        accepted = {a.acceptor: a.accepted for a in rec.acceptances}
        for acceptor, who in accepted.items():
            if not who <= inviters.get(acceptor, set()):
                bad.append(f"r{r}: {acceptor} accepted a non-inviter")
        for t in rec.conversations:
            a, b = t.opener, t.partner
            if a == b:
                bad.append(f"r{r}: self chat {a}")
            if (a, b) not in sent or a not in accepted.get(b, ()):
                bad.append(f"r{r}: conversation {a}>{b} lacks consent")
            for k, turn in enumerate(t.turns):
                want = (a if k % 2 == 0 else b).name
                if turn.speaker != want:
                    bad.append(f"r{r}: turn {k} of {a}>{b} spoken by {turn.speaker}, expected {want}")
            if t.terminated_by == "leave" and not re.search(r"\bLEAVE\b", t.turns[-1].text):
                bad.append(f"r{r}: {a}>{b} marked leave without LEAVE")
            if t.terminated_by == "turn-cap" and len(t.turns) != cap:
                bad.append(f"r{r}: {a}>{b} capped at {len(t.turns)} turns")
            if len(t.turns) > cap:
                bad.append(f"r{r}: {a}>{b} exceeded the cap")
            for turn in t.turns[:-1]:
                if re.search(r"\bLEAVE\b", turn.text):
                    bad.append(f"r{r}: {a}>{b} continued after LEAVE")
    if agents is not None:
        chats = {
            (f"r{t.round_id}:{t.opener}>{t.partner}"): {t.opener.name, t.partner.name}
            for rec in log.rounds
            for t in rec.conversations
        }
        for agent in agents:
            for turn in agent.memory:
                if turn.speaker in (MEDIATOR, agent.name):
                    continue
                members = chats.get(turn.conversation)
                if members is None or members != {agent.name, turn.speaker}:
                    bad.append(f"{agent.name} holds a turn by {turn.speaker} from {turn.conversation!r}")
    return bad


def metric_mismatches(log: PartyLog, embedder, window: int = 10, threshold: int = 5) -> list[str]:
    """Compare library metrics on ``log`` with the brute-force recount in ``oracles``."""
    import math

    import numpy as np

    import oracles
    from aicollective import metrics

    d = json.loads(log.to_json())
    bad: list[str] = []

    # ratios
    lib = {(a, r, m): v for a, r, m, v in metrics.ratio_series(log, window)}
    expected = {}
    for agent in log.agents:
        for rec in d["rounds"]:
            r = rec["round_id"]
            for m, fn in ((metrics.CONVERSATION_RATIO, oracles.conv_ratio), (metrics.INVITATION_RATIO, oracles.invite_ratio)):
                v = fn(d, agent.name, r, window)
                if v is not None:
                    expected[(agent.name, r, m)] = v
    if lib.keys() != expected.keys():
        bad.append(f"ratio keys differ: {sorted(lib.keys() ^ expected.keys())[:5]}")
    for k in lib.keys() & expected.keys():
        if abs(lib[k] - float(expected[k])) > 1e-9:
            bad.append(f"ratio {k}: {lib[k]} != {expected[k]}")

    # pair classes
    counts = oracles.pair_counts(d)
    got = {frozenset((pc.pair[0].name, pc.pair[1].name)): (pc.conversation_count, pc.tight) for pc in metrics.classify_pairs(log, threshold)}
    want = {k: (n, n > threshold) for k, n in counts.items()}
    if got != want:
        bad.append("pair classification differs")

    # networks over every half and a few arbitrary ranges
    n_rounds = len(d["rounds"])
    ranges = [(net.first, net.last) for net in metrics.network_halves(log)]
    ranges += [(1, n_rounds), (max(1, n_rounds // 3), n_rounds)] if n_rounds else []
    for first, last in ranges:
        net = metrics.build_network(log, first, last)
        act, pop, edges = oracles.network(d, first, last)
        for a in log.agents:
            if net.activity[a] != act.get(a.name, 0) or net.popularity[a] != pop.get(a.name, 0):
                bad.append(f"network {first}-{last}: node {a} differs")
        if {frozenset((a.name, b.name)): w for (a, b), w in net.edges.items()} != edges:
            bad.append(f"network {first}-{last}: edges differ")

    # semantic distance series
    series = metrics.pair_semantic_distance_series(log, embedder, window, threshold)
    lib_points = {(frozenset((p[0].name, p[1].name)), r): (label, dist) for p, r, label, dist in series.pair_points}
    want_points = {}
    want_means: dict[str, list[tuple[int, float]]] = {"tight": [], "loose": []}
    for rec in d["rounds"]:
        r = rec["round_id"]
        texts = oracles.pair_texts(d, r, window)
        if not texts:
            continue
        keys = list(texts)
        vecs = [list(map(float, v)) for v in embedder.embed([texts[k] for k in keys])]
        dim = len(vecs[0])
        centroid = [sum(v[j] for v in vecs) / len(vecs) for j in range(dim)]
        by_class: dict[str, list[float]] = {"tight": [], "loose": []}
        for k, v in zip(keys, vecs):
            label = "tight" if counts[k] > threshold else "loose"
            dist = oracles.cosine_distance(v, centroid) if any(centroid) else math.nan
            want_points[(k, r)] = (label, dist)
            by_class[label].append(dist)
        for label, ds in by_class.items():
            if ds:
                want_means[label].append((r, sum(ds) / len(ds)))
    if lib_points.keys() != want_points.keys():
        bad.append("semantic points cover different (pair, round) keys")
    for k in lib_points.keys() & want_points.keys():
        (l1, d1), (l2, d2) = lib_points[k], want_points[k]
        if l1 != l2 or not (abs(d1 - d2) <= 1e-9 or (math.isnan(d1) and math.isnan(d2))):
            bad.append(f"semantic point {k}: {lib_points[k]} != {want_points[k]}")
    for label in ("tight", "loose"):
        a, b = series.class_means[label], want_means[label]
        if [r for r, _ in a] != [r for r, _ in b] or not np.allclose([v for _, v in a], [v for _, v in b], rtol=0, atol=1e-9, equal_nan=True):
            bad.append(f"{label} class means differ")
    return bad


def make_log(n_agents, rounds, *, invite_for_chats=True):
    """rounds: list of (invitations, chats) with invitations [(a, b)] and chats [(opener, partner, text)]."""
    log = PartyLog(PartyConfig(n_agents=n_agents, n_rounds=len(rounds)))
    for r, (invites, chats) in enumerate(rounds, start=1):
        rec = RoundRecord(r)
        pairs = list(invites)
        if invite_for_chats:
            pairs += [(a, b) for a, b, _ in chats if (a, b) not in pairs]
        rec.invitations = [Invitation(r, AgentId(a), AgentId(b)) for a, b in pairs]
        acc: dict[int, set[int]] = {}
        for a, b, _ in chats:
            acc.setdefault(b, set()).add(a)
        rec.acceptances = [AcceptanceDecision(r, AgentId(b), frozenset(AgentId(a) for a in s)) for b, s in sorted(acc.items())]
        for a, b, text in chats:
            t = Transcript(AgentId(a), AgentId(b), r, terminated_by="leave")
            t.turns.append(ChatTurn(f"L{a}", text, r, 0, f"r{r}:L{a}>L{b}"))
            rec.conversations.append(t)
        log.rounds.append(rec)
    return log
