"""The cocktail-party protocol: invite, accept, converse, repeated for R rounds.

Every round is barrier-synchronised.  All agents answer step 1 before any
step-2 prompt goes out, and all acceptances are in before the first
conversation starts.  Conversations run sequentially in ascending
(min id, max id, inviter) order, so replays are exact.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from .agents import Agent, AgentError, AgentId, ChatTurn, ConfigurationError, Transcript
from .prompts import name_list, render

logger = logging.getLogger(__name__)

LEAVE_RE = re.compile(r"\bLEAVE\b")
_INVITE_RE = re.compile(r"\bTo\s+\[?L(\d+)\]?")
_ACCEPT_RE = re.compile(r"\bAccept\s+\[?L(\d+)\]?")

RECIPROCAL_MODES = ("separate", "merge")


@dataclass(frozen=True)
class PartyConfig:
    n_agents: int = 10
    n_rounds: int = 30
    max_turns_per_conversation: int = 20
    seed: int = 0
    reciprocal: str = "separate"

    def __post_init__(self):
        if self.n_agents < 2:
            raise ValueError("a party needs at least 2 agents")
        if self.n_rounds < 0:
            raise ValueError("n_rounds must be non-negative")
        if self.max_turns_per_conversation < 2:
            raise ValueError("max_turns_per_conversation must be >= 2")
        if self.reciprocal not in RECIPROCAL_MODES:
            raise ValueError(f"reciprocal must be one of {RECIPROCAL_MODES}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_agents": self.n_agents,
            "n_rounds": self.n_rounds,
            "max_turns_per_conversation": self.max_turns_per_conversation,
            "seed": self.seed,
            "reciprocal": self.reciprocal,
        }


@dataclass(frozen=True)
class Invitation:
    round_id: int
    sender: AgentId
    recipient: AgentId

    def __post_init__(self):
        if self.sender == self.recipient:
            raise ValueError("an agent cannot invite itself")


@dataclass(frozen=True)
class AcceptanceDecision:
    round_id: int
    acceptor: AgentId
    accepted: frozenset[AgentId]


@dataclass
class RoundRecord:
    round_id: int
    invitations: list[Invitation] = field(default_factory=list)
    acceptances: list[AcceptanceDecision] = field(default_factory=list)
    conversations: list[Transcript] = field(default_factory=list)
    deviations: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "round_id": self.round_id,
            "invitations": [[i.sender.name, i.recipient.name] for i in self.invitations],
            "acceptances": {
                a.acceptor.name: sorted((x.name for x in a.accepted), key=lambda s: int(s[1:]))
                for a in self.acceptances
            },
            "conversations": [t.to_dict() for t in self.conversations],
            "deviations": list(self.deviations),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RoundRecord":
        r = int(d["round_id"])
        return cls(
            r,
            [Invitation(r, AgentId.parse(a), AgentId.parse(b)) for a, b in d["invitations"]],
            [
                AcceptanceDecision(r, AgentId.parse(k), frozenset(AgentId.parse(x) for x in v))
                for k, v in sorted(d["acceptances"].items(), key=lambda kv: int(kv[0][1:]))
            ],
            [Transcript.from_dict(t) for t in d["conversations"]],
            list(d.get("deviations", [])),
        )


@dataclass
class PartyLog:
    config: PartyConfig
    rounds: list[RoundRecord] = field(default_factory=list)

    @property
    def agents(self) -> list[AgentId]:
        return [AgentId(i) for i in range(1, self.config.n_agents + 1)]

    def transcripts(self, first: int = 1, last: int | None = None) -> Iterable[Transcript]:
        last = len(self.rounds) if last is None else last
        for rec in self.rounds:
            if first <= rec.round_id <= last:
                yield from rec.conversations

    def to_dict(self) -> dict[str, Any]:
        return {"config": self.config.to_dict(), "rounds": [r.to_dict() for r in self.rounds]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PartyLog":
        return cls(PartyConfig(**d["config"]), [RoundRecord.from_dict(r) for r in d["rounds"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PartyLog":
        return cls.from_dict(json.loads(text))


class RoundFailed(AgentError):
    """A round could not complete; rounds before ``round_id`` are intact."""

    def __init__(self, round_id: int, cause: BaseException):
        super().__init__(f"round {round_id} failed: {cause}")
        self.round_id = round_id
        self.cause = cause


def parse_invitation(
    text: str, roster: Iterable[AgentId], self_id: AgentId, deviations: list[str] | None = None
) -> AgentId | None:
    """First roster member other than ``self_id`` named in a "To L<k>" clause."""
    members = set(roster)
    if not members:
        raise ValueError("roster must be non-empty")
    found: list[AgentId] = []
    for m in _INVITE_RE.finditer(text):
        cand = AgentId(int(m.group(1))) if int(m.group(1)) > 0 else None
        if cand is None or cand not in members or cand == self_id:
            _note(deviations, f"{self_id}: ignored invitation target L{m.group(1)}")
            continue
        if cand not in found:
            found.append(cand)
    if not found:
        _note(deviations, f"{self_id}: no invitation parsed")
        return None
    if len(found) > 1:
        _note(deviations, f"{self_id}: named {len(found)} invitees, kept {found[0]}")
    return found[0]


def parse_acceptances(
    text: str, pending_inviters: Iterable[AgentId], deviations: list[str] | None = None, who: str = "agent"
) -> set[AgentId]:
    """Members of ``pending_inviters`` named in "Accept L<k>" clauses."""
    pending = set(pending_inviters)
    out: set[AgentId] = set()
    for m in _ACCEPT_RE.finditer(text):
        k = int(m.group(1))
        cand = AgentId(k) if k > 0 else None
        if cand in pending:
            out.add(cand)
        else:
            _note(deviations, f"{who}: accepted L{k} who did not invite")
    return out


def _note(deviations: list[str] | None, msg: str):
    logger.info("protocol deviation: %s", msg)
    if deviations is not None:
        deviations.append(msg)


def says_leave(text: str) -> bool:
    return LEAVE_RE.search(text) is not None


def run_conversation(
    opener: Agent,
    responder: Agent,
    round_id: int,
    cap: int,
    *,
    opener_header: str,
    responder_header: str,
    label: str | None = None,
) -> Transcript:
    """Alternate turns until one side says LEAVE or ``cap`` turns are spoken.

    Backend failures end the conversation with ``terminated_by='error'``
    and keep the turns spoken so far.  The closing utterance is delivered
    to the other agent's memory without asking for a reply.
    """
    if cap < 1:
        raise ValueError("turn cap must be positive")
    label = label or f"r{round_id}:{opener.name}>{responder.name}"
    transcript = Transcript(opener.id, responder.id, round_id)
    with opener.engaged(label), responder.engaged(label):
        speaker, listener = opener, responder
        try:
            text = opener.send_prompt(opener_header, round_id=round_id, conversation=label)
        except ConfigurationError:
            raise
        except AgentError as exc:
            transcript.terminated_by, transcript.error = "error", str(exc)
            return transcript
        responder.observe(responder_header, round_id=round_id, conversation=label)
        while True:
            transcript.turns.append(ChatTurn(speaker.name, text, round_id, len(transcript.turns), label))
            if says_leave(text) or len(transcript.turns) >= cap:
                transcript.terminated_by = "leave" if says_leave(text) else "turn-cap"
                listener.observe(text, speaker=speaker.name, round_id=round_id, conversation=label)
                return transcript
            try:
                reply = listener.send_prompt(text, speaker=speaker.name, round_id=round_id, conversation=label)
            except ConfigurationError:
                raise
            except AgentError as exc:
                transcript.terminated_by, transcript.error = "error", str(exc)
                return transcript
            speaker, listener, text = listener, speaker, reply


def _invite_phrase(inviters: Sequence[AgentId]) -> tuple[str, str]:
    if len(inviters) == 1:
        return f"one invite from {inviters[0]}", "invite"
    return f"{len(inviters)} invites from {name_list(inviters)}", "invites"


def _step3_reason(invitee: AgentId | None, invite_accepted: bool, accepted_from: Sequence[AgentId]) -> str:
    if invitee is None:
        return f"You didn't invite anyone. However, since you accepted the invitations from {name_list(accepted_from)},"
    if invite_accepted and accepted_from:
        return f"Since {invitee} accepted your invitation, and you accepted the invitations from {name_list(accepted_from)},"
    if invite_accepted:
        return f"Since {invitee} accepted your invitation,"
    return (
        f"{invitee} didn't accept your invitation. However, since you accepted the invitations "
        f"from {name_list(accepted_from)},"
    )


def schedule(matches: Iterable[tuple[AgentId, AgentId]], reciprocal: str = "separate") -> list[tuple[AgentId, AgentId]]:
    """Order matched (inviter, acceptor) pairs for step 3.

    With ``reciprocal='merge'`` a pair that matched in both directions chats
    once, opened by the lower-indexed agent.
    """
    matches = list(dict.fromkeys(matches))
    if reciprocal == "merge":
        seen: set[tuple[AgentId, AgentId]] = set()
        merged = []
        for a, b in sorted(matches, key=lambda m: (min(m), max(m), m[0])):
            key = (min(a, b), max(a, b))
            if key not in seen:
                seen.add(key)
                merged.append((a, b))
        matches = merged
    return sorted(matches, key=lambda m: (min(m), max(m), m[0]))


def _party_step1(n_agents: int, n_rounds: int, round_id: int) -> Callable[[Agent], str]:
    header = render("party_round_header", round=round_id, n_rounds=n_rounds)

    def prompt(agent: Agent) -> str:
        if round_id == 1:
            return render("party_instruction", n_agents=n_agents, name=agent.name, n_rounds=n_rounds, round_header=header)
        return header

    return prompt


def run_round(
    agents: Sequence[Agent],
    round_id: int,
    cap: int,
    *,
    n_rounds: int | None = None,
    reciprocal: str = "separate",
    step1_prompt: Callable[[Agent], str] | None = None,
    round_label: str | None = None,
    announce_end: bool = True,
) -> RoundRecord:
    """One invite/accept/converse round over ``agents``.

    The defaults render the cocktail-party prompts; the sentence game passes
    its own step-1 prompt and an empty round label.
    """
    by_id: dict[AgentId, Agent] = {a.id: a for a in agents}
    if len(by_id) != len(agents):
        raise ValueError("duplicate agent ids")
    ids = sorted(by_id)
    step1 = step1_prompt or _party_step1(len(ids), n_rounds or round_id, round_id)
    label = f" of round {round_id}" if round_label is None else round_label
    rec = RoundRecord(round_id)

    # step 1: at most one invitation per agent
    invitee_of: dict[AgentId, AgentId] = {}
    for aid in ids:
        agent = by_id[aid]
        pin = agent.instruction is None and not agent.memory
        reply = agent.send_prompt(step1(agent), round_id=round_id, conversation=f"r{round_id}:step1", pin=pin)
        target = parse_invitation(reply, ids, aid, rec.deviations)
        if target is not None:
            invitee_of[aid] = target
            rec.invitations.append(Invitation(round_id, aid, target))

    # step 2: accept any subset of the inviters
    inviters_of: dict[AgentId, list[AgentId]] = {aid: [] for aid in ids}
    for inv in rec.invitations:
        inviters_of[inv.recipient].append(inv.sender)
    accepted_by: dict[AgentId, set[AgentId]] = {}
    for aid in ids:
        agent = by_id[aid]
        inviters = sorted(inviters_of[aid])
        conv = f"r{round_id}:step2"
        if not inviters:
            agent.observe(render("step2_none", round_label=label), round_id=round_id, conversation=conv)
            continue
        phrase, noun = _invite_phrase(inviters)
        reply = agent.send_prompt(
            render("step2", round_label=label, invite_phrase=phrase, invite_noun=noun),
            round_id=round_id,
            conversation=conv,
        )
        accepted_by[aid] = parse_acceptances(reply, inviters, rec.deviations, aid.name)
        rec.acceptances.append(AcceptanceDecision(round_id, aid, frozenset(accepted_by[aid])))

    matches = [(inv.sender, inv.recipient) for inv in rec.invitations if inv.sender in accepted_by.get(inv.recipient, ())]
    plan = schedule(matches, reciprocal)

    # step 3: one conversation per match, each agent's chats in schedule order
    chats_of: dict[AgentId, list[AgentId]] = {aid: [] for aid in ids}
    for a, b in plan:
        chats_of[a].append(b)
        chats_of[b].append(a)
    headers: dict[tuple[AgentId, int], str] = {}
    for aid in ids:
        partners = chats_of[aid]
        invitee = invitee_of.get(aid)
        invite_accepted = invitee is not None and aid in accepted_by.get(invitee, ())
        accepted_from = sorted(accepted_by.get(aid, ()))
        if not partners:
            reason = f"{invitee} didn't accept your invitation. " if invitee is not None else ""
            by_id[aid].observe(
                render("step3_none", round_label=label, reason=reason), round_id=round_id, conversation=f"r{round_id}:step3"
            )
            continue
        unique = list(dict.fromkeys(partners))
        headers[(aid, 0)] = render(
            "step3",
            round_label=label,
            reason=_step3_reason(invitee, invite_accepted, accepted_from),
            partners=name_list(unique),
            first=partners[0],
            first_suffix=" first" if len(partners) > 1 else "",
        )
        for k in range(1, len(partners)):
            headers[(aid, k)] = render("next_chat", previous=partners[k - 1], partner=partners[k])

    position = {aid: 0 for aid in ids}
    for a, b in plan:
        t = run_conversation(
            by_id[a],
            by_id[b],
            round_id,
            cap,
            opener_header=headers[(a, position[a])],
            responder_header=headers[(b, position[b])],
            label=f"r{round_id}:{a}>{b}",
        )
        position[a] += 1
        position[b] += 1
        rec.conversations.append(t)
        if t.terminated_by == "error":
            _note(rec.deviations, f"conversation {a}>{b} ended with error: {t.error}")

    if announce_end:
        for aid in ids:
            if chats_of[aid]:
                by_id[aid].observe(
                    render("round_end", previous=chats_of[aid][-1]), round_id=round_id, conversation=f"r{round_id}:end"
                )
    return rec


def run_party(
    config: PartyConfig,
    agents: Sequence[Agent],
    *,
    log: PartyLog | None = None,
    on_round: Callable[[PartyLog, Sequence[Agent]], None] | None = None,
) -> PartyLog:
    """Run rounds until ``config.n_rounds`` are recorded.

    Pass a partial ``log`` (with agent memories restored to match) to resume.
    ``on_round`` is called after every completed round and is where callers
    write checkpoints.
    """
    if len(agents) != config.n_agents:
        raise ValueError(f"expected {config.n_agents} agents, got {len(agents)}")
    log = log or PartyLog(config)
    if log.config != config:
        raise ValueError("resume log was produced under a different config")
    for round_id in range(len(log.rounds) + 1, config.n_rounds + 1):
        try:
            rec = run_round(
                agents,
                round_id,
                config.max_turns_per_conversation,
                n_rounds=config.n_rounds,
                reciprocal=config.reciprocal,
            )
        except ConfigurationError:
            raise
        except AgentError as exc:
            raise RoundFailed(round_id, exc) from exc
        log.rounds.append(rec)
        if on_round is not None:
            on_round(log, agents)
    return log


def agent_memories(agents: Sequence[Agent]) -> dict[str, Any]:
    return {a.name: a.snapshot() for a in agents}


def restore_memories(agents: Sequence[Agent], memories: Mapping[str, Any]):
    for a in agents:
        if a.name in memories:
            a.restore(memories[a.name])
