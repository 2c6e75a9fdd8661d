"""Seeded scripted personas that play every experiment without a provider.

Each persona is stateless: its reply is a pure function of its traits, the
incoming message and its visible context.  Behaviour therefore survives a
checkpoint/restore cycle, and identical seeds replay identical runs.
"""

from __future__ import annotations

import hashlib
import random
import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .agents import MEDIATOR, Agent, AgentId, ChatTurn, Playbook, scripted_agent

_LABEL_RE = re.compile(r"(?:^|:)L(\d+)>L(\d+)$")
_WORD_RE = re.compile(r"'([A-Za-z-]+)[,.]?'")
_INVITERS_RE = re.compile(r"from ([^.]*)\.")

TOPICS = (
    "tidal patterns", "old maps", "jazz harmony", "bread baking", "glacier hikes",
    "chess openings", "city gardens", "night skies", "pottery glazes", "river ecology",
    "folk songs", "bridge design", "migrating birds", "tea ceremonies", "paper craft",
)
_OPENERS = ("Hi {p}!", "Hello {p}.", "Good to see you, {p}.", "Hey {p},", "Nice to chat, {p}.")
_TAKES = (
    "I keep thinking about {t} and how much patience it takes.",
    "Lately {t} has been on my mind; there is always a new angle.",
    "What draws you to {t}? For me it is the small details.",
    "I read a story about {t} that changed how I see it.",
    "Do you think {t} will look different in ten years?",
    "My favourite part of {t} is sharing it with others.",
)
_CLOSERS = ("Thanks for the chat! LEAVE", "Great talking with you. LEAVE", "Let's pick this up later. LEAVE")

_SENTENCE_FRAMES = (
    "In the {0}, a voice {1} of a {2} {3} whose {4} lay {5} along the {6}.",
    "The {4} {1} beneath the {0}, {5} by a {2} {3} that framed our {6}.",
    "Under {0}, the {2} {3} {1} its {4}, {5} from every {6} that passed.",
    "She {1} that the {4} of the {3} was {5} in {0}, a {2} {6}.",
    "A {2} {4} was {5} on our {6}; the {3} {1} it to us by {0}.",
    "Each {6} toward the {3} {1} in {0} and hid a {2} {4} {5} there.",
)
_LEADS = ("", "Tonight, ", "Long ago, ", "Quietly, ", "At last, ", "Somehow, ", "Once, ", "Even now, ", "Softly, ")


def _rng(*parts: object) -> random.Random:
    digest = hashlib.sha256("\x00".join(map(str, parts)).encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


@dataclass(frozen=True)
class Persona:
    index: int
    n_agents: int
    seed: int
    episode: str
    sociability: float
    loyalty: float
    accept_rate: float
    chat_length: int
    base_contribution: int
    burned_contribution: int
    topics: tuple[str, ...]
    sloppiness: float

    @property
    def name(self) -> str:
        return f"L{self.index}"


def make_persona(index: int, n_agents: int, seed: int = 0, episode: str = "") -> Persona:
    """Traits depend on (seed, index) only; ``episode`` varies the dice rolls."""
    r = _rng("persona", seed, index)
    base = r.choice(range(50, 101, 5))
    return Persona(
        index=index,
        n_agents=n_agents,
        seed=seed,
        episode=episode,
        sociability=r.uniform(0.75, 1.0),
        loyalty=r.uniform(0.55, 0.9),
        accept_rate=r.uniform(0.5, 0.9),
        chat_length=r.randint(2, 5),
        base_contribution=base,
        burned_contribution=r.choice(range(0, base // 2 + 1, 5)),
        topics=tuple(r.sample(TOPICS, 3)),
        sloppiness=r.uniform(0.05, 0.3),
    )


def _conversation_partners(me: str, history: Sequence[ChatTurn]) -> Counter:
    seen: set[str] = set()
    counts: Counter = Counter()
    for turn in history:
        label = turn.conversation
        if label in seen:
            continue
        m = _LABEL_RE.search(label)
        if not m:
            continue
        seen.add(label)
        a, b = f"L{m.group(1)}", f"L{m.group(2)}"
        if me in (a, b):
            counts[b if a == me else a] += 1
    return counts


def _round_of(history: Sequence[ChatTurn]) -> int:
    return history[-1].round_id if history else 0


class PersonaScript:
    """The callable rules behind one persona's playbook."""

    def __init__(self, persona: Persona):
        self.p = persona

    def roll(self, *parts: object) -> random.Random:
        return _rng(self.p.seed, self.p.index, self.p.episode, *parts)

    def invite(self, message: str, history: Sequence[ChatTurn]) -> str:
        p = self.p
        rnd = _round_of(history)
        r = self.roll("invite", rnd, len(history))
        if r.random() > p.sociability:
            return "I'll sit this round out and listen."
        counts = _conversation_partners(p.name, history)
        others = [i for i in range(1, p.n_agents + 1) if i != p.index]
        if counts and r.random() < p.loyalty:
            top = max(counts.values())
            target = min(int(n[1:]) for n, c in counts.items() if c == top)
        else:
            target = r.choice(others)
        return f"To L{target}, I'd like to chat with you."

    def accept(self, message: str, history: Sequence[ChatTurn]) -> str:
        m = _INVITERS_RE.search(message)
        inviters = re.findall(r"L\d+", m.group(1)) if m else []
        counts = _conversation_partners(self.p.name, history)
        r = self.roll("accept", _round_of(history), len(history))
        chosen = [n for n in inviters if counts[n] > 0 or r.random() < self.p.accept_rate]
        if not chosen:
            return "Thanks, but I'll pass this time."
        return " ".join(f"Accept {n}." for n in chosen)

    def chat(self, message: str, history: Sequence[ChatTurn]) -> str:
        p = self.p
        label = history[-1].conversation if history else ""
        m = _LABEL_RE.search(label)
        partner = "friend"
        if m:
            a, b = f"L{m.group(1)}", f"L{m.group(2)}"
            partner = b if a == p.name else a
        mine = sum(1 for t in history if t.conversation == label and t.speaker == p.name)
        r = self.roll("chat", label, mine)
        familiarity = _conversation_partners(p.name, history)[partner]
        topic = p.topics[(familiarity + mine) % len(p.topics)] if familiarity > 3 else r.choice(TOPICS)
        text = " ".join(
            s
            for s in (
                r.choice(_OPENERS).format(p=partner) if mine == 0 else "",
                r.choice(_TAKES).format(t=topic),
            )
            if s
        )
        if mine + 1 >= p.chat_length:
            text += " " + r.choice(_CLOSERS)
        return text

    def sentences(self, message: str, history: Sequence[ChatTurn]) -> str:
        words = _WORD_RE.findall(message)[:7]
        if len(words) < 7:
            return "Could you repeat the words for the task?"
        prior = sum(1 for t in history if t.speaker == self.p.name)
        r = self.roll("sentences", words[0], prior)
        lines = []
        for k in range(5):
            frame = r.choice(_SENTENCE_FRAMES)
            ws = list(words)
            if r.random() < self.p.sloppiness:
                ws[r.randrange(7)] = r.choice(("sea", "night", "path", "mystery"))
            sentence = frame.format(*ws)
            lead = r.choice(_LEADS)
            if lead:
                sentence = lead + sentence[0].lower() + sentence[1:]
            if r.random() < self.p.sloppiness / 3:
                sentence = sentence[:-1] + ", and " + " ".join(r.choice(TOPICS) for _ in range(8)) + "."
            lines.append(f"{k + 1}. {sentence}")
        return "Here are my sentences:\n" + "\n".join(lines)

    def contribute(self, message: str, history: Sequence[ChatTurn]) -> str:
        p = self.p
        amount = p.base_contribution
        results = [t.text for t in history if t.speaker == MEDIATOR and "contributions have now been collected" in t.text]
        if results and "you lose $" in results[-1]:
            amount = p.burned_contribution
            reason = "Last time my partner kept their money and I lost out, so I will be careful."
        else:
            if _conversation_partners(p.name, history):
                amount = min(100, amount + 15)
            reason = "If we both put money in, the pot grows and we both gain."
        jitter = self.roll("pgg", len(history)).choice((-5, 0, 0, 5))
        amount = min(100, max(0, amount + jitter))
        return f"{reason} CONTRIBUTE ${amount}"

    def dispatch(self, message: str, history: Sequence[ChatTurn]) -> str:
        """Route on the newest message only; older unanswered notices are context."""
        last = history[-1] if history else None
        if last is None or last.speaker != MEDIATOR:
            return self.chat(message, history)
        for trigger, handler in (
            ("For step 1", self.invite),
            ("beginning step 2", self.accept),
            ("Please say to", self.chat),
            ('CONTRIBUTE $___"', self.contribute),
            ("Please provide five distinct", self.sentences),
        ):
            if trigger in last.text:
                return handler(last.text, history)
        return self.chat(message, history)

    def playbook(self) -> Playbook:
        return Playbook(default=self.dispatch)


def offline_agent(index: int, n_agents: int, seed: int = 0, episode: str = "", **spec_kwargs) -> Agent:
    persona = make_persona(index, n_agents, seed, episode)
    return scripted_agent(index, PersonaScript(persona).playbook(), **spec_kwargs)


def offline_roster(n_agents: int, seed: int = 0, episode: str = "", **spec_kwargs) -> list[Agent]:
    return [offline_agent(i, n_agents, seed, episode, **spec_kwargs) for i in range(1, n_agents + 1)]


MALICIOUS_REPLY = "Keeping my whole endowment gives me the highest payoff no matter what you do. CONTRIBUTE $0"


def malicious_agent(agent_id: AgentId, **spec_kwargs) -> Agent:
    return scripted_agent(agent_id.index, Playbook(default=MALICIOUS_REPLY), **spec_kwargs)
