"""Agent runtime: identities, memory, context truncation and chat backends.

An :class:`Agent` owns its conversation memory and talks to a backend.  Two
backends exist: :class:`ScriptedBackend` (a deterministic playbook, used for
tests and offline runs) and :class:`RemoteChatBackend` (a generic
chat-completion endpoint over HTTPS).
"""

from __future__ import annotations

import logging
import math
import os
import re
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Protocol, Sequence, Union

import httpx

logger = logging.getLogger(__name__)

MEDIATOR = "Mediator"
_NAME_RE = re.compile(r"^L(\d+)$")


class AgentError(Exception):
    pass


class ConfigurationError(AgentError):
    pass


class ContextOverflowError(AgentError):
    def __init__(self, conversation: str, tokens: int, limit: int):
        super().__init__(f"conversation {conversation!r} needs {tokens} tokens, budget allows {limit}")
        self.conversation = conversation
        self.tokens = tokens
        self.limit = limit


class ProviderUnreachable(AgentError):
    """Remote backend failed on every attempt."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class AgentBusyError(AgentError):
    pass


@dataclass(frozen=True, order=True)
class AgentId:
    index: int

    def __post_init__(self):
        if not isinstance(self.index, int) or self.index < 1:
            raise ValueError(f"agent index must be a positive integer, got {self.index!r}")

    @property
    def name(self) -> str:
        return f"L{self.index}"

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str) -> "AgentId":
        m = _NAME_RE.match(text.strip())
        if not m:
            raise ValueError(f"not an agent name: {text!r}")
        return cls(int(m.group(1)))


def roster(n: int) -> list[AgentId]:
    return [AgentId(i) for i in range(1, n + 1)]


@dataclass(frozen=True)
class Sampling:
    temperature: float = 1.0
    top_p: float = 0.7

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")


@dataclass(frozen=True)
class TokenBudget:
    max_context_tokens: int = 20_000
    reserve_for_reply: int = 1_000

    def __post_init__(self):
        if self.max_context_tokens <= 0 or self.reserve_for_reply <= 0:
            raise ValueError("token budget values must be positive")
        if self.reserve_for_reply >= self.max_context_tokens:
            raise ValueError("reserve_for_reply must be smaller than max_context_tokens")

    @property
    def limit(self) -> int:
        return self.max_context_tokens - self.reserve_for_reply


@dataclass(frozen=True)
class AgentSpec:
    id: AgentId
    backend: str = "scripted"
    sampling: Sampling = field(default_factory=Sampling)
    token_budget: TokenBudget = field(default_factory=TokenBudget)
    model: str | None = None

    def __post_init__(self):
        if self.backend not in ("scripted", "remote-model"):
            raise ValueError(f"unknown backend kind {self.backend!r}")


@dataclass(frozen=True)
class ChatTurn:
    speaker: str
    text: str
    round_id: int
    ordinal: int
    conversation: str = ""

    def __post_init__(self):
        if not self.text:
            raise ValueError("chat turn text must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "speaker": self.speaker,
            "text": self.text,
            "round_id": self.round_id,
            "ordinal": self.ordinal,
            "conversation": self.conversation,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ChatTurn":
        return cls(d["speaker"], d["text"], int(d["round_id"]), int(d["ordinal"]), d.get("conversation", ""))


TERMINATIONS = ("leave", "turn-cap", "error")


@dataclass
class Transcript:
    """One pairwise conversation; ``opener`` spoke first."""

    opener: AgentId
    partner: AgentId
    round_id: int
    turns: list[ChatTurn] = field(default_factory=list)
    terminated_by: str = "leave"
    error: str | None = None

    @property
    def pair(self) -> tuple[AgentId, AgentId]:
        return (min(self.opener, self.partner), max(self.opener, self.partner))

    def involves(self, agent: AgentId) -> bool:
        return agent in (self.opener, self.partner)

    def other(self, agent: AgentId) -> AgentId:
        if agent == self.opener:
            return self.partner
        if agent == self.partner:
            return self.opener
        raise ValueError(f"{agent} not in conversation")

    def text(self) -> str:
        return "\n".join(t.text for t in self.turns)

    def to_dict(self) -> dict[str, Any]:
        return {
            "opener": self.opener.name,
            "partner": self.partner.name,
            "round_id": self.round_id,
            "terminated_by": self.terminated_by,
            "error": self.error,
            "turns": [t.to_dict() for t in self.turns],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Transcript":
        return cls(
            AgentId.parse(d["opener"]),
            AgentId.parse(d["partner"]),
            int(d["round_id"]),
            [ChatTurn.from_dict(t) for t in d["turns"]],
            d["terminated_by"],
            d.get("error"),
        )


def estimate_tokens(text: str) -> int:
    """Heuristic token count: ceil(characters / 4)."""
    return math.ceil(len(text) / 4)


def _group_by_conversation(history: Sequence[ChatTurn]) -> list[list[ChatTurn]]:
    groups: list[list[ChatTurn]] = []
    for turn in history:
        if groups and groups[-1][0].conversation == turn.conversation:
            groups[-1].append(turn)
        else:
            groups.append([turn])
    return groups


def truncate_context(
    history: Sequence[ChatTurn],
    budget: TokenBudget,
    instruction: ChatTurn | None = None,
    estimate: Callable[[str], int] = estimate_tokens,
) -> list[ChatTurn]:
    """Drop whole conversations, oldest first, until the context fits the budget.

    The instruction turn, when given, is always kept at the head.  A
    conversation is a maximal run of consecutive turns sharing the same
    ``conversation`` label.
    """
    limit = budget.limit
    pinned = [instruction] if instruction is not None else []
    used = sum(estimate(t.text) for t in pinned)
    groups = _group_by_conversation(history)
    sizes = [sum(estimate(t.text) for t in g) for g in groups]
    total = used + sum(sizes)
    start = 0
    while total > limit and start < len(groups) - 1:
        total -= sizes[start]
        start += 1
    if total > limit:
        name = groups[-1][0].conversation if groups else "instruction"
        raise ContextOverflowError(name, total, limit)
    kept = [t for g in groups[start:] for t in g]
    return pinned + kept


Response = Union[str, Callable[[str, Sequence[ChatTurn]], str]]


@dataclass
class Playbook:
    """Ordered (trigger, response) rules; the first case-sensitive substring match wins.

    A response is either literal text or a callable receiving the incoming
    message and the agent's visible context.
    """

    rules: list[tuple[str, Response]] = field(default_factory=list)
    default: Response | None = None

    def respond(self, message: str, history: Sequence[ChatTurn] = ()) -> str:
        for trigger, response in self.rules:
            if trigger in message:
                return _resolve(response, message, history)
        if self.default is None:
            raise ConfigurationError(f"no playbook rule matches and no default: {message[:80]!r}")
        return _resolve(self.default, message, history)


def _resolve(response: Response, message: str, history: Sequence[ChatTurn]) -> str:
    return response if isinstance(response, str) else response(message, history)


class Backend(Protocol):
    kind: str
    requests: int

    def complete(self, agent_name: str, context: Sequence[ChatTurn], sampling: Sampling) -> str: ...


def incoming_text(agent_name: str, context: Sequence[ChatTurn]) -> str:
    """Text the agent has received since it last spoke."""
    tail: list[str] = []
    for turn in reversed(context):
        if turn.speaker == agent_name:
            break
        tail.append(turn.text)
    return "\n".join(reversed(tail))


class ScriptedBackend:
    kind = "scripted"

    def __init__(self, playbook: Playbook):
        self.playbook = playbook
        self.requests = 0

    def complete(self, agent_name: str, context: Sequence[ChatTurn], sampling: Sampling) -> str:
        self.requests += 1
        return self.playbook.respond(incoming_text(agent_name, context), context)


def render_messages(agent_name: str, context: Sequence[ChatTurn]) -> list[dict[str, str]]:
    """Chat-completion message list from the agent's point of view.

    The agent's own turns become ``assistant`` messages; everything else is a
    ``user`` message prefixed with the speaker.  Consecutive user messages are
    merged because several providers require strict alternation.
    """
    messages: list[dict[str, str]] = []
    for turn in context:
        if turn.speaker == agent_name:
            role, content = "assistant", turn.text
        else:
            role, content = "user", f"{turn.speaker}: {turn.text}"
        if messages and messages[-1]["role"] == role:
            messages[-1]["content"] += "\n\n" + content
        else:
            messages.append({"role": role, "content": content})
    return messages


class ApiClient:
    """JSON-over-HTTPS client with bounded retries.

    Transport errors, 429 and 5xx responses are retried with exponential
    backoff; after ``attempts`` failures :class:`ProviderUnreachable` is raised.
    The credential comes from ``api_key`` or the ``api_key_env`` variable and
    only ever travels in the Authorization header.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        *,
        api_key_env: str = "AICOLLECTIVE_API_KEY",
        attempts: int = 3,
        backoff: float = 1.0,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] | None = None,
    ):
        key = api_key if api_key is not None else os.environ.get(api_key_env)
        if not key:
            raise ConfigurationError(f"missing credential: set ${api_key_env}")
        if attempts < 1:
            raise ValueError("attempts must be >= 1")
        self.base_url = base_url.rstrip("/")
        self._api_key = key
        self.attempts = attempts
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep or time.sleep
        self.requests = 0

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        delay = self.backoff
        last = "no attempt made"
        for attempt in range(1, self.attempts + 1):
            self.requests += 1
            try:
                resp = self._client.post(
                    f"{self.base_url}{path}",
                    json=payload,
                    headers={"Authorization": f"Bearer {self._api_key}"},
                )
            except httpx.TransportError as exc:
                last = type(exc).__name__
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise AgentError(f"provider rejected request to {path}: HTTP {resp.status_code}")
                else:
                    return resp.json()
            logger.warning("request to %s failed (%s), attempt %d/%d", path, last, attempt, self.attempts)
            if attempt < self.attempts:
                self._sleep(delay)
                delay *= 2
        raise ProviderUnreachable(f"{path}: {last} after {self.attempts} attempts", self.attempts)


class RemoteChatBackend(ApiClient):
    """Generic chat-completion backend (``POST {base_url}/chat/completions``)."""

    kind = "remote-model"

    def __init__(self, model: str, base_url: str, api_key: str | None = None, **kwargs):
        super().__init__(base_url, api_key, **kwargs)
        self.model = model

    def __repr__(self) -> str:
        return f"RemoteChatBackend(model={self.model!r}, base_url={self.base_url!r})"

    def complete(self, agent_name: str, context: Sequence[ChatTurn], sampling: Sampling) -> str:
        data = self._post(
            "/chat/completions",
            {
                "model": self.model,
                "messages": render_messages(agent_name, context),
                "temperature": sampling.temperature,
                "top_p": sampling.top_p,
            },
        )
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise AgentError(f"malformed completion response: {exc}") from None
        if not text or not text.strip():
            raise AgentError("provider returned an empty completion")
        return text


class Agent:
    """One collective member: spec, backend and private memory."""

    def __init__(self, spec: AgentSpec, backend: Backend, estimate: Callable[[str], int] = estimate_tokens):
        self.spec = spec
        self.backend = backend
        self.estimate = estimate
        self.instruction: ChatTurn | None = None
        self.memory: list[ChatTurn] = []
        self._lock = threading.Lock()
        self._holder: str | None = None

    @property
    def id(self) -> AgentId:
        return self.spec.id

    @property
    def name(self) -> str:
        return self.spec.id.name

    def __repr__(self) -> str:
        return f"Agent({self.name}, {self.backend.kind})"

    def _turn(self, speaker: str, text: str, round_id: int, conversation: str) -> ChatTurn:
        ordinal = len(self.memory) + (1 if self.instruction is not None else 0)
        return ChatTurn(speaker, text, round_id, ordinal, conversation)

    def observe(self, text: str, *, speaker: str = MEDIATOR, round_id: int = 0, conversation: str = "", pin: bool = False):
        """Record a message without asking for a reply."""
        turn = self._turn(speaker, text, round_id, conversation)
        if pin:
            self.instruction = turn
        else:
            self.memory.append(turn)

    def context(self, pending: Sequence[ChatTurn] = ()) -> list[ChatTurn]:
        return truncate_context([*self.memory, *pending], self.spec.token_budget, self.instruction, self.estimate)

    def send_prompt(
        self, text: str, *, speaker: str = MEDIATOR, round_id: int = 0, conversation: str = "", pin: bool = False
    ) -> str:
        """Deliver ``text`` and return the reply; both are committed only on success."""
        if not text:
            raise ValueError("new message must be non-empty")
        incoming = self._turn(speaker, text, round_id, conversation)
        if pin:
            if self.instruction is not None or self.memory:
                raise AgentError("instruction can only be pinned on an empty memory")
            ctx = truncate_context([], self.spec.token_budget, incoming, self.estimate)
        else:
            ctx = self.context([incoming])
        reply = self.backend.complete(self.name, ctx, self.spec.sampling)
        if pin:
            self.instruction = incoming
        else:
            self.memory.append(incoming)
        self.memory.append(self._turn(self.name, reply, round_id, conversation))
        return reply

    @contextmanager
    def engaged(self, label: str) -> Iterator["Agent"]:
        """Hold the agent for one conversation; concurrent use raises."""
        if not self._lock.acquire(blocking=False):
            raise AgentBusyError(f"{self.name} is in {self._holder!r}, cannot join {label!r}")
        self._holder = label
        try:
            yield self
        finally:
            self._holder = None
            self._lock.release()

    def snapshot(self) -> dict[str, Any]:
        return {
            "instruction": self.instruction.to_dict() if self.instruction else None,
            "memory": [t.to_dict() for t in self.memory],
        }

    def restore(self, state: dict[str, Any]):
        ins = state.get("instruction")
        self.instruction = ChatTurn.from_dict(ins) if ins else None
        self.memory = [ChatTurn.from_dict(t) for t in state.get("memory", [])]

    def reset(self):
        self.instruction = None
        self.memory = []


def scripted_agent(index: int, playbook: Playbook, **spec_kwargs) -> Agent:
    return Agent(AgentSpec(AgentId(index), "scripted", **spec_kwargs), ScriptedBackend(playbook))
