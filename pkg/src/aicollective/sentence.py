"""Seven-word sentence game under Individual, Collective and Bridged conditions.

An answer is valid when it is coherent, not a duplicate of an earlier
accepted answer in the condition pool, contains all seven words, and has at
most 40 words.  Coherence is judged only when a judge is configured.
Otherwise it passes, and the mode is recorded with the scores.
"""

from __future__ import annotations

import logging
import math
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

from .agents import Agent, AgentError, AgentId, Transcript
from .embeddings import EmbeddingService, total_dispersion
from .metrics import pair_counts, pair_key
from .party import PartyLog, RoundRecord, run_conversation, run_round, schedule
from .prompts import load_json_asset, name_list, render

logger = logging.getLogger(__name__)

CONDITIONS = ("individual", "collective", "bridged")
REFERENCE_BRIDGED_PAIRS = [(1, 5), (2, 9), (3, 1), (4, 5), (6, 1), (7, 5), (8, 1), (9, 10)]

_ITEM_RE = re.compile(r"^\s*\(?(\d{1,2})\s*[.)]\s+(\S.*?)\s*$")


class SentenceError(AgentError):
    pass


@dataclass(frozen=True)
class SentenceTask:
    question_id: int
    required_words: tuple[str, ...]
    prompt: str
    max_words: int = 40
    n_sentences: int = 5

    def __post_init__(self):
        if len(self.required_words) != 7:
            raise ValueError(f"question {self.question_id}: expected 7 required words")


def load_tasks(data: dict | None = None) -> list[SentenceTask]:
    data = data if data is not None else load_json_asset("sentence_tasks.json")
    return [
        SentenceTask(
            int(t["question_id"]),
            tuple(t["words"]),
            t["prompt"],
            int(t.get("max_words", 40)),
            int(t.get("n_sentences", 5)),
        )
        for t in data["tasks"]
    ]


@dataclass(frozen=True)
class SentenceAnswer:
    agent: AgentId
    question_id: int
    text: str
    order: int

    def __post_init__(self):
        if not self.text:
            raise ValueError("answer text must be non-empty")


@dataclass(frozen=True)
class ValidityReport:
    answer: SentenceAnswer
    all_words: bool
    length_ok: bool
    unique: bool
    coherent: bool

    @property
    def valid(self) -> bool:
        return self.all_words and self.length_ok and self.unique and self.coherent


class Extraction(NamedTuple):
    sentences: list[str]
    shortfall: bool


def extract_sentences(utterance: str, n_expected: int = 5) -> Extraction:
    """Numbered-list items ("1) ..." or "1. ...") with the numbering stripped."""
    items = []
    for line in utterance.splitlines():
        m = _ITEM_RE.match(line)
        if m:
            items.append(m.group(2))
    return Extraction(items, len(items) < n_expected)


def normalize(text: str) -> str:
    stripped = "".join(" " if unicodedata.category(ch).startswith("P") else ch for ch in text.lower())
    return " ".join(stripped.split())


def word_count(text: str) -> int:
    return len(text.split())


def contains_word(text: str, word: str, mode: str = "prefix") -> bool:
    """Case-insensitive match at a word start; ``prefix`` mode accepts inflections."""
    tail = "" if mode == "prefix" else r"(?!\w)"
    return re.search(rf"(?<!\w){re.escape(word.lower())}{tail}", text.lower()) is not None


CoherenceJudge = Callable[[str, SentenceTask], bool]


def validate_answer(
    answer: SentenceAnswer,
    task: SentenceTask,
    prior: Iterable[SentenceAnswer | str] = (),
    judge: CoherenceJudge | None = None,
    word_mode: str = "prefix",
) -> ValidityReport:
    norm = normalize(answer.text)
    seen = {normalize(p.text if isinstance(p, SentenceAnswer) else p) for p in prior}
    return ValidityReport(
        answer,
        all_words=all(contains_word(answer.text, w, word_mode) for w in task.required_words),
        length_ok=word_count(answer.text) <= task.max_words,
        unique=norm not in seen,
        coherent=True if judge is None else bool(judge(answer.text, task)),
    )


def make_agent_judge(agent: Agent) -> CoherenceJudge:
    """Coherence judge backed by an agent answering a YES/NO rubric."""

    def judge(text: str, task: SentenceTask) -> bool:
        reply = agent.send_prompt(
            "Is the following sentence coherent, grammatical and logically sensible? "
            f"Answer YES or NO.\n\n{text}",
            conversation=f"judge:q{task.question_id}",
        )
        return re.search(r"\bYES\b", reply.upper()) is not None

    return judge


def compute_bridged_pairs(
    log: PartyLog,
    override: Sequence[tuple[int, int]] | None = None,
    ties: list[str] | None = None,
) -> list[tuple[AgentId, AgentId]]:
    """Each agent's least-talked-to partner (lowest index on ties), deduplicated.

    The first agent of each pair opens the brainstorm.  ``override``
    replaces the computation with an explicit pair list.
    """
    if override is not None:
        return [(AgentId(a), AgentId(b)) for a, b in override]
    if not log.rounds:
        raise ValueError("bridged pairs need a non-empty party log")
    counts = pair_counts(log)
    ids = log.agents
    out: list[tuple[AgentId, AgentId]] = []
    seen: set[tuple[AgentId, AgentId]] = set()
    for a in ids:
        others = [p for p in ids if p != a]
        best = min(counts.get(pair_key(a, p), 0) for p in others)
        tied = [p for p in others if counts.get(pair_key(a, p), 0) == best]
        if len(tied) > 1:
            msg = f"{a}: {len(tied)} partners tied at {best} conversations, chose {tied[0]}"
            logger.info(msg)
            if ties is not None:
                ties.append(msg)
        key = pair_key(a, tied[0])
        if key not in seen:
            seen.add(key)
            out.append((a, tied[0]))
    return out


@dataclass
class ConditionRun:
    condition: str
    question_id: int
    answers: list[SentenceAnswer] = field(default_factory=list)
    transcripts: list[Transcript] = field(default_factory=list)
    shortfalls: list[str] = field(default_factory=list)
    deviations: list[str] = field(default_factory=list)


def _collect_answers(agent: Agent, prompt: str, task: SentenceTask, run: ConditionRun, label: str, start: int = 0) -> int:
    reply = agent.send_prompt(prompt, conversation=label)
    found = extract_sentences(reply, task.n_sentences)
    if found.shortfall:
        run.shortfalls.append(f"{agent.name} {label}: {len(found.sentences)}/{task.n_sentences} sentences")
    for k, s in enumerate(found.sentences[: task.n_sentences]):
        run.answers.append(SentenceAnswer(agent.id, task.question_id, s, start + k))
    return len(found.sentences[: task.n_sentences])


def _final_answers(agents: Sequence[Agent], chats_of: dict[AgentId, list[AgentId]], task: SentenceTask, run: ConditionRun):
    for agent in sorted(agents, key=lambda a: a.id):
        partners = chats_of.get(agent.id, [])
        if partners:
            prompt = render("sentence_end", previous=partners[-1], question=task.prompt)
        else:
            prompt = render("sentence_end_alone", question=task.prompt)
        _collect_answers(agent, prompt, task, run, f"q{task.question_id}:{run.condition}:answer")


def _run_collective(agents: Sequence[Agent], task: SentenceTask, cap: int, run: ConditionRun):
    n = len(agents)

    def step1(agent: Agent) -> str:
        return render("sentence_collective_instruction", n_agents=n, name=agent.name, task=task.prompt)

    rec: RoundRecord = run_round(agents, 1, cap, step1_prompt=step1, round_label="", announce_end=False)
    run.transcripts.extend(rec.conversations)
    run.deviations.extend(rec.deviations)
    chats_of: dict[AgentId, list[AgentId]] = {}
    for t in rec.conversations:
        chats_of.setdefault(t.opener, []).append(t.partner)
        chats_of.setdefault(t.partner, []).append(t.opener)
    _final_answers(agents, chats_of, task, run)


def _run_bridged(
    agents: Sequence[Agent], task: SentenceTask, pairs: Sequence[tuple[AgentId, AgentId]], cap: int, run: ConditionRun
):
    by_id = {a.id: a for a in agents}
    plan = schedule(pairs)
    chats_of: dict[AgentId, list[AgentId]] = {}
    for a, b in plan:
        if a not in by_id or b not in by_id:
            raise SentenceError(f"bridged pair {a}-{b} names an unknown agent")
        chats_of.setdefault(a, []).append(b)
        chats_of.setdefault(b, []).append(a)
    headers: dict[tuple[AgentId, int], str] = {}
    for aid, partners in chats_of.items():
        headers[(aid, 0)] = render(
            "sentence_bridged_instruction",
            n_agents=len(agents),
            name=aid.name,
            partners=name_list(sorted(set(partners))),
            task=task.prompt,
            first=partners[0],
        )
        for k in range(1, len(partners)):
            headers[(aid, k)] = render("next_chat", previous=partners[k - 1], partner=partners[k])
    position = {aid: 0 for aid in chats_of}
    for a, b in plan:
        t = run_conversation(
            by_id[a],
            by_id[b],
            1,
            cap,
            opener_header=headers[(a, position[a])],
            responder_header=headers[(b, position[b])],
            label=f"q{task.question_id}:bridged:{a}>{b}",
        )
        position[a] += 1
        position[b] += 1
        run.transcripts.append(t)
    _final_answers(agents, chats_of, task, run)


def _run_individual(agent: Agent, task: SentenceTask, target: int, run: ConditionRun, max_queries: int | None = None):
    limit = max_queries or 3 * math.ceil(target / task.n_sentences) + 3
    queries = 0
    while len(run.answers) < target:
        if queries >= limit:
            raise SentenceError(f"individual agent produced {len(run.answers)}/{target} answers in {queries} queries")
        _collect_answers(agent, task.prompt, task, run, f"q{task.question_id}:individual:{queries}", len(run.answers))
        queries += 1
    del run.answers[target:]


def run_condition(
    condition: str,
    agents: Sequence[Agent],
    task: SentenceTask,
    *,
    pairs: Sequence[tuple[AgentId, AgentId]] | None = None,
    target_count: int | None = None,
    cap: int = 20,
) -> ConditionRun:
    """Run one condition for one question.

    ``individual`` queries ``agents[0]`` in batches of ``task.n_sentences``
    until ``target_count`` answers exist (the collective count); ``bridged``
    brainstorms over ``pairs`` (see :func:`compute_bridged_pairs`).
    """
    run = ConditionRun(condition, task.question_id)
    if condition == "collective":
        _run_collective(agents, task, cap, run)
    elif condition == "bridged":
        if pairs is None:
            raise SentenceError("bridged condition needs pairs (from a party log or an override)")
        _run_bridged(agents, task, pairs, cap, run)
    elif condition == "individual":
        if target_count is None:
            raise SentenceError("individual condition needs the collective answer count")
        _run_individual(agents[0], task, target_count, run)
    else:
        raise ValueError(f"unknown condition {condition!r}")
    return run


@dataclass
class ConditionScore:
    valid_ratio: float
    dispersion: float | None
    n_answers: int
    n_valid: int
    reports: list[ValidityReport]


def score_condition(
    answers: Sequence[SentenceAnswer],
    task: SentenceTask,
    embedder: EmbeddingService | None,
    judge: CoherenceJudge | None = None,
    word_mode: str = "prefix",
    verdicts: Sequence[bool] | None = None,
) -> ConditionScore:
    """Valid-answer ratio and embedding dispersion of the valid answers.

    Uniqueness is checked across the whole pool in answer order, so the
    first copy of a duplicated sentence can be valid and later copies cannot.
    ``verdicts`` replays stored coherence judgements instead of calling a judge.
    """
    if not answers:
        raise ValueError("score_condition needs at least one answer")
    if verdicts is not None and len(verdicts) != len(answers):
        raise ValueError("one coherence verdict per answer is required")
    accepted: list[SentenceAnswer] = []
    reports = []
    for k, ans in enumerate(answers):
        if verdicts is not None:
            judge = (lambda v: lambda *_: v)(verdicts[k])
        rep = validate_answer(ans, task, accepted, judge, word_mode)
        reports.append(rep)
        if rep.valid:
            accepted.append(ans)
    dispersion = None
    if accepted and embedder is not None:
        dispersion = total_dispersion(embedder.embed_batch([a.text for a in accepted]).vectors)
    return ConditionScore(len(accepted) / len(answers), dispersion, len(answers), len(accepted), reports)
