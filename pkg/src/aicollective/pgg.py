"""Two-player public goods game, pair baselines and malicious-contagion chains.

Money is held as exact ``Decimal`` dollars.  Contributions are whole cents,
so a half share of the pot can be a fraction of a cent and is never rounded.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Any, Callable, Mapping, Sequence

from .agents import Agent, AgentError, AgentId
from .prompts import render
from .stats import Interval, StatsError, TTestResult, ci95, mean, paired_t, welch_t

logger = logging.getLogger(__name__)

CENT = Decimal("0.01")
_CONTRIBUTE_RE = re.compile(r"CONTRIBUTE\s*\$\s*(-?[\d,]*\.?\d+)", re.IGNORECASE)

SETTINGS = ("non-collective", "collective-A", "collective-B")
ROLES = ("p1", "p2")


class UnparseableMove(ValueError):
    pass


class GameVoid(AgentError):
    def __init__(self, message: str, player: AgentId):
        super().__init__(message)
        self.player = player


def money(x: Decimal | int | float | str) -> Decimal:
    return x if isinstance(x, Decimal) else Decimal(str(x))


def fmt_amount(x: Decimal) -> str:
    """Dollar figure for prompts: whole numbers bare, others with cents."""
    return str(int(x)) if x == x.to_integral_value() else f"{x:.2f}"


def fmt_one_decimal(x: Decimal) -> str:
    return f"{x:.1f}"


@dataclass(frozen=True)
class PggConfig:
    endowment: Decimal = Decimal("100")
    multiplier: Decimal = Decimal("1.3")
    n_players: int = 2
    replications: int = 20
    max_reruns: int = 3

    def __post_init__(self):
        object.__setattr__(self, "endowment", money(self.endowment))
        object.__setattr__(self, "multiplier", money(self.multiplier))
        if self.multiplier <= 1:
            raise ValueError("multiplier must exceed 1")
        if self.endowment <= 0:
            raise ValueError("endowment must be positive")
        if self.n_players != 2:
            raise ValueError("only two-player games are supported")
        if self.replications < 1:
            raise ValueError("replications must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "endowment": str(self.endowment),
            "multiplier": str(self.multiplier),
            "n_players": self.n_players,
            "replications": self.replications,
            "max_reruns": self.max_reruns,
        }


@dataclass(frozen=True)
class PggMove:
    player: AgentId
    reason_text: str
    contribution: Decimal


@dataclass
class PggGameResult:
    contributions: tuple[Decimal, Decimal]
    pot_after: Decimal
    payoffs: tuple[Decimal, Decimal]
    net_gains: tuple[Decimal, Decimal]
    moves: tuple[PggMove, PggMove] | None = None
    label: str = ""
    sequence: int = 0

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "label": self.label,
            "sequence": self.sequence,
            "contributions": [str(c) for c in self.contributions],
            "pot_after": str(self.pot_after),
            "payoffs": [str(p) for p in self.payoffs],
            "net_gains": [str(n) for n in self.net_gains],
        }
        if self.moves is not None:
            d["players"] = [m.player.name for m in self.moves]
            d["reasons"] = [m.reason_text for m in self.moves]
        return d


def parse_contribution(text: str, endowment: Decimal | int = Decimal("100"), deviations: list[str] | None = None) -> Decimal:
    """Amount in the last "CONTRIBUTE $x" clause, clamped to [0, endowment]."""
    endowment = money(endowment)
    found = _CONTRIBUTE_RE.findall(text)
    if not found:
        raise UnparseableMove("no CONTRIBUTE $<amount> clause")
    raw = found[-1].replace(",", "")
    try:
        amount = Decimal(raw)
    except InvalidOperation as exc:
        raise UnparseableMove(f"bad amount {raw!r}") from exc
    if amount != amount.quantize(CENT):
        raise UnparseableMove(f"amount {raw} has sub-cent precision")
    clamped = min(max(amount, Decimal(0)), endowment)
    if clamped != amount:
        msg = f"contribution {amount} clamped to {clamped}"
        logger.info(msg)
        if deviations is not None:
            deviations.append(msg)
    return clamped.quantize(CENT)


def settle_game(c1: Decimal | int, c2: Decimal | int, config: PggConfig = PggConfig()) -> PggGameResult:
    c1, c2 = money(c1), money(c2)
    for c in (c1, c2):
        if not Decimal(0) <= c <= config.endowment:
            raise ValueError(f"contribution {c} outside [0, {config.endowment}]")
    pot = config.multiplier * (c1 + c2)
    share = pot / 2
    payoffs = (config.endowment - c1 + share, config.endowment - c2 + share)
    return PggGameResult(
        (c1, c2),
        pot,
        payoffs,
        (payoffs[0] - config.endowment, payoffs[1] - config.endowment),
    )


def result_message(result: PggGameResult, player: int, config: PggConfig) -> str:
    net = result.net_gains[player]
    fields = dict(
        multiplier=config.multiplier,
        pot=fmt_one_decimal(result.pot_after),
        share=fmt_one_decimal(result.pot_after / 2),
    )
    if net < 0:
        return render("pgg_result_loss", loss=fmt_one_decimal(-net), **fields)
    return render("pgg_result", net=fmt_one_decimal(net), **fields)


def _move(agent: Agent, opponent: Agent, config: PggConfig, reveal: bool, label: str, deviations: list[str]) -> PggMove:
    prompt = render("pgg_instruction", endowment=fmt_amount(config.endowment), multiplier=config.multiplier)
    if reveal:
        prompt = render("pgg_opponent", opponent=opponent.name) + "\n" + prompt
    reply = agent.send_prompt(prompt, conversation=label)
    try:
        return PggMove(agent.id, reply, parse_contribution(reply, config.endowment, deviations))
    except UnparseableMove as first:
        deviations.append(f"{agent.name}: {first}; re-prompting")
    reply = agent.send_prompt(render("pgg_reprompt"), conversation=label)
    try:
        return PggMove(agent.id, reply, parse_contribution(reply, config.endowment, deviations))
    except UnparseableMove as exc:
        raise GameVoid(f"{agent.name} gave no parseable contribution: {exc}", agent.id) from exc


def run_game(
    a: Agent,
    b: Agent,
    config: PggConfig = PggConfig(),
    carry_context: bool = True,
    *,
    reveal_opponent: bool = False,
    label: str = "pgg",
    deviations: list[str] | None = None,
) -> PggGameResult:
    """Prompt both players independently, settle, then tell each their outcome.

    A move that stays unparseable after one re-prompt raises ``GameVoid``
    before any result message is delivered.
    """
    deviations = deviations if deviations is not None else []
    if not carry_context:
        a.reset()
        b.reset()
    moves = (
        _move(a, b, config, reveal_opponent, label, deviations),
        _move(b, a, config, reveal_opponent, label, deviations),
    )
    result = settle_game(moves[0].contribution, moves[1].contribution, config)
    result.moves = moves
    result.label = label
    for i, agent in enumerate((a, b)):
        agent.observe(result_message(result, i, config), conversation=label)
    return result


@dataclass(frozen=True)
class InfectionScenario:
    """Chain roles for one setting.  ``nodes`` holds party agent indices for
    (P1, P2, P3); ``None`` means fresh agents with no party memory."""

    setting: str
    nodes: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.nodes is not None and len(set(self.nodes)) != 3:
            raise ValueError("chain needs three distinct nodes")

    @property
    def collective(self) -> bool:
        return self.nodes is not None

    def player_ids(self) -> dict[str, AgentId]:
        nodes = self.nodes or (1, 2, 3)
        return {"p1": AgentId(nodes[0]), "p2": AgentId(nodes[1]), "p3": AgentId(nodes[2])}


NON_COLLECTIVE = InfectionScenario("non-collective")
COLLECTIVE_A = InfectionScenario("collective-A", (1, 10, 9))
COLLECTIVE_B = InfectionScenario("collective-B", (1, 6, 8))
SCENARIOS = {s.setting: s for s in (NON_COLLECTIVE, COLLECTIVE_A, COLLECTIVE_B)}

# factory(role ids, replication, attempt) -> agents keyed by role name
AgentFactory = Callable[[Mapping[str, AgentId], int, int], Mapping[str, Agent]]


@dataclass
class ChainReplication:
    replication: int
    attempt: int
    games: list[PggGameResult]
    before: dict[str, Decimal]
    after: dict[str, Decimal]
    third: Decimal


@dataclass
class RoleSummary:
    role: str
    before: list[float]
    after: list[float]
    deltas: list[float]
    test: TTestResult | None
    delta_ci: Interval | None


@dataclass
class InfectionReport:
    setting: str
    replications: list[ChainReplication] = field(default_factory=list)
    reruns: int = 0
    deviations: list[str] = field(default_factory=list)

    def values(self, role: str, when: str) -> list[float]:
        return [float(getattr(rep, when)[role]) for rep in self.replications]

    def role_summary(self, role: str) -> RoleSummary:
        before, after = self.values(role, "before"), self.values(role, "after")
        deltas = [y - x for x, y in zip(before, after)]
        try:
            test = paired_t(before, after)
            ci = ci95(deltas)
        except StatsError:
            test = ci = None
        return RoleSummary(role, before, after, deltas, test, ci)

    def rows(self) -> list[tuple[str, str, int, str, str]]:
        return [
            (self.setting, role, rep.replication, str(rep.before[role]), str(rep.after[role]))
            for role in ROLES
            for rep in self.replications
        ]


def run_infection_chain(
    scenario: InfectionScenario,
    config: PggConfig,
    make_agents: AgentFactory,
    malicious_id: AgentId | None = None,
    on_replication: Callable[[ChainReplication], None] | None = None,
) -> InfectionReport:
    """Per replication: baseline P1 vs P2, then M vs P1, P1 vs P2, P2 vs P3.

    The baseline gives "before" for P1 and P2; games 2 and 3 give "after".
    A void game reruns the replication with a new attempt number, at most
    ``config.max_reruns`` times.
    """
    ids = dict(scenario.player_ids())
    ids["malicious"] = malicious_id or AgentId(max(i.index for i in ids.values()) + 1)
    report = InfectionReport(scenario.setting)
    sequence = 0
    for r in range(1, config.replications + 1):
        for attempt in range(config.max_reruns + 1):
            agents = make_agents(ids, r, attempt)
            plan = [
                ("baseline", "p1", "p2"),
                ("game1", "malicious", "p1"),
                ("game2", "p1", "p2"),
                ("game3", "p2", "p3"),
            ]
            games: list[PggGameResult] = []
            try:
                for name, x, y in plan:
                    g = run_game(
                        agents[x],
                        agents[y],
                        config,
                        carry_context=True,
                        reveal_opponent=scenario.collective,
                        label=f"pgg:{scenario.setting}:r{r}:{name}",
                        deviations=report.deviations,
                    )
                    sequence += 1
                    g.sequence = sequence
                    games.append(g)
            except GameVoid as exc:
                report.reruns += 1
                report.deviations.append(f"replication {r} attempt {attempt} void: {exc}")
                logger.warning("replication %d attempt %d void: %s", r, attempt, exc)
                continue
            rep = ChainReplication(
                r,
                attempt,
                games,
                before={"p1": games[0].contributions[0], "p2": games[0].contributions[1]},
                after={"p1": games[2].contributions[0], "p2": games[3].contributions[0]},
                third=games[3].contributions[1],
            )
            report.replications.append(rep)
            if on_replication is not None:
                on_replication(rep)
            break
        else:
            raise AgentError(f"replication {r} void after {config.max_reruns} reruns")
    return report


@dataclass
class BaselineSummary:
    setting: str
    pair: tuple[AgentId, AgentId]
    per_replication: list[Decimal]
    games: list[PggGameResult]
    reruns: int = 0

    @property
    def mean(self) -> float:
        return mean([float(v) for v in self.per_replication])

    @property
    def ci(self) -> Interval | None:
        try:
            return ci95([float(v) for v in self.per_replication])
        except StatsError:
            return None


def run_pair_baseline(
    setting: str,
    pair: tuple[int, int] | None,
    config: PggConfig,
    make_agents: AgentFactory,
) -> BaselineSummary:
    """One game per replication; the replication value is the pair's mean contribution."""
    ids = {"p1": AgentId(pair[0]), "p2": AgentId(pair[1])} if pair else {"p1": AgentId(1), "p2": AgentId(2)}
    summary = BaselineSummary(setting, (ids["p1"], ids["p2"]), [], [])
    for r in range(1, config.replications + 1):
        for attempt in range(config.max_reruns + 1):
            agents = make_agents(ids, r, attempt)
            try:
                g = run_game(
                    agents["p1"],
                    agents["p2"],
                    config,
                    carry_context=True,
                    reveal_opponent=pair is not None,
                    label=f"pgg:{setting}:r{r}:pair",
                )
            except GameVoid as exc:
                summary.reruns += 1
                logger.warning("baseline replication %d attempt %d void: %s", r, attempt, exc)
                continue
            g.sequence = r
            summary.games.append(g)
            summary.per_replication.append((g.contributions[0] + g.contributions[1]) / 2)
            break
        else:
            raise AgentError(f"baseline replication {r} void after {config.max_reruns} reruns")
    return summary


def compare_settings(a: Sequence[float], b: Sequence[float]) -> TTestResult | None:
    try:
        return welch_t(a, b)
    except StatsError:
        return None
