"""Experiment drivers bound to a :class:`RunStore`, plus the derived tables.

Every ``*_tables`` function reads only stored data and the manifest, so
``export`` reproduces the original CSVs byte for byte.
"""

from __future__ import annotations

import logging
import re
from decimal import Decimal
from typing import Any, Callable, Iterable, Sequence

from .agents import Agent, AgentId, AgentSpec, Playbook, RemoteChatBackend, Sampling, TokenBudget, scripted_agent
from .config import RunConfig, config_from_dict
from .embeddings import (
    DISPERSION_DEFINITION,
    EmbeddingCache,
    EmbeddingService,
    RemoteEmbedder,
    TestEmbedder,
)
from .metrics import (
    CONVERSATION_RATIO,
    INVITATION_RATIO,
    classify_pairs,
    network_halves,
    pair_name,
    pair_semantic_distance_series,
    ratio_series,
    trend,
)
from .offline import malicious_agent, offline_agent
from .party import PartyLog, agent_memories, restore_memories, run_party
from .pgg import (
    InfectionScenario,
    PggConfig,
    SETTINGS,
    compare_settings,
    run_infection_chain,
    run_pair_baseline,
)
from .sentence import (
    CONDITIONS,
    SentenceAnswer,
    SentenceError,
    load_tasks,
    make_agent_judge,
    run_condition,
    score_condition,
    compute_bridged_pairs,
)
from .stats import StatsError, ci95, mean, paired_t, welch_t
from .store import RunError, RunStore, base_manifest, format_cell

logger = logging.getLogger(__name__)

CHECKPOINT = "checkpoints/party_state.json"
PARTY_LOG = "transcripts/party_log.json"
MEMORIES = "transcripts/memories.json"
PGG_SCENARIOS = ("baseline-pairs", "infection-chain")

# (index, n_agents, episode) -> fresh agent
AgentBuilder = Callable[[int, int, str], Agent]
Table = tuple[str, Sequence[str], list[Sequence[Any]]]


def interpretation_flags(cfg: RunConfig) -> dict[str, Any]:
    return {
        "distance_metric": cfg.metrics.distance,
        "dispersion_definition": DISPERSION_DEFINITION,
        "coherence_mode": cfg.sentence.coherence,
        "memory_carry": cfg.sentence.memory,
        "word_match": cfg.sentence.word_match,
        "pgg_memory": cfg.pgg.memory,
        "context_truncation": "sliding-window",
        "reciprocal_invitations": cfg.party.reciprocal,
        "tight_pair_threshold": cfg.metrics.tight_threshold,
        "window": cfg.metrics.window,
        "embedding_unit": "pair-window-concatenation",
        "bridged_pair_rule": "fewest-conversations-lowest-index",
        "malicious_player": "scripted-zero-contribution",
        "early_windows": "available-prefix",
        "trend_regression": "pooled-ols",
        "test_family": "welch-two-sample,paired-t",
    }


def make_manifest(kind: str, cfg: RunConfig, **extra: Any) -> dict[str, Any]:
    return base_manifest(
        kind,
        cfg.to_dict(),
        models={
            "chat": {"kind": cfg.backend.kind, "model": cfg.backend.model},
            "embedding": {
                "kind": cfg.embedding.kind,
                "model": cfg.embedding.model if cfg.embedding.kind == "remote" else TestEmbedder(cfg.embedding.dimension, cfg.seed).model,
            },
        },
        interpretation=interpretation_flags(cfg),
        **extra,
    )


def agent_builder(cfg: RunConfig, model: str | None = None) -> AgentBuilder:
    """Factory for agents of the configured backend kind."""
    model = model or cfg.backend.model
    sampling = Sampling(cfg.backend.temperature, cfg.backend.top_p)
    budget = TokenBudget(cfg.backend.context_tokens, cfg.backend.reserve_tokens)
    if cfg.backend.kind == "scripted":

        def build(index: int, n_agents: int, episode: str) -> Agent:
            return offline_agent(index, n_agents, cfg.seed, f"{model}|{episode}", sampling=sampling, token_budget=budget)

        return build

    backend = RemoteChatBackend(model, cfg.backend.base_url, api_key_env=cfg.backend.api_key_env)

    def build_remote(index: int, n_agents: int, episode: str) -> Agent:
        return Agent(AgentSpec(AgentId(index), "remote-model", sampling, budget, model), backend)

    return build_remote


def embedding_service(cfg: RunConfig, store: RunStore) -> EmbeddingService:
    cache = EmbeddingCache(store.file("cache"))
    if cfg.embedding.kind == "test":
        return EmbeddingService(TestEmbedder(cfg.embedding.dimension, cfg.seed), cache)
    embedder = RemoteEmbedder(cfg.embedding.model, cfg.embedding.base_url, api_key_env=cfg.embedding.api_key_env)
    return EmbeddingService(embedder, cache)


def write_tables(store: RunStore, tables: Iterable[Table], fmt: str = "csv"):
    for rel, header, rows in tables:
        if fmt == "csv":
            store.write_table(f"{rel}.csv", header, rows)
        elif fmt == "json":
            store.write_json(f"{rel}.json", [dict(zip(header, map(format_cell, r))) for r in rows])
        else:
            raise ValueError(f"unknown export format {fmt!r}")


def _regression_row(label: str, points: list[tuple[float, float]]) -> list[Any]:
    r = trend(points)
    if r is None:
        return [label, None, None, None, None, len(points)]
    return [label, r.slope, r.intercept, r.slope_stderr, r.p_value, r.n]


def _interval(values: Sequence[float]) -> tuple[float | None, float | None]:
    try:
        ci = ci95(values)
    except StatsError:
        return None, None
    return ci.lower, ci.upper


def _test_cells(t) -> list[Any]:
    if t is None:
        return [None, None, None, None]
    return [t.statistic, t.dof, t.p_value, t.mean_difference]


# party ----------------------------------------------------------------------


def run_party_experiment(store: RunStore, cfg: RunConfig, build: AgentBuilder) -> PartyLog:
    n = cfg.party.n_agents
    agents = [build(i, n, "party") for i in range(1, n + 1)]
    log = None
    if store.exists(CHECKPOINT):
        state = store.read_json(CHECKPOINT)
        log = PartyLog.from_dict(state["log"])
        restore_memories(agents, state["memories"])
        logger.info("resuming party after round %d", len(log.rounds))

    def checkpoint(log: PartyLog, agents: Sequence[Agent]):
        rec = log.rounds[-1]
        store.write_jsonl(f"transcripts/round_{rec.round_id:03d}.jsonl", [t.to_dict() for t in rec.conversations])
        store.write_json(CHECKPOINT, {"round": rec.round_id, "log": log.to_dict(), "memories": agent_memories(agents)})
        logger.info("round %d done: %d conversations", rec.round_id, len(rec.conversations))

    log = run_party(cfg.party, agents, log=log, on_round=checkpoint)
    store.write_text(PARTY_LOG, log.to_json())
    store.write_json(MEMORIES, agent_memories(agents))
    export_run(store)
    store.finish()
    return log


def party_tables(store: RunStore) -> list[Table]:
    cfg = config_from_dict(store.manifest["config"])
    log = PartyLog.from_json(store.read_text(PARTY_LOG))
    window, threshold = cfg.metrics.window, cfg.metrics.tight_threshold
    ratios = ratio_series(log, window)
    series = pair_semantic_distance_series(log, embedding_service(cfg, store), window, threshold, cfg.metrics.distance)
    classes = classify_pairs(log, threshold)
    halves = network_halves(log)
    half_names = ("first", "second")
    terminations: dict[str, int] = {}
    for t in log.transcripts():
        terminations[t.terminated_by] = terminations.get(t.terminated_by, 0) + 1
    summary = [
        ["rounds", len(log.rounds)],
        ["agents", cfg.party.n_agents],
        ["conversations", sum(terminations.values())],
        ["invitations", sum(len(r.invitations) for r in log.rounds)],
        ["protocol_deviations", sum(len(r.deviations) for r in log.rounds)],
        *[[f"terminated_by_{k}", v] for k, v in sorted(terminations.items())],
        ["tight_pairs", sum(pc.tight for pc in classes)],
        ["loose_pairs", sum(not pc.tight for pc in classes)],
    ]
    return [
        ("exports/party_ratios", ("agent", "round", "metric", "value"), [list(r) for r in ratios]),
        (
            "exports/party_ratio_trends",
            ("metric", "slope", "intercept", "slope_stderr", "p_value", "n"),
            [
                _regression_row(m, [(float(r[1]), r[3]) for r in ratios if r[2] == m])
                for m in (CONVERSATION_RATIO, INVITATION_RATIO)
            ],
        ),
        (
            "exports/party_pair_classes",
            ("pair", "conversations", "class"),
            [[pair_name(pc.pair), pc.conversation_count, pc.label] for pc in classes],
        ),
        (
            "exports/party_semantic_distance",
            ("pair", "round", "class", "distance"),
            [[pair_name(p), r, label, d] for p, r, label, d in series.pair_points],
        ),
        (
            "exports/party_semantic_means",
            ("class", "round", "mean_distance"),
            [[label, r, v] for label in ("tight", "loose") for r, v in series.class_means[label]],
        ),
        (
            "exports/party_semantic_trends",
            ("class", "slope", "intercept", "slope_stderr", "p_value", "n"),
            [
                _regression_row(label, [(float(r), d) for _, r, lab, d in series.pair_points if lab == label and d == d])
                for label in ("tight", "loose")
            ],
        ),
        (
            "exports/network_nodes",
            ("half", "first_round", "last_round", "agent", "activity", "popularity"),
            [[half_names[k], net.first, net.last, *row] for k, net in enumerate(halves) for row in net.node_rows()],
        ),
        (
            "exports/network_edges",
            ("half", "first_round", "last_round", "source", "target", "weight"),
            [[half_names[k], net.first, net.last, *row] for k, net in enumerate(halves) for row in net.edge_rows()],
        ),
        ("metrics/party_summary", ("quantity", "value"), summary),
    ]


# sentence game ---------------------------------------------------------------


def _party_inputs(party: RunStore | None) -> tuple[PartyLog | None, dict[str, Any] | None]:
    if party is None:
        return None, None
    if party.manifest.get("kind") != "party" or not party.finished:
        raise RunError(f"{party.path} is not a finished party run")
    return PartyLog.from_json(party.read_text(PARTY_LOG)), party.read_json(MEMORIES)


def _answers_to_dicts(answers: Sequence[SentenceAnswer], verdicts: Sequence[bool] | None) -> list[dict[str, Any]]:
    out = []
    for k, a in enumerate(answers):
        d: dict[str, Any] = {"agent": a.agent.name, "order": a.order, "text": a.text}
        if verdicts is not None:
            d["coherent"] = verdicts[k]
        out.append(d)
    return out


def run_sentence_experiment(
    store: RunStore,
    cfg: RunConfig,
    build: AgentBuilder,
    party: RunStore | None,
    conditions: Sequence[str] = CONDITIONS,
) -> None:
    tasks = {t.question_id: t for t in load_tasks()}
    missing = [q for q in cfg.sentence.questions if q not in tasks]
    if missing:
        raise SentenceError(f"no task asset for question(s) {missing}")
    log, memories = _party_inputs(party)
    n = log.config.n_agents if log else cfg.party.n_agents
    group = [c for c in conditions if c != "individual"]
    if group and cfg.sentence.memory == "carry" and memories is None:
        raise SentenceError("collective and bridged conditions carry party memory; pass --party-run")

    pairs = None
    if "bridged" in conditions:
        ties: list[str] = []
        if cfg.sentence.bridged_pairs:
            pairs = compute_bridged_pairs(log, override=cfg.sentence.bridged_pairs)  # type: ignore[arg-type]
        elif log is not None:
            pairs = compute_bridged_pairs(log, ties=ties)
        else:
            raise SentenceError("bridged condition needs a party run or an explicit pair list")
        store.write_table("metrics/bridged_pairs.csv", ("opener", "partner"), [[a.name, b.name] for a, b in pairs])
        store.write_text("metrics/bridged_ties.txt", "".join(t + "\n" for t in ties))

    for q in cfg.sentence.questions:
        task = tasks[q]
        collective_count = None
        for cond in CONDITIONS:
            if cond not in conditions:
                continue
            rel = f"transcripts/q{q}_{cond}.json"
            if store.exists(rel):
                if cond == "collective":
                    collective_count = len(store.read_json(rel)["answers"])
                continue
            episode = f"q{q}:{cond}"
            if cond == "individual":
                agents = [build(1, 1, episode)]
            else:
                agents = [build(i, n, episode) for i in range(1, n + 1)]
                if cfg.sentence.memory == "carry":
                    restore_memories(agents, memories or {})
            target = collective_count if collective_count is not None else n * task.n_sentences
            run = run_condition(cond, agents, task, pairs=pairs, target_count=target, cap=cfg.sentence.max_turns)
            if cond == "collective":
                collective_count = len(run.answers)
            verdicts = None
            if cfg.sentence.coherence == "judge":
                if cfg.backend.kind == "scripted":
                    judge_agent = scripted_agent(n + 1, Playbook(default="YES"))
                else:
                    judge_agent = build(n + 1, n + 1, f"{episode}:judge")
                judge = make_agent_judge(judge_agent)
                verdicts = [judge(a.text, task) for a in run.answers]
            store.write_json(
                rel,
                {
                    "question_id": q,
                    "condition": cond,
                    "answers": _answers_to_dicts(run.answers, verdicts),
                    "transcripts": [t.to_dict() for t in run.transcripts],
                    "shortfalls": run.shortfalls,
                    "deviations": run.deviations,
                },
            )
            logger.info("question %d %s: %d answers", q, cond, len(run.answers))
    export_run(store)
    store.finish()


def sentence_tables(store: RunStore) -> list[Table]:
    cfg = config_from_dict(store.manifest["config"])
    tasks = {t.question_id: t for t in load_tasks()}
    embedder = embedding_service(cfg, store)
    conditions = [c for c in CONDITIONS if c in store.manifest.get("inputs", {}).get("conditions", CONDITIONS)]
    validity, scores = [], []
    per_metric: dict[tuple[str, str], list[float]] = {}
    for q in cfg.sentence.questions:
        for cond in conditions:
            data = store.read_json(f"transcripts/q{q}_{cond}.json")
            answers = [SentenceAnswer(AgentId.parse(a["agent"]), q, a["text"], a["order"]) for a in data["answers"]]
            verdicts = [a["coherent"] for a in data["answers"]] if cfg.sentence.coherence == "judge" else None
            if not answers:
                scores += [[cond, q, "valid_ratio", None], [cond, q, "dispersion", None]]
                continue
            score = score_condition(answers, tasks[q], embedder, word_mode=cfg.sentence.word_match, verdicts=verdicts)
            for rep in score.reports:
                a = rep.answer
                validity.append(
                    [q, cond, a.agent.name, a.order, a.text, rep.all_words, rep.length_ok, rep.unique, rep.coherent, rep.valid]
                )
            for metric, value in (("valid_ratio", score.valid_ratio), ("dispersion", score.dispersion)):
                scores.append([cond, q, metric, value])
                if value is not None:
                    per_metric.setdefault((cond, metric), []).append(value)
    summary = []
    for cond in conditions:
        for metric in ("valid_ratio", "dispersion"):
            vals = per_metric.get((cond, metric), [])
            lo, hi = _interval(vals)
            summary.append([cond, metric, mean(vals) if vals else None, lo, hi, len(vals)])
    tests = []
    for metric in ("valid_ratio", "dispersion"):
        for a, b in (("collective", "individual"), ("bridged", "collective"), ("bridged", "individual")):
            if a in conditions and b in conditions:
                try:
                    t = welch_t(per_metric.get((a, metric), []), per_metric.get((b, metric), []))
                except StatsError:
                    t = None
                tests.append([metric, f"{a}-vs-{b}", *_test_cells(t)])
    return [
        ("exports/sentence_scores", ("condition", "question", "metric", "value"), scores),
        ("exports/sentence_summary", ("condition", "metric", "mean", "ci_lower", "ci_upper", "n"), summary),
        ("exports/sentence_tests", ("metric", "comparison", "statistic", "dof", "p_value", "mean_difference"), tests),
        (
            "metrics/sentence_validity",
            ("question", "condition", "agent", "order", "text", "all_words", "length_ok", "unique", "coherent", "valid"),
            validity,
        ),
    ]


# public goods game -----------------------------------------------------------


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "-", text).strip("-") or "model"


def pgg_config(cfg: RunConfig) -> PggConfig:
    return PggConfig(
        Decimal(cfg.pgg.endowment),
        Decimal(cfg.pgg.multiplier),
        replications=cfg.pgg.replications,
        max_reruns=cfg.pgg.max_reruns,
    )


def _scenario(cfg: RunConfig, setting: str) -> InfectionScenario:
    nodes = {"collective-A": cfg.pgg.chain_a, "collective-B": cfg.pgg.chain_b}.get(setting)
    return InfectionScenario(setting, nodes)


def _pair(cfg: RunConfig, setting: str) -> tuple[int, int] | None:
    return {"collective-A": cfg.pgg.pair_a, "collective-B": cfg.pgg.pair_b}.get(setting)


def run_pgg_experiment(
    store: RunStore,
    cfg: RunConfig,
    builder_for: Callable[[str], AgentBuilder],
    party: RunStore | None,
    scenario: str,
) -> None:
    if scenario not in PGG_SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    log, memories = _party_inputs(party)
    collective = [s for s in cfg.pgg.settings if s != "non-collective"]
    if collective and memories is None:
        raise RunError(f"settings {collective} use party agents; pass --party-run")
    n = log.config.n_agents if log else cfg.party.n_agents
    pcfg = pgg_config(cfg)
    for model in cfg.pgg.models or (cfg.backend.model,):
        build = builder_for(model)
        for setting in cfg.pgg.settings:
            rel = f"transcripts/pgg_{scenario}_{_slug(model)}_{setting}.json"
            if store.exists(rel):
                continue
            with_party = setting != "non-collective"

            def make_agents(ids, r, attempt, setting=setting, with_party=with_party, build=build, model=model):
                out = {}
                for role, aid in ids.items():
                    if role == "malicious":
                        out[role] = malicious_agent(aid)
                        continue
                    agent = build(aid.index, n if with_party else 3, f"pgg:{setting}:r{r}:a{attempt}")
                    if with_party:
                        agent.restore(memories[aid.name])
                    out[role] = agent
                return out

            if scenario == "baseline-pairs":
                summary = run_pair_baseline(setting, _pair(cfg, setting), pcfg, make_agents)
                data = {
                    "model": model,
                    "setting": setting,
                    "pair": [a.name for a in summary.pair],
                    "reruns": summary.reruns,
                    "games": [g.to_dict() for g in summary.games],
                }
            else:
                report = run_infection_chain(_scenario(cfg, setting), pcfg, make_agents)
                data = {
                    "model": model,
                    "setting": setting,
                    "nodes": list(_scenario(cfg, setting).nodes or ()),
                    "reruns": report.reruns,
                    "deviations": report.deviations,
                    "replications": [
                        {"replication": rep.replication, "attempt": rep.attempt, "games": [g.to_dict() for g in rep.games]}
                        for rep in report.replications
                    ],
                }
            store.write_json(rel, data)
            logger.info("pgg %s %s %s done", scenario, model, setting)
    export_run(store)
    store.finish()


def _pgg_records(store: RunStore, scenario: str) -> list[dict[str, Any]]:
    cfg = config_from_dict(store.manifest["config"])
    out = []
    for model in cfg.pgg.models or (cfg.backend.model,):
        for setting in cfg.pgg.settings:
            out.append(store.read_json(f"transcripts/pgg_{scenario}_{_slug(model)}_{setting}.json"))
    return out


def _game_row(model: str, setting: str, replication: int, g: dict[str, Any]) -> list[Any]:
    players = g.get("players", ["", ""])
    return [model, setting, replication, g["sequence"], g["label"], *players, *g["contributions"], g["pot_after"], *g["payoffs"]]


_GAME_HEADER = (
    "model", "setting", "replication", "sequence", "label", "player_1", "player_2",
    "contribution_1", "contribution_2", "pot", "payoff_1", "payoff_2",
)


def pgg_tables(store: RunStore) -> list[Table]:
    scenario = store.manifest["inputs"]["scenario"]
    records = _pgg_records(store, scenario)
    games: list[list[Any]] = []
    if scenario == "baseline-pairs":
        rows, summary, tests = [], [], []
        values: dict[tuple[str, str], list[float]] = {}
        for rec in records:
            m, s = rec["model"], rec["setting"]
            for k, g in enumerate(rec["games"], 1):
                c1, c2 = (Decimal(c) for c in g["contributions"])
                value = (c1 + c2) / 2
                rows.append([m, s, k, *g["players"], str(c1), str(c2), str(value)])
                values.setdefault((m, s), []).append(float(value))
                games.append(_game_row(m, s, k, g))
        for (m, s), vals in values.items():
            lo, hi = _interval(vals)
            summary.append([m, s, mean(vals), lo, hi, len(vals)])
        for m in dict.fromkeys(k[0] for k in values):
            base = values.get((m, "non-collective"))
            for s in SETTINGS[1:]:
                if base is not None and (m, s) in values:
                    tests.append([m, f"{s}-vs-non-collective", *_test_cells(compare_settings(values[(m, s)], base))])
        return [
            (
                "exports/pgg_baseline",
                ("model", "setting", "replication", "player_1", "player_2", "contribution_1", "contribution_2", "pair_mean"),
                rows,
            ),
            ("exports/pgg_baseline_summary", ("model", "setting", "mean", "ci_lower", "ci_upper", "n"), summary),
            ("exports/pgg_baseline_tests", ("model", "comparison", "statistic", "dof", "p_value", "mean_difference"), tests),
            ("metrics/pgg_games", _GAME_HEADER, games),
        ]

    rows, summary, tests = [], [], []
    deltas: dict[tuple[str, str, str], list[float]] = {}
    for rec in records:
        m, s = rec["model"], rec["setting"]
        by_role: dict[str, list[tuple[int, Decimal, Decimal]]] = {"p1": [], "p2": []}
        for rep in rec["replications"]:
            g = rep["games"]
            r = rep["replication"]
            before = {"p1": g[0]["contributions"][0], "p2": g[0]["contributions"][1]}
            after = {"p1": g[2]["contributions"][0], "p2": g[3]["contributions"][0]}
            for role in ("p1", "p2"):
                by_role[role].append((r, Decimal(before[role]), Decimal(after[role])))
            games += [_game_row(m, s, r, x) for x in g]
        for role in ("p1", "p2"):
            for r, b, a in by_role[role]:
                rows.append([m, s, role, r, str(b), str(a)])
            bs = [float(b) for _, b, _ in by_role[role]]
            as_ = [float(a) for _, _, a in by_role[role]]
            ds = [y - x for x, y in zip(bs, as_)]
            deltas[(m, s, role)] = ds
            lo, hi = _interval(ds)
            try:
                t = paired_t(bs, as_)
            except StatsError:
                t = None
            summary.append([m, s, role, mean(bs), mean(as_), mean(ds), lo, hi, *_test_cells(t)[:3]])
    for m in dict.fromkeys(k[0] for k in deltas):
        for role in ("p1", "p2"):
            base = deltas.get((m, "non-collective", role))
            for s in SETTINGS[1:]:
                if base is not None and (m, s, role) in deltas:
                    tests.append([m, role, f"{s}-vs-non-collective", *_test_cells(compare_settings(deltas[(m, s, role)], base))])
    return [
        ("exports/pgg_infection", ("model", "setting", "role", "replication", "before", "after"), rows),
        (
            "exports/pgg_infection_summary",
            ("model", "setting", "role", "before_mean", "after_mean", "delta_mean", "delta_ci_lower", "delta_ci_upper", "t", "dof", "p_value"),
            summary,
        ),
        ("exports/pgg_infection_tests", ("model", "role", "comparison", "statistic", "dof", "p_value", "mean_difference"), tests),
        ("metrics/pgg_games", _GAME_HEADER, games),
    ]


_TABLES = {"party": party_tables, "sentence": sentence_tables, "pgg": pgg_tables}


def export_run(store: RunStore, fmt: str = "csv") -> list[str]:
    """Re-derive every table of a run from its stored transcripts."""
    kind = store.manifest["kind"]
    tables = _TABLES[kind](store)
    write_tables(store, tables, fmt)
    return [f"{rel}.{fmt}" for rel, _, _ in tables]
