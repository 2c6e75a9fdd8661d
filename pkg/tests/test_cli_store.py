import csv
import json
from pathlib import Path

import httpx
import pytest

from aicollective import agents as agents_mod
from aicollective import cli
from aicollective.metrics import ratio_series
from aicollective.party import PartyLog
from aicollective.store import RunError, RunStore, csv_text, format_cell

SMALL = """
[run]
seed = 3
[party]
n_agents = 10
n_rounds = 4
max_turns_per_conversation = 6
[embedding]
kind = "test"
dimension = 64
[sentence]
questions = [1]
[pgg]
replications = 3
"""

REMOTE = """
[run]
seed = 1
[party]
n_agents = 3
n_rounds = 2
max_turns_per_conversation = 4
[backend]
kind = "remote-model"
model = "chat-model"
base_url = "https://chat.invalid/v1"
[embedding]
kind = "remote"
model = "emb-model"
base_url = "https://chat.invalid/v1"
dimension = 8
[pgg]
pair_a = [1, 3]
pair_b = [2, 3]
chain_a = [1, 2, 3]
chain_b = [2, 1, 3]
"""

SECRET = "sk-test-6f1e0c5a9d2b4e77"


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out.strip(), err


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


@pytest.fixture
def party_run(small, tmp_path, capsys):
    code, out, _ = run_cli(capsys, "party", "--config", small, "--out", tmp_path / "runs")
    assert code == 0
    return Path(out)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_party_run_layout(party_run):
    store = RunStore(party_run)
    m = store.manifest
    assert m["status"] == "finished" and m["kind"] == "party"
    assert m["run_id"] == party_run.name and len(m["run_id"]) == 12
    assert m["config"]["seed"] == 3
    for flag in ("distance_metric", "dispersion_definition", "coherence_mode", "memory_carry", "reciprocal_invitations"):
        assert flag in m["interpretation"]
    assert set(m["models"]) == {"chat", "embedding"}
    assert (party_run / "run.log").is_file()
    assert len(store.list("transcripts", "round_*.jsonl")) == 4
    ratios = read_csv(party_run / "exports" / "party_ratios.csv")
    assert ratios[0] == ["agent", "round", "metric", "value"]
    log = PartyLog.from_json(store.read_text("transcripts/party_log.json"))
    expected = [[a, str(r), m, repr(v)] for a, r, m, v in ratio_series(log)]
    assert ratios[1:] == expected
    assert 0 < len(expected) <= 2 * 10 * 4


def test_export_is_byte_identical(party_run, capsys, tmp_path):
    exports = sorted((party_run / "exports").glob("*.csv"))
    before = {p.name: p.read_bytes() for p in exports}
    code, out, _ = run_cli(capsys, "export", party_run.name, "--out", tmp_path / "runs")
    assert code == 0
    assert {Path(line).name for line in out.splitlines()} >= set(before)
    assert {p.name: p.read_bytes() for p in exports} == before


def test_json_export_matches_csv(party_run, capsys):
    code, out, _ = run_cli(capsys, "export", party_run, "--format", "json")
    assert code == 0
    rows = json.loads((party_run / "exports" / "party_ratios.json").read_text())
    table = read_csv(party_run / "exports" / "party_ratios.csv")
    header = table[0]
    assert all(set(r) == set(header) for r in rows)
    assert [[r[h] for h in header] for r in rows] == table[1:]


def test_same_config_twice_is_refused(small, party_run, capsys, tmp_path):
    code, _, err = run_cli(capsys, "party", "--config", small, "--out", tmp_path / "runs")
    assert code == 1 and "already finished" in err
    code, _, err = run_cli(capsys, "party", "--config", small, "--out", tmp_path / "runs", "--resume")
    assert code == 1 and "already finished" in err


def test_nothing_to_resume(small, capsys, tmp_path):
    code, _, err = run_cli(capsys, "party", "--config", small, "--out", tmp_path / "runs", "--resume")
    assert code == 1 and "nothing to resume" in err


def test_unknown_and_unfinished_runs(capsys, tmp_path):
    code, _, err = run_cli(capsys, "export", "deadbeef0000", "--out", tmp_path)
    assert code == 1 and "unknown run" in err
    store = RunStore.create(tmp_path, {"kind": "party", "config": {}})
    store.release()
    code, _, err = run_cli(capsys, "export", store.path)
    assert code == 1 and "not finished" in err


def test_finished_run_refuses_writes(party_run):
    store = RunStore(party_run)
    with pytest.raises(RunError):
        store.write_text("transcripts/extra.json", "{}")
    with pytest.raises(RunError):
        store.finish()


def test_second_writer_is_locked_out(tmp_path):
    store = RunStore.create(tmp_path, {"kind": "party"})
    with pytest.raises(RunError, match="another process"):
        RunStore.create(tmp_path, {"kind": "party"}, resume=True)
    store.release()
    again = RunStore.create(tmp_path, {"kind": "party"}, resume=True)
    again.release()


def test_config_errors_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[party]\nn_agents = 1\n")
    code, _, err = run_cli(capsys, "party", "--config", bad, "--out", tmp_path / "runs")
    assert code == 2 and "bad.toml:1" in err


def test_missing_credential_exits_before_any_output(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("AICOLLECTIVE_API_KEY", raising=False)
    cfg = tmp_path / "remote.toml"
    cfg.write_text(REMOTE)
    code, _, err = run_cli(capsys, "party", "--config", cfg, "--out", tmp_path / "runs")
    assert code == 2 and "AICOLLECTIVE_API_KEY" in err
    assert not (tmp_path / "runs").exists()


def test_offline_flag_overrides_remote_config(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("AICOLLECTIVE_API_KEY", raising=False)
    cfg = tmp_path / "remote.toml"
    cfg.write_text(REMOTE)
    code, out, _ = run_cli(capsys, "party", "--config", cfg, "--out", tmp_path / "runs", "--offline")
    assert code == 0
    assert RunStore(out).manifest["models"]["chat"]["kind"] == "scripted"


def test_sentence_and_pgg_pipeline(small, party_run, capsys, tmp_path):
    runs = tmp_path / "runs"
    code, out, _ = run_cli(capsys, "sentence", "--config", small, "--out", runs, "--party-run", party_run.name)
    assert code == 0
    sent = Path(out)
    assert RunStore(sent).manifest["inputs"]["party_run"] == party_run.name
    scores = read_csv(sent / "exports" / "sentence_scores.csv")
    assert len(scores) - 1 == 3 * 1 * 2
    summary = read_csv(sent / "exports" / "sentence_summary.csv")
    assert len(summary) - 1 == 3 * 2

    code, out, _ = run_cli(capsys, "pgg", "--config", small, "--out", runs, "--party-run", party_run.name, "--scenario", "infection-chain")
    assert code == 0
    infection = read_csv(Path(out) / "exports" / "pgg_infection.csv")
    assert len(infection) - 1 == 3 * 2 * 3

    code, out, _ = run_cli(capsys, "pgg", "--config", small, "--out", runs, "--party-run", party_run.name, "--scenario", "baseline-pairs")
    assert code == 0
    assert (Path(out) / "exports" / "pgg_baseline.csv").is_file()


def test_collective_conditions_need_party_run(small, capsys, tmp_path):
    code, _, err = run_cli(capsys, "sentence", "--config", small, "--out", tmp_path / "runs", "--condition", "collective")
    assert code == 1 and "party" in err


def test_csv_cells():
    assert format_cell(None) == ""
    assert format_cell(True) == "true"
    assert format_cell(0.1) == repr(0.1)
    assert csv_text(["a", "b"], [["x,y", 1]]) == 'a,b\n"x,y",1\n'
    with pytest.raises(ValueError):
        csv_text(["a"], [[1, 2]])
    assert format_cell(float("nan")) == "nan"


# ---- remote runs against a mocked provider ------------------------------------


def provider(fail_after=None):
    state = {"chat": 0}

    def handler(request):
        assert request.headers["Authorization"] == f"Bearer {SECRET}"
        body = json.loads(request.content)
        if request.url.path.endswith("/embeddings"):
            data = [{"index": i, "embedding": [float(len(t) % 7 + 1), 1.0, float(i % 3)] + [0.5] * 5} for i, t in enumerate(body["input"])]
            return httpx.Response(200, json={"data": data})
        state["chat"] += 1
        if fail_after is not None and state["chat"] > fail_after:
            return httpx.Response(503)
        reply = "To L1. Accept L2. Accept L3. Lovely to meet you, shall we talk about the sea?"
        return httpx.Response(200, json={"choices": [{"message": {"content": reply}}]})

    return handler, state


REAL_CLIENT = httpx.Client


def patch_client(monkeypatch, handler):
    def client(*args, **kwargs):
        return REAL_CLIENT(transport=httpx.MockTransport(handler))

    monkeypatch.setattr(agents_mod.httpx, "Client", client)
    monkeypatch.setattr(agents_mod.time, "sleep", lambda s: None)


def test_secret_never_reaches_disk(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("AICOLLECTIVE_API_KEY", SECRET)
    handler, state = provider()
    patch_client(monkeypatch, handler)
    cfg = tmp_path / "remote.toml"
    cfg.write_text(REMOTE)
    code, out, err = run_cli(capsys, "-v", "party", "--config", cfg, "--out", tmp_path / "runs")
    assert code == 0, err
    assert state["chat"] > 0
    files = [p for p in (tmp_path / "runs").rglob("*") if p.is_file()]
    assert any(p.name == "run.log" for p in files)
    assert any(p.suffix == ".npy" for p in files)
    for p in files:
        assert SECRET.encode() not in p.read_bytes(), p
    assert SECRET not in out and SECRET not in err


def test_provider_outage_leaves_resumable_checkpoint(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("AICOLLECTIVE_API_KEY", SECRET)
    cfg = tmp_path / "remote.toml"
    cfg.write_text(REMOTE)
    runs = tmp_path / "runs"

    handler, state = provider()
    patch_client(monkeypatch, handler)
    code, full, _ = run_cli(capsys, "party", "--config", cfg, "--out", tmp_path / "reference")
    assert code == 0
    per_round = state["chat"] // 2

    # round one goes through, then the provider goes away
    handler, _ = provider(fail_after=per_round)
    patch_client(monkeypatch, handler)
    code, _, err = run_cli(capsys, "party", "--config", cfg, "--out", runs)
    assert code == 1 and "after 3 attempts" in err
    (run_dir,) = runs.iterdir()
    store = RunStore(run_dir)
    assert not store.finished
    assert store.exists("checkpoints/party_state.json")
    assert store.read_json("checkpoints/party_state.json")["round"] == 1

    handler, _ = provider()
    patch_client(monkeypatch, handler)
    code, out, err = run_cli(capsys, "party", "--config", cfg, "--out", runs, "--resume")
    assert code == 0, err
    assert RunStore(out).finished
    ref = Path(full)
    assert (run_dir / "transcripts" / "party_log.json").read_bytes() == (ref / "transcripts" / "party_log.json").read_bytes()
    assert (run_dir / "exports" / "party_ratios.csv").read_bytes() == (ref / "exports" / "party_ratios.csv").read_bytes()
