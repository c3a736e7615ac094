import json

import pytest

from streamtrain import events as ev
from streamtrain.cli import main
from streamtrain.tile_store import load_store


def _write(tmp_path, doc, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


SMALL = {"model": {"num_layers": 8, "hidden_size": 32, "ffn_size": 64, "vocab_size": 128},
         "data": {"tokens": 16}, "engine": {"k_ckpt": 2}}


def test_train_default_decreasing_loss(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out)]) == 0
    rows = [json.loads(ln) for ln in (out / "steps.jsonl").read_text().splitlines()]
    assert len(rows) == 50
    assert rows[-1]["loss"] < rows[0]["loss"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["violations"] == []
    assert load_store(out / "store.mgts").checksum() == summary["store_checksum"]
    assert main(["verify", str(out / "trace.jsonl")]) == 0


def test_train_verify_passes(tmp_path):
    out = tmp_path / "v"
    assert main(["train", "--config", _write(tmp_path, SMALL), "--verify", "--steps", "3",
                 "--out", str(out), "--strict"]) == 0
    rows = [json.loads(ln) for ln in (out / "steps.jsonl").read_text().splitlines()]
    assert all(r["verified"] for r in rows)


def test_train_reports_byte_identical(tmp_path):
    cfg = _write(tmp_path, SMALL)
    for d in ("a", "b"):
        assert main(["train", "--config", cfg, "--steps", "2", "--seed", "4",
                     "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a/steps.jsonl").read_bytes() == (tmp_path / "b/steps.jsonl").read_bytes()
    assert (tmp_path / "a/store.mgts").read_bytes() == (tmp_path / "b/store.mgts").read_bytes()


def test_train_infeasible(tmp_path, capsys):
    cfg = _write(tmp_path, {"engine": {"arena_capacity": 1000}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "x")]) == 3
    assert "infeasible" in capsys.readouterr().err
    assert not (tmp_path / "x" / "steps.jsonl").exists()


def test_bad_config_is_usage_error(tmp_path):
    assert main(["train", "--config", _write(tmp_path, {"bogus": 1}),
                 "--out", str(tmp_path / "x")]) == 2


def test_simulate_and_ablate(tmp_path, capsys):
    out = tmp_path / "sim"
    cfg = _write(tmp_path, {"model": {"num_layers": 32, "hidden_size": 4096,
                                      "ffn_size": 11008, "vocab_size": 32000},
                            "data": {"tokens": 4096}})
    assert main(["simulate", "--config", cfg, "--profile", "GH200", "--out", str(out),
                 "--ablate", "double_buffering"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert 0 < res["busy_fraction"]["Compute"] <= 1
    assert "delta" in res["ablation"]
    for name in ("timeline.json", "timeline_gantt.csv", "overlap.json", "ablation.json",
                 "ablate_base.json", "ablate_variant.json"):
        assert (out / name).exists()


def test_simulate_unknown_profile(tmp_path):
    assert main(["simulate", "--profile", "TPUv9", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as info:
        main(["simulate", "--ablate", "colour"])
    assert info.value.code == 2


def test_layout_outputs(capsys):
    assert main(["layout", "--params", "70e9"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["persistent_host"] == 840 * 10**9
    assert main(["layout"]) == 0
    first = capsys.readouterr().out
    assert main(["layout"]) == 0
    assert capsys.readouterr().out == first
    doc = json.loads(first)
    assert all(s["offset"] % 4096 == 0 for s in doc["layout"]["sections"])
    assert {v["profile"] for v in doc["feasibility"]} == {"GH200", "H200", "PCIe-Gen4"}


def test_verify_corrupted_and_empty(tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["train", "--steps", "1", "--out", str(out)]) == 0
    log = ev.EventLog.load(out / "trace.jsonl")
    recs = list(log.records)
    i = next(n for n, r in enumerate(recs) if r.kind == ev.WEIGHTS_READY and r.layer == 1)
    j = next(n for n, r in enumerate(recs) if r.kind == ev.BIND and r.layer == 1)
    recs.insert(j, recs.pop(i))
    bad = ev.EventLog(**log.header)
    for r in recs:
        bad.record(r.lane, r.kind, r.layer, r.buffer, r.phase, r.t0_ns, r.t1_ns, **r.info)
    bad.save(tmp_path / "bad.jsonl")
    capsys.readouterr()
    assert main(["verify", str(tmp_path / "bad.jsonl")]) == 1
    doc = json.loads(capsys.readouterr().out)
    assert [v["rule"] for v in doc["violations"]] == ["a"]
    (tmp_path / "empty.jsonl").write_text("")
    assert main(["verify", str(tmp_path / "empty.jsonl")]) == 2
    assert "malformed" in capsys.readouterr().err


def test_train_does_not_touch_other_outputs(tmp_path):
    # layout and simulate never write store files
    assert main(["simulate", "--out", str(tmp_path / "s")]) == 0
    assert not list((tmp_path / "s").glob("*.mgts"))
