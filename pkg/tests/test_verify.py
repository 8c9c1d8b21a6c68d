"""Offline verifier: healthy runs pass, tampered artifacts fail."""

import json
import os

import pytest

from inceptsim import events
from inceptsim.errors import MissingArtifacts
from inceptsim.runner import run
from inceptsim.verify import verify_exit_code, verify_run

from conftest import scenario_path


def fresh_run(tmp_path, name, overrides=None, sub="out"):
    report = run(scenario_path(name), str(tmp_path / sub), overrides or [])
    return os.path.dirname(report.event_log_path)


@pytest.mark.parametrize("name", ["trap_loop", "vrchat_relay", "fig6_zelle", "defense_suite", "alt_store_mode"])
def test_fresh_runs_verify_clean(tmp_path, name):
    checks = verify_run(fresh_run(tmp_path, name))
    assert verify_exit_code(checks) == 0, [c.line() for c in checks if not c.passed]


def rewrite_log(run_dir, mutate):
    path = os.path.join(run_dir, "events.jsonl")
    records = events.read_log(path)
    records = mutate(records)
    events.write_log(path, records)


def test_reordered_seq_fails_fifo(tmp_path):
    run_dir = fresh_run(tmp_path, "vrchat_relay")

    def swap_seqs(records):
        delivered = [
            i
            for i, r in enumerate(records)
            if r["kind"] == events.RELAY_MESSAGE and not r["dropped"]
        ]
        a, b = delivered[3], delivered[4]
        records[a]["seq"], records[b]["seq"] = records[b]["seq"], records[a]["seq"]
        return records

    rewrite_log(run_dir, swap_seqs)
    checks = verify_run(run_dir)
    fifo = next(c for c in checks if c.name == "relay_fifo")
    assert not fifo.passed
    assert verify_exit_code(checks) == 1


def test_latency_tamper_fails_bounds(tmp_path):
    run_dir = fresh_run(tmp_path, "vrchat_relay")

    def inflate(records):
        for r in records:
            if r["kind"] == events.RELAY_MESSAGE and not r["dropped"]:
                r["latency_s"] = 2.5
                break
        return records

    rewrite_log(run_dir, inflate)
    checks = verify_run(run_dir)
    bounds = next(c for c in checks if c.name == "relay_latency_bounds")
    assert not bounds.passed


def test_duty_cycled_trap_reports_partial_counts(tmp_path):
    run_dir = fresh_run(
        tmp_path,
        "trap_loop",
        overrides=["attack.duty_cycle.intercept=1", "attack.duty_cycle.sleep=2"],
    )
    checks = verify_run(run_dir)
    trap = next(c for c in checks if c.name == "trap_invariant")
    assert trap.passed
    assert "partial trapping" in trap.detail
    # the verifier recounts from the log: 1 of 3 exits intercepted
    assert "/50 exits trapped" in trap.detail
    trapped = int(trap.detail.split("/")[0].rsplit(" ", 1)[-1])
    assert 0 < trapped < 50


def test_settled_home_tamper_fails_trap(tmp_path):
    run_dir = fresh_run(tmp_path, "trap_loop")

    def fake_settle(records):
        last = records[-1]["t_ms"]
        records.append(
            {"t_ms": last + 1, "kind": events.ACTIVITY_SETTLED, "package": "home_env"}
        )
        return records

    rewrite_log(run_dir, fake_settle)
    checks = verify_run(run_dir)
    trap = next(c for c in checks if c.name == "trap_invariant")
    assert not trap.passed


def test_alert_tamper_fails_detector_agreement(tmp_path):
    run_dir = fresh_run(tmp_path, "defense_suite")

    def drop_alert(records):
        return [r for r in records if r["kind"] != events.ALERT]

    rewrite_log(run_dir, drop_alert)
    checks = verify_run(run_dir)
    det = next(c for c in checks if c.name == "detector_agreement")
    assert not det.passed


def test_missing_artifacts(tmp_path):
    with pytest.raises(MissingArtifacts):
        verify_run(str(tmp_path / "nothing_here"))
