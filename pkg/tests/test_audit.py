import pytest

from audit import audit_observation_logs, audit_records, load_trace, spawn_contexts
from errors import FinalizeRejected
from noticeboard import load_export_bytes
from protocol import ScenarioRun, run_scenario
from scenario import Faults, ScenarioConfig
from simulator import TraceRecord


def export_of(world):
    return load_export_bytes(world.board.export_bytes())


def trace_record(tick, actor, kind, **fields):
    return TraceRecord(tick, actor, kind, tuple(sorted(fields.items())))


@pytest.mark.parametrize("run", range(100))
def test_honest_runs_are_clean(run):
    config = ScenarioConfig(dim=2 + run % 3, seed=format(run, '04x'))
    outcome, world = run_scenario(config)
    report = audit_records(world.sim.trace, export_of(world))
    assert report.ok, report.lines()
    assert report.finalized == {outcome.idx: True}


def test_observations_are_one_sided(config):
    _, world = run_scenario(config)
    report = audit_observation_logs(world.sim.trace)
    assert set(report.endpoints.values()) == {"sender", "recipient"}
    for actor, seen in report.observations.items():
        assert len(seen) <= 1, actor


def test_misrouted_messages_flagged():
    records = [
        trace_record(0, "world", "endpoint", principal="Client-a", side="sender"),
        trace_record(0, "world", "endpoint", principal="Client-b", side="recipient"),
        trace_record(5, "I1-x", "recv", msg="deposit", src="Client-a"),
        trace_record(6, "I1-x", "recv", msg="fetch-capsule", src="Client-b"),
        trace_record(7, "C-y", "recv", msg="fetch", src="Client-b"),
        trace_record(8, "C-z", "recv", msg="store", src="I1-x"),
    ]
    report = audit_observation_logs(records)
    assert not report.ok
    assert report.violations == ["storage-contact: C-y reached by Client-b", "linked: I1-x observed both endpoints"]
    assert report.observations["C-z"] == set()


def test_forged_finalize_reported(config):
    config.faults = Faults(forge_finalize=True)
    run = ScenarioRun(config)
    with pytest.raises(FinalizeRejected):
        run.execute()
    report = audit_records(run.world.sim.trace, export_of(run.world))
    assert report.chain_ok
    assert not report.ok
    assert any("duplicate-finalize" in v for v in report.violations)


def test_truncated_export_reported(config):
    _, world = run_scenario(config)
    export = export_of(world)
    export.records = export.records[:-1]
    report = audit_records(world.sim.trace, export)
    assert not report.chain_ok
    assert "chain: truncated" in report.violations
    assert not report.ok


def test_trace_file_round_trip(tmp_path, config):
    _, world = run_scenario(config)
    path = tmp_path / "trace.txt"
    world.sim.write_trace(str(path))
    records = load_trace(str(path))
    assert [r.to_line() for r in records] == world.sim.trace_lines()
    contexts = spawn_contexts(records)
    assert len(contexts) == 1
    assert contexts[0] == world.factory.certified[0].context
