import dataclasses

import pytest

from conftest import ROOT_KEY, stub_install
from errors import SpawnError, SpawnRejected
from factory import (CODE_HASHES, POLICY_PREFER_DISTINCT, POLICY_STRICT, Factory, SpawnContext, SpawnProof,
                     client_verify_spawn, client_verify_witness)
from noticeboard import rendezvous_token
from simulator import ROLE_I1, ROLE_I2, ROLE_STORAGE, ROLE_WITNESS, Simulation


def spawn_with(subnets, seed=b"spawn-seed", n=2, capacity=None):
    sim = Simulation(seed)
    factory = Factory(sim, subnets, ROOT_KEY, capacity)
    proof = factory.spawn("dep-0001", n, POLICY_PREFER_DISTINCT, 200, b"\x11" * 32, b"\x22" * 32,
                          "refund-0001", stub_install(sim))
    return factory, proof


def test_spawn_places_on_distinct_subnets(spawned):
    _, factory, proof = spawned
    context = proof.context
    assert [e.role for e in context.entries] == [ROLE_I1, ROLE_I2, ROLE_STORAGE, ROLE_STORAGE, ROLE_WITNESS]
    assert len({e.subnet for e in context.entries}) == 5
    assert context.placement_distinct
    assert all(e.blackholed for e in context.entries)
    assert client_verify_witness(proof, ROOT_KEY, 2, POLICY_STRICT)


def test_single_subnet_is_not_distinct():
    _, proof = spawn_with(["only"])
    assert not proof.context.placement_distinct
    assert client_verify_spawn(proof, ROOT_KEY, 2, POLICY_PREFER_DISTINCT)
    with pytest.raises(SpawnRejected) as exc:
        client_verify_spawn(proof, ROOT_KEY, 2, POLICY_STRICT)
    assert exc.value.reason == "placement"


def test_witness_colocated_when_subnets_run_out():
    _, proof = spawn_with(["a", "b", "c", "d"])
    assert client_verify_spawn(proof, ROOT_KEY, 2, POLICY_STRICT)
    with pytest.raises(SpawnRejected) as exc:
        client_verify_witness(proof, ROOT_KEY, 2, POLICY_STRICT)
    assert exc.value.reason == "witness-placement"


def test_spawn_is_deterministic():
    _, a = spawn_with(["a", "b", "c", "d", "e"])
    _, b = spawn_with(["a", "b", "c", "d", "e"])
    assert a.to_bytes() == b.to_bytes()
    assert SpawnProof.from_bytes(a.to_bytes()) == a


def test_witness_ids_differ_between_transfers(spawned):
    sim, factory, proof = spawned
    second = factory.spawn("dep-0002", 2, POLICY_PREFER_DISTINCT, 200, b"\x11" * 32, b"\x33" * 32,
                           "refund-0002", stub_install(sim))
    assert proof.context.id_of(ROLE_WITNESS) != second.context.id_of(ROLE_WITNESS)
    _, other_seed = spawn_with(["a", "b", "c", "d", "e"], seed=b"other-seed")
    assert other_seed.context.id_of(ROLE_WITNESS) != proof.context.id_of(ROLE_WITNESS)


def test_wrong_root_key_rejected(spawned):
    _, _, proof = spawned
    with pytest.raises(SpawnRejected) as exc:
        client_verify_spawn(proof, b"\x08" * 32, 2)
    assert exc.value.reason == "signature"


def test_role_count_rejected(spawned):
    _, _, proof = spawned
    with pytest.raises(SpawnRejected) as exc:
        client_verify_spawn(proof, ROOT_KEY, 3)
    assert exc.value.reason == "role-count"


def test_code_hash_rejected(spawned):
    _, _, proof = spawned
    expected = dict(CODE_HASHES)
    expected[ROLE_STORAGE] = "00" * 32
    with pytest.raises(SpawnRejected) as exc:
        client_verify_spawn(proof, ROOT_KEY, 2, expected_code_hashes=expected)
    assert exc.value.reason == "code-hash"


def test_tampered_context_fails_signature(spawned):
    _, _, proof = spawned
    forged = dataclasses.replace(proof, context=dataclasses.replace(proof.context, refund_output="mallory"))
    with pytest.raises(SpawnRejected) as exc:
        client_verify_spawn(forged, ROOT_KEY, 2)
    assert exc.value.reason == "signature"


def test_context_serialization(spawned):
    _, _, proof = spawned
    context = SpawnContext.from_bytes(proof.context.to_bytes())
    assert context == proof.context
    assert context.commit() == proof.context.commit()
    assert context.teardown_subjects() == [context.id_of(ROLE_I1), context.id_of(ROLE_I2)] + context.storage_ids()
    transfer = context.transfer_context()
    assert transfer.deposit_id == "dep-0001"
    assert transfer.refund_output == "refund-0001"
    assert len(transfer.canister_ids) == 5


def test_capacity_exhausted():
    with pytest.raises(SpawnError) as exc:
        spawn_with(["a", "b"], capacity=4)
    assert exc.value.reason == "pool-exhausted"


def test_cleanup_child_destroys_once(spawned):
    sim, factory, proof = spawned
    i1 = proof.context.id_of(ROLE_I1)
    factory.cleanup_child(i1, {"deadline": 200, "served": False})
    assert not factory.children[i1].alive
    assert factory.destroyed == [i1]

    factory.cleanup_child(i1, {})
    factory.cleanup_child("I1-unknown", {})
    reasons = [r.get("reason") for r in sim.trace if r.kind == "reject"]
    assert reasons == ["already-destroyed", "not-a-child"]


def test_cleanup_notifies_witness(spawned):
    sim, factory, proof = spawned
    storage = proof.context.storage_ids()[0]
    factory.cleanup_child(storage, {"deadline": 200})
    sim.run()
    witness = proof.context.id_of(ROLE_WITNESS)
    received = [r.get("msg") for r in sim.trace if r.kind == "recv" and r.actor == witness]
    assert received == ["destruct-intent", "destroyed"]


def test_resolve_rendezvous(spawned):
    _, factory, proof = spawned
    i2 = proof.context.id_of(ROLE_I2)
    assert factory.resolve_rendezvous(3, rendezvous_token(3, i2)) is proof
    assert factory.resolve_rendezvous(4, rendezvous_token(3, i2)) is None
