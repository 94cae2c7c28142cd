import pytest

from crypto_suite import DetRandom
from errors import DepositRejected, FinalizeRejected, ReclaimRejected, RetrievalRejected, ScenarioError, SpawnRejected
from kem_capsule import auth_proof, decapsulate
from ledger import MIXER_POOL
from protocol import (World, deposit, discover, fetch_capsule, open_transfer, receive_transfer, reclaim_flow, resolve,
                      retrieve, run_scenario)
from router import FINALIZED, RECLAIMED, SEALED
from scenario import Faults, ScenarioConfig
from simulator import EPHEMERAL_ROLES, MSG_DEPOSIT, MSG_RETRIEVE, ROLE_I1, ROLE_I2, role_of
from utils import flip_bit

PAYLOAD = b"the ledger is under the third stone"


def sealed_transfer(config):
    """Allocate and deposit, stopping before the recipient acts."""
    world = World.from_config(config.validate())
    alice = world.new_sender(config.amount)
    bob = world.new_recipient()
    world.ledger.close_minting()
    open_transfer(world, alice, config.amount)
    receipt = deposit(world, alice, bob.pub, PAYLOAD)
    return world, alice, bob, receipt


def test_happy_path(config):
    outcome, world = run_scenario(config)
    assert outcome.payload_match
    assert outcome.csrn_match
    assert outcome.finalized
    assert outcome.state == FINALIZED
    assert world.router.deposits[outcome.deposit_id].history == ["Allocated", "Created", "Sealed", "Finalized"]
    assert world.ledger.balance(MIXER_POOL) == 0
    assert sum(world.ledger.balances.values()) == config.amount


def test_every_ephemeral_is_destroyed(config):
    _, world = run_scenario(config)
    ephemerals = [a for a in world.sim.actors.values() if role_of(a.actor_id) in EPHEMERAL_ROLES]
    assert len(ephemerals) == config.n + 3
    assert all(not a.alive for a in ephemerals)
    assert sorted(world.factory.destroyed) == sorted(a.actor_id for a in ephemerals)


def test_payout_reaches_recipient(config):
    world, alice, bob, receipt = sealed_transfer(config)
    delivery = receive_transfer(world, bob, receipt.hint)
    world.sim.run()
    assert delivery.payload == PAYLOAD
    assert delivery.csrn == receipt.csrn
    assert world.ledger.balance(bob.payout_output) == config.amount
    assert world.ledger.balance(alice.funding_account) == 0


def test_deposit_seals_and_mixes(config):
    world, alice, _, receipt = sealed_transfer(config)
    record = world.router.deposits[receipt.deposit_id]
    assert record.state == SEALED
    assert record.idx == receipt.idx
    assert world.ledger.balance(MIXER_POOL) == config.amount
    assert world.ledger.balance(record.subaccount) == 0
    mixed = [e for e in world.ledger.log if e.memo == "mix"]
    assert sum(e.amount for e in mixed) == config.amount


def test_runs_are_deterministic(config):
    _, first = run_scenario(config)
    _, second = run_scenario(ScenarioConfig(dim=4, seed="0badc0de"))
    assert first.sim.trace_lines() == second.sim.trace_lines()
    _, other = run_scenario(ScenarioConfig(dim=4, seed="0badc0df"))
    assert other.sim.trace_lines() != first.sim.trace_lines()


def test_dead_storage_aborts_deposit(config):
    config.faults = Faults(kill_storage=[1])
    world = World.from_config(config.validate())
    alice = world.new_sender(config.amount)
    bob = world.new_recipient()
    open_transfer(world, alice, config.amount)
    with pytest.raises(DepositRejected) as exc:
        deposit(world, alice, bob.pub, PAYLOAD)
    assert exc.value.reason == "storage-commit"
    world.sim.run()
    # funds only move at seal time
    assert world.ledger.balance(alice.funding_account) == config.amount
    assert world.board.records == []


def test_corrupt_replica_breaks_quorum(config):
    config.faults = Faults(corrupt_storage=[0])
    with pytest.raises(RetrievalRejected) as exc:
        run_scenario(config)
    assert exc.value.reason == "quorum"


def test_single_replica_quorum(config):
    config.t = 1
    outcome, _ = run_scenario(config)
    assert outcome.finalized


def test_wrong_proof_rejected(config):
    config.faults = Faults(wrong_h=True)
    with pytest.raises(RetrievalRejected) as exc:
        run_scenario(config)
    assert exc.value.reason == "bad-proof"


def test_random_proofs_never_unlock(config):
    world, _, bob, receipt = sealed_transfer(config)
    idx, token = discover(world.board, receipt.hint)
    proof = resolve(world, idx, token)
    i2 = world.sim.actors[proof.context.id_of(ROLE_I2)]
    fetch_capsule(world, bob, i2.actor_id, receipt.hint)
    rng = DetRandom("test-random-h", b"seed")
    assert not any(i2.verify_proof(rng.read(32)) for _ in range(10_000))
    assert not i2.verify_proof(b"short")


def test_second_retrieve_rejected(config):
    world, _, bob, receipt = sealed_transfer(config)
    delivery = receive_transfer(world, bob, receipt.hint)
    i2_id = delivery.proof.context.id_of(ROLE_I2)
    with pytest.raises(RetrievalRejected) as exc:
        retrieve(world, bob, i2_id, bytes(32))
    assert exc.value.reason == "already-served"


def test_deposit_checks_and_single_use(config):
    world = World.from_config(config.validate())
    alice = world.new_sender(config.amount)
    bob = world.new_recipient()
    proof = open_transfer(world, alice, config.amount)
    i1_id = proof.context.id_of(ROLE_I1)
    alice.send(i1_id, MSG_DEPOSIT, deposit_id=proof.context.deposit_id, tuple=b"", h=bytes(32), fee_proof=b"")
    world.sim.run_until(lambda: alice.has_reply(("reject",)))
    assert alice.take(("reject",)).body["reason"] == "fee"

    deposit(world, alice, bob.pub, PAYLOAD)
    alice.send(i1_id, MSG_DEPOSIT, deposit_id=proof.context.deposit_id, tuple=b"", h=bytes(32), fee_proof=b"x")
    world.sim.run()
    # I1 is gone once the deposit is announced
    drops = [r for r in world.sim.trace if r.kind == "drop" and r.get("msg") == MSG_DEPOSIT]
    assert len(drops) == 1
    assert not alice.inbox


def test_retrieve_before_capsule(config):
    world, _, bob, receipt = sealed_transfer(config)
    idx, token = discover(world.board, receipt.hint)
    i2_id = resolve(world, idx, token).context.id_of(ROLE_I2)
    with pytest.raises(RetrievalRejected) as exc:
        retrieve(world, bob, i2_id, bytes(32))
    assert exc.value.reason == "no-capsule"


def test_unknown_hint(config):
    world, _, bob, _ = sealed_transfer(config)
    with pytest.raises(RetrievalRejected) as exc:
        receive_transfer(world, bob, bytes(32))
    assert exc.value.reason == "not-found"


def test_reclaim_after_ttl(config):
    world, alice, _, receipt = sealed_transfer(config)
    world.sim.advance_to(receipt.deadline)
    refund = reclaim_flow(world, alice, receipt.deposit_id, alice.secrets.r, alice.secrets.alpha)
    assert refund == config.amount
    assert world.router.deposits[receipt.deposit_id].state == RECLAIMED
    assert world.ledger.balance(alice.refund_output) == config.amount
    assert world.ledger.balance(MIXER_POOL) == 0


def test_skip_retrieve_scenario(config):
    config.faults = Faults(skip_retrieve=True)
    outcome, _ = run_scenario(config)
    assert outcome.reclaimed
    assert outcome.refund == config.amount


def test_reclaim_too_early(config):
    world, alice, _, receipt = sealed_transfer(config)
    with pytest.raises(ReclaimRejected) as exc:
        reclaim_flow(world, alice, receipt.deposit_id, alice.secrets.r, alice.secrets.alpha)
    assert exc.value.reason == "too-early"


def test_reclaim_after_finalize(config):
    world, alice, bob, receipt = sealed_transfer(config)
    receive_transfer(world, bob, receipt.hint)
    world.sim.run()
    world.sim.advance_to(receipt.deadline)
    with pytest.raises(ReclaimRejected) as exc:
        reclaim_flow(world, alice, receipt.deposit_id, alice.secrets.r, alice.secrets.alpha)
    assert exc.value.reason == "finalized"


def test_reclaim_wrong_principal(config):
    world, alice, _, receipt = sealed_transfer(config)
    world.sim.advance_to(receipt.deadline)
    mallory = world.new_client()
    with pytest.raises(ReclaimRejected) as exc:
        reclaim_flow(world, mallory, receipt.deposit_id, alice.secrets.r, alice.secrets.alpha, proof=alice.proof)
    assert exc.value.reason == "wrong-principal"


@pytest.mark.parametrize("variant,reason", [
    ("r", "bad-R"),
    ("alpha", "bad-alpha"),
    ("idx", "bad-mac"),
    ("n", "bad-mac"),
])
def test_reclaim_rejections_then_honest_reclaim(config, variant, reason):
    world, alice, _, receipt = sealed_transfer(config)
    world.sim.advance_to(receipt.deadline)
    r, alpha = alice.secrets.r, alice.secrets.alpha
    kwargs = {}
    if variant == "r":
        r = flip_bit(r, 5)
    elif variant == "alpha":
        alpha = flip_bit(alpha, 5)
    elif variant == "idx":
        kwargs["idx"] = receipt.idx + 1
    else:
        kwargs["challenge"] = bytes(32)
    with pytest.raises(ReclaimRejected) as exc:
        reclaim_flow(world, alice, receipt.deposit_id, r, alpha, **kwargs)
    assert exc.value.reason == reason
    assert world.router.deposits[receipt.deposit_id].state == SEALED

    # a failed claim burns its challenge; a fresh one still works
    assert reclaim_flow(world, alice, receipt.deposit_id, alice.secrets.r, alice.secrets.alpha) == config.amount


def test_reclaim_only_once(config):
    world, alice, _, receipt = sealed_transfer(config)
    world.sim.advance_to(receipt.deadline)
    reclaim_flow(world, alice, receipt.deposit_id, alice.secrets.r, alice.secrets.alpha)
    with pytest.raises(ReclaimRejected) as exc:
        reclaim_flow(world, alice, receipt.deposit_id, alice.secrets.r, alice.secrets.alpha)
    assert exc.value.reason == "not-sealed"


def test_forged_finalize_is_not_accepted(config):
    config.faults = Faults(forge_finalize=True)
    with pytest.raises(FinalizeRejected) as exc:
        run_scenario(config)
    assert exc.value.reason == "duplicate-finalize"


def test_forged_finalize_does_not_block_reclaim(config):
    config.faults = Faults(forge_finalize=True, skip_retrieve=True)
    outcome, world = run_scenario(config)
    assert outcome.reclaimed
    assert len(world.board.finalizes_for(outcome.idx)) == 1


def test_insufficient_funds(config):
    world = World.from_config(config.validate())
    alice = world.new_sender(10)
    with pytest.raises(SpawnRejected) as exc:
        open_transfer(world, alice, 11)
    assert exc.value.reason == "insufficient-funds"


def test_config_validation():
    with pytest.raises(ScenarioError):
        ScenarioConfig(t=3, n=2).validate()
    with pytest.raises(ScenarioError):
        ScenarioConfig(faults=Faults(kill_storage=[2])).validate()
    with pytest.raises(ScenarioError):
        ScenarioConfig.from_dict({"dim": 4, "colour": "blue"})
    with pytest.raises(ScenarioError):
        ScenarioConfig(seed="not-hex").validate()


def test_seed_override_from_environment():
    config = ScenarioConfig(seed="aa").apply_overrides(seed="bb", environ={"RDMPF_SEED": "cc"})
    assert config.seed == "cc"
    assert ScenarioConfig(seed="aa").apply_overrides(seed="bb", environ={}).seed == "bb"


@pytest.mark.parametrize("fields,reason", [
    ({"tuple": b"\x00garbage", "h": bytes(32)}, "bad-tuple"),
    ({"tuple": b"", "h": bytes(32)}, "bad-tuple"),
    ({"tuple": b"\x00garbage"}, "bad-h"),
    ({"tuple": b"\x00garbage", "h": b"short"}, "bad-h"),
])
def test_malformed_deposit_rejected_by_live_i1(config, fields, reason):
    world = World.from_config(config.validate())
    alice = world.new_sender(config.amount)
    bob = world.new_recipient()
    proof = open_transfer(world, alice, config.amount)
    i1_id = proof.context.id_of(ROLE_I1)
    alice.send(i1_id, MSG_DEPOSIT, deposit_id=proof.context.deposit_id, fee_proof=b"x", **fields)
    world.sim.run_until(lambda: alice.has_reply(("reject",)))
    assert alice.take(("reject",)).body["reason"] == reason
    assert world.sim.actors[i1_id].alive

    # I1 is still open for the honest tuple
    receipt = deposit(world, alice, bob.pub, PAYLOAD)
    assert world.router.deposits[receipt.deposit_id].state == SEALED


def test_retrieve_without_payout_keeps_i2_unserved(config):
    world, _, bob, receipt = sealed_transfer(config)
    idx, token = discover(world.board, receipt.hint)
    proof = resolve(world, idx, token)
    i2 = world.sim.actors[proof.context.id_of(ROLE_I2)]
    capsule = fetch_capsule(world, bob, i2.actor_id, receipt.hint)
    keys = decapsulate(world.params, bob.secret, bob.pub, capsule, proof.context.transfer_context())
    h = auth_proof(keys.k_auth)

    bob.send(i2.actor_id, MSG_RETRIEVE, h=h)
    world.sim.run_until(lambda: bob.has_reply(("reject",)))
    assert bob.take(("reject",)).body["reason"] == "no-payout"
    assert not i2.served

    delivered = retrieve(world, bob, i2.actor_id, h)
    assert delivered.body["csrn"] == receipt.csrn
