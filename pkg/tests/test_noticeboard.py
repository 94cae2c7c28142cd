import dataclasses

import pytest

from errors import ChainError, FinalizeRejected
from factory import CODE_HASHES
from noticeboard import (ANNOUNCE, DESTRUCT_INTENT, DESTRUCT_PROOF, GENESIS, Noticeboard, event_digest,
                         finalize_check, load_export, load_export_bytes, verify_chain)
from simulator import ROLE_I1, ROLE_I2, ROLE_WITNESS


@pytest.fixture
def board(spawned):
    sim, _, _ = spawned
    return Noticeboard(sim)


def announce(board, context, hint=b"\xaa" * 32):
    return board.append_announce(context.id_of(ROLE_I1), hint, CODE_HASHES[ROLE_I1], context.id_of(ROLE_I2))


def honest_finalize(board, context, idx, subjects=None, author=None):
    commit = context.commit()
    witness = context.id_of(ROLE_WITNESS)
    subjects = context.teardown_subjects() if subjects is None else subjects
    proofs = [event_digest(DESTRUCT_PROOF, s, commit) for s in subjects]
    board.append_finalize(author or witness, idx, subjects, proofs, event_digest(DESTRUCT_INTENT, witness, commit))


def test_chain_links_records(board, spawned):
    _, _, proof = spawned
    assert board.head == GENESIS
    idx = announce(board, proof.context)
    honest_finalize(board, proof.context, idx)
    assert [r.kind for r in board.records] == [ANNOUNCE, "Finalize"]
    assert verify_chain(board.records) == board.head
    assert board.records[1].chain == board.records[1].compute_chain(board.records[0].chain)


def test_announce_indices_increase(board, spawned):
    _, _, proof = spawned
    assert announce(board, proof.context, b"\x01" * 32) == 0
    assert announce(board, proof.context, b"\x02" * 32) == 1
    assert board.find_announce(b"\x02" * 32).idx == 1
    assert board.find_announce(b"\x03" * 32) is None


def test_finalize_requires_announce(board, spawned):
    _, _, proof = spawned
    with pytest.raises(FinalizeRejected) as exc:
        honest_finalize(board, proof.context, 5)
    assert exc.value.reason == "no-announce"


def test_edited_record_breaks_chain(board, spawned):
    _, _, proof = spawned
    announce(board, proof.context)
    announce(board, proof.context, b"\xbb" * 32)
    records = list(board.records)
    records[0] = dataclasses.replace(records[0], body={**records[0].body, "hint": "00" * 32})
    with pytest.raises(ChainError) as exc:
        verify_chain(records)
    assert exc.value.reason == "chain-broken"


def test_export_detects_truncation(tmp_path, board, spawned):
    _, _, proof = spawned
    idx = announce(board, proof.context)
    honest_finalize(board, proof.context, idx)
    path = tmp_path / "noticeboard.bin"
    board.export(str(path))

    export = load_export(str(path))
    assert export.verify() == board.head
    assert export.records == board.records

    export.records = export.records[:-1]
    with pytest.raises(ChainError) as exc:
        export.verify()
    assert exc.value.reason == "truncated"


def test_bad_export_bytes():
    with pytest.raises(ChainError) as exc:
        load_export_bytes(b"d6:format5:othere")
    assert exc.value.reason == "bad-export"


def test_finalize_check_accepts_honest_run(board, spawned):
    _, _, proof = spawned
    idx = announce(board, proof.context)
    honest_finalize(board, proof.context, idx)
    assert finalize_check(board, idx, proof.context)
    assert finalize_check(load_export_bytes(board.export_bytes()), idx, proof.context)


def test_finalize_check_missing_finalize(board, spawned):
    _, _, proof = spawned
    idx = announce(board, proof.context)
    with pytest.raises(FinalizeRejected) as exc:
        finalize_check(board, idx, proof.context)
    assert exc.value.reason == "no-finalize"


def test_finalize_check_wrong_author(board, spawned):
    _, _, proof = spawned
    idx = announce(board, proof.context)
    honest_finalize(board, proof.context, idx, author=proof.context.id_of(ROLE_I2))
    with pytest.raises(FinalizeRejected) as exc:
        finalize_check(board, idx, proof.context)
    assert exc.value.reason == "author"


def test_finalize_check_missing_proof(board, spawned):
    _, _, proof = spawned
    idx = announce(board, proof.context)
    honest_finalize(board, proof.context, idx, subjects=proof.context.teardown_subjects()[:-1])
    with pytest.raises(FinalizeRejected) as exc:
        finalize_check(board, idx, proof.context)
    assert exc.value.reason == "proof-set"


def test_finalize_check_duplicate(board, spawned):
    _, _, proof = spawned
    idx = announce(board, proof.context)
    honest_finalize(board, proof.context, idx)
    honest_finalize(board, proof.context, idx)
    with pytest.raises(FinalizeRejected) as exc:
        finalize_check(board, idx, proof.context)
    assert exc.value.reason == "duplicate-finalize"


def test_finalize_check_foreign_context(board, spawned):
    _, _, proof = spawned
    idx = announce(board, proof.context)
    honest_finalize(board, proof.context, idx)
    other = dataclasses.replace(proof.context, deposit_id="dep-other",
                                entries=tuple(reversed(proof.context.entries)))
    # same I2, so the announce binds; the proofs were made for another commit
    with pytest.raises(FinalizeRejected) as exc:
        finalize_check(board, idx, other)
    assert exc.value.reason == "proof-set"


def test_finalize_check_rendezvous_binding(board, spawned):
    _, _, proof = spawned
    idx = board.append_announce("I1-x", b"\xaa" * 32, CODE_HASHES[ROLE_I1], "I2-somebody-else")
    with pytest.raises(FinalizeRejected) as exc:
        finalize_check(board, idx, proof.context)
    assert exc.value.reason == "announce-binding"


def test_finalize_check_broken_chain(board, spawned):
    _, _, proof = spawned
    idx = announce(board, proof.context)
    honest_finalize(board, proof.context, idx)
    records = list(board.records)
    records[1] = dataclasses.replace(records[1], author="W-forged")
    with pytest.raises(FinalizeRejected) as exc:
        finalize_check(records, idx, proof.context)
    assert exc.value.reason == "chain"
