"""Certified append-only noticeboard with Announce and Finalize records.

Every record carries a chain hash over the previous record's hash and its own
bencoded body. Exports carry the head hash and record count so truncation is
detectable.
"""
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Union

import bcoding
import structlog
from cryptography.hazmat.primitives import constant_time

from crypto_suite import DIGEST_SIZE, DomainTag, blake2s_event
from errors import ChainError, FinalizeRejected
from simulator import MSG_ANNOUNCE, MSG_ANNOUNCED, MSG_FINALIZE, ROLE_NOTICEBOARD, Actor, Message, Simulation
from utils import decode_string, encode_index, get_key

logger = structlog.get_logger(__name__)

ANNOUNCE = "Announce"
FINALIZE = "Finalize"
GENESIS = bytes(DIGEST_SIZE)
EXPORT_FORMAT = "noticeboard/1"

# Witness event kinds
COMMIT = "Commit"
DESTRUCT_INTENT = "DestructIntent"
DESTRUCT_PROOF = "DestructProof"


# Digest of a witness event bound to a certified spawn context
def event_digest(kind: str, subject: str, context_commit: bytes) -> bytes:
    return blake2s_event(DomainTag.WITNESS_EVENT, [kind.encode(), subject.encode(), context_commit])


def rendezvous_token(idx: int, i2_id: str) -> bytes:
    return blake2s_event(DomainTag.CONTEXT_COMMIT, [encode_index(idx), i2_id.encode()])


@dataclass(frozen=True)
class NoticeboardRecord:
    kind: str
    idx: int
    seq: int
    author: str
    tick: int
    body: Dict[str, Any]
    chain: bytes = b""

    def body_bytes(self) -> bytes:
        return bcoding.bencode({
            "author": self.author,
            "body": self.body,
            "idx": self.idx,
            "kind": self.kind,
            "seq": self.seq,
            "tick": self.tick,
        })

    def compute_chain(self, prev: bytes) -> bytes:
        return blake2s_event(DomainTag.CONTEXT_COMMIT, [prev, self.body_bytes()])

    def to_dict(self) -> Dict[str, Any]:
        return {"author": self.author, "body": self.body, "chain": self.chain.hex(), "idx": self.idx,
                "kind": self.kind, "seq": self.seq, "tick": self.tick}

    @classmethod
    def from_dict(cls, data: Dict) -> "NoticeboardRecord":
        return cls(
            kind=decode_string(get_key(data, "kind")),
            idx=int(get_key(data, "idx")),
            seq=int(get_key(data, "seq")),
            author=decode_string(get_key(data, "author")),
            tick=int(get_key(data, "tick")),
            body=_text_tree(get_key(data, "body")),
            chain=bytes.fromhex(decode_string(get_key(data, "chain"))),
        )


def _text_tree(value: Any) -> Any:
    if isinstance(value, dict):
        return {decode_string(k): _text_tree(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_text_tree(v) for v in value]
    if isinstance(value, bytes):
        return decode_string(value)
    return value


# Recompute every chain hash; optionally compare with an exported head and count
def verify_chain(records: Sequence[NoticeboardRecord], head: Optional[bytes] = None,
                 count: Optional[int] = None) -> bytes:
    prev = GENESIS
    for position, record in enumerate(records):
        if record.seq != position:
            raise ChainError("sequence", f"record {position} has seq {record.seq}")
        expected = record.compute_chain(prev)
        if not constant_time.bytes_eq(expected, record.chain):
            raise ChainError(detail=f"record {position}")
        prev = record.chain
    if count is not None and count != len(records):
        raise ChainError("truncated", f"{len(records)} of {count} records")
    if head is not None and not constant_time.bytes_eq(head, prev):
        raise ChainError("truncated", "head hash mismatch")
    return prev


class Noticeboard(Actor):
    role = ROLE_NOTICEBOARD

    def __init__(self, sim: Simulation):
        super().__init__(sim, subnet="permanent", actor_id=f"{ROLE_NOTICEBOARD}-main")
        self.records: List[NoticeboardRecord] = []
        self.next_idx = 0

    @property
    def head(self) -> bytes:
        return self.records[-1].chain if self.records else GENESIS

    def _append(self, kind: str, idx: int, author: str, body: Dict[str, Any]) -> NoticeboardRecord:
        draft = NoticeboardRecord(kind, idx, len(self.records), author, self.sim.tick, body)
        record = NoticeboardRecord(kind, idx, draft.seq, author, draft.tick, body, draft.compute_chain(self.head))
        self.records.append(record)
        self.record("append", entry=kind, idx=idx, author=author, chain=record.chain)
        return record

    def append_announce(self, author: str, hint: bytes, code_hash: str, i2_id: str) -> int:
        idx = self.next_idx
        self.next_idx += 1
        self._append(ANNOUNCE, idx, author, {
            "code_hash": code_hash,
            "hint": hint.hex(),
            "rendezvous_token": rendezvous_token(idx, i2_id).hex(),
        })
        logger.info("noticeboard.announce", idx=idx, hint=hint.hex()[:16])
        return idx

    def append_finalize(self, author: str, idx: int, subjects: List[str], proofs: List[bytes],
                        witness_intent: bytes) -> NoticeboardRecord:
        if self.announce_for(idx) is None:
            raise FinalizeRejected("no-announce", f"idx {idx}")
        record = self._append(FINALIZE, idx, author, {
            "proofs": [p.hex() for p in proofs],
            "subjects": list(subjects),
            "witness_intent": witness_intent.hex(),
        })
        logger.info("noticeboard.finalize", idx=idx, author=author)
        return record

    def _handle_message(self, message: Message):
        body = message.body
        if message.kind == MSG_ANNOUNCE:
            idx = self.append_announce(message.src, body["hint"], body["code_hash"], body["rendezvous_target"])
            self.send(message.src, MSG_ANNOUNCED, idx=idx)
        elif message.kind == MSG_FINALIZE:
            try:
                self.append_finalize(message.src, body["idx"], body["subjects"], body["proofs"],
                                     body["witness_intent"])
            except FinalizeRejected as e:
                self.record("reject", reason=e.reason, to=message.src)
        else:
            super()._handle_message(message)

    # Local reads of the public log
    def announce_for(self, idx: int) -> Optional[NoticeboardRecord]:
        return _announce_for(self.records, idx)

    def find_announce(self, hint: bytes) -> Optional[NoticeboardRecord]:
        wanted = hint.hex()
        for record in self.records:
            if record.kind == ANNOUNCE and record.body["hint"] == wanted:
                return record
        return None

    def finalizes_for(self, idx: int) -> List[NoticeboardRecord]:
        return [r for r in self.records if r.kind == FINALIZE and r.idx == idx]

    def export_bytes(self) -> bytes:
        return bcoding.bencode({
            "count": len(self.records),
            "format": EXPORT_FORMAT,
            "head": self.head.hex(),
            "records": [r.to_dict() for r in self.records],
        })

    def export(self, path: str):
        with open(path, 'wb') as f:
            f.write(self.export_bytes())


@dataclass
class NoticeboardExport:
    records: List[NoticeboardRecord]
    head: bytes
    count: int

    def verify(self) -> bytes:
        return verify_chain(self.records, self.head, self.count)


def load_export_bytes(data: bytes) -> NoticeboardExport:
    try:
        decoded = bcoding.bdecode(data)
        if decode_string(get_key(decoded, "format")) != EXPORT_FORMAT:
            raise ChainError("bad-export", "unknown format")
        records = [NoticeboardRecord.from_dict(r) for r in get_key(decoded, "records")]
        head = bytes.fromhex(decode_string(get_key(decoded, "head")))
        count = int(get_key(decoded, "count"))
    except (KeyError, ValueError, TypeError) as e:
        raise ChainError("bad-export", str(e)) from None
    return NoticeboardExport(records, head, count)


def load_export(path: str) -> NoticeboardExport:
    with open(path, 'rb') as f:
        return load_export_bytes(f.read())


def _announce_for(records: Sequence[NoticeboardRecord], idx: int) -> Optional[NoticeboardRecord]:
    for record in records:
        if record.kind == ANNOUNCE and record.idx == idx:
            return record
    return None


def finalize_check(board: Union[Noticeboard, NoticeboardExport, Sequence[NoticeboardRecord]], idx: int,
                   spawn_context) -> bool:
    """Accept only a complete, witness-authored Finalize for an Announce of this context."""
    if isinstance(board, Noticeboard):
        records, head, count = board.records, None, None
    elif isinstance(board, NoticeboardExport):
        records, head, count = board.records, board.head, board.count
    else:
        records, head, count = list(board), None, None

    try:
        verify_chain(records, head, count)
    except ChainError as e:
        raise FinalizeRejected("chain", e.reason) from None

    announce = _announce_for(records, idx)
    if announce is None:
        raise FinalizeRejected("no-announce", f"idx {idx}")
    if announce.body.get("code_hash") != spawn_context.code_hash_of("I1"):
        raise FinalizeRejected("announce-binding", "I1 code hash")
    if announce.body.get("rendezvous_token") != rendezvous_token(idx, spawn_context.id_of("I2")).hex():
        raise FinalizeRejected("announce-binding", "rendezvous token")

    finalizes = [r for r in records if r.kind == FINALIZE and r.idx == idx]
    if not finalizes:
        raise FinalizeRejected("no-finalize", f"idx {idx}")
    if len(finalizes) > 1:
        raise FinalizeRejected("duplicate-finalize", f"{len(finalizes)} records")
    final = finalizes[0]

    witness = spawn_context.id_of("W")
    if final.author != witness:
        raise FinalizeRejected("author", final.author)

    commit = spawn_context.commit()
    expected = {event_digest(DESTRUCT_PROOF, subject, commit).hex() for subject in spawn_context.teardown_subjects()}
    proofs = final.body.get("proofs", [])
    if len(proofs) != len(set(proofs)) or set(proofs) != expected:
        raise FinalizeRejected("proof-set", f"{len(proofs)} proofs, {len(expected)} expected")
    if final.body.get("witness_intent") != event_digest(DESTRUCT_INTENT, witness, commit).hex():
        raise FinalizeRejected("witness-intent")
    return True
