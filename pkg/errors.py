"""Exception hierarchy shared by the library, the simulator and the CLI.

Every error carries a short machine-readable ``reason`` that ends up in trace
records and CLI reports.
"""
from typing import Optional


class RdmpfError(Exception):
    reason = "error"

    def __init__(self, reason: Optional[str] = None, detail: str = ""):
        if reason is not None:
            self.reason = reason
        self.detail = detail
        message = self.reason if not detail else f"{self.reason}: {detail}"
        super().__init__(message)


# Parameter and algebra errors
class ParamsError(RdmpfError):
    reason = "invalid-params"


class DimensionMismatch(RdmpfError):
    reason = "dimension-mismatch"


class ParamsMismatch(RdmpfError):
    reason = "params-mismatch"


# Primitive wrappers
class DomainTagError(RdmpfError):
    reason = "unknown-domain-tag"


class KeyDerivationError(RdmpfError):
    reason = "output-too-large"


class AuthenticationFailure(RdmpfError):
    reason = "authentication-failure"


# KEM
class CapsuleParseError(RdmpfError):
    reason = "parse-failure"


class TagMismatch(RdmpfError):
    reason = "tag-mismatch"


class ReclaimRejected(RdmpfError):
    reason = "reclaim-rejected"


# Functional encryption layer
class FEError(RdmpfError):
    reason = "fe-error"


class AnchoringViolation(FEError):
    reason = "anchoring-violation"


class InvalidKey(FEError):
    reason = "invalid-key"


class IndexOutOfRange(FEError):
    reason = "index-out-of-range"


# Protocol simulation
class SpawnError(RdmpfError):
    reason = "pool-exhausted"


class SpawnRejected(RdmpfError):
    reason = "spawn-rejected"


class DepositRejected(RdmpfError):
    reason = "deposit-rejected"


class RetrievalRejected(RdmpfError):
    reason = "retrieval-rejected"


class FinalizeRejected(RdmpfError):
    reason = "finalize-rejected"


class ChainError(RdmpfError):
    reason = "chain-broken"


class LedgerError(RdmpfError):
    reason = "ledger-error"


class ScenarioError(RdmpfError):
    reason = "invalid-scenario"


class TransferMismatch(RdmpfError):
    reason = "payload-mismatch"


class AuditViolation(RdmpfError):
    reason = "audit-violation"
