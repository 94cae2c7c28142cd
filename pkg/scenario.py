import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional

import structlog

from errors import ScenarioError
from factory import POLICY_PREFER_DISTINCT, POLICY_STRICT
from math_core import PRODUCTION_MAX_DIM, PRODUCTION_MIN_BITS, PRODUCTION_MIN_DIM, PROFILE_PRODUCTION, PROFILE_TEST

logger = structlog.get_logger(__name__)

SEED_ENV = "RDMPF_SEED"
DEFAULT_SEED = "5eed"
DEFAULT_PAYLOAD = b"meet at the usual place"
DEFAULT_SUBNETS = ("subnet-a", "subnet-b", "subnet-c", "subnet-d", "subnet-e", "subnet-f")
MIN_TTL = 64


@dataclass
class Faults:
    kill_storage: List[int] = field(default_factory=list)
    corrupt_storage: List[int] = field(default_factory=list)
    wrong_h: bool = False
    skip_retrieve: bool = False
    forge_finalize: bool = False

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Faults":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ScenarioError("unknown-fault", ", ".join(sorted(unknown)))
        return cls(**data)


@dataclass
class ScenarioConfig:
    profile: str = PROFILE_TEST
    bit_length: int = 64
    dim: int = 8
    n: int = 2
    t: int = 2
    ttl: int = 400
    amount: int = 1_000_000
    payload_hex: str = ""
    payload_file: str = ""
    subnets: List[str] = field(default_factory=lambda: list(DEFAULT_SUBNETS))
    strict_subnets: bool = False
    faults: Faults = field(default_factory=Faults)
    seed: str = DEFAULT_SEED

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ScenarioError("unknown-field", ", ".join(sorted(unknown)))
        values = dict(data)
        if "faults" in values:
            values["faults"] = Faults.from_dict(values["faults"] or {})
        return cls(**values)

    @classmethod
    def load(cls, path: str) -> "ScenarioConfig":
        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except (OSError, ValueError) as e:
            raise ScenarioError("unreadable", f"{path}: {e}") from None
        if not isinstance(data, dict):
            raise ScenarioError("unreadable", f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    # CLI flags override the file; RDMPF_SEED overrides everything for the seed
    def apply_overrides(self, seed: Optional[str] = None, profile: Optional[str] = None,
                        environ: Optional[Mapping[str, str]] = None) -> "ScenarioConfig":
        if seed:
            self.seed = seed
        if profile:
            self.profile = profile
        env = os.environ if environ is None else environ
        if env.get(SEED_ENV):
            self.seed = env[SEED_ENV]
            logger.debug("scenario.seed_from_env")
        return self

    @property
    def seed_bytes(self) -> bytes:
        try:
            return bytes.fromhex(self.seed)
        except ValueError:
            raise ScenarioError("bad-seed", self.seed) from None

    @property
    def policy(self) -> str:
        return POLICY_STRICT if self.strict_subnets else POLICY_PREFER_DISTINCT

    def payload(self) -> bytes:
        if self.payload_file:
            try:
                with open(self.payload_file, 'rb') as f:
                    return f.read()
            except OSError as e:
                raise ScenarioError("unreadable", str(e)) from None
        if self.payload_hex:
            try:
                return bytes.fromhex(self.payload_hex)
            except ValueError:
                raise ScenarioError("bad-payload", "payload_hex is not hex") from None
        return DEFAULT_PAYLOAD

    def validate(self) -> "ScenarioConfig":
        if self.profile not in (PROFILE_TEST, PROFILE_PRODUCTION):
            raise ScenarioError("bad-profile", self.profile)
        if self.n < 1:
            raise ScenarioError("bad-n", str(self.n))
        if not 1 <= self.t <= self.n:
            raise ScenarioError("bad-t", f"t={self.t} n={self.n}")
        if self.dim < 2:
            raise ScenarioError("bad-dim", str(self.dim))
        if self.bit_length < 8:
            raise ScenarioError("bad-bit-length", str(self.bit_length))
        if self.profile == PROFILE_PRODUCTION:
            if self.bit_length < PRODUCTION_MIN_BITS:
                raise ScenarioError("bad-bit-length", f"production needs >= {PRODUCTION_MIN_BITS} bits")
            if not PRODUCTION_MIN_DIM <= self.dim <= PRODUCTION_MAX_DIM:
                raise ScenarioError("bad-dim", f"production needs {PRODUCTION_MIN_DIM}..{PRODUCTION_MAX_DIM}")
        if self.ttl < MIN_TTL:
            raise ScenarioError("bad-ttl", f"ttl must be at least {MIN_TTL} ticks")
        if self.amount <= 0:
            raise ScenarioError("bad-amount", str(self.amount))
        if not self.subnets:
            raise ScenarioError("bad-subnets", "at least one subnet is required")
        for index in self.faults.kill_storage + self.faults.corrupt_storage:
            if not 0 <= index < self.n:
                raise ScenarioError("bad-fault", f"storage index {index} outside [0, {self.n})")
        if not self.seed or len(self.seed_bytes) == 0:
            raise ScenarioError("bad-seed", "seed must be non-empty hex")
        return self
