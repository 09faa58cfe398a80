"""Synthetic speaker-embedding banks and the bank JSON file format.

A bank file looks like::

    {"dim": 4,
     "provenance": {"seed": 7, "generator": "xoshiro256**", "params": {...}},
     "speakers": [{"id": "spk0000", "utts": [[0.1, ...], ...]}, ...]}

Externally produced banks use ``"provenance": "external"``.
"""
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .embedcore import DomainError
from .rng import Xoshiro256


class BankFormatError(ValueError):
    """A bank file could not be parsed; the message carries line/field context."""


class BankValidationError(DomainError):
    """A bank violates its invariants (duplicate ids, ragged dims, ...)."""


@dataclass(frozen=True)
class GenParams:
    num_speakers: int = 60
    utts_per_speaker: int = 30
    dim: int = 64
    cluster_spread: float = 0.3
    similarity_groups: int = 12
    group_pull: float = 0.7
    seed: int = 0

    def validate(self):
        if self.dim < 1 or self.utts_per_speaker < 1:
            raise DomainError("dim and utts_per_speaker must be positive")
        if not self.num_speakers >= self.similarity_groups >= 1:
            raise DomainError("need num_speakers >= similarity_groups >= 1")
        if not self.cluster_spread > 0:
            raise DomainError("cluster_spread must be positive")
        if not 0 <= self.group_pull < 1:
            raise DomainError("group_pull must lie in [0, 1)")


class SpeakerBank:
    """Labeled utterance embeddings, one (n_utts, dim) array per speaker."""

    def __init__(self, dim, speaker_ids, utterances, provenance="external"):
        self.dim = int(dim)
        self.speaker_ids = list(speaker_ids)
        self.utterances = [np.asarray(u, dtype=np.float64) for u in utterances]
        self.provenance = provenance
        self.validate()
        self._index = {sid: i for i, sid in enumerate(self.speaker_ids)}

    def validate(self):
        if self.dim < 1:
            raise BankValidationError(f"dim must be positive, got {self.dim}")
        if len(self.speaker_ids) != len(self.utterances):
            raise BankValidationError("speaker_ids and utterances differ in length")
        seen = set()
        for sid, u in zip(self.speaker_ids, self.utterances):
            if sid in seen:
                raise BankValidationError(f"duplicate speaker_id {sid!r}")
            seen.add(sid)
            if u.ndim != 2 or u.shape[0] < 1:
                raise BankValidationError(f"speaker {sid!r} has no utterances")
            if u.shape[1] != self.dim:
                raise BankValidationError(
                    f"speaker {sid!r}: utterance dim {u.shape[1]} != bank dim {self.dim}"
                )
            if not np.all(np.isfinite(u)):
                raise BankValidationError(f"speaker {sid!r} has non-finite values")

    def __len__(self):
        return len(self.speaker_ids)

    def index_of(self, speaker_id):
        return self._index[speaker_id]

    def utts(self, speaker_id):
        return self.utterances[self._index[speaker_id]]

    def counts(self):
        return np.array([u.shape[0] for u in self.utterances])

    def __eq__(self, other):
        if not isinstance(other, SpeakerBank):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.speaker_ids == other.speaker_ids
            and self.provenance == other.provenance
            and all(np.array_equal(a, b) for a, b in zip(self.utterances, other.utterances))
        )


def _normalize(v):
    return v / np.linalg.norm(v)


def generate_bank(params: GenParams) -> SpeakerBank:
    """Draw a bank of unit-norm utterance embeddings clustered by speaker and group.

    Draw order on one xoshiro256** stream: all group centers, then per speaker
    its direction ``z`` followed by its utterance noise. Speakers are assigned
    to groups in contiguous, near-equal blocks.
    """
    params.validate()
    rng = Xoshiro256(params.seed)
    dim = params.dim
    centers = [rng.unit_vector(dim) for _ in range(params.similarity_groups)]
    ids, utts = [], []
    for s in range(params.num_speakers):
        g = s * params.similarity_groups // params.num_speakers
        z = rng.unit_vector(dim)
        mix = (1.0 - params.group_pull) * z + params.group_pull * centers[g]
        # exact cancellation (only reachable in tiny dims): fall back to the center
        mean = _normalize(mix) if np.linalg.norm(mix) > 0 else centers[g]
        noise = rng.normal(params.utts_per_speaker * dim).reshape(-1, dim)
        u = mean + params.cluster_spread * noise
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        ids.append(f"spk{s:04d}")
        utts.append(u)
    provenance = {"seed": params.seed, "generator": "xoshiro256**", "params": asdict(params)}
    return SpeakerBank(dim, ids, utts, provenance)


def speaker_group(params: GenParams, speaker_index: int) -> int:
    return speaker_index * params.similarity_groups // params.num_speakers


def split_bank(bank: SpeakerBank, parts=2):
    """Disjoint speaker split: speaker ``i`` goes to part ``i % parts``.

    Interleaving keeps every similarity group represented in each part.
    """
    if parts < 2 or parts > len(bank):
        raise DomainError(f"cannot split {len(bank)} speakers into {parts} parts")
    return [
        SpeakerBank(
            bank.dim, bank.speaker_ids[k::parts], bank.utterances[k::parts],
            {"split_of": bank.provenance, "part": k, "parts": parts},
        )
        for k in range(parts)
    ]


def save_bank(bank: SpeakerBank, path) -> None:
    head = json.dumps({"dim": bank.dim, "provenance": bank.provenance})
    lines = [head[:-1] + ', "speakers": [']
    for i, (sid, u) in enumerate(zip(bank.speaker_ids, bank.utterances)):
        sep = "," if i < len(bank) - 1 else ""
        lines.append(json.dumps({"id": sid, "utts": u.tolist()}) + sep)
    lines.append("]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _field_error(where, msg):
    return BankFormatError(f"{where}: {msg}")


def load_bank(path) -> SpeakerBank:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise BankFormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise _field_error(path, "top level must be an object")
    for key in ("dim", "speakers"):
        if key not in doc:
            raise _field_error(path, f"missing field {key!r}")
    dim = doc["dim"]
    if not isinstance(dim, int) or isinstance(dim, bool):
        raise _field_error("dim", f"expected integer, got {dim!r}")
    speakers = doc["speakers"]
    if not isinstance(speakers, list):
        raise _field_error("speakers", "expected a list")
    ids, utts = [], []
    for i, spk in enumerate(speakers):
        where = f"speakers[{i}]"
        if not isinstance(spk, dict) or "id" not in spk or "utts" not in spk:
            raise _field_error(where, "expected an object with 'id' and 'utts'")
        if not isinstance(spk["id"], str):
            raise _field_error(f"{where}.id", "expected a string")
        rows = spk["utts"]
        if not isinstance(rows, list) or not rows:
            raise _field_error(f"{where}.utts", "expected a non-empty list")
        for j, row in enumerate(rows):
            if not isinstance(row, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in row
            ):
                raise _field_error(f"{where}.utts[{j}]", "expected a list of numbers")
            if len(row) != dim:
                raise BankValidationError(
                    f"{where}.utts[{j}]: expected {dim} values, got {len(row)}"
                )
            if not all(math.isfinite(v) for v in row):
                raise BankValidationError(f"{where}.utts[{j}]: non-finite value")
        ids.append(spk["id"])
        utts.append(np.array(rows, dtype=np.float64))
    return SpeakerBank(dim, ids, utts, doc.get("provenance", "external"))
