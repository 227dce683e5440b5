"""Attention bank: keyed storage for captured attention records.

Records are keyed by ``(step, branch, layer_id, head, kind)`` where branch is
the guidance branch (``"cond"`` or ``"uncond"``) the record was captured on.
A bank is written once by a capture pass (single writer), frozen, and then
read concurrently by swap passes; records are immutable once stored.

On disk a bank is a directory holding a JSON manifest and one raw blob per
stored tensor, named ``s{step}_b{branch}_{layer}_{head}_{kind}_{field}.bin``.
"""

from __future__ import annotations

import dataclasses
import os
import tempfile
from pathlib import Path
from typing import Iterator

import torch

from . import storage
from .attention import KIND_CROSS, KIND_SELF, KINDS, AttentionRecord, SwapSchedule
from .errors import (
    ArchitectureMismatchError,
    BankIncompleteError,
    ContractError,
    CorruptionError,
    DomainError,
    DuplicateCaptureError,
)

BRANCH_COND = "cond"
BRANCH_UNCOND = "uncond"
BRANCHES = (BRANCH_UNCOND, BRANCH_COND)

BANK_FORMAT = "subswap-bank"
BANK_FORMAT_VERSION = 1

RecordKey = tuple[int, str, str, int, str]


def _blob_name(key: RecordKey, field: str) -> str:
    step, branch, layer, head, kind = key
    return f"s{step}_b{branch}_{layer}_{head}_{kind}_{field}.bin"


@dataclasses.dataclass
class _Slot:
    """One stored record, either resident in memory or spilled to disk."""

    record: AttentionRecord | None
    branch: str
    spill_map: Path | None = None
    spill_output: Path | None = None
    meta: tuple[int, str, int, str] | None = None
    shapes: tuple[tuple[int, ...], tuple[int, ...] | None] | None = None
    dtype: torch.dtype | None = None

    def nbytes(self) -> int:
        if self.record is None:
            return 0
        n = self.record.map.numel() * self.record.map.element_size()
        if self.record.output is not None:
            n += self.record.output.numel() * self.record.output.element_size()
        return n


class AttentionBank:
    """Capture-once, read-many store of attention records.

    Args:
        total_steps: number of denoising steps T of the run being captured.
        capture_limit: highest step index recorded; stores beyond it fail.
        branches: guidance branches the bank holds.
        layer_ids: stable ordered attention layer identifiers.
        heads: head count per layer.
        memory_budget: optional byte budget; records past it spill to disk.
    """

    def __init__(
        self,
        total_steps: int,
        capture_limit: int,
        branches: tuple[str, ...] = BRANCHES,
        layer_ids: tuple[str, ...] = (),
        heads: int = 1,
        memory_budget: int | None = None,
        spill_dir: str | None = None,
    ):
        if total_steps < 1:
            raise DomainError(f"total_steps must be >= 1, got {total_steps}")
        if capture_limit < 0 or capture_limit > total_steps:
            raise DomainError(
                f"capture_limit must lie in [0, {total_steps}], got {capture_limit}"
            )
        for branch in branches:
            if branch not in BRANCHES:
                raise DomainError(f"unknown branch {branch!r}")
        self.total_steps = total_steps
        self.capture_limit = capture_limit
        self.branches = tuple(branches)
        self.layer_ids = tuple(layer_ids)
        self.heads = heads
        self.memory_budget = memory_budget
        self._spill_dir = spill_dir
        self._slots: dict[RecordKey, _Slot] = {}
        self._frozen = False
        self._resident_bytes = 0

    def __len__(self) -> int:
        return len(self._slots)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        """Mark the capture pass finished; later stores fail."""
        self._frozen = True

    def steps(self) -> list[int]:
        return sorted({key[0] for key in self._slots})

    def keys(self) -> list[RecordKey]:
        return sorted(self._slots.keys())

    def store(self, record: AttentionRecord, branch: str) -> None:
        """Store one record under ``(record.step, branch, ...)``.

        Raises:
            DuplicateCaptureError: if the key is already present.
            DomainError: if the step is outside the capture window or the
                branch is not one the bank was declared with.
            ContractError: if the bank is frozen.
        """
        if self._frozen:
            raise ContractError("bank is frozen; capture is over")
        if branch not in self.branches:
            raise DomainError(f"bank does not hold branch {branch!r}")
        if record.step > self.capture_limit:
            raise DomainError(
                f"step {record.step} is beyond the capture window "
                f"(limit {self.capture_limit})"
            )
        key: RecordKey = (record.step, branch, record.layer_id, record.head, record.kind)
        if key in self._slots:
            raise DuplicateCaptureError(f"record already captured for key {key}")
        stored = AttentionRecord(
            step=record.step,
            layer_id=record.layer_id,
            head=record.head,
            kind=record.kind,
            map=record.map.detach().clone(),
            output=None if record.output is None else record.output.detach().clone(),
        )
        slot = _Slot(record=stored, branch=branch)
        self._slots[key] = slot
        self._resident_bytes += slot.nbytes()
        if self.memory_budget is not None and self._resident_bytes > self.memory_budget:
            self._spill(key, slot)

    def _spill_root(self) -> Path:
        if self._spill_dir is None:
            base = os.environ.get("SUBSWAP_CACHE_DIR") or tempfile.gettempdir()
            self._spill_dir = tempfile.mkdtemp(prefix="subswap-bank-", dir=base)
        return Path(self._spill_dir)

    def _spill(self, key: RecordKey, slot: _Slot) -> None:
        root = self._spill_root()
        rec = slot.record
        assert rec is not None
        slot.meta = (rec.step, rec.layer_id, rec.head, rec.kind)
        slot.dtype = rec.map.dtype
        slot.spill_map = root / _blob_name(key, "map")
        slot.spill_map.write_bytes(storage.tensor_to_bytes(rec.map))
        out_shape = None
        if rec.output is not None:
            slot.spill_output = root / _blob_name(key, "output")
            slot.spill_output.write_bytes(storage.tensor_to_bytes(rec.output))
            out_shape = tuple(rec.output.shape)
        slot.shapes = (tuple(rec.map.shape), out_shape)
        self._resident_bytes -= slot.nbytes()
        slot.record = None

    def _load_slot(self, slot: _Slot) -> AttentionRecord:
        if slot.record is not None:
            return slot.record
        assert slot.meta is not None and slot.shapes is not None and slot.dtype is not None
        step, layer, head, kind = slot.meta
        name = storage.dtype_name(slot.dtype)
        map_shape, out_shape = slot.shapes
        attn_map = storage.tensor_from_bytes(
            slot.spill_map.read_bytes(), name, list(map_shape)
        )
        output = None
        if slot.spill_output is not None:
            output = storage.tensor_from_bytes(
                slot.spill_output.read_bytes(), name, list(out_shape)
            )
        return AttentionRecord(
            step=step, layer_id=layer, head=head, kind=kind, map=attn_map, output=output
        )

    def fetch(
        self, step: int, branch: str, layer_id: str, head: int, kind: str
    ) -> AttentionRecord:
        """Return the record for a key.

        Raises:
            BankIncompleteError: if no record was captured under the key.
        """
        key: RecordKey = (step, branch, layer_id, head, kind)
        slot = self._slots.get(key)
        if slot is None:
            raise BankIncompleteError(f"no record captured for key {key}")
        return self._load_slot(slot)

    def records(self) -> Iterator[tuple[RecordKey, AttentionRecord]]:
        for key in self.keys():
            yield key, self._load_slot(self._slots[key])

    def validate_complete(
        self,
        schedule: SwapSchedule,
        branches: tuple[str, ...],
        layer_ids: tuple[str, ...],
        heads: int,
    ) -> None:
        """Check every record a swap under ``schedule`` will fetch exists.

        Raises:
            BankIncompleteError: naming the first missing key.
        """
        needs: list[tuple[int, str]] = []
        for step in range(1, min(max(schedule.lambda_phi, schedule.lambda_m), self.total_steps) + 1):
            needs.append((step, KIND_SELF))
        for step in range(1, min(schedule.lambda_a, self.total_steps) + 1):
            needs.append((step, KIND_CROSS))
        for step, kind in needs:
            for branch in branches:
                for layer in layer_ids:
                    for head in range(heads):
                        key: RecordKey = (step, branch, layer, head, kind)
                        slot = self._slots.get(key)
                        if slot is None:
                            raise BankIncompleteError(f"no record captured for key {key}")
                        if kind == KIND_SELF and step <= schedule.lambda_phi:
                            rec = self._load_slot(slot)
                            if rec.output is None:
                                raise BankIncompleteError(
                                    f"record {key} stores no output for the phi swap"
                                )

    def validate_architecture(self, layer_ids: tuple[str, ...], heads: int) -> None:
        """Check the bank was captured on a compatible attention layout."""
        if self.layer_ids and tuple(layer_ids) != self.layer_ids:
            raise ArchitectureMismatchError(
                f"bank captured on layers {list(self.layer_ids)}, "
                f"backend exposes {list(layer_ids)}"
            )
        if self.heads != heads:
            raise ArchitectureMismatchError(
                f"bank captured with {self.heads} heads, backend has {heads}"
            )


def banks_equal(a: AttentionBank, b: AttentionBank) -> bool:
    """Bitwise equality of two banks' keys, dtypes, and tensors."""
    if a.keys() != b.keys():
        return False
    for (_, ra), (_, rb) in zip(a.records(), b.records()):
        if ra.map.dtype != rb.map.dtype or not torch.equal(ra.map, rb.map):
            return False
        if (ra.output is None) != (rb.output is None):
            return False
        if ra.output is not None and (
            ra.output.dtype != rb.output.dtype or not torch.equal(ra.output, rb.output)
        ):
            return False
    return True


def save_bank(bank: AttentionBank, path: str | Path, schedule: SwapSchedule | None = None) -> None:
    """Write a bank directory (manifest plus one blob per tensor)."""
    dtypes = {rec.map.dtype for _, rec in bank.records()}
    if len(dtypes) > 1:
        raise ContractError(f"bank holds mixed dtypes {dtypes}")
    dtype = storage.dtype_name(dtypes.pop()) if dtypes else "float64"
    writer = storage.ArtifactWriter(Path(path))
    try:
        entries = []
        for key, rec in bank.records():
            step, branch, layer, head, kind = key
            fields = {"map": storage.blob_entry(rec.map, _blob_name(key, "map"))}
            storage.write_blob(writer.path, fields["map"], rec.map)
            if rec.output is not None:
                fields["output"] = storage.blob_entry(rec.output, _blob_name(key, "output"))
                storage.write_blob(writer.path, fields["output"], rec.output)
            entries.append(
                {
                    "step": step,
                    "branch": branch,
                    "layer": layer,
                    "head": head,
                    "kind": kind,
                    "fields": fields,
                }
            )
        manifest = {
            "format": BANK_FORMAT,
            "format_version": BANK_FORMAT_VERSION,
            "byte_order": "little",
            "dtype": dtype,
            "total_steps": bank.total_steps,
            "capture_limit": bank.capture_limit,
            "branches": list(bank.branches),
            "layer_ids": list(bank.layer_ids),
            "heads": bank.heads,
            "schedule": schedule.as_dict() if schedule is not None else None,
            "records": entries,
        }
        storage.write_manifest(writer.path, manifest)
        writer.commit()
    except BaseException:
        writer.abort()
        raise


def load_bank(path: str | Path) -> AttentionBank:
    """Load a bank directory, verifying every blob before returning.

    Raises:
        CorruptionError: on any missing, truncated, or checksum-failing blob;
            no partially loaded bank is ever returned.
        FormatVersionError: on an unsupported format version.
    """
    directory = Path(path)
    manifest = storage.read_manifest(directory, BANK_FORMAT, BANK_FORMAT_VERSION)
    try:
        dtype = manifest["dtype"]
        bank = AttentionBank(
            total_steps=manifest["total_steps"],
            capture_limit=manifest["capture_limit"],
            branches=tuple(manifest["branches"]),
            layer_ids=tuple(manifest["layer_ids"]),
            heads=manifest["heads"],
        )
        loaded: list[tuple[AttentionRecord, str]] = []
        for entry in manifest["records"]:
            fields = entry["fields"]
            attn_map = storage.read_blob(directory, fields["map"], dtype)
            output = None
            if "output" in fields:
                output = storage.read_blob(directory, fields["output"], dtype)
            record = AttentionRecord(
                step=entry["step"],
                layer_id=entry["layer"],
                head=entry["head"],
                kind=entry["kind"],
                map=attn_map,
                output=output,
            )
            if entry["kind"] not in KINDS:
                raise CorruptionError(f"unknown record kind {entry['kind']!r}")
            loaded.append((record, entry["branch"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptionError(f"malformed bank manifest under {directory}: {exc}") from exc
    try:
        for record, branch in loaded:
            bank.store(record, branch)
    except (DomainError, DuplicateCaptureError) as exc:
        raise CorruptionError(f"inconsistent bank manifest under {directory}: {exc}") from exc
    bank.freeze()
    return bank
