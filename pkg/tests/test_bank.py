"""Attention bank storage, completeness checks, and on-disk persistence."""

import json

import pytest
import torch

from conftest import stochastic_map
from subswap.attention import KIND_CROSS, KIND_SELF, AttentionRecord, SwapSchedule
from subswap.bank import (
    AttentionBank,
    banks_equal,
    load_bank,
    save_bank,
)
from subswap.errors import (
    ArchitectureMismatchError,
    BankIncompleteError,
    ContractError,
    CorruptionError,
    DomainError,
    DuplicateCaptureError,
    FormatVersionError,
)

LAYERS = ("block0", "block1")


def make_record(step=1, layer_id="block0", head=0, kind=KIND_SELF, seed=0, with_output=True):
    n_key = 64 if kind == KIND_SELF else 8
    output = None
    if kind == KIND_SELF and with_output:
        g = torch.Generator().manual_seed(seed + 1000)
        output = torch.randn(4, 16, generator=g, dtype=torch.float64)
    return AttentionRecord(
        step=step,
        layer_id=layer_id,
        head=head,
        kind=kind,
        map=stochastic_map(4, n_key, seed=seed),
        output=output,
    )


def make_bank(**kwargs):
    defaults = dict(total_steps=6, capture_limit=4, layer_ids=LAYERS, heads=2)
    defaults.update(kwargs)
    return AttentionBank(**defaults)


def fill_bank(bank, schedule=SwapSchedule(2, 3, 2), seed=0):
    """Store exactly the records a swap under ``schedule`` needs."""
    i = seed
    for step in range(1, max(schedule.lambda_phi, schedule.lambda_m) + 1):
        for branch in bank.branches:
            for layer in bank.layer_ids:
                for head in range(bank.heads):
                    bank.store(make_record(step=step, layer_id=layer, head=head, seed=i), branch)
                    i += 1
    for step in range(1, schedule.lambda_a + 1):
        for branch in bank.branches:
            for layer in bank.layer_ids:
                for head in range(bank.heads):
                    bank.store(
                        make_record(step=step, layer_id=layer, head=head, kind=KIND_CROSS, seed=i),
                        branch,
                    )
                    i += 1
    return bank


def test_store_and_fetch_round_trip():
    bank = make_bank()
    rec = make_record()
    bank.store(rec, "cond")
    got = bank.fetch(1, "cond", "block0", 0, KIND_SELF)
    assert torch.equal(got.map, rec.map)
    assert torch.equal(got.output, rec.output)
    # the bank keeps its own copy
    assert got.map is not rec.map


def test_store_rejects_duplicate_key():
    bank = make_bank()
    bank.store(make_record(), "cond")
    with pytest.raises(DuplicateCaptureError):
        bank.store(make_record(seed=5), "cond")


def test_store_rejects_after_freeze():
    bank = make_bank()
    bank.freeze()
    assert bank.frozen
    with pytest.raises(ContractError):
        bank.store(make_record(), "cond")


def test_store_rejects_step_beyond_capture_window():
    bank = make_bank(capture_limit=2)
    with pytest.raises(DomainError):
        bank.store(make_record(step=3), "cond")


def test_store_rejects_undeclared_branch():
    bank = make_bank(branches=("cond",))
    with pytest.raises(DomainError):
        bank.store(make_record(), "uncond")
    with pytest.raises(DomainError):
        AttentionBank(total_steps=4, capture_limit=4, branches=("cond", "sideways"))


def test_bank_constructor_validation():
    with pytest.raises(DomainError):
        AttentionBank(total_steps=0, capture_limit=0)
    with pytest.raises(DomainError):
        AttentionBank(total_steps=4, capture_limit=5)
    with pytest.raises(DomainError):
        AttentionBank(total_steps=4, capture_limit=-1)


def test_fetch_missing_key_fails():
    bank = make_bank()
    with pytest.raises(BankIncompleteError):
        bank.fetch(1, "cond", "block0", 0, KIND_SELF)


def test_keys_and_steps_are_sorted():
    bank = make_bank()
    bank.store(make_record(step=3, seed=1), "cond")
    bank.store(make_record(step=1, seed=2), "uncond")
    bank.store(make_record(step=1, seed=3), "cond")
    assert bank.steps() == [1, 3]
    assert bank.keys() == sorted(bank.keys())
    assert len(bank) == 3


def test_validate_complete_accepts_full_capture():
    schedule = SwapSchedule(2, 3, 2)
    bank = fill_bank(make_bank(), schedule)
    bank.validate_complete(schedule, bank.branches, LAYERS, heads=2)


def test_validate_complete_names_missing_record():
    schedule = SwapSchedule(2, 3, 2)
    bank = fill_bank(make_bank(capture_limit=3), SwapSchedule(2, 3, 1))
    with pytest.raises(BankIncompleteError, match="cross"):
        bank.validate_complete(schedule, bank.branches, LAYERS, heads=2)


def test_validate_complete_requires_outputs_inside_phi_window():
    schedule = SwapSchedule(1, 1, 0)
    bank = make_bank()
    for branch in bank.branches:
        for layer in LAYERS:
            for head in range(2):
                bank.store(
                    make_record(layer_id=layer, head=head, with_output=False, seed=head), branch
                )
    with pytest.raises(BankIncompleteError, match="output"):
        bank.validate_complete(schedule, bank.branches, LAYERS, heads=2)
    # with the output swap off the same records suffice
    bank.validate_complete(SwapSchedule(0, 1, 0), bank.branches, LAYERS, heads=2)


def test_validate_architecture():
    bank = make_bank()
    bank.validate_architecture(LAYERS, heads=2)
    with pytest.raises(ArchitectureMismatchError):
        bank.validate_architecture(("block0.self",), heads=2)
    with pytest.raises(ArchitectureMismatchError):
        bank.validate_architecture(LAYERS, heads=4)


# ---- persistence ------------------------------------------------------------


def saved_bank(tmp_path, schedule=SwapSchedule(2, 3, 2)):
    bank = fill_bank(make_bank(), schedule)
    bank.freeze()
    save_bank(bank, tmp_path / "bank", schedule)
    return bank


def test_bank_round_trips_through_disk(tmp_path):
    bank = saved_bank(tmp_path)
    loaded = load_bank(tmp_path / "bank")
    assert loaded.frozen
    assert loaded.total_steps == bank.total_steps
    assert loaded.capture_limit == bank.capture_limit
    assert loaded.branches == bank.branches
    assert loaded.layer_ids == bank.layer_ids
    assert loaded.heads == bank.heads
    assert banks_equal(bank, loaded)


def test_saved_manifest_records_schedule(tmp_path):
    saved_bank(tmp_path, SwapSchedule(2, 3, 2))
    manifest = json.loads((tmp_path / "bank" / "manifest").read_text())
    assert manifest["schedule"] == {"lambda_phi": 2, "lambda_m": 3, "lambda_a": 2}


def test_save_bank_rejects_mixed_dtypes(tmp_path):
    bank = make_bank()
    bank.store(make_record(), "cond")
    rec = make_record(step=2, seed=9, with_output=False)
    bank.store(
        AttentionRecord(
            step=2,
            layer_id=rec.layer_id,
            head=0,
            kind=KIND_SELF,
            map=rec.map.to(torch.float32),
            output=None,
        ),
        "cond",
    )
    with pytest.raises(ContractError):
        save_bank(bank, tmp_path / "bank")


def corrupt_one_blob(tmp_path, mutate):
    bank = saved_bank(tmp_path)
    blob = tmp_path / "bank" / "s1_bcond_block0_0_self_map.bin"
    assert blob.exists()
    mutate(blob)
    return bank


def test_load_fails_closed_on_flipped_byte(tmp_path):
    def flip(blob):
        data = bytearray(blob.read_bytes())
        data[7] ^= 0x01
        blob.write_bytes(bytes(data))

    corrupt_one_blob(tmp_path, flip)
    with pytest.raises(CorruptionError, match="checksum"):
        load_bank(tmp_path / "bank")


def test_load_fails_closed_on_truncated_blob(tmp_path):
    corrupt_one_blob(tmp_path, lambda blob: blob.write_bytes(blob.read_bytes()[:-8]))
    with pytest.raises(CorruptionError):
        load_bank(tmp_path / "bank")


def test_load_fails_closed_on_missing_blob(tmp_path):
    corrupt_one_blob(tmp_path, lambda blob: blob.unlink())
    with pytest.raises(CorruptionError, match="missing"):
        load_bank(tmp_path / "bank")


def test_load_rejects_future_format_version(tmp_path):
    saved_bank(tmp_path)
    manifest_path = tmp_path / "bank" / "manifest"
    manifest = json.loads(manifest_path.read_text())
    manifest["format_version"] = 99
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(FormatVersionError):
        load_bank(tmp_path / "bank")


def test_load_rejects_wrong_format_string(tmp_path):
    saved_bank(tmp_path)
    manifest_path = tmp_path / "bank" / "manifest"
    manifest = json.loads(manifest_path.read_text())
    manifest["format"] = "something-else"
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(CorruptionError):
        load_bank(tmp_path / "bank")


def test_load_rejects_missing_manifest(tmp_path):
    (tmp_path / "bank").mkdir()
    with pytest.raises(CorruptionError):
        load_bank(tmp_path / "bank")


def test_load_rejects_duplicate_manifest_record(tmp_path):
    saved_bank(tmp_path)
    manifest_path = tmp_path / "bank" / "manifest"
    manifest = json.loads(manifest_path.read_text())
    manifest["records"].append(manifest["records"][0])
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(CorruptionError, match="inconsistent"):
        load_bank(tmp_path / "bank")


def test_banks_equal_detects_differences(tmp_path):
    a = fill_bank(make_bank())
    b = fill_bank(make_bank())
    assert banks_equal(a, b)
    b.store(make_record(step=4, seed=77), "cond")
    assert not banks_equal(a, b)
    c = fill_bank(make_bank(), seed=1)
    assert not banks_equal(a, c)


# ---- spilling ---------------------------------------------------------------


def test_tight_memory_budget_spills_to_disk(tmp_path, monkeypatch):
    monkeypatch.setenv("SUBSWAP_CACHE_DIR", str(tmp_path))
    bank = fill_bank(make_bank(memory_budget=1))
    spilled = list(tmp_path.glob("subswap-bank-*/*.bin"))
    assert spilled, "expected spill files under the cache dir"
    reference = fill_bank(make_bank())
    assert banks_equal(bank, reference)
    got = bank.fetch(1, "cond", "block0", 0, KIND_SELF)
    want = reference.fetch(1, "cond", "block0", 0, KIND_SELF)
    assert torch.equal(got.map, want.map)
    assert torch.equal(got.output, want.output)


def test_spilled_bank_survives_save_and_load(tmp_path, monkeypatch):
    monkeypatch.setenv("SUBSWAP_CACHE_DIR", str(tmp_path))
    schedule = SwapSchedule(2, 3, 2)
    bank = fill_bank(make_bank(memory_budget=1), schedule)
    bank.freeze()
    save_bank(bank, tmp_path / "bank", schedule)
    assert banks_equal(load_bank(tmp_path / "bank"), fill_bank(make_bank(), schedule))
