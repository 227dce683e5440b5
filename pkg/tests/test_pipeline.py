"""Capture and swap pipeline: transparency, identity, injection, guards."""

import pytest
import torch

from subswap.attention import KIND_SELF, AttentionRecord, SwapSchedule
from subswap.bank import AttentionBank
from subswap.errors import (
    ArchitectureMismatchError,
    BankIncompleteError,
    ContractError,
    DomainError,
    InstrumentationError,
)
from subswap.nulltext import NullTextBank
from subswap.pipeline import (
    GenerationConfig,
    generate,
    generate_with_capture,
    initial_noise,
    subject_swap,
)
from subswap.prompts import target_prompt_from_text
from subswap.sampling import relative_error

STEPS = 6
SCHEDULE = SwapSchedule(2, 4, 3)
PROMPT = "a cat sitting in a basket"


def make_cfg(**kwargs):
    defaults = dict(steps=STEPS, schedule=SCHEDULE, seed=0)
    defaults.update(kwargs)
    return GenerationConfig(**defaults)


def prompts(backend):
    source, target, concept_id = target_prompt_from_text(
        backend.tokenizer, PROMPT, "cat", "<mydog>"
    )
    return source, target


def captured_run(backend, cfg):
    source, target = prompts(backend)
    z_init = initial_noise(cfg)
    traj, bank = generate_with_capture(z_init, source, cfg, backend)
    return z_init, source, target, traj, bank


def rebuild_bank(bank, mutate):
    """Copy a bank record by record, letting ``mutate`` rewrite each one."""
    clone = AttentionBank(
        total_steps=bank.total_steps,
        capture_limit=bank.capture_limit,
        branches=bank.branches,
        layer_ids=bank.layer_ids,
        heads=bank.heads,
    )
    for key, rec in bank.records():
        clone.store(mutate(key, rec), key[1])
    clone.freeze()
    return clone


def uniform_map_at(steps):
    def mutate(key, rec):
        if rec.kind == KIND_SELF and rec.step in steps:
            return AttentionRecord(
                step=rec.step,
                layer_id=rec.layer_id,
                head=rec.head,
                kind=rec.kind,
                map=torch.full_like(rec.map, 1.0 / rec.map.shape[-1]),
                output=rec.output,
            )
        return rec

    return mutate


def test_capture_is_observational(backend):
    cfg = make_cfg()
    z_init, source, _, captured, bank = captured_run(backend, cfg)
    plain = generate(z_init, source, cfg, backend)
    for a, b in zip(plain.latents, captured.latents):
        assert torch.equal(a, b)
    assert bank.frozen
    # 2 branches x 8 heads x the schedule's largest lambda
    assert len(bank) == 2 * 8 * SCHEDULE.max_step


def test_zero_schedule_swap_is_vanilla_generation(backend):
    cfg = make_cfg()
    z_init, _, target, _, bank = captured_run(backend, cfg)
    zero_cfg = make_cfg(schedule=SwapSchedule(0, 0, 0))
    swapped = subject_swap(z_init, bank, target, zero_cfg, backend)
    vanilla = generate(z_init, target, zero_cfg, backend)
    for a, b in zip(swapped.latents, vanilla.latents):
        assert torch.equal(a, b)


def test_full_swap_on_same_prompt_reproduces_source(backend):
    cfg = make_cfg(schedule=SwapSchedule(STEPS, STEPS, STEPS))
    z_init, source, _, traj, bank = captured_run(backend, cfg)
    swapped = subject_swap(z_init, bank, source, cfg, backend)
    assert relative_error(swapped.final, traj.final) <= 1e-5


def test_banked_self_map_is_ignored_while_output_swap_is_active(backend):
    cfg = make_cfg()
    z_init, _, target, _, bank = captured_run(backend, cfg)
    reference = subject_swap(z_init, bank, target, cfg, backend)
    # inside the phi window the output is injected verbatim, so rewriting
    # the banked map there must not move a single bit
    tampered = rebuild_bank(bank, uniform_map_at({1, 2}))
    swapped = subject_swap(z_init, tampered, target, cfg, backend)
    assert torch.equal(swapped.final, reference.final)
    # while between lambda_phi and lambda_m the map is what gets injected
    tampered = rebuild_bank(bank, uniform_map_at({3, 4}))
    swapped = subject_swap(z_init, tampered, target, cfg, backend)
    assert not torch.equal(swapped.final, reference.final)


def test_swap_changes_target_generation(backend):
    cfg = make_cfg()
    z_init, _, target, _, bank = captured_run(backend, cfg)
    swapped = subject_swap(z_init, bank, target, cfg, backend)
    vanilla = generate(z_init, target, cfg, backend)
    assert not torch.equal(swapped.final, vanilla.final)


def test_swap_branch_restriction_changes_result(backend):
    cfg = make_cfg()
    z_init, _, target, _, bank = captured_run(backend, cfg)
    both = subject_swap(z_init, bank, target, cfg, backend)
    cond_only = subject_swap(z_init, bank, target, make_cfg(swap_branches="cond"), backend)
    assert not torch.equal(both.final, cond_only.final)


def test_swap_layer_allowlist_changes_result(backend):
    cfg = make_cfg()
    z_init, _, target, _, bank = captured_run(backend, cfg)
    full = subject_swap(z_init, bank, target, cfg, backend)
    scoped = subject_swap(z_init, bank, target, make_cfg(swap_layers=("block0",)), backend)
    assert not torch.equal(full.final, scoped.final)


def test_swap_rejects_bank_from_different_run_length(backend):
    cfg = make_cfg()
    z_init, _, target, _, bank = captured_run(backend, cfg)
    with pytest.raises(ContractError):
        subject_swap(z_init, bank, target, make_cfg(steps=STEPS + 1), backend)


def test_swap_rejects_bank_from_different_architecture(backend):
    cfg = make_cfg()
    z_init, _, target, _, _ = captured_run(backend, cfg)
    foreign = AttentionBank(
        total_steps=STEPS,
        capture_limit=SCHEDULE.max_step,
        layer_ids=("block0",),
        heads=2,
    )
    foreign.freeze()
    with pytest.raises(ArchitectureMismatchError):
        subject_swap(z_init, foreign, target, cfg, backend)


def test_swap_rejects_incomplete_bank(backend):
    cfg = make_cfg()
    source, target = prompts(backend)
    z_init = initial_noise(cfg)
    _, bank = generate_with_capture(z_init, source, cfg, backend, capture_limit=1)
    with pytest.raises(BankIncompleteError):
        subject_swap(z_init, bank, target, cfg, backend)


def test_capture_limit_cannot_exceed_run_length(backend):
    cfg = make_cfg()
    source, _ = prompts(backend)
    with pytest.raises(DomainError):
        generate_with_capture(initial_noise(cfg), source, cfg, backend, capture_limit=STEPS + 1)


def test_capture_detects_hooks_that_did_not_fire(backend):
    class Liar:
        def __init__(self, inner):
            self._inner = inner

        def __getattr__(self, name):
            return getattr(self._inner, name)

        def attention_sites(self):
            sites = self._inner.attention_sites()
            return sites + (sites[0],)

    cfg = make_cfg()
    source, _ = prompts(backend)
    with pytest.raises(InstrumentationError):
        generate_with_capture(initial_noise(cfg), source, cfg, Liar(backend))


def test_unit_guidance_captures_single_branch(backend):
    cfg = make_cfg(guidance_w=1.0)
    z_init, source, target, traj, bank = captured_run(backend, cfg)
    assert bank.branches == ("cond",)
    assert len(bank) == 8 * SCHEDULE.max_step
    swapped = subject_swap(z_init, bank, source, make_cfg(guidance_w=1.0), backend)
    assert swapped.total_steps == STEPS


def test_null_bank_of_wrong_length_is_rejected(backend):
    cfg = make_cfg()
    source, _ = prompts(backend)
    short = NullTextBank(embeddings=[backend.default_uncond() for _ in range(STEPS - 1)])
    with pytest.raises(ContractError):
        generate(initial_noise(cfg), source, cfg, backend, null_bank=short)


def test_null_bank_embeddings_drive_the_unconditional_branch(backend):
    cfg = make_cfg()
    source, _ = prompts(backend)
    z_init = initial_noise(cfg)
    default_bank = NullTextBank(embeddings=[backend.default_uncond() for _ in range(STEPS)])
    with_bank = generate(z_init, source, cfg, backend, null_bank=default_bank)
    without = generate(z_init, source, cfg, backend)
    for a, b in zip(with_bank.latents, without.latents):
        assert torch.equal(a, b)
    g = torch.Generator().manual_seed(5)
    noisy = NullTextBank(
        embeddings=[
            backend.default_uncond() + 0.1 * torch.randn(8, 32, generator=g, dtype=torch.float64)
            for _ in range(STEPS)
        ]
    )
    assert not torch.equal(
        generate(z_init, source, cfg, backend, null_bank=noisy).final, without.final
    )


def test_initial_noise_is_seeded(backend):
    cfg = make_cfg(seed=3)
    a = initial_noise(cfg)
    b = initial_noise(cfg)
    assert a.shape == (4, 8, 8)
    assert torch.equal(a, b)
    assert not torch.equal(a, initial_noise(make_cfg(seed=4)))


def test_generation_config_validation():
    with pytest.raises(DomainError):
        make_cfg(steps=0)
    with pytest.raises(DomainError):
        make_cfg(guidance_w=-1.0)
    with pytest.raises(DomainError):
        make_cfg(swap_branches="neither")
    with pytest.warns(UserWarning):
        clamped = GenerationConfig(steps=4, schedule=SwapSchedule(2, 8, 5))
    assert clamped.schedule == SwapSchedule(2, 4, 4)


def test_swap_branch_set_respects_guidance_mode():
    cfg = make_cfg()
    assert cfg.swap_branch_set(7.5) == ("uncond", "cond")
    assert cfg.swap_branch_set(1.0) == ("cond",)
    assert cfg.swap_branch_set(0.0) == ("uncond",)
    cond_cfg = make_cfg(swap_branches="cond")
    assert cond_cfg.swap_branch_set(7.5) == ("cond",)
    assert cond_cfg.swap_branch_set(0.0) == ()
