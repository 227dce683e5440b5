"""Command-line interface.

Subcommands: ``gen`` (guided generation), ``invert`` (image to noise with
per-step unconditional optimization), ``swap`` (subject swap), ``analyze``
(attention map summaries from a bank), ``ablate`` (schedule axis sweep), and
``learn-concept`` (embedding inversion on the toy backend).

Exit codes: 0 success, 2 invalid configuration, 3 filesystem or
serialization failure, 4 broken component contract or missing capability,
5 numerical failure. The first line printed for any failure is a single
machine-parsable record.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import storage
from .analysis import (
    ablation_sweep,
    average_attention,
    per_step_maps,
    save_heatmap,
    svd_components,
    write_html_grid,
)
from .attention import KIND_CROSS, KIND_SELF, SwapSchedule
from .backend import (
    ConceptTrainerConfig,
    concept_eval_loss,
    load_concept,
    resolve_backend,
    save_concept,
    train_concept_embedding,
)
from .bank import load_bank, save_bank
from .config import RunConfig, load_config_file, parse_values, resolve_config
from .errors import CapabilityError, StorageError, SubswapError
from .nulltext import load_nullbank, optimize_null_text, save_nullbank
from .pipeline import (
    GenerationConfig,
    generate_with_capture,
    initial_noise,
    subject_swap,
)
from .prompts import prompt_from_text, target_prompt_from_text
from .sampling import (
    constant_uncond,
    ddim_invert,
    load_trajectory,
    reconstruct,
    relative_error,
    save_trajectory,
)


def _machine_line(err: SubswapError) -> str:
    reason = " ".join(str(err).split())
    return f"subswap-error code={err.exit_code} class={err.label} reason={reason!r}"


def _write_png(path: Path, array: np.ndarray) -> None:
    img = Image.fromarray(array, mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    storage.atomic_write_bytes(Path(path), buf.getvalue())


def _write_json(path: Path, payload: dict) -> None:
    storage.atomic_write_text(Path(path), json.dumps(payload, indent=1, sort_keys=True))


def _read_image(path: str) -> np.ndarray:
    file_path = Path(path)
    if not file_path.is_file():
        raise StorageError(f"image not found: {file_path}")
    with Image.open(file_path) as img:
        return np.asarray(img.convert("RGB"))


def _tokenizer(backend):
    tokenizer = getattr(backend, "tokenizer", None)
    if tokenizer is None:
        raise CapabilityError("the selected backend exposes no tokenizer")
    return tokenizer


def _register_concept_file(cfg: RunConfig, backend) -> None:
    if cfg.concept_file:
        token_id, vector, _ = load_concept(cfg.concept_file)
        backend.register_concept(token_id, vector)


def _gen_config(cfg: RunConfig, backend, schedule: SwapSchedule | None = None) -> GenerationConfig:
    return GenerationConfig(
        steps=cfg.steps,
        guidance_w=cfg.guidance,
        seed=cfg.seed,
        latent_shape=tuple(backend.latent_shape),
        schedule=schedule if schedule is not None else cfg.swap_schedule(),
        swap_branches=cfg.swap_branches,
    )


def _echo_config(cfg: RunConfig, out: Path) -> None:
    payload = dataclasses.asdict(cfg)
    payload.pop("provided", None)
    _write_json(out / "run.json", payload)


def cmd_gen(cfg: RunConfig) -> int:
    cfg.require("prompt")
    backend = resolve_backend(cfg.backend)
    _register_concept_file(cfg, backend)
    spec = prompt_from_text(_tokenizer(backend), cfg.prompt)
    gcfg = _gen_config(cfg, backend)
    z_init = initial_noise(gcfg, dtype=backend.dtype)
    traj, bank = generate_with_capture(z_init, spec, gcfg, backend)
    out = Path(cfg.out)
    _write_png(out / "image.png", backend.decode_image(traj.final))
    if cfg.bank_out:
        save_bank(bank, cfg.bank_out, schedule=gcfg.schedule)
    _echo_config(cfg, out)
    print(f"wrote {out / 'image.png'}")
    return 0


def cmd_invert(cfg: RunConfig) -> int:
    cfg.require("prompt")
    backend = resolve_backend(cfg.backend)
    _register_concept_file(cfg, backend)
    if cfg.image:
        image = _read_image(cfg.image)
    else:
        image = backend.reference_images(cfg.seed, 1)[0]
    z_0 = backend.encode_image(image)
    spec = prompt_from_text(_tokenizer(backend), cfg.prompt)
    gcfg = _gen_config(cfg, backend)
    sched = gcfg.noise_schedule(dtype=backend.dtype)
    cond = backend.encode_text(spec.tokens)
    inversion = ddim_invert(z_0, cond, backend, sched)
    null_bank = optimize_null_text(
        inversion, cond, backend, sched, iters=cfg.null_iters, lr=cfg.null_lr, w=cfg.guidance
    )
    recon = reconstruct(
        inversion.initial, cond, null_bank.source, backend, sched, cfg.guidance
    )
    baseline = reconstruct(
        inversion.initial,
        cond,
        constant_uncond(backend.default_uncond()),
        backend,
        sched,
        cfg.guidance,
    )
    out = Path(cfg.out)
    save_trajectory(inversion, out / "inversion")
    save_nullbank(null_bank, out / "nullbank")
    _write_png(out / "input.png", image if image.dtype == np.uint8 else image.astype(np.uint8))
    _write_png(out / "recon.png", backend.decode_image(recon.final))
    _echo_config(cfg, out)
    err = relative_error(recon.final, z_0)
    base_err = relative_error(baseline.final, z_0)
    print(f"wrote {out / 'inversion'} and {out / 'nullbank'}")
    print(
        f"reconstruction relative error {err:.3e}"
        f" (default embedding {base_err:.3e})"
    )
    return 0


def cmd_swap(cfg: RunConfig) -> int:
    cfg.require("prompt", "subject", "concept")
    backend = resolve_backend(cfg.backend)
    _register_concept_file(cfg, backend)
    source_spec, target_spec, _ = target_prompt_from_text(
        _tokenizer(backend), cfg.prompt, cfg.subject, cfg.concept
    )
    gcfg = _gen_config(cfg, backend)
    out = Path(cfg.out)
    null_bank = None
    if cfg.inversion:
        inversion = load_trajectory(Path(cfg.inversion) / "inversion")
        null_bank = load_nullbank(Path(cfg.inversion) / "nullbank")
        z_init = inversion.initial.to(backend.dtype)
    else:
        z_init = initial_noise(gcfg, dtype=backend.dtype)
    if cfg.bank:
        bank = load_bank(cfg.bank)
    else:
        source_traj, bank = generate_with_capture(
            z_init, source_spec, gcfg, backend, null_bank=null_bank
        )
        _write_png(out / "source.png", backend.decode_image(source_traj.final))
    swapped = subject_swap(z_init, bank, target_spec, gcfg, backend, null_bank=null_bank)
    _write_png(out / "target.png", backend.decode_image(swapped.final))
    if cfg.bank_out:
        save_bank(bank, cfg.bank_out, schedule=gcfg.schedule)
    _echo_config(cfg, out)
    print(f"wrote {out / 'target.png'}")
    return 0


def cmd_analyze(cfg: RunConfig) -> int:
    cfg.require("bank")
    bank = load_bank(cfg.bank)
    out = Path(cfg.out)
    entries: list[tuple[str, str]] = []
    summary: dict = {"record_count": len(bank), "steps": bank.steps()}
    for kind in (KIND_SELF, KIND_CROSS):
        avg = average_attention(bank, kind)
        name = f"avg_{kind}.png"
        save_heatmap(avg, out / name, scale=1)
        entries.append((f"averaged {kind} map", name))
        k = min(cfg.components, min(avg.shape))
        svd = svd_components(avg, k)
        summary[f"{kind}_singular_values"] = [float(s) for s in svd.singular_values]
        summary[f"{kind}_explained_fraction"] = list(svd.explained_fraction)
        for i, comp in enumerate(svd.components):
            name = f"svd_{kind}_{i}.png"
            save_heatmap(comp, out / name, scale=4)
            entries.append((f"{kind} component {i}", name))
    for step, attn_map in per_step_maps(bank, kind=KIND_SELF):
        name = f"step_{step:03d}.png"
        save_heatmap(attn_map, out / name, scale=1)
        entries.append((f"self map, step {step}", name))
    _write_json(out / "summary.json", summary)
    write_html_grid(out / "grid.html", "attention summary", entries)
    print(f"wrote {out / 'summary.json'} and {out / 'grid.html'}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    cfg.require("prompt", "subject", "concept", "axis", "values")
    backend = resolve_backend(cfg.backend)
    _register_concept_file(cfg, backend)
    source_spec, target_spec, _ = target_prompt_from_text(
        _tokenizer(backend), cfg.prompt, cfg.subject, cfg.concept
    )
    base_schedule = (
        cfg.swap_schedule() if "schedule" in cfg.provided else SwapSchedule(0, 0, 0)
    )
    gcfg = _gen_config(cfg, backend, schedule=base_schedule)
    values = parse_values(cfg.values)
    report, trajectories = ablation_sweep(
        cfg.axis, values, gcfg, backend, source_spec, target_spec
    )
    out = Path(cfg.out)
    storage.atomic_write_text(out / "report.txt", report.to_text())
    for value, traj in trajectories.items():
        _write_png(out / f"thumb_v{value:03d}.png", backend.decode_image(traj.final))
    _echo_config(cfg, out)
    sys.stdout.write(report.to_text())
    return 0


def cmd_learn_concept(cfg: RunConfig) -> int:
    cfg.require("concept", "template")
    backend = resolve_backend(cfg.backend)
    tokenizer = _tokenizer(backend)
    token_id = tokenizer.concept_id(cfg.concept)
    template_tokens = tokenizer.encode(cfg.template)
    refs = backend.reference_latents(cfg.ref_seed, cfg.ref_count)
    trainer_cfg = ConceptTrainerConfig.embedding_inversion(
        lr=cfg.train_lr, steps=cfg.train_steps, batch=cfg.train_batch
    )
    gcfg = _gen_config(cfg, backend)
    sched = gcfg.noise_schedule(dtype=backend.dtype)
    before = concept_eval_loss(
        backend, backend.token_embedding(token_id), token_id, template_tokens, refs, sched
    )
    row = train_concept_embedding(
        refs, token_id, trainer_cfg, backend, sched, template_tokens, seed=cfg.seed
    )
    after = concept_eval_loss(backend, row, token_id, template_tokens, refs, sched)
    out = Path(cfg.out)
    save_concept(out / "concept", token_id, row, token=cfg.concept)
    _echo_config(cfg, out)
    print(f"wrote {out / 'concept'}")
    print(f"eval loss before {before:.6f} after {after:.6f}")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "invert": cmd_invert,
    "swap": cmd_swap,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
    "learn-concept": cmd_learn_concept,
}


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file; flags override it")
    sub.add_argument("--backend", help="toy or adapter:<scheme>://<path>")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--seed", type=int, help="initial noise seed")
    sub.add_argument("--steps", type=int, help="denoising step count")
    sub.add_argument("--guidance", type=float, help="guidance weight")
    sub.add_argument("--schedule", help="swap steps as phi,M,A (e.g. 10,25,20)")
    sub.add_argument("--swap-branches", dest="swap_branches", choices=["both", "cond"])
    sub.add_argument("--concept-file", dest="concept_file", help="learned concept directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subswap")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen", help="generate an image from a prompt")
    _add_common(p)
    p.add_argument("--prompt", help="source prompt")
    p.add_argument("--bank-out", dest="bank_out", help="save the captured bank here")

    p = commands.add_parser("invert", help="invert an image and fit per-step unconds")
    _add_common(p)
    p.add_argument("--prompt", help="prompt describing the image")
    p.add_argument("--image", help="input PNG; omitted: a procedural reference")
    p.add_argument("--null-iters", dest="null_iters", type=int)
    p.add_argument("--null-lr", dest="null_lr", type=float)

    p = commands.add_parser("swap", help="swap the subject for a concept")
    _add_common(p)
    p.add_argument("--prompt", help="source prompt")
    p.add_argument("--subject", help="subject word(s) in the prompt")
    p.add_argument("--concept", help="concept token, written <name>")
    p.add_argument("--inversion", help="directory written by the invert command")
    p.add_argument("--bank", help="use a saved bank instead of capturing")
    p.add_argument("--bank-out", dest="bank_out", help="save the captured bank here")

    p = commands.add_parser("analyze", help="summarize a saved attention bank")
    _add_common(p)
    p.add_argument("--bank", help="saved bank directory")
    p.add_argument("--components", type=int, help="singular components to render")

    p = commands.add_parser("ablate", help="sweep one swap schedule axis")
    _add_common(p)
    p.add_argument("--prompt", help="source prompt")
    p.add_argument("--subject", help="subject word(s) in the prompt")
    p.add_argument("--concept", help="concept token, written <name>")
    p.add_argument("--axis", help="lambda_phi, lambda_M, or lambda_A")
    p.add_argument("--values", help="comma-separated sweep values")

    p = commands.add_parser("learn-concept", help="learn a concept embedding")
    _add_common(p)
    p.add_argument("--concept", help="concept token, written <name>")
    p.add_argument("--template", help="training prompt containing the concept token")
    p.add_argument("--train-steps", dest="train_steps", type=int)
    p.add_argument("--train-lr", dest="train_lr", type=float)
    p.add_argument("--train-batch", dest="train_batch", type=int)
    p.add_argument("--ref-seed", dest="ref_seed", type=int)
    p.add_argument("--ref-count", dest="ref_count", type=int)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    flag_values = {
        key: value
        for key, value in vars(args).items()
        if key not in ("command", "config")
    }
    try:
        file_values = load_config_file(args.config) if args.config else None
        cfg = resolve_config(file_values, flag_values)
        return _COMMANDS[args.command](cfg)
    except SubswapError as err:
        print(_machine_line(err), file=sys.stderr)
        print(f"{type(err).__name__}: {err}", file=sys.stderr)
        return err.exit_code
    except OSError as exc:
        print(
            f"subswap-error code=3 class=io reason={' '.join(str(exc).split())!r}",
            file=sys.stderr,
        )
        return 3


if __name__ == "__main__":
    sys.exit(main())
