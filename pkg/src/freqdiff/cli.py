"""Command-line entry point: ``freqdiff <command> [options]``.

Commands: gen-data, train, synth, eval, ablate, sweep-T. Settings come from
the RunConfig defaults, then an optional ``--config`` file, then flags.

Exit codes: 0 success, 2 usage or contract error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import experiments as ex
from .conditioning import AvailabilityMask
from .config import RunConfig, load_config
from .errors import ConfigurationError, DataIOError, FreqDiffError
from .phantoms import MODALITIES, generate_dataset, read_dataset, stack_modalities, write_dataset
from .trainer import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# flags that each command exposes from RunConfig
_DATA = ("count", "size", "data_seed")
_TRAIN = tuple(f.name for f in fields(RunConfig) if f.name not in _DATA + ("eval_limit", "sample_seed", "clip_x0"))
_SAMPLE = ("sample_seed", "clip_x0", "eval_limit")
COMMAND_FIELDS = {
    "gen-data": _DATA,
    "train": _TRAIN,
    "synth": _SAMPLE,
    "eval": _SAMPLE,
    "ablate": _TRAIN + _SAMPLE,
    "sweep-T": _TRAIN + _SAMPLE,
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser, names) -> None:
    g = p.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", type=Path, help="key = value file with RunConfig fields")
    defaults = RunConfig()
    for f in fields(RunConfig):
        if f.name not in names:
            continue
        default = getattr(defaults, f.name)
        shown = str(default).lower() if isinstance(default, bool) else default
        g.add_argument(_flag(f.name), dest=f.name, metavar=f.type.upper(), default=None,
                       help=f"{f.metadata['doc']} (default: {shown})")


def _config(args, names) -> RunConfig:
    overrides = {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freqdiff", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a phantom dataset container and manifest")
    p.add_argument("--out", type=Path, required=True, help="container path; the manifest goes next to it")
    _add_config_flags(p, COMMAND_FIELDS["gen-data"])

    p = sub.add_parser("train", help="curriculum training run")
    p.add_argument("--data", type=Path, required=True, help="training dataset container")
    p.add_argument("--out", type=Path, required=True, help="checkpoint to write")
    p.add_argument("--log", type=Path, help="training CSV log (default: <out>.log.csv)")
    _add_config_flags(p, COMMAND_FIELDS["train"])

    p = sub.add_parser("synth", help="synthesize the missing modalities of every sample")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mask", required=True, help="availability bits over T1,T2,FLAIR,T1ce, e.g. 1010")
    p.add_argument("--out-dir", type=Path, required=True, help="receives .pgm/.f32 images and synth.csv")
    _add_config_flags(p, COMMAND_FIELDS["synth"])

    p = sub.add_parser("eval", help="metric suite over a list of masks")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--masks", default="all14", help="all14 | easy | moderate | hard | comma-separated bit strings (default: all14)")
    p.add_argument("--report", type=Path, required=True, help="per-mask summary CSV; per-image rows go to <report>.rows.csv")
    _add_config_flags(p, COMMAND_FIELDS["eval"])

    p = sub.add_parser("ablate", help="train (if absent) and score the ablation variants")
    p.add_argument("--family", type=Path, required=True, help="directory holding <variant>.ckpt files")
    p.add_argument("--data", type=Path, required=True, help="evaluation dataset")
    p.add_argument("--train-data", type=Path, help="dataset used to train variants missing from --family")
    p.add_argument("--variants", default=",".join(ex.ABLATIONS), help="comma-separated variant names (default: all)")
    p.add_argument("--masks", default="all14", help="masks cycled over the evaluation samples (default: all14)")
    p.add_argument("--report", type=Path, required=True)
    _add_config_flags(p, COMMAND_FIELDS["ablate"])

    p = sub.add_parser("sweep-T", help="train and sample across step counts")
    p.add_argument("--data", type=Path, required=True, help="training dataset")
    p.add_argument("--test", type=Path, required=True, help="evaluation dataset")
    p.add_argument("--T-list", dest="T_list", default="25,50,100,200", help="step counts (default: 25,50,100,200)")
    p.add_argument("--masks", default="all14", help="masks cycled over the evaluation samples (default: all14)")
    p.add_argument("--no-train", action="store_true", help="time and score freshly initialized models only")
    p.add_argument("--report", type=Path, required=True, help="PSNR-vs-T CSV; timings go to <report>.timing.csv")
    _add_config_flags(p, COMMAND_FIELDS["sweep-T"])
    return parser


# ---------------------------------------------------------------------------
# commands


def _limit(samples, cfg: RunConfig):
    return samples[: cfg.eval_limit] if cfg.eval_limit else samples


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


def cmd_gen_data(args) -> int:
    cfg = _config(args, COMMAND_FIELDS["gen-data"])
    samples = generate_dataset(cfg.count, cfg.size, cfg.data_seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(samples, args.out, cfg.data_seed)
    print(f"wrote {len(samples)} samples ({cfg.size}x{cfg.size}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args, COMMAND_FIELDS["train"])
    samples = read_dataset(args.data)
    log = args.log or _sibling(args.out, ".log.csv")
    if log.exists():
        log.unlink()
    args.out.parent.mkdir(parents=True, exist_ok=True)

    def progress(state, loss):
        if state.step % 50 == 0:
            print(f"step {state.step}/{state.total_steps} stage {state.stage()} loss {loss:.4f}", flush=True)

    state, losses = ex.train_model(cfg, samples, log, progress)
    save_checkpoint(state, args.out)
    _write(_sibling(args.out, ".config"), cfg.to_text())
    print(f"trained {state.step} steps, last loss {losses[-1]:.4f}; checkpoint {args.out}")
    return EXIT_OK


def _sample_config(args, state) -> RunConfig:
    """Checkpoint settings for everything the model was trained with, plus
    sampling flags from the command line."""
    t = state.config
    sch = state.schedule
    base = RunConfig(T=sch.T, beta_start=sch.beta_start, beta_end=sch.beta_end, phase_boundary=sch.phase_boundary,
                     kernel_size=t.kernel_size, sigma=t.sigma or 0.0, hf_mode=t.hf_mode, guidance=t.guidance,
                     use_sources=t.use_sources, dynamic_selection=t.dynamic_selection)
    file_cfg = _config(args, COMMAND_FIELDS["synth"])
    return base.with_overrides({n: getattr(file_cfg, n) for n in _SAMPLE})


def to_pgm(image: np.ndarray) -> bytes:
    """8-bit binary graymap; [-1, 1] maps affinely onto 0..255."""
    img = np.clip(np.round((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    H, W = img.shape
    return f"P5\n{W} {H}\n255\n".encode("ascii") + img.tobytes()


def cmd_synth(args) -> int:
    mask = AvailabilityMask.parse(args.mask)
    mask.require_task()
    state = load_checkpoint(args.checkpoint)
    cfg = _sample_config(args, state)
    samples = _limit(read_dataset(args.data), cfg)
    images = stack_modalities(samples).astype(np.float64)
    results = ex.synthesize_pairs(state.params, state.schedule, images, ex.cycled_pairs(len(samples), [mask]), cfg)
    report = ex.score(images, results, with_fid=False)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        for m in mask.missing:
            stem = out / f"s{r.index:04d}_{MODALITIES[m]}"
            stem.with_suffix(".pgm").write_bytes(to_pgm(r.images[m]))
            stem.with_suffix(".f32").write_bytes(np.ascontiguousarray(r.images[m], dtype="<f4").tobytes())
    _write(out / "synth.csv", report.rows_csv())
    print(f"synthesized {len(mask.missing)} modalities for {len(results)} samples into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    masks = ex.parse_masks(args.masks)
    state = load_checkpoint(args.checkpoint)
    cfg = _sample_config(args, state)
    samples = _limit(read_dataset(args.data), cfg)
    report = ex.evaluate(state.params, state.schedule, samples, ex.full_pairs(len(samples), masks), cfg)
    _write(args.report, report.summary_csv("mask"))
    _write(_sibling(args.report, ".rows.csv"), report.rows_csv())
    print(report.summary_csv("mask"), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args, COMMAND_FIELDS["ablate"])
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        ex.variant_config(cfg, v)  # reject unknown names before any work
    masks = ex.parse_masks(args.masks)
    samples = _limit(read_dataset(args.data), cfg)
    args.family.mkdir(parents=True, exist_ok=True)
    train = None
    reports = {}
    for v in variants:
        ckpt = args.family / f"{v}.ckpt"
        vcfg = ex.variant_config(cfg, v)
        if not ckpt.exists():
            if args.train_data is None:
                raise DataIOError(f"{ckpt} missing and no --train-data given")
            train = train if train is not None else read_dataset(args.train_data)
            print(f"training variant {v}", flush=True)
            state, _ = ex.train_model(vcfg, train, _sibling(ckpt, ".log.csv"))
            save_checkpoint(state, ckpt)
        state = load_checkpoint(ckpt)
        reports[v] = ex.evaluate(state.params, state.schedule, samples, ex.cycled_pairs(len(samples), masks),
                                 _sample_config(args, state))
    text = ex.ablation_csv(reports)
    _write(args.report, text)
    print(text, end="")
    return EXIT_OK


def cmd_sweep_T(args) -> int:
    cfg = _config(args, COMMAND_FIELDS["sweep-T"])
    try:
        T_values = [int(x) for x in args.T_list.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad --T-list: {exc}") from exc
    if len(T_values) < 2:
        raise ConfigurationError("--T-list needs at least two values")
    masks = ex.parse_masks(args.masks)
    train = read_dataset(args.data)
    test = _limit(read_dataset(args.test), cfg)
    rows = ex.sweep_T(cfg, train, test, T_values, masks, train_models=not args.no_train)
    _write(args.report, ex.sweep_csv(rows))
    _write(_sibling(args.report, ".timing.csv"), ex.sweep_timing_csv(rows))
    print(ex.sweep_csv(rows), end="")
    print(ex.sweep_timing_csv(rows), end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "synth": cmd_synth,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-T": cmd_sweep_T,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except FreqDiffError as exc:
        print(f"freqdiff {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"freqdiff {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"freqdiff {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
