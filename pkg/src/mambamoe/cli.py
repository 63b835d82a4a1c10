"""Command-line entry point.

Subcommands: train, eval, predict, inspect, gradcheck, synth, profile.
Experiment knobs live in a config file (`key = value` lines, `#` comments,
unknown keys rejected); `--seed`, `--topk` and `--out` override it.  Exit
codes: 0 success, 1 config error, 2 data error, 3 numerical abort; each
failure prints one `error: <category>: <reason>` line on stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as dataio
from . import profiler
from . import train as training
from .network import CheckpointError, NetSpec, load_checkpoint, save_checkpoint
from .tensor import NumericalError


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class RunConfig:
    """Config-file keys and their defaults (all overridable per file)."""

    dataset: str = "synthetic"  # path to a .hsc file, or the literal "synthetic"
    checkpoint: str = ""  # model file for eval/predict/inspect
    out_dir: str = "out"
    palette: str = ""  # optional palette file for rendered maps
    seed: int = 0
    lr: float = 5e-4
    epochs: int = 200
    samples_per_class: int = 15
    topk_infer: int = 3
    channels: int = 16
    state_dim: int = 8
    repeats: int = 10
    momeb_on: bool = True
    uarb_on: bool = True
    sre_on: bool = True
    sse_on: bool = True
    synth_seed: int = 11


def _parse_value(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"key {key}: {exc}") from exc


def parse_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    kinds = {f.name: type(getattr(cfg, f.name)) for f in fields(cfg)}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {line.rstrip()!r}")
        key, _, raw = body.partition("=")
        key = key.strip()
        if key not in kinds:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(key, raw, kinds[key]))
    return cfg


def config_help_text() -> str:
    lines = ["config file keys (key = value, # comments):"]
    for f in fields(RunConfig):
        lines.append(f"  {f.name} (default: {f.default!r})")
    return "\n".join(lines)


def _train_config(cfg: RunConfig) -> training.TrainConfig:
    try:
        return training.TrainConfig(
            lr=cfg.lr,
            epochs=cfg.epochs,
            samples_per_class=cfg.samples_per_class,
            seed=cfg.seed,
            topk_infer=cfg.topk_infer,
            channels=cfg.channels,
            state_dim=cfg.state_dim,
            momeb_on=cfg.momeb_on,
            uarb_on=cfg.uarb_on,
            sre_on=cfg.sre_on,
            sse_on=cfg.sse_on,
            repeats=cfg.repeats,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load_scene(cfg: RunConfig) -> dataio.HsiScene:
    if cfg.dataset == "synthetic":
        return dataio.generate_synthetic(dataio.default_synthetic_spec(seed=cfg.synth_seed))
    path = Path(cfg.dataset)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    try:
        return dataio.load_hsc(path)
    except dataio.HscError as exc:
        raise DataError(str(exc)) from exc


def _load_model(cfg: RunConfig, scene: dataio.HsiScene):
    if not cfg.checkpoint:
        raise ConfigError("this command needs a `checkpoint = <path>` config key")
    path = Path(cfg.checkpoint)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        params, meta = load_checkpoint(path)
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc
    mismatches = []
    for field_name, expected in (
        ("bands", scene.header.bands),
        ("n_class", scene.header.n_class),
        ("channels", cfg.channels),
        ("state_dim", cfg.state_dim),
    ):
        have = {"bands": params.spec.bands, "n_class": params.spec.n_class, "channels": params.spec.channels, "state_dim": params.spec.state_dim}[field_name]
        if have != expected:
            mismatches.append(f"{field_name}: checkpoint={have} expected={expected}")
    if mismatches:
        raise DataError("checkpoint/config mismatch: " + "; ".join(mismatches))
    return params, meta


def _palette_for(cfg: RunConfig, scene: dataio.HsiScene):
    if cfg.palette:
        path = Path(cfg.palette)
        if not path.exists():
            raise DataError(f"palette not found: {path}")
        return dataio.load_palette(path)
    return dataio.default_palette(scene.header.n_class)


def _parse_topk(raw: str) -> list[int]:
    if ".." in raw:
        lo, _, hi = raw.partition("..")
        ks = list(range(int(lo), int(hi) + 1))
    else:
        ks = [int(raw)]
    for k in ks:
        if not 1 <= k <= 4:
            raise ConfigError(f"topk must be in [1, 4], got {k}")
    return ks


def _eval_flags(meta: dict, cfg: RunConfig) -> dict:
    """Architecture switches are taken from the checkpoint when present so an
    ablated model evaluates as trained."""
    return {
        "momeb_on": bool(meta.get("momeb_on", cfg.momeb_on)),
        "sre_on": bool(meta.get("sre_on", cfg.sre_on)),
        "sse_on": bool(meta.get("sse_on", cfg.sse_on)),
    }


# --- commands --------------------------------------------------------------------


def cmd_train(cfg: RunConfig, out_dir: Path) -> int:
    tcfg = _train_config(cfg)
    scene = _load_scene(cfg)
    result = training.train(tcfg, scene)
    metrics = training.evaluate(
        result.params,
        scene,
        result.test_mask,
        topk=tcfg.topk_infer,
        momeb_on=tcfg.momeb_on,
        sre_on=tcfg.sre_on,
        sse_on=tcfg.sse_on,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        out_dir / "checkpoint.mmoe",
        result.params,
        extra_meta={
            "seed": tcfg.seed,
            "samples_per_class": tcfg.samples_per_class,
            "momeb_on": tcfg.momeb_on,
            "uarb_on": tcfg.uarb_on,
            "sre_on": tcfg.sre_on,
            "sse_on": tcfg.sse_on,
        },
    )
    (out_dir / "history.csv").write_text(training.format_history_csv(result.history), encoding="utf-8")
    (out_dir / "metrics.txt").write_text(
        training.format_metrics_report(metrics, scene.header.class_names), encoding="utf-8"
    )
    pred = training.predict_labels(
        result.params, scene, topk=tcfg.topk_infer, momeb_on=tcfg.momeb_on, sre_on=tcfg.sre_on, sse_on=tcfg.sse_on
    )
    dataio.render_map(pred, _palette_for(cfg, scene), out_dir / "prediction.ppm")
    print(f"trained {tcfg.epochs} epochs in {result.seconds:.1f}s; final loss {result.history[-1][1]:.4f}")
    print(training.format_metrics_report(metrics, scene.header.class_names), end="")
    print(f"outputs in {out_dir}")
    return 0


def cmd_eval(cfg: RunConfig, out_dir: Path, topk_raw: str) -> int:
    scene = _load_scene(cfg)
    params, meta = _load_model(cfg, scene)
    flags = _eval_flags(meta, cfg)
    seed = meta.get("seed", cfg.seed)
    n = meta.get("samples_per_class", cfg.samples_per_class)
    ss_split = np.random.SeedSequence(seed).spawn(3)[1]
    _, test_mask = training.split_per_class(scene.labels.astype(np.int64), n, ss_split)
    print(f"split: seed={seed} samples_per_class={n}; flags {flags}")
    for k in _parse_topk(topk_raw):
        m = training.evaluate(params, scene, test_mask, topk=k, **flags)
        print(f"topk={k}  OA {100 * m.oa:6.2f}  AA {100 * m.aa:6.2f}  kappa {100 * m.kappa:6.2f}")
    return 0


def cmd_predict(cfg: RunConfig, out_dir: Path, topk_raw: str) -> int:
    scene = _load_scene(cfg)
    params, meta = _load_model(cfg, scene)
    flags = _eval_flags(meta, cfg)
    k = _parse_topk(topk_raw)[0]
    pred = training.predict_labels(params, scene, topk=k, **flags)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "prediction.ppm"
    dataio.render_map(pred, _palette_for(cfg, scene), out_path)
    print(f"wrote {out_path}")
    return 0


def cmd_inspect(cfg: RunConfig) -> int:
    from .inspect_experts import inspect_expert_weights

    scene = _load_scene(cfg)
    params, meta = _load_model(cfg, scene)
    flags = _eval_flags(meta, cfg)
    report = inspect_expert_weights(params, scene, momeb_on=flags["momeb_on"], sre_on=flags["sre_on"], sse_on=flags["sse_on"])
    print(report.format())
    return 0


def cmd_gradcheck() -> int:
    from .gradcheck_suite import run_suite

    report_lines, passed = run_suite()
    for line in report_lines:
        print(line)
    if not passed:
        raise NumericalError("gradient check failed")
    return 0


def cmd_synth(cfg: RunConfig, out_dir: Path, spec_name: str) -> int:
    if spec_name != "default":
        raise ConfigError(f"unknown synthetic spec {spec_name!r} (only 'default' is bundled)")
    scene = dataio.generate_synthetic(dataio.default_synthetic_spec(seed=cfg.synth_seed))
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "synthetic.hsc"
    dataio.save_hsc(scene, out_path)
    print(f"wrote {out_path} ({scene.header.bands}x{scene.header.height}x{scene.header.width}, {scene.header.n_class} classes)")
    return 0


def cmd_profile(cfg: RunConfig, input_raw: str, n_class: int) -> int:
    try:
        bands, height, width = (int(tok) for tok in input_raw.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"--input must be BxHxW, got {input_raw!r}") from exc
    spec = NetSpec(bands=bands, channels=cfg.channels, state_dim=cfg.state_dim, n_class=n_class)
    report = profiler.make_report(spec, (bands, height, width))
    print(profiler.report_table(report), end="")
    print(profiler.report_csv(report), end="")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mambamoe",
        description="Spectral-spatial mixture-of-experts state-space classifier",
        epilog=config_help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "predict", "inspect", "gradcheck", "synth", "profile"):
        p = sub.add_parser(name, epilog=config_help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", default=None, help="config file path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--topk", default=None, help="expert count k, or a sweep like 1..4")
        p.add_argument("--out", default=None, help="output directory (default: config out_dir)")
        if name == "synth":
            p.add_argument("--spec", default="default", help="bundled synthetic spec name")
        if name == "profile":
            p.add_argument("--input", default="103x13x13", help="input size BxHxW")
            p.add_argument("--classes", type=int, default=9, help="class count for the head")
    args = parser.parse_args(argv)

    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            if args.command == "synth":
                cfg.synth_seed = args.seed
        if args.topk is not None and args.command not in ("eval", "predict"):
            cfg.topk_infer = _parse_topk(args.topk)[0]
        out_dir = Path(args.out) if args.out is not None else Path(cfg.out_dir)

        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "eval":
            return cmd_eval(cfg, out_dir, args.topk or str(cfg.topk_infer))
        if args.command == "predict":
            return cmd_predict(cfg, out_dir, args.topk or str(cfg.topk_infer))
        if args.command == "inspect":
            return cmd_inspect(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck()
        if args.command == "synth":
            return cmd_synth(cfg, out_dir, args.spec)
        if args.command == "profile":
            return cmd_profile(cfg, args.input, args.classes)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except (DataError, training.SplitError, dataio.HscError, dataio.PaletteError, CheckpointError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, training.TrainingAbort) as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 3


def console_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
