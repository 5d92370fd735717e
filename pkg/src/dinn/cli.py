"""Command-line entry point: ``dinn gen-data | train | eval | report``.

Every command writes ``config.txt`` (``key = value`` lines) into ``--out``
holding all resolved settings; ``--config FILE`` reads such a file back, with
explicit flags taking precedence.  ``DINN_THREADS`` caps BLAS threads
(default 1, the reference configuration for bitwise reproducibility).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from . import pcs, synth
from .model import init_params
from .tensor import ShapeError
from .training import ConfigError, TrainConfig, metrics_csv, model_config, predict_images, train

log = logging.getLogger("dinn")


class CLIError(Exception):
    pass


@dataclass
class RunConfig:
    command: str = ""
    dataset: str = ""
    checkpoint: str = ""
    out: str = "run"
    seed: int = 0
    frames: int = 600
    subjects: int = 5
    lam: float = 0.1
    batch: int = 32
    pretrain_epochs: int = 6
    adversarial_epochs: int = 20
    lr1: float = 1e-3
    lr2: float = 1e-4
    precision: str = "float32"
    ablation: bool = False
    dump_images: int = 0
    tau: float = 0.5

    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else Path(self.out) / "dataset.dset"

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "checkpoint.dinn"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr1=self.lr1, lr2=self.lr2, lam=self.lam, batch=self.batch,
            epochs_pretrain=self.pretrain_epochs, epochs_adversarial=self.adversarial_epochs,
            seed=self.seed, precision=self.precision, ablation=self.ablation,
        )

    def echo(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _coerce(name: str, raw: str):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise CLIError(f"config key {name}: expected a boolean, got {raw!r}")
    try:
        return {"int": int, "float": float}.get(kind, str)(raw)
    except ValueError as exc:
        raise CLIError(f"config key {name}: cannot parse {raw!r} as {kind}") from exc


def read_config_file(path) -> dict:
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise CLIError(f"{path}:{lineno}: expected 'key = value'")
        if key not in known:
            raise CLIError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw.strip())
    return values


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig) -> None:
    if cfg.subjects < 2:
        raise CLIError(f"--subjects must be >= 2 (sources plus one target), got {cfg.subjects}")
    if cfg.seed < 0:
        raise CLIError(f"--seed must be non-negative, got {cfg.seed}")
    if cfg.frames < 2 * synth.WINDOW:
        raise CLIError(f"--frames must be >= {2 * synth.WINDOW}, got {cfg.frames}")
    profiles = synth.make_subjects(cfg.seed, cfg.subjects)
    ds, split = synth.build_dataset(profiles, cfg.frames, cfg.seed)
    path = cfg.dataset_path()
    synth.save_dataset(path, ds, split)
    print(f"wrote {len(ds)} samples to {path}")
    for k in range(ds.k_total):
        role = "target" if k == ds.target_id else "source"
        n_tr = int(np.sum(ds.subject[split.train] == k))
        n_te = int(np.sum(ds.subject[split.test_source] == k) + np.sum(ds.subject[split.test_target] == k))
        print(f"subject {k} ({role}): {int(np.sum(ds.subject == k))} samples, train {n_tr}, test {n_te}")


def _load_dataset(cfg: RunConfig):
    path = cfg.dataset_path()
    if not path.exists():
        raise CLIError(f"dataset not found: {path}")
    return synth.load_dataset(path)


def cmd_train(cfg: RunConfig) -> None:
    ds, split = _load_dataset(cfg)
    tcfg = cfg.train_config()
    out = Path(cfg.out)
    result = train(ds, split, tcfg)
    (out / "metrics.csv").write_text(metrics_csv(result.history), newline="\n")
    ckpt.save_checkpoint(cfg.checkpoint_path(), result.params)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"trained {len(result.history)} epochs; final loss_g={last.loss_g:.3f} "
              f"loss_d={last.loss_d:.4f} disc_acc={last.disc_acc:.3f}")
    print(f"checkpoint: {cfg.checkpoint_path()}")


def write_pgm(path, image: np.ndarray) -> None:
    """Binary greymap (P5), 8-bit; values in [0, 1] are scaled to 0..255."""
    img = np.asarray(image, dtype=np.float64).squeeze()
    pix = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def cmd_eval(cfg: RunConfig) -> None:
    ds, split = _load_dataset(cfg)
    path = cfg.checkpoint_path()
    if not path.exists():
        raise CLIError(f"checkpoint not found: {path}")
    template = init_params(0, model_config(cfg.train_config(), ds.num_domains))
    params = ckpt.load_checkpoint(path, template)
    idx = np.concatenate([split.test_target, split.test_source])
    preds = predict_images(params, ds.csi[idx])
    rep = pcs.report(preds, ds.skeleton[idx], ds.subject[idx], target=ds.target_id,
                     known_subjects=range(ds.k_total), tau=cfg.tau)
    out = Path(cfg.out)
    (out / "report.csv").write_text(rep.to_csv(), newline="\n")
    (out / "report.txt").write_text(rep.to_text(), newline="\n")
    print(rep.to_text(), end="")
    if cfg.dump_images:
        img_dir = out / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        for i in range(min(cfg.dump_images, len(idx))):
            write_pgm(img_dir / f"pred_{i:04d}.pgm", preds[i])
            write_pgm(img_dir / f"gt_{i:04d}.pgm", ds.skeleton[idx[i]])


def read_report_csv(path) -> pcs.PCSReport:
    rows: dict[str, pcs.SubjectScore] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            name = rec["subject"]
            score = rows.setdefault(name, pcs.SubjectScore(
                name if name == "all" else int(name), {},
                float(rec["mean_distance"]), int(rec["sample_count"])))
            score.pcs[int(rec["theta"])] = float(rec["pcs_percent"])
    if "all" not in rows:
        raise CLIError(f"{path}: no pooled 'all' rows")
    overall = rows.pop("all")
    ordered = list(rows.values())
    if ordered:
        ordered[0].is_target = True
    return pcs.PCSReport(ordered, overall, thresholds=tuple(sorted(overall.pcs)))


def cmd_report(cfg: RunConfig) -> None:
    out = Path(cfg.out)
    rep_path = out / "report.csv"
    metrics_path = out / "metrics.csv"
    if not rep_path.exists() and not metrics_path.exists():
        raise CLIError(f"nothing to report in {out} (no report.csv or metrics.csv)")
    if metrics_path.exists():
        with open(metrics_path, newline="") as fh:
            hist = list(csv.DictReader(fh))
        pre = [float(r["disc_acc"]) for r in hist if r["stage"] == "pretrain"]
        print(f"training: {len(hist)} epochs, final disc_acc={float(hist[-1]['disc_acc']):.3f}"
              + (f", pre-training peak={max(pre):.3f}" if pre else ""))
    if rep_path.exists():
        print(read_report_csv(rep_path).to_text(), end="")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; explicit flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--dataset")
    common.add_argument("--checkpoint")
    common.add_argument("--out")
    common.add_argument("--frames", type=int)
    common.add_argument("--subjects", type=int)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--batch", type=int)
    common.add_argument("--pretrain-epochs", type=int)
    common.add_argument("--adversarial-epochs", type=int)
    common.add_argument("--lr1", type=float)
    common.add_argument("--lr2", type=float)
    common.add_argument("--precision", choices=["float32", "float64"])
    common.add_argument("--ablation", action="store_const", const=True,
                        help="lambda = 0 in both stages (baseline stand-in)")
    common.add_argument("--dump-images", type=int)
    common.add_argument("--tau", type=float, help="prediction binarisation threshold")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dinn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    values["command"] = args.command
    return RunConfig(**values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    threads = int(os.environ.get("DINN_THREADS", "1"))
    try:
        cfg = resolve(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.echo(), newline="\n")
        with threadpool_limits(limits=threads):
            COMMANDS[cfg.command](cfg)
    except (CLIError, ConfigError, ShapeError, ckpt.CheckpointError, ValueError, OSError) as exc:
        print(f"dinn {args.command}: error: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
