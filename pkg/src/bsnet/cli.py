"""Command-line entry points and experiment harnesses.

Run as ``python -m bsnet <command> [--config run.cfg] [flags]``.  Flags
override keys read from the config file; the config file overrides the
defaults in :class:`RunConfig`.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import explain, imaging, losses, scoring, synthcxr, training
from .network import ensemble, predict_score
from .tensor import ContractError

log = logging.getLogger("bsnet")

ROTATION_ANGLES = tuple(range(-30, 31, 5))
POLICIES = ("none", "photometric", "geometric", "all")


@dataclass
class RunConfig:
    seed: int = 0
    input_size: int = 128
    alpha: float = 0.7
    beta: float = 10.0
    lr: float = 3e-3
    batch: int = 8
    epochs: int = 40
    patience: int = 5
    n_superpixels: int = 200
    attention_mode: str = "ens"
    data_dir: str = "data"
    out_dir: str = "runs"

    def __post_init__(self):
        if self.attention_mode not in ("ha", "sa", "ens"):
            raise ContractError(f"attention_mode must be ha, sa or ens, got {self.attention_mode!r}")

    def train_config(self, stage: str, mode: str = "ha", **kw) -> training.TrainConfig:
        return training.TrainConfig(stage=stage, epochs=self.epochs, batch_size=self.batch, lr=self.lr,
                                    plateau_patience=self.patience, seed=self.seed, alpha=self.alpha,
                                    beta=self.beta, input_size=self.input_size, mode=mode, **kw)

    @property
    def modes(self) -> tuple[str, ...]:
        return ("ha", "sa") if self.attention_mode == "ens" else (self.attention_mode,)


def read_run_config(path) -> dict:
    """Parse a UTF-8 ``key=value`` file; blank lines and ``#`` comments are skipped."""
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ContractError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _coerce(types[key], value)
    return out


def _coerce(kind, value: str):
    return _coerce_type(kind)(value)


def make_run_config(config_path=None, overrides: dict | None = None) -> RunConfig:
    values = read_run_config(config_path) if config_path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)


# -- checkpoints on disk -----------------------------------------------------------

def ckpt_path(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out_dir) / "checkpoints" / name


def load_named(cfg: RunConfig, name: str) -> training.Checkpoint:
    path = ckpt_path(cfg, name)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"missing checkpoint {name!r} at {path}")
    return training.load_checkpoint(path)


def member_names(mode: str) -> list[str]:
    return [f"finetune_{mode}_best", f"finetune_{mode}_last"]


def load_members(cfg: RunConfig, mode: str) -> dict[str, list]:
    """Models per reported row: HA / SA use their best checkpoint, ENS averages best and last of both."""
    if mode in ("ha", "sa"):
        return {mode.upper(): [(training.build_model(load_named(cfg, f"finetune_{mode}_best")), mode)]}
    out = {}
    for m in ("ha", "sa"):
        out[m.upper()] = [(training.build_model(load_named(cfg, f"finetune_{m}_best")), m)]
    out["ENS"] = out["HA"] + out["SA"] + [(training.build_model(load_named(cfg, f"finetune_{m}_last")), m) for m in ("ha", "sa")]
    return out


def distributions(members, images: np.ndarray, use_alignment: bool = True) -> np.ndarray:
    return ensemble([training.predict_distributions(model, images, mode, use_alignment) for model, mode in members])


def load_arrays(cfg: RunConfig, split: str, preprocess: bool = True) -> training.Arrays:
    return training.prepare(synthcxr.load_split(cfg.data_dir, split), cfg.input_size, preprocess)


# -- harnesses --------------------------------------------------------------------------

def run_stage(cfg: RunConfig, stage: str, train: training.Arrays, val: training.Arrays) -> dict[str, training.Checkpoint]:
    """Train one stage (seg, align, score, full) and write its checkpoints."""
    written = {}
    if stage == "seg":
        res = training.train_segmentation(train, val, cfg.train_config("segmentation"))
        written["segmentation"] = res.checkpoint
    elif stage == "align":
        res = training.train_alignment(train, val, cfg.train_config("alignment"), load_named(cfg, "segmentation"))
        written["alignment"] = res.checkpoint
    elif stage == "score":
        init = load_named(cfg, "alignment")
        for mode in cfg.modes:
            written[f"scoring_{mode}"] = training.train_scoring(train, val, cfg.train_config("scoring", mode), init).checkpoint
    elif stage == "full":
        for mode in cfg.modes:
            res = training.finetune_all(train, val, cfg.train_config("finetune", mode), load_named(cfg, f"scoring_{mode}"))
            written[f"finetune_{mode}_best"] = res.checkpoint
            written[f"finetune_{mode}_last"] = res.last
    else:
        raise ContractError(f"unknown stage {stage!r}")
    for name, ck in written.items():
        training.save_checkpoint(ck, ckpt_path(cfg, name))
    return written


def write_predictions(path, ids, preds: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", *losses.REGION_NAMES, "global"])
        for i, s in zip(ids, preds):
            wr.writerow([i, *synthcxr.score_to_row(s), int(np.sum(s))])


def evaluate_predictions(preds: dict[str, np.ndarray], refs: np.ndarray, out_dir) -> dict[str, losses.ErrorStats]:
    """Per-model stats CSV (six regions, average, global) and region/global confusion matrices."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name, p in preds.items():
        per = losses.error_stats(p, refs, "region")
        avg = losses.error_stats(p, refs, "average")
        glob = losses.error_stats(p, refs, "global")
        losses.write_stats_csv(out / f"stats_{name}.csv", [*per, avg, glob])
        write_matrix(out / f"confusion_{name}_region.csv", losses.confusion_matrix(p, refs, 4))
        write_matrix(out / f"confusion_{name}_global.csv",
                     losses.confusion_matrix(p.reshape(len(p), -1).sum(1), refs.reshape(len(refs), -1).sum(1), 19))
        summary[name] = avg
    return summary


def write_matrix(path, m: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["reference", *[f"pred_{j}" for j in range(m.shape[1])]])
        for i, row in enumerate(m):
            wr.writerow([i, *row.tolist()])


def rotation_sweep(members, data: training.Arrays, angles=ROTATION_ANGLES) -> list[tuple[float, float, float]]:
    """Region MAE of rotated copies of ``data``, with the aligner active and forced to identity."""
    rows = []
    for angle in angles:
        params = imaging.affine_params(rotation_deg=angle)
        rotated = np.stack([imaging.warp_affine(im, params) for im in data.images]).astype(np.float32)
        with_ = losses.region_mae(predict_score(distributions(members, rotated, True)), data.scores)
        without = losses.region_mae(predict_score(distributions(members, rotated, False)), data.scores)
        rows.append((float(angle), with_, without))
    return rows


def write_sweep(rows, csv_path, png_path=None) -> None:
    Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["angle", "mae_with", "mae_without"])
        for a, w, wo in rows:
            wr.writerow([f"{a:g}", f"{w:.6f}", f"{wo:.6f}"])
    if png_path is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        a = [r[0] for r in rows]
        fig, ax = plt.subplots(figsize=(5, 3.2), dpi=100)
        ax.plot(a, [r[1] for r in rows], "o-", label="with alignment")
        ax.plot(a, [r[2] for r in rows], "s--", label="alignment off")
        ax.set_xlabel("rotation (deg)")
        ax.set_ylabel("region MAE")
        ax.legend()
        fig.tight_layout()
        fig.savefig(png_path)
        plt.close(fig)


def ablate_augment(cfg: RunConfig, records_train, records_val, init: training.Checkpoint, mode: str = "ha",
                   policies=POLICIES, epochs: tuple[int, int] | None = None) -> list[dict]:
    """Stage 3 + 4 under each augmentation policy (with preprocessing), plus 'all' without preprocessing."""
    e3, e4 = epochs or (cfg.epochs, cfg.epochs)
    runs = [(p, True) for p in policies] + [("all", False)]
    cache = {}
    rows = []
    for policy, pre in runs:
        if pre not in cache:
            cache[pre] = (training.prepare(records_train, cfg.input_size, pre), training.prepare(records_val, cfg.input_size, pre))
        tr, va = cache[pre]
        c3 = replace(cfg.train_config("scoring", mode, augment=policy, preprocess=pre), epochs=e3)
        s3 = training.train_scoring(tr, va, c3, init)
        c4 = replace(c3, stage="finetune", epochs=e4)
        model = training.build_model(training.finetune_all(tr, va, c4, s3.checkpoint).checkpoint)
        train_mae = training.scoring_mae(model, tr, mode)
        val_mae = training.scoring_mae(model, va, mode)
        rows.append({"policy": policy, "preprocessing": pre, "train_mae": train_mae, "val_mae": val_mae, "gap": val_mae - train_mae})
    return rows


def write_rows(path, rows: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


# -- commands ------------------------------------------------------------------------------

def cmd_gen_data(cfg, args):
    splits = synthcxr.gen_dataset(args.n, cfg.seed, cfg.data_dir, size=cfg.input_size)
    log.info("wrote %s", {k: len(v) for k, v in splits.items()})


def cmd_train(cfg, args):
    run_stage(cfg, args.stage, load_arrays(cfg, "train"), load_arrays(cfg, "val"))


def cmd_predict(cfg, args):
    data = load_arrays(cfg, args.split)
    for name, members in load_members(cfg, cfg.attention_mode).items():
        if cfg.attention_mode == "ens" and name != "ENS":
            continue
        preds = predict_score(distributions(members, data.images))
        write_predictions(Path(cfg.out_dir) / f"predictions_{args.split}_{name}.csv", data.ids, preds)


def cmd_explain(cfg, args):
    data = load_arrays(cfg, args.split)
    if args.id not in data.ids:
        raise FileNotFoundError(f"image id {args.id!r} not in split {args.split!r}")
    img = data.images[data.ids.index(args.id)]
    members = load_members(cfg, cfg.attention_mode)
    key = "ENS" if cfg.attention_mode == "ens" else cfg.attention_mode.upper()
    expl = explain.explanation_map(lambda b: distributions(members[key], b), img, cfg.n_superpixels)
    out = Path(cfg.out_dir) / "explain"
    out.mkdir(parents=True, exist_ok=True)
    explain.render_explanation(expl, expl.prediction, out / f"{args.id}_{key}.png")
    explain.write_deltas_csv(out / f"{args.id}_{key}.csv", expl)


def cmd_evaluate(cfg, args):
    data = load_arrays(cfg, args.split)
    preds = {name: predict_score(distributions(m, data.images)) for name, m in load_members(cfg, cfg.attention_mode).items()}
    evaluate_predictions(preds, data.scores, Path(cfg.out_dir) / "eval" / args.split)


def cmd_agreement(cfg, args):
    panels = scoring.read_rater_csv(args.raters)
    extra = None
    if args.predictions:
        with open(args.predictions, newline="", encoding="utf-8") as fh:
            extra = {"model": {r["id"]: synthcxr.row_to_score([int(r[c]) for c in losses.REGION_NAMES]) for r in csv.DictReader(fh)}}
    scoring.agreement_report(panels, Path(cfg.out_dir) / "agreement.csv", extra)


def cmd_sweep_rotation(cfg, args):
    data = load_arrays(cfg, args.split)
    key = "ENS" if cfg.attention_mode == "ens" else cfg.attention_mode.upper()
    rows = rotation_sweep(load_members(cfg, cfg.attention_mode)[key], data)
    out = Path(cfg.out_dir)
    write_sweep(rows, out / "rotation_sweep.csv", out / "rotation_sweep.png")


def cmd_ablate_augment(cfg, args):
    rows = ablate_augment(cfg, synthcxr.load_split(cfg.data_dir, "train"), synthcxr.load_split(cfg.data_dir, "val"),
                          load_named(cfg, "alignment"), cfg.modes[0])
    write_rows(Path(cfg.out_dir) / "ablate_augment.csv", rows)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "agreement": cmd_agreement,
    "sweep-rotation": cmd_sweep_rotation,
    "ablate-augment": cmd_ablate_augment,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bsnet")
    p.add_argument("--config")
    for f in fields(RunConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=_coerce_type(f.type), default=None)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data").add_argument("--n", type=int, default=2500)
    sub.add_parser("train").add_argument("--stage", choices=("seg", "align", "score", "full"), required=True)
    for name in ("predict", "evaluate", "sweep-rotation"):
        sub.add_parser(name).add_argument("--split", default="test")
    ex = sub.add_parser("explain")
    ex.add_argument("--id", required=True)
    ex.add_argument("--split", default="test")
    ag = sub.add_parser("agreement")
    ag.add_argument("--raters", required=True)
    ag.add_argument("--predictions")
    sub.add_parser("ablate-augment")
    return p


def _coerce_type(kind):
    return {"int": int, "float": float}.get(kind if isinstance(kind, str) else kind.__name__, str)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = make_run_config(args.config, {f.name: getattr(args, f.name) for f in fields(RunConfig)})
        COMMANDS[args.command](cfg, args)
    except (ContractError, FileNotFoundError, training.CheckpointError, ValueError) as exc:
        print(f"bsnet {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
