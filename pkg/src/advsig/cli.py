"""``advsig`` command line: one subcommand per workflow step.

Every invocation writes ``runs/<subcommand>-<confighash>-s<seed>/`` inside the
workspace with the resolved config, a ``run.json`` metadata record and the
step's tables. Exit codes: 0 ok, 1 unexpected, 2 configuration, 3 missing
upstream artifact, 4 numerical failure, 5 corrupted artifact.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import render
from .adv_dataset import load_arrays, load_split
from .attacks import AttackConfigError, AttackKind, NumericalError
from .checkpoint import CorruptionError, atomic_write
from .pipeline import (MissingArtifact, RunConfig, Workspace, feature_network, gen_attacks_step,
                       load_config, new_bundle, train_victim_step)
from .recognition import (InputMode, Recognizer, ablation_grid, comparison_rows, evaluate_confusion,
                          recovery_table, train_recognizer, write_tsv)
from .redrl import load_bundle, save_bundle, train_redrl
from .saliency import (aggregate_profiles, compute_val_stats, input_saliency_map, read_profile,
                       write_profile)
from .victim_zoo import ConfigurationError, RegistryError, load_victim

log = logging.getLogger("advsig")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC, EXIT_CORRUPT = 0, 1, 2, 3, 4, 5
OUT_ENV = "ADVSIG_OUT"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """One run directory: lockfile, resolved config echo and metadata record."""

    def __init__(self, ws: Workspace, subcommand: str, cfg: RunConfig, argv: list[str]):
        self.ws, self.subcommand, self.cfg = ws, subcommand, cfg
        self.dir = ws.run_dir(subcommand, cfg)
        self.inputs: dict[str, str] = {}
        self.artifacts: dict[str, str] = {}
        self.metrics: dict = {}
        self.argv = argv

    def input(self, path) -> Path:
        path = Path(path)
        self.inputs[str(path)] = _sha256(path)
        return path

    def artifact(self, path) -> Path:
        path = Path(path)
        self.artifacts[str(path)] = _sha256(path)
        return path

    @contextlib.contextmanager
    def active(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        lock = self.dir / "run.lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigurationError(f"run directory is locked by another process: {lock}")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        start = time.time()
        try:
            atomic_write(self.dir / "config.yaml", yaml.safe_dump(self.cfg.to_dict(), sort_keys=True))
            yield self
            record = {"subcommand": self.subcommand, "argv": self.argv,
                      "config_hash": self.cfg.digest(), "seed": self.cfg.seed,
                      "wall_time_s": round(time.time() - start, 3),
                      "inputs": self.inputs, "artifacts": self.artifacts, "metrics": self.metrics}
            atomic_write(self.dir / "run.json", json.dumps(record, indent=2, sort_keys=True))
        finally:
            lock.unlink(missing_ok=True)


# --------------------------------------------------------------------------
# helpers

def _victim(run: Run, victim_id):
    path = run.input(run.ws.find_victim(victim_id))
    return load_victim(path)


def _manifest(run: Run, victim):
    m = run.ws.manifest(run.cfg.data.dataset, victim.victim_id)
    run.input(m.directory / "manifest.json")
    return m


def _bundle(run: Run, victim, seed: int, name: str = "full"):
    path = run.ws.bundle_path(victim.victim_id, name, seed)
    if not path.exists():
        raise MissingArtifact(f"REDRL checkpoint not found: {path} (run train-redrl first)")
    return load_bundle(run.input(path), victim, feature_network(run.cfg, run.ws))


def _modes(arg) -> list[InputMode]:
    if not arg:
        return list(InputMode)
    return [InputMode(m) for m in arg.split(",")]


# --------------------------------------------------------------------------
# subcommands

def cmd_train_victim(run: Run, args):
    victim, path, acc = train_victim_step(run.cfg, run.ws)
    run.artifact(path)
    run.metrics = {"victim_id": victim.victim_id, "test_accuracy": acc,
                   "train_log": victim.train_log}
    print(f"victim {victim.victim_id} test accuracy {100 * acc:.2f}%")


def cmd_gen_attacks(run: Run, args):
    victim = _victim(run, args.victim)
    m = gen_attacks_step(run.cfg, run.ws, victim)
    run.artifact(m.directory / "manifest.json")
    for split, shards in m.splits.items():
        for sh in shards:
            run.artifact(m.directory / split / sh["file"])
    run.metrics = {"class_counts": m.class_counts, "warnings": m.warnings}
    for w in m.warnings:
        log.warning(w)
    print(f"dataset {m.directory} counts {m.class_counts}")


def cmd_train_redrl(run: Run, args):
    cfg = run.cfg
    victim = _victim(run, args.victim)
    manifest = _manifest(run, victim)
    bundle = new_bundle(cfg, victim, feature_network(cfg, run.ws), cfg.seed)
    s = cfg.recognizer
    bundle, metrics = train_redrl(bundle, manifest, s.epochs, s.lr, s.warmup_epochs, cfg.seed,
                                  s.batch_size)
    path = run.ws.bundle_path(victim.victim_id, "full", cfg.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, path)
    run.artifact(path)
    run.metrics = {"epochs": metrics}
    print(f"saved {path}")


def cmd_eval_recognition(run: Run, args):
    cfg = run.cfg
    victim = _victim(run, args.victim)
    manifest = _manifest(run, victim)
    results, metrics = {}, {}
    for mode in _modes(args.mode):
        if mode is InputMode.RESIDUAL_CONCAT:
            path = run.ws.bundle_path(victim.victim_id, "full", cfg.seed)
            if path.exists():
                bundle = load_bundle(run.input(path), victim, feature_network(cfg, run.ws))
                rec = Recognizer(bundle.Psi, mode, bundle, bundle.metrics)
            else:
                bundle = new_bundle(cfg, victim, feature_network(cfg, run.ws), cfg.seed)
                rec = train_recognizer(mode, manifest, seed=cfg.seed, settings=cfg.recognizer,
                                       bundle=bundle)
        else:
            rec = train_recognizer(mode, manifest, seed=cfg.seed, settings=cfg.recognizer)
        cm, _ = evaluate_confusion(rec, manifest)
        results[mode.value] = cm
        name = f"{cfg.data.dataset}_{victim.victim_id}_{mode.value}_s{cfg.seed}"
        run.artifact(write_tsv(run.dir / f"confusion_{name}.tsv",
                               ["true\\pred", *[AttackKind(k).label for k in range(6)], "acc%"],
                               cm.as_rows()))
        run.artifact(render.confusion_figure(cm.counts, run.dir / f"confusion_{name}.png",
                                             f"{mode.value} total {100 * cm.total_accuracy:.2f}%"))
        metrics[mode.value] = cm.total_accuracy
    header, rows = comparison_rows(results)
    run.artifact(write_tsv(run.dir / "comparison.tsv", header, rows))
    run.artifact(render.accuracy_bars(header, rows, run.dir / "comparison.png", "recognition"))
    run.metrics = {"total_accuracy": metrics}
    for r in [header, *rows]:
        print("\t".join(map(str, r)))


def cmd_recovery_table(run: Run, args):
    victim = _victim(run, args.victim)
    manifest = _manifest(run, victim)
    bundle = _bundle(run, victim, run.cfg.seed)
    rows = recovery_table(bundle.G, [victim], manifest)
    table = [[r["victim"], r["kind"], r["n"], f"{100 * r['acc_before']:.2f}",
              f"{100 * r['acc_after']:.2f}"] for r in rows]
    run.artifact(write_tsv(run.dir / "recovery.tsv",
                           ["victim", "kind", "n", "before%", "after%"], table))
    run.metrics = {"rows": rows}
    for r in table:
        print("\t".join(map(str, r)))


def cmd_ablate(run: Run, args):
    cfg = run.cfg
    victim = _victim(run, args.victim)
    manifest = _manifest(run, victim)
    template = new_bundle(cfg, victim, feature_network(cfg, run.ws), cfg.seed)
    grid = ablation_grid(manifest, template, cfg.ablation.scenarios, cfg.ablation.seeds,
                         cfg.recognizer)
    med = {}
    for name, cms in grid.items():
        totals = [cm.total_accuracy for cm in cms]
        med[name] = float(np.median(totals))
        for seed, cm in zip(cfg.ablation.seeds, cms):
            write_tsv(run.dir / f"ablation_{name}_s{seed}.tsv",
                      ["true\\pred", *[AttackKind(k).label for k in range(6)], "acc%"], cm.as_rows())
    # per-class table from the first seed of each scenario
    header, rows = comparison_rows({n: cms[0] for n, cms in grid.items()})
    rows.append(["Median total", *(f"{100 * med[n]:.2f}" for n in grid)])
    run.artifact(write_tsv(run.dir / "ablation.tsv", header, rows))
    run.artifact(render.accuracy_bars(header, rows[:-1], run.dir / "ablation.png", "ablation"))
    run.metrics = {"median_total": med,
                   "totals": {n: [cm.total_accuracy for cm in cms] for n, cms in grid.items()}}
    for r in [header, *rows]:
        print("\t".join(map(str, r)))


def cmd_saliency(run: Run, args):
    cfg = run.cfg
    victim = _victim(run, args.victim)
    manifest = _manifest(run, victim)
    val = load_arrays(manifest, "train", ("x_clean", "label"), kinds=[AttackKind.CLEAN])
    n_val = min(cfg.data.validation, len(val["label"]))
    stats = compute_val_stats(victim, val["x_clean"][:n_val], val["label"][:n_val])
    kinds = [AttackKind.parse(k) for k in args.attack.split(",")] if args.attack else list(AttackKind)
    layer_names = [n for n, _ in stats.layer_filters]
    run.metrics = {"validation_size": n_val, "zero_sigma_filters": len(stats.zero_sigma),
                   "profiles": {}}
    for kind in kinds:
        records = list(load_split(manifest, "test", kinds=[kind]))[: cfg.saliency.max_records]
        prof = aggregate_profiles(victim, stats, records, kind)
        run.artifact(write_profile(prof, run.dir / f"profile_{kind.label}.tsv", layer_names))
        run.metrics["profiles"][kind.label] = prof.n_samples
        kept = [r for r in records if r.clean_id in set(prof.sample_ids)][: cfg.saliency.heatmaps]
        for r in kept:
            m = input_saliency_map(victim, r.x_adv, r.label, stats, cfg.saliency.n,
                                   cfg.saliency.boost).numpy()
            png = render.heatmap_figure(r.x_adv.numpy(), m,
                                        run.dir / f"heatmap_{kind.label}_{r.clean_id}.png",
                                        f"{kind.label} id {r.clean_id}")
            run.artifact(png)
            run.artifact(png.with_suffix(".npy"))
        print(f"{kind.label}: {prof.n_samples} samples")


def cmd_render(run: Run, args):
    src = Path(args.input) if args.input else run.ws.root / "runs"
    if not src.exists():
        raise MissingArtifact(f"nothing to render under {src}")
    profiles = {}
    for path in sorted(src.rglob("profile_*.tsv")):
        prof, _ = read_profile(run.input(path))
        name = path.stem.removeprefix("profile_")
        profiles[name] = prof
        run.artifact(render.profile_figure({name: prof}, run.dir / f"profile_{name}.png", name))
    if profiles:
        run.artifact(render.profile_figure(profiles, run.dir / "profiles.png", "saliency profiles"))
    n_cm = 0
    for path in sorted(src.rglob("confusion_*.tsv")):
        rows = [line.split("\t") for line in path.read_text().splitlines()[1:]]
        counts = np.array([[int(v) for v in r[1:-1]] for r in rows])
        run.artifact(render.confusion_figure(counts, run.dir / f"{path.stem}.png", path.stem))
        n_cm += 1
    if not profiles and not n_cm:
        raise MissingArtifact(f"no profile or confusion tables under {src}")
    run.metrics = {"profiles": len(profiles), "confusion_matrices": n_cm}
    print(f"rendered {len(profiles)} profiles and {n_cm} confusion matrices into {run.dir}")


COMMANDS = {
    "train-victim": cmd_train_victim, "gen-attacks": cmd_gen_attacks,
    "train-redrl": cmd_train_redrl, "eval-recognition": cmd_eval_recognition,
    "recovery-table": cmd_recovery_table, "ablate": cmd_ablate, "saliency": cmd_saliency,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help=f"workspace root (default ${OUT_ENV} or ./advsig-out)")
    common.add_argument("--dataset", help="base dataset tag: photo-crops or cifar10")
    common.add_argument("--victim", help="victim id or checkpoint path")
    common.add_argument("--mode", help="recognizer input modes: adv, gt, residual (comma list)")
    common.add_argument("--attack", help="attack kinds, comma separated")
    common.add_argument("--epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="advsig", description="Adversarial attack recognition workflow.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "render":
            p.add_argument("--input", help="directory to scan for tables (default: all runs)")
        if name == "saliency":
            p.add_argument("--n", type=int, help="top filters boosted for the input map")
            p.add_argument("--boost", type=float, help="boost factor for the top filters")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {"seed": args.seed, "data.dataset": args.dataset,
                 "saliency.n": getattr(args, "n", None), "saliency.boost": getattr(args, "boost", None)}
    if args.epochs is not None:
        key = {"train-victim": "schedule.epochs"}.get(args.command, "recognizer.epochs")
        overrides[key] = args.epochs
    if args.attack and args.command == "gen-attacks":
        overrides["attacks.kinds"] = [AttackKind.parse(k).label for k in args.attack.split(",")]
    cfg = load_config(args.config, overrides)
    if args.command == "train-victim" and args.epochs is not None:
        # a shortened run keeps the decay points that still fit
        d = tuple(e for e in cfg.schedule.decay_epochs if e < cfg.schedule.epochs)
        cfg.schedule = replace(cfg.schedule, decay_epochs=d)
    return cfg


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        torch.manual_seed(cfg.seed)
        ws = Workspace(args.out or Path(os.environ.get(OUT_ENV, "advsig-out")))
        run = Run(ws, args.command, cfg, argv)
        with run.active():
            COMMANDS[args.command](run, args)
        return EXIT_OK
    except (ConfigurationError, AttackConfigError, RegistryError, ValueError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        log.error("missing dependency: %s", exc)
        return EXIT_DEPENDENCY
    except (NumericalError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except CorruptionError as exc:
        log.error("corrupted artifact: %s", exc)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
