"""Command-line pipeline: synth, build, train, eval, attack, report.

Configuration is a flat ``key=value`` text file; every key can also be
overridden with a ``--key`` flag of the same name. Each command writes a
``manifest.json`` capturing the full effective config, seeds, and input
hashes, and never embeds timestamps, so identical runs produce identical
bytes. ``EUPAS_THREADS`` caps torch's kernel parallelism (default 1 to keep
runs reproducible).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch

from eupas import data as data_mod
from eupas import evaluate, training
from eupas.attacks import AttackConfig, run_attack_suite
from eupas.augment import AugmentConfig
from eupas.contrast import AdvConfig
from eupas.data import build_relation_graphs, generate_synthetic_city, load_city, write_city
from eupas.training import (
    AblationFlags,
    CheckpointError,
    DivergenceError,
    TrainingConfig,
    load_checkpoint,
    save_checkpoint,
)

# name -> (type, default); bools accept true/false/1/0/yes/no in config files
CONFIG_FIELDS: dict[str, tuple[type, object]] = {
    "embedding_dim": (int, 96),
    "layers": (int, 3),
    "learning_rate": (float, 0.001),
    "beta": (float, 0.15),
    "mu": (float, 1e-4),
    "epochs": (int, 200),
    "seed": (int, 0),
    "top_k": (int, 10),
    "aug_eta": (float, 1.0),
    "aug_sigma": (float, 0.01),
    "aug_dropout": (float, 0.5),
    "aug_eq4_mode": (bool, False),
    "devcopy_psi": (float, 0.5),
    "trickster_epsilon": (float, 1.0),
    "tau": (float, 4.0),
    "contrast_alpha": (float, 0.5),
    "sim_temp": (float, 1.0),
    "no_augment": (bool, False),
    "no_supervised": (bool, False),
    "no_selfsupervised": (bool, False),
    "no_trickster": (bool, False),
    "no_devcopy": (bool, False),
    "attack_epsilon": (float, 0.1),
    "attack_step": (float, 0.0),  # 0 means epsilon / 4
    "attack_iterations": (int, 10),
    "noise_fraction": (float, 0.1),
    "noise_level": (float, 1.0),
    "folds": (int, 5),
    "clusters": (int, 12),
}


class CliError(RuntimeError):
    pass


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def load_config_file(path: str | Path) -> dict:
    """Parse a flat key=value file, rejecting unknown keys."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in CONFIG_FIELDS:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        kind, _ = CONFIG_FIELDS[key]
        try:
            values[key] = _parse_bool(raw) if kind is bool else kind(raw)
        except ValueError as exc:
            raise CliError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return values


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults < config file < command-line overrides."""
    values = {name: default for name, (_, default) in CONFIG_FIELDS.items()}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for name in CONFIG_FIELDS:
        override = getattr(args, name, None)
        if override is not None:
            values[name] = override
    return values


def training_config(values: dict) -> TrainingConfig:
    return TrainingConfig(
        dim=values["embedding_dim"],
        layers=values["layers"],
        lr=values["learning_rate"],
        beta=values["beta"],
        mu=values["mu"],
        epochs=values["epochs"],
        seed=values["seed"],
        top_k=values["top_k"],
        augment=AugmentConfig(
            eta=values["aug_eta"],
            sigma=values["aug_sigma"],
            dropout_p=values["aug_dropout"],
            eq4_mode=values["aug_eq4_mode"],
            seed=values["seed"],
        ),
        adv=AdvConfig(
            psi=values["devcopy_psi"],
            epsilon=values["trickster_epsilon"],
            tau=values["tau"],
            alpha=values["contrast_alpha"],
            sim_temp=values["sim_temp"],
        ),
        ablations=AblationFlags(
            no_augment=values["no_augment"],
            no_supervised=values["no_supervised"],
            no_selfsupervised=values["no_selfsupervised"],
            no_trickster=values["no_trickster"],
            no_devcopy=values["no_devcopy"],
        ),
    )


def attack_configs(values: dict) -> list[AttackConfig]:
    step = values["attack_step"] if values["attack_step"] > 0 else None
    return [
        AttackConfig(method="fgsm", epsilon=values["attack_epsilon"], seed=values["seed"]),
        AttackConfig(
            method="pgd",
            epsilon=values["attack_epsilon"],
            step=step,
            iterations=values["attack_iterations"],
            seed=values["seed"],
        ),
        AttackConfig(
            method="poisson",
            noise_fraction=values["noise_fraction"],
            noise_level=values["noise_level"],
            seed=values["seed"],
        ),
    ]


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _hash_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, values: dict, inputs: list[Path]):
    manifest = {
        "command": command,
        "config": {k: values[k] for k in sorted(values)},
        "git": _git_describe(),
        "inputs": {p.name: _hash_file(p) for p in sorted(inputs, key=lambda p: p.name)},
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _load_graph(data_dir: Path, top_k: int):
    records, poi, geo, labels, targets = load_city(data_dir)
    graph = build_relation_graphs(records, poi, geo, top_k)
    return graph, (records, poi, geo), labels, targets


def _data_files(data_dir: Path) -> list[Path]:
    names = ("trips.csv", "poi.csv", "geo.txt", "labels.csv", "targets.csv")
    return [data_dir / n for n in names if (data_dir / n).exists()]


def cmd_synth(args) -> int:
    if args.clusters > args.regions:
        raise CliError(f"--clusters {args.clusters} exceeds --regions {args.regions}")
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CliError(f"output directory {out} exists; pass --force to overwrite")
    records, poi, geo, labels, targets = generate_synthetic_city(
        args.regions, args.poi_categories, args.clusters, args.seed
    )
    paths = write_city(out, records, poi, geo, labels, targets)
    values = {
        "regions": args.regions,
        "poi_categories": args.poi_categories,
        "clusters": args.clusters,
        "seed": args.seed,
    }
    write_manifest(out, "synth", values, paths)
    print(f"wrote {len(paths)} files + manifest to {out}")
    return 0


def cmd_build(args) -> int:
    values = resolve_config(args)
    data_dir = Path(args.data)
    graph, _, _, _ = _load_graph(data_dir, values["top_k"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {
        "n_regions": np.array([graph.n_regions]),
        "top_k": np.array([graph.top_k]),
        "p_origin": graph.p_origin,
        "p_destination": graph.p_destination,
        "trip_counts": graph.trip_counts.toarray(),
    }
    for name in graph.relations:
        arrays[f"adjacency_{name}"] = graph.adjacency[name].toarray()
        arrays[f"similarity_{name}"] = graph.similarity[name]
    np.savez(out / "graph.npz", **arrays)
    write_manifest(out, "build", values, _data_files(data_dir))
    print(f"wrote graph.npz to {out}")
    return 0


def cmd_train(args) -> int:
    values = resolve_config(args)
    config = training_config(values)
    data_dir = Path(args.data)
    graph, _, _, _ = _load_graph(data_dir, config.top_k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        checkpoint, fused, history = training.train(graph, config)
    except DivergenceError as exc:
        save_checkpoint(exc.checkpoint, out / "checkpoint.bin")
        raise CliError(f"{exc} (last healthy checkpoint saved)") from exc
    save_checkpoint(checkpoint, out / "checkpoint.bin")
    (out / "loss_history.csv").write_text(
        training.history_to_csv(history), encoding="utf-8"
    )
    _write_embeddings_tsv(out / "embeddings.tsv", fused.embeddings.numpy())
    write_manifest(out, "train", values, _data_files(data_dir))
    print(f"trained {config.epochs} epochs; artifacts in {out}")
    return 0


def _write_embeddings_tsv(path: Path, embeddings: np.ndarray):
    lines = [f"{embeddings.shape[0]} {embeddings.shape[1]}"]
    for row in embeddings:
        lines.append("\t".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_checkpoint_arg(args) -> tuple[Path, training.Checkpoint]:
    path = Path(args.checkpoint)
    if path.is_dir():
        path = path / "checkpoint.bin"
    if not path.exists():
        raise CliError(f"missing checkpoint artifact: {path}")
    return path, load_checkpoint(path)


def cmd_eval(args) -> int:
    values = resolve_config(args)
    config = training_config(values)
    _, checkpoint = _load_checkpoint_arg(args)
    if checkpoint.config_digest != config.digest():
        raise CliError(
            "checkpoint was trained under a different config "
            f"(digest {checkpoint.config_digest[:12]}.. != {config.digest()[:12]}..)"
        )
    data_dir = Path(args.data)
    graph, _, labels, targets = _load_graph(data_dir, config.top_k)
    if targets is None:
        raise CliError(f"missing targets.csv in {data_dir}")
    fused = training.embeddings_from_checkpoint(checkpoint, graph, config)
    report = evaluate.evaluate_embeddings(
        fused.embeddings.numpy(),
        targets,
        labels,
        n_clusters=values["clusters"],
        folds=values["folds"],
        seed=values["seed"],
        config_digest=config.digest(),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.csv").write_text(report.to_csv(), encoding="utf-8")
    write_manifest(out, "eval", values, _data_files(data_dir))
    print(report.to_csv(), end="")
    return 0


def cmd_attack(args) -> int:
    values = resolve_config(args)
    config = training_config(values)
    _, checkpoint = _load_checkpoint_arg(args)
    if checkpoint.config_digest != config.digest():
        raise CliError("checkpoint was trained under a different config")
    data_dir = Path(args.data)
    graph, dataset, labels, targets = _load_graph(data_dir, config.top_k)
    if targets is None:
        raise CliError(f"missing targets.csv in {data_dir}")
    tasks: dict[str, np.ndarray] = dict(targets)
    if labels is not None:
        tasks["landuse"] = labels
    report = run_attack_suite(
        checkpoint,
        graph,
        attack_configs(values),
        tasks,
        config,
        dataset=dataset,
        folds=values["folds"],
        n_clusters=values["clusters"],
        seed=values["seed"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "attack_report.csv").write_text(report.to_csv(), encoding="utf-8")
    write_manifest(out, "attack", values, _data_files(data_dir))
    print(report.to_csv(), end="")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["section,task,metric,value"]
    eval_path = run_dir / "eval_report.csv"
    if eval_path.exists():
        rows = eval_path.read_text(encoding="utf-8").splitlines()
        header = rows[0].split(",")
        for row in rows[1:]:
            cells = row.split(",")
            for name, value in zip(header[1:], cells[1:]):
                if value:
                    lines.append(f"eval,{cells[0]},{name},{value}")
    attack_path = run_dir / "attack_report.csv"
    if attack_path.exists():
        rows = attack_path.read_text(encoding="utf-8").splitlines()
        header = rows[0].split(",")
        for row in rows[1:]:
            cells = row.split(",")
            for name, value in zip(header[3:], cells[3:]):
                if value:
                    lines.append(f"attack,{cells[1]},{cells[2]}.{name},{value}")
    if len(lines) == 1:
        raise CliError(f"no eval_report.csv or attack_report.csv found in {run_dir}")
    (out / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    loss_path = run_dir / "loss_history.csv"
    if loss_path.exists():
        (out / "loss_series.csv").write_text(
            loss_path.read_text(encoding="utf-8"), encoding="utf-8"
        )
    print(f"wrote summary to {out / 'summary.csv'}")
    return 0


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="flat key=value config file")
    for name, (kind, _) in CONFIG_FIELDS.items():
        if name == "seed":
            continue  # --seed is registered as a shared flag
        if kind is bool:
            parser.add_argument(f"--{name}", type=_parse_bool, default=None, metavar="BOOL")
        else:
            parser.add_argument(f"--{name}", type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eupas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic city")
    p.add_argument("--regions", type=int, default=40)
    p.add_argument("--poi-categories", type=int, default=6, dest="poi_categories")
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    for name, func, needs_data, needs_ckpt in (
        ("build", cmd_build, True, False),
        ("train", cmd_train, True, False),
        ("eval", cmd_eval, True, True),
        ("attack", cmd_attack, True, True),
    ):
        p = sub.add_parser(name)
        if needs_data:
            p.add_argument("--data", required=True, help="city data directory")
        if needs_ckpt:
            p.add_argument("--checkpoint", required=True, help="checkpoint file or run dir")
        p.add_argument("-o", "--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true")
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="merge run CSVs into a summary table")
    p.add_argument("--run", required=True, help="directory with the run CSVs")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(max(1, int(os.environ.get("EUPAS_THREADS", "1"))))
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, CheckpointError, data_mod.ParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
