"""Command-line pipeline: synth -> bond -> fuse/eval/sweep.

Every command takes ``--config`` (JSON, merged over defaults) and ``--out``
(the run directory).  Commands are idempotent for a fixed config and seed:
rerunning writes bitwise-identical artifacts.  ``SPACEBOND_SEED``
overrides the config seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from spacebond import __version__, bonds, config as cfgmod, fuse
from spacebond.evaluation import retrieval_report, write_report_csv
from spacebond.neural import TrainConfig
from spacebond.store import SpaceBundle, load_space, save_space
from spacebond.synth import SpaceSpec, generate_world, realize_space

SPACES_DIR = "spaces"
BONDS_DIR = "bonds"
REPORTS_DIR = "reports"
FUSED_DIR = "fused"
SWEEP_DIR = "sweep"


class CliError(RuntimeError):
    pass


def _split_indices(cfg: dict) -> tuple[np.ndarray, np.ndarray]:
    n = cfg["synth"]["n_items"]
    eval_count = cfg["synth"]["eval_count"]
    return np.arange(n - eval_count), np.arange(n - eval_count, n)


def _space_specs(cfg: dict) -> list[SpaceSpec]:
    synth = cfg["synth"]
    spaces = synth["spaces"]
    specs = []
    entries = [("unified", spaces["unified"], ("audio", "image", "text"), 0)]
    entries.append(("vt_expert", spaces["vt_expert"], ("image", "text"), 1))
    for i, at in enumerate(spaces["at_experts"]):
        entries.append((at.get("name", f"at_expert_{i}"), at, ("audio", "text"), 2 + i))
    for name, entry, modalities, index in entries:
        specs.append(
            SpaceSpec(
                name=name,
                dim=entry["dim"],
                modalities=modalities,
                noise_sigma=dict(entry["noise"]),
                seed=cfgmod.stage_seed(cfg["seed"], cfgmod.STAGE_SPACE, index),
                frame_jitter=synth["frame_jitter"],
                shared_shift=entry.get("shared_shift", 0.0),
            )
        )
    return specs


def _at_names(cfg: dict) -> list[str]:
    return [
        at.get("name", f"at_expert_{i}")
        for i, at in enumerate(cfg["synth"]["spaces"]["at_experts"])
    ]


def cmd_synth(cfg: dict, out: Path) -> dict:
    """Generate the world, realize every configured space, write bundles."""
    out = Path(out)
    world_seed = cfgmod.stage_seed(cfg["seed"], cfgmod.STAGE_WORLD)
    world = generate_world(cfg["synth"]["n_items"], cfg["synth"]["latent_dim"], world_seed)
    provenance = {
        "seed": cfg["seed"],
        "world_seed": world_seed,
        "n_items": world.n,
        "latent_dim": world.k,
        "eval_count": cfg["synth"]["eval_count"],
        "spaces": {},
    }
    for spec in _space_specs(cfg):
        bundle = realize_space(world, spec)
        save_space(bundle, out / SPACES_DIR / spec.name)
        provenance["spaces"][spec.name] = {
            "seed": spec.seed,
            "dim": spec.dim,
            "modalities": list(spec.modalities),
            "noise_sigma": dict(spec.noise_sigma),
            "shared_shift": spec.shared_shift,
        }
    with open(out / "provenance.json", "w", encoding="utf-8") as f:
        json.dump(provenance, f, indent=2, sort_keys=True)
        f.write("\n")
    cfgmod.write_effective_config(cfg, out)
    return provenance


def _load_spaces(cfg: dict, out: Path) -> dict[str, SpaceBundle]:
    base = Path(out) / SPACES_DIR
    names = ["unified", "vt_expert", *_at_names(cfg)]
    spaces = {}
    for name in names:
        path = base / name
        if not path.exists():
            raise CliError(f"space {name!r} not found under {base}; run synth first")
        spaces[name] = load_space(path)
    return spaces


def _train_config(cfg: dict, kind: str, bond_index: int) -> TrainConfig:
    train = cfg["train"]
    return TrainConfig(
        lr=train["lr"],
        epochs=cfgmod.epochs_for(cfg, kind),
        batch_size=train["batch_size"],
        tau_infonce=train["tau_infonce"],
        hidden=train["hidden"],
        seed=cfgmod.train_seed_for(cfg, bond_index),
    )


def _bond_dir(out: Path, kind: str, expert: str, stage2: bool = False) -> Path:
    prefix = "full_combination" if stage2 else kind
    return Path(out) / BONDS_DIR / f"{prefix}_{expert}"


def _write_loss_csv(artifact: bonds.BondArtifact, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["subset", "epoch", "loss"])
        for subset in artifact.ensemble.tags:
            for epoch, loss in enumerate(artifact.epoch_losses[subset]):
                writer.writerow([subset, epoch, repr(loss)])


def cmd_bond(cfg: dict, out: Path) -> list[Path]:
    """Train every bond the configured products need; write artifact dirs."""
    out = Path(out)
    spaces = _load_spaces(cfg, out)
    train_idx, _ = _split_indices(cfg)
    bond_cfg = cfg["bond"]
    products = set(cfg["products"])
    anchors = tuple(bond_cfg["anchors"])
    written = []

    def save(artifact, path):
        bonds.save_bond_artifact(artifact, path)
        _write_loss_csv(artifact, path / "loss.csv")
        written.append(path)

    displacement = None
    if {"displacement", "full"} & products:
        displacement = bonds.train_displacement_bond(
            spaces["unified"], spaces["vt_expert"], train_idx,
            _train_config(cfg, "displacement", 0),
            temperature=bond_cfg["temperature"],
            seed=cfgmod.stage_seed(cfg["seed"], cfgmod.STAGE_BOND, 0),
            pool_size=bond_cfg["pool_size"],
            anchors=anchors,
        )
        save(displacement, _bond_dir(out, "displacement", "vt_expert"))
    if "combination" in products:
        for i, name in enumerate(_at_names(cfg)):
            artifact = bonds.train_combination_bond(
                spaces["unified"], spaces[name], train_idx,
                _train_config(cfg, "combination", 10 + i),
                temperature=bond_cfg["temperature"],
                seed=cfgmod.stage_seed(cfg["seed"], cfgmod.STAGE_BOND, 10 + i),
                pool_size=bond_cfg["pool_size"],
                anchors=anchors,
            )
            save(artifact, _bond_dir(out, "combination", name))
    if "full" in products:
        frozen = bonds.displaced_bundle(spaces["unified"], spaces["vt_expert"], displacement)
        for i, name in enumerate(_at_names(cfg)):
            artifact = bonds.train_combination_bond(
                frozen, spaces[name], train_idx,
                _train_config(cfg, "combination", 20 + i),
                temperature=bond_cfg["temperature"],
                seed=cfgmod.stage_seed(cfg["seed"], cfgmod.STAGE_BOND, 20 + i),
                pool_size=bond_cfg["pool_size"],
                anchors=anchors,
            )
            save(artifact, _bond_dir(out, "combination", name, stage2=True))
    cfgmod.write_effective_config(cfg, out)
    return written


def _load_artifact(out: Path, kind: str, expert: str, stage2: bool = False):
    path = _bond_dir(out, kind, expert, stage2)
    if not (path / bonds.BOND_MANIFEST).exists():
        raise CliError(f"missing bond artifact {path}; run bond first")
    return bonds.load_bond_artifact(path)


def build_product_composite(
    cfg: dict, out: Path, product: str, spaces: dict[str, SpaceBundle]
) -> fuse.CompositeSpace:
    at_names = _at_names(cfg)
    if product == "combination":
        combos = tuple(
            (name, _load_artifact(out, "combination", name).ensemble)
            for name in at_names
        )
        return fuse.build_composite(
            "unified", spaces["unified"].dim, combinations=combos, name="combination"
        )
    if product == "displacement":
        displacement = _load_artifact(out, "displacement", "vt_expert")
        return fuse.build_composite(
            "unified", spaces["vt_expert"].dim,
            displacement=displacement.ensemble, vt_name="vt_expert",
            name="displacement",
        )
    if product == "full":
        displacement = _load_artifact(out, "displacement", "vt_expert")
        combos = tuple(
            (name, _load_artifact(out, "combination", name, stage2=True).ensemble)
            for name in at_names
        )
        return fuse.build_composite(
            "unified", spaces["vt_expert"].dim,
            displacement=displacement.ensemble, vt_name="vt_expert",
            combinations=combos, name="full",
        )
    raise CliError(f"unknown product {product!r}")


def resolve_factors(cfg: dict, args=None) -> fuse.CombiningFactors:
    """Factor resolution order: preset, then config sigmas, then CLI flags.

    A CLI ``--preset`` resets any config-level sigma pins; explicit
    ``--sigma-*`` flags always win for their component.
    """
    fc = cfg["factors"]
    preset = fc["preset"]
    sigma_a_cfg, sigma_t_cfg = fc["sigma_a"], fc["sigma_t"]
    lambda_v, lambda_t = fc["lambda_v"], fc["lambda_t"]
    if args is not None and getattr(args, "preset", None):
        preset = args.preset
        sigma_a_cfg = sigma_t_cfg = None
    sigma_a, sigma_t = fuse.PRESET_SIGMAS[preset]
    if sigma_a_cfg is not None:
        sigma_a = sigma_a_cfg
    if sigma_t_cfg is not None:
        sigma_t = sigma_t_cfg
    if args is not None:
        if getattr(args, "sigma_a", None) is not None:
            sigma_a = args.sigma_a
        if getattr(args, "sigma_t", None) is not None:
            sigma_t = args.sigma_t
        if getattr(args, "lambda_v", None) is not None:
            lambda_v = args.lambda_v
        if getattr(args, "lambda_t", None) is not None:
            lambda_t = args.lambda_t
    return fuse.CombiningFactors(
        lambda_v=lambda_v, lambda_t=lambda_t, sigma_a=sigma_a, sigma_t=sigma_t
    )


def _selection_mask(select: str | None, at_names: list[str]) -> tuple[bool, ...] | None:
    if select is None:
        return None
    wanted = {s.strip() for s in select.split(",") if s.strip()}
    unknown = wanted - set(at_names)
    if unknown:
        raise CliError(f"--select names unknown experts: {sorted(unknown)}")
    return tuple(name in wanted for name in at_names)


def cmd_eval(
    cfg: dict,
    out: Path,
    product: str,
    factors: fuse.CombiningFactors,
    select: str | None = None,
    report_name: str | None = None,
    baseline: bool = False,
) -> Path:
    """Evaluate the fused product (or the raw unified baseline) on the eval split."""
    out = Path(out)
    spaces = _load_spaces(cfg, out)
    _, eval_idx = _split_indices(cfg)
    ks = tuple(cfg["eval"]["ks"])
    reports_dir = out / REPORTS_DIR
    reports_dir.mkdir(parents=True, exist_ok=True)
    if baseline:
        mats = {
            m: spaces["unified"].matrix(m).take(eval_idx)
            for m in ("audio", "image", "text")
        }
        report = retrieval_report(mats, ks=ks)
        name = report_name or "baseline"
    else:
        composite = build_product_composite(cfg, out, product, spaces)
        mask = _selection_mask(select, list(composite.at_names))
        if mask is not None:
            composite = fuse.select_modules(composite, mask)
        if not composite.at_names:
            # no combination channels: sigma weights have nothing to select
            factors = fuse.CombiningFactors(
                lambda_v=factors.lambda_v, lambda_t=factors.lambda_t
            )
        inputs, ids = fuse.composite_inputs(spaces, eval_idx)
        report = fuse.evaluate_composite(composite, inputs, factors, ids, ks=ks)
        name = report_name or f"{product}_sa{factors.sigma_a}_st{factors.sigma_t}"
    path = reports_dir / f"{name}.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    write_report_csv(report, reports_dir / f"{name}.csv")
    cfgmod.write_effective_config(cfg, out)
    return path


def cmd_fuse(
    cfg: dict,
    out: Path,
    product: str,
    factors: fuse.CombiningFactors,
    split: str = "all",
) -> Path:
    """Materialize fused embeddings as a space bundle on disk."""
    out = Path(out)
    spaces = _load_spaces(cfg, out)
    train_idx, eval_idx = _split_indices(cfg)
    indices = {"all": None, "train": train_idx, "eval": eval_idx}.get(split, "bad")
    if isinstance(indices, str):
        raise CliError(f"--split must be all, train or eval, got {split!r}")
    composite = build_product_composite(cfg, out, product, spaces)
    inputs, ids = fuse.composite_inputs(spaces, indices)
    mats = fuse.fused_matrices(composite, inputs, factors, ids)
    bundle = SpaceBundle(
        name=f"fused_{product}", dim=composite.dim, modalities=mats
    )
    path = out / FUSED_DIR / f"{product}_sa{factors.sigma_a}_st{factors.sigma_t}_{split}"
    save_space(bundle, path)
    cfgmod.write_effective_config(cfg, out)
    return path


def cmd_sweep(
    cfg: dict,
    out: Path,
    product: str | None = None,
    grid_values: list[float] | None = None,
) -> Path:
    """Evaluate the combining-factor grid; write the delta table as CSV."""
    out = Path(out)
    product = product or cfg["sweep"]["product"]
    values = grid_values if grid_values is not None else cfg["sweep"]["grid"]
    if not values:
        raise CliError("empty sweep grid")
    spaces = _load_spaces(cfg, out)
    _, eval_idx = _split_indices(cfg)
    composite = build_product_composite(cfg, out, product, spaces)
    inputs, ids = fuse.composite_inputs(spaces, eval_idx)
    base = resolve_factors(cfg)
    grid = tuple((sa, st) for st in values for sa in values)
    rows = fuse.factor_sweep(
        composite, inputs, ids, grid, base_factors=base, ks=tuple(cfg["eval"]["ks"])
    )
    sweep_dir = out / SWEEP_DIR
    sweep_dir.mkdir(parents=True, exist_ok=True)
    path = sweep_dir / f"sweep_{product}.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sigma_a", "sigma_t", "delta_at", "delta_av", "delta_tv"])
        for row in rows:
            writer.writerow(
                [row["sigma_a"], row["sigma_t"],
                 repr(row["delta_at"]), repr(row["delta_av"]), repr(row["delta_tv"])]
            )
    cfgmod.write_effective_config(cfg, out)
    return path


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="JSON config file")
    parser.add_argument("--out", type=str, required=True, help="run directory")


def _add_factor_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=sorted(fuse.PRESET_SIGMAS), default=None)
    parser.add_argument("--sigma-a", dest="sigma_a", type=float, default=None)
    parser.add_argument("--sigma-t", dest="sigma_t", type=float, default=None)
    parser.add_argument("--lambda-v", dest="lambda_v", type=float, default=None)
    parser.add_argument("--lambda-t", dest="lambda_t", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spacebond",
        description="Fuse multimodal embedding spaces via trained projector bonds.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic spaces")
    _add_common(p)

    p = sub.add_parser("bond", help="train the configured bonds")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a fused product")
    _add_common(p)
    _add_factor_flags(p)
    p.add_argument("--product", choices=cfgmod.PRODUCTS, default=None)
    p.add_argument("--select", type=str, default=None,
                   help="comma-separated audio-text expert names to keep")
    p.add_argument("--report-name", type=str, default=None)
    p.add_argument("--baseline", action="store_true",
                   help="evaluate the raw unified space instead")

    p = sub.add_parser("fuse", help="write fused embeddings to disk")
    _add_common(p)
    _add_factor_flags(p)
    p.add_argument("--product", choices=cfgmod.PRODUCTS, default=None)
    p.add_argument("--split", choices=("all", "train", "eval"), default="all")

    p = sub.add_parser("sweep", help="sweep combining factors, write delta CSV")
    _add_common(p)
    p.add_argument("--product", choices=cfgmod.PRODUCTS, default=None)
    p.add_argument("--grid", type=str, default=None,
                   help="comma-separated grid values in [0, 1]")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config)
        out = Path(args.out)
        if args.command == "synth":
            cmd_synth(cfg, out)
        elif args.command == "bond":
            cmd_bond(cfg, out)
        elif args.command == "eval":
            product = args.product or cfg["products"][0]
            cmd_eval(
                cfg, out, product, resolve_factors(cfg, args),
                select=args.select, report_name=args.report_name,
                baseline=args.baseline,
            )
        elif args.command == "fuse":
            product = args.product or cfg["products"][0]
            cmd_fuse(cfg, out, product, resolve_factors(cfg, args), split=args.split)
        elif args.command == "sweep":
            grid = None
            if args.grid is not None:
                grid = [float(v) for v in args.grid.split(",") if v.strip()]
            cmd_sweep(cfg, out, product=args.product, grid_values=grid)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"spacebond: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
