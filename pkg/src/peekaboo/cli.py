"""Command-line entry points.

Verbosity comes from the PEEKABOO_LOG environment variable (error, warn,
info or debug; default warn).
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path

import click

from .backends import load_manifest
from .bilateral import SolverConfig
from .grids import save_binary_mask_png, save_soft_mask_png
from .head import load_checkpoint
from .metrics import format_report_table
from .pipeline import (
    BackendConfig,
    build_backend,
    config_from_dict,
    evaluate,
    export_toy_features,
    infer_item,
    load_dataset,
    report_to_dict,
    train as run_train,
)
from .synth import SyntheticSpec, gen_scribble_library, gen_synth

logger = logging.getLogger(__name__)

_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def _setup_logging() -> None:
    name = os.environ.get("PEEKABOO_LOG", "warn").strip().lower()
    level = _LEVELS.get(name)
    logging.basicConfig(
        level=logging.WARNING if level is None else level,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if level is None and name not in ("", "warn"):
        logging.getLogger(__name__).warning(
            "PEEKABOO_LOG=%r not in %s; using warn", name, sorted(_LEVELS)
        )


@click.group()
def main() -> None:
    _setup_logging()


def _merged_config(config_path, **overrides) -> dict:
    doc = json.loads(Path(config_path).read_text()) if config_path else {}
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    return doc


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), help="JSON run config.")
@click.option("--manifest", type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path())
@click.option("--seed", type=int)
@click.option("--iterations", type=int)
@click.option("--batch-size", type=int)
@click.option("--resolution", type=int)
@click.option("--backend", "backend_kind", type=click.Choice(["toy", "replay"]))
@click.option("--mask-dir", type=click.Path())
@click.option("--mask-mode", type=click.Choice(["high", "low"]))
@click.option("--augment/--no-augment", "augment", default=None)
@click.option("--no-mfp", is_flag=True, help="Disable the masked-prediction loss term.")
@click.option("--no-pcl", is_flag=True, help="Disable the prediction-consistency loss term.")
def train_cmd(
    config_path,
    manifest,
    out_dir,
    seed,
    iterations,
    batch_size,
    resolution,
    backend_kind,
    mask_dir,
    mask_mode,
    augment,
    no_mfp,
    no_pcl,
):
    """Train the decoder head against a dataset manifest."""
    doc = _merged_config(
        config_path,
        manifest=manifest,
        out_dir=out_dir,
        seed=seed,
        iterations=iterations,
        batch_size=batch_size,
        resolution=resolution,
        mask_dir=mask_dir,
        mask_mode=mask_mode,
        augment=augment,
    )
    if backend_kind:
        doc.setdefault("backend", {})["kind"] = backend_kind
    if no_mfp:
        doc.setdefault("loss", {})["enable_mfp"] = False
    if no_pcl:
        doc.setdefault("loss", {})["enable_pcl"] = False
    if "manifest" not in doc or "out_dir" not in doc:
        raise click.UsageError("need --manifest and --out (or a config providing them)")
    cfg = config_from_dict(doc)
    summary = run_train(cfg)
    click.echo(f"checkpoint: {summary.checkpoint_path}")
    click.echo(f"log:        {summary.log_path}")
    click.echo(
        f"loss:       {summary.first_total:.4f} -> {summary.final_total:.4f}"
        f" over {summary.iterations} iterations"
    )


def _restore(checkpoint, manifest_path, backend_kind, patch, encoder_seed):
    man = load_manifest(manifest_path)
    params, _, meta = load_checkpoint(checkpoint)
    bcfg = BackendConfig(kind=backend_kind, patch=patch, dim=params.dim, encoder_seed=encoder_seed)
    backend = build_backend(bcfg, man)
    return man, params, backend, meta


@main.command("infer")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--backend", "backend_kind", type=click.Choice(["toy", "replay"]), default="toy")
@click.option("--patch", type=int, default=8)
@click.option("--encoder-seed", type=int, default=0)
@click.option("--resolution", type=int, default=224)
@click.option("--bs/--no-bs", "with_bs", default=True, help="Refine predictions with the edge-aware solver.")
def infer_cmd(checkpoint, manifest, out_dir, backend_kind, patch, encoder_seed, resolution, with_bs):
    """Write soft, binary and (optionally) refined masks for every image."""
    man, params, backend, _ = _restore(checkpoint, manifest, backend_kind, patch, encoder_seed)
    ds = load_dataset(man, resolution)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for item in ds:
        res = infer_item(params, backend, item, SolverConfig(), resolution, with_bs=with_bs)
        rec = {"image_id": item.image_id}
        soft = out / f"{item.image_id}_soft.png"
        save_soft_mask_png(res.raw_soft, soft)
        rec["soft"] = soft.name
        hard = out / f"{item.image_id}_binary.png"
        save_binary_mask_png(res.binary, hard)
        rec["binary"] = hard.name
        if with_bs:
            ref = out / f"{item.image_id}_refined.png"
            save_binary_mask_png(res.refined, ref)
            rec["refined"] = ref.name
        index.append(rec)
    (out / "index.json").write_text(json.dumps({"images": index}, indent=2, sort_keys=True) + "\n")
    click.echo(f"wrote {len(index)} predictions to {out}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(),
              help="Report destination: a .json file path, or a directory for report.json.")
@click.option("--backend", "backend_kind", type=click.Choice(["toy", "replay"]), default="toy")
@click.option("--patch", type=int, default=8)
@click.option("--encoder-seed", type=int, default=0)
@click.option("--resolution", type=int, default=224)
@click.option("--bs/--no-bs", "with_bs", default=True)
def eval_cmd(checkpoint, manifest, out_path, backend_kind, patch, encoder_seed, resolution, with_bs):
    """Score predictions against ground truth and print a summary table."""
    man, params, backend, _ = _restore(checkpoint, manifest, backend_kind, patch, encoder_seed)
    report = evaluate(params, backend, man, resolution, with_bs=with_bs)
    click.echo(format_report_table(report))
    if out_path:
        out = Path(out_path)
        if out.suffix != ".json":
            out = out / "report.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")
        click.echo(f"report: {out}")


@main.command("gen-synth")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--count", type=int, default=64)
@click.option("--size", type=int, default=224)
@click.option("--seed", type=int, default=0)
@click.option("--scribbles", type=int, default=0, help="Also write N occlusion masks under masks/.")
def gen_synth_cmd(out_dir, count, size, seed, scribbles):
    """Generate a deterministic synthetic benchmark dataset."""
    spec = SyntheticSpec(count=count, size=size, seed=seed)
    manifest_path = gen_synth(spec, out_dir)
    click.echo(f"manifest: {manifest_path}")
    if scribbles > 0:
        paths = gen_scribble_library(Path(out_dir) / "masks", scribbles, size, seed)
        click.echo(f"masks:    {len(paths)} files in {Path(out_dir) / 'masks'}")


@main.command("export-toy-features")
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--variants", type=int, default=0, help="Masked feature variants per image.")
@click.option("--mask-dir", type=click.Path())
@click.option("--mask-mode", type=click.Choice(["high", "low"]), default="high")
@click.option("--patch", type=int, default=8)
@click.option("--dim", type=int, default=384)
@click.option("--encoder-seed", type=int, default=0)
@click.option("--resolution", type=int, default=224)
@click.option("--seed", type=int, default=0)
def export_cmd(manifest, out_dir, variants, mask_dir, mask_mode, patch, dim, encoder_seed, resolution, seed):
    """Precompute toy features as portable files plus a replay manifest."""
    out_manifest = export_toy_features(
        manifest,
        out_dir,
        backend_cfg=BackendConfig(kind="toy", patch=patch, dim=dim, encoder_seed=encoder_seed),
        resolution=resolution,
        mask_dir=mask_dir,
        mask_mode=mask_mode,
        variants=variants,
        seed=seed,
    )
    click.echo(f"manifest: {out_manifest}")


if __name__ == "__main__":
    main()
