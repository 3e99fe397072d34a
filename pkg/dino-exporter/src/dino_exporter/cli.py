"""Command-line entry point."""

from __future__ import annotations

import logging
import sys

import click

from . import ExporterError
from .export import ExportJob, run_export
from .vit import FEATURE_SOURCES


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-image progress.")
def main(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True),
              help="Dataset root (manifest.json or a directory of images).")
@click.option("--masks", type=click.Path(exists=True, file_okay=False),
              help="Occlusion mask library (required when --variants > 0).")
@click.option("--variants", default=8, show_default=True,
              help="Masked feature variants per image; 0 exports unmasked only.")
@click.option("--mask-mode", type=click.Choice(["high", "low"]), default="high",
              show_default=True)
@click.option("--source", type=click.Choice(list(FEATURE_SOURCES)), default="key",
              show_default=True, help="Projection of the final attention block to export.")
@click.option("--weights", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Pretrained ViT-S/8 checkpoint.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def export(dataset, masks, variants, mask_mode, source, weights, out) -> None:
    """Write feature files plus a replay manifest for a dataset."""
    job = ExportJob(
        dataset=dataset, out_dir=out, weights=weights,
        mask_dir=masks, mask_mode=mask_mode, variants=variants, source=source,
    )
    try:
        report = run_export(job)
    except ExporterError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(
        f"exported {report.exported_images} images "
        f"({report.masked_records} masked records) -> {report.manifest_path}"
    )
    for image_id, reason in report.failures:
        click.echo(f"failed {image_id}: {reason}", err=True)
    if report.failures:
        click.echo(f"{len(report.failures)} image(s) failed", err=True)


if __name__ == "__main__":
    sys.exit(main())
