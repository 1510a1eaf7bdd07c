"""``ustex`` command line: train, encode, render, probe, regress, project, phantom.

Failures print one ``error: <category>: <message>`` line to stderr and exit
with status 1.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, build_dataclass, echo_config, load_document, apply_overrides, parse_config
from .errors import ConfigurationError, InvalidInputError, UstexError

log = logging.getLogger("ustex")


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InvalidInputError(f"{what} not found: {p}")
    return p


def _out_dir_of(out: Path) -> Path:
    return out if out.suffix == "" else out.parent


# --------------------------------------------------------------------------
# commands


def cmd_train(args, cfg: RunConfig) -> None:
    from .data import load_manifest
    from .train import fit

    if args.manifest:
        cfg.data.manifest = args.manifest
    if cfg.data.manifest is None:
        raise ConfigurationError("data.manifest is required for training")
    manifest = load_manifest(_require(cfg.data.manifest, "manifest"))
    resume = _require(args.resume, "checkpoint") if args.resume else None
    out = Path(cfg.output_dir)
    echo_config(cfg, out, "train")
    res = fit(cfg.train, manifest, cfg.loss, out, cfg.model, cfg.augment, resume=resume, ssim_cfg=cfg.ssim)
    print(f"trained {len(res.log)} steps; final checkpoint {out / 'checkpoints' / 'final'}")


def cmd_encode(args, cfg: RunConfig) -> None:
    from .checkpoint import load_checkpoint
    from .data import load_manifest
    from .evalsuite import encode_dataset

    model, _, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    manifest = load_manifest(_require(args.manifest, "manifest"))
    out = Path(args.out)
    echo_config(cfg, _out_dir_of(out), "encode")
    table = encode_dataset(model, manifest)
    table.to_csv(out)
    for path, msg in table.errors:
        print(f"skipped {path}: {msg}", file=sys.stderr)
    print(f"encoded {len(table)} of {len(manifest)} records ({len(table.errors)} errors) -> {out}")


def _image_list(items: Sequence[str]) -> list[Path]:
    paths: list[Path] = []
    for item in items:
        p = _require(item, "image list")
        if p.suffix.lower() in (".txt", ".lst"):
            base = p.parent
            for line in p.read_text().splitlines():
                line = line.strip()
                if line and not line.startswith("#"):
                    q = Path(line)
                    paths.append(_require(q if q.is_absolute() else base / q, "image"))
        else:
            paths.append(p)
    if not paths:
        raise InvalidInputError("no images to render")
    return paths


def cmd_render(args, cfg: RunConfig) -> None:
    import torch
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .data import load_image
    from .train import channel_order, default_palette, render_texture_map, save_snapshot

    model, _, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out, "render")
    model.eval()
    palette = default_palette(model.config.num_channels)
    for path in _image_list(args.images):
        img = load_image(path, model.config.image_size)
        with torch.no_grad():
            w = model.segment(torch.from_numpy(img)[None, None].float()).weights[0].double().numpy()
        order = channel_order(w, img)
        rgb, panels = render_texture_map(w, palette, order)
        stem = path.stem
        Image.fromarray(np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)).save(out / f"{stem}_texture.png")
        for rank, (c, panel) in enumerate(zip(order, panels)):
            tile = np.clip(np.rint(panel[..., None] * palette[c] * 255), 0, 255).astype(np.uint8)
            Image.fromarray(tile).save(out / f"{stem}_panel{rank}_ch{int(c)}.png")
        save_snapshot(out / f"{stem}_strip.png", img, w, palette)
    print(f"rendered texture maps -> {out}")


def _protocol(path, overrides: Sequence[str], cfg: RunConfig):
    from .evalsuite import EvalProtocol

    doc = load_document(_require(path, "protocol")) if path else {}
    doc = apply_overrides(doc, overrides)
    doc.setdefault("seed", cfg.seed)
    return build_dataclass(EvalProtocol, doc)


def _label_key(protocol, table) -> str:
    if protocol.label:
        return protocol.label
    names = table.label_names()
    if len(names) != 1:
        raise ConfigurationError(f"protocol.label must name one of the table's labels {names}")
    return names[0]


def cmd_probe(args, cfg: RunConfig) -> None:
    from .evalsuite import LatentTable, aggregate_by_patient, fit_linear_probe, write_metrics_table
    from .train import subseed

    protocol = _protocol(args.protocol, args.protocol_set, cfg)
    if protocol.task != "classification":
        raise ConfigurationError("probe needs a classification protocol")
    table = LatentTable.from_csv(_require(args.latents, "latent table"))
    key = _label_key(protocol, table)
    out = Path(args.out)
    echo_config(cfg, _out_dir_of(out), "probe")
    rng = np.random.default_rng(subseed(protocol.seed, "aggregate"))
    agg = aggregate_by_patient(table, protocol.frames_per_patient, protocol.frame_rule, rng, label_keys=[key])
    report = fit_linear_probe(agg, key, protocol)
    write_metrics_table(out, [(args.dataset or Path(args.latents).stem, args.model_name, report)])
    _write_folds(out.with_name(out.stem + "_folds.csv"), report.per_fold)
    print(", ".join(f"{k}={v:.4f}" for k, v in report.metrics.items()))


def cmd_regress(args, cfg: RunConfig) -> None:
    from .evalsuite import LatentTable, aggregate_by_patient, fit_regressor, patient_sequences, write_metrics_table
    from .train import subseed

    protocol = _protocol(args.protocol, args.protocol_set, cfg)
    if protocol.task != "regression":
        raise ConfigurationError("regress needs a regression protocol")
    table = LatentTable.from_csv(_require(args.latents, "latent table"))
    key = _label_key(protocol, table)
    out = Path(args.out)
    echo_config(cfg, _out_dir_of(out), "regress")
    # label consistency per patient is checked by the aggregation
    per_patient = aggregate_by_patient(table, None, "all", label_keys=[key])
    target = dict(zip(per_patient.patient_id, per_patient.label(key)))
    rng = np.random.default_rng(subseed(protocol.seed, "frames"))
    seqs, pids, _ = patient_sequences(table, protocol.frames_per_patient, protocol.frame_rule, rng)
    y = np.array([target[p] for p in pids])
    report = fit_regressor(seqs, y, protocol, pids)
    write_metrics_table(out, [(args.dataset or Path(args.latents).stem, args.model_name, report)])
    _write_folds(out.with_name(out.stem + "_repeats.csv"), report.per_fold)
    print(", ".join(f"{k}={report.mean[k]:.4f}±{report.std[k]:.4f}" for k in report.mean))


def _write_folds(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_project(args, cfg: RunConfig) -> None:
    from .evalsuite import LatentTable, export_projection, project_2d

    table = LatentTable.from_csv(_require(args.latents, "latent table"))
    out = Path(args.out)
    echo_config(cfg, _out_dir_of(out), "project")
    coords = project_2d(table, args.backend, cfg.seed)
    export_projection(out, coords, table, args.label)
    print(f"projected {len(table)} rows -> {out} and {out.with_suffix('.png')}")


def cmd_phantom(args, cfg: RunConfig) -> None:
    from .config import _build_phantom
    from .data import write_phantom_set

    if args.spec:
        doc = load_document(_require(args.spec, "phantom spec"))
        doc = doc.get("phantom", doc) if isinstance(doc, dict) else doc
        cfg.phantom = _build_phantom(doc)
    if args.count < 1:
        raise InvalidInputError("--count must be >= 1")
    out = Path(args.out)
    echo_config(cfg, out, "phantom")
    p = cfg.phantom
    manifest = write_phantom_set(out, p.family, args.count, cfg.seed, p.frames_per_patient,
                                 p.organ_group, p.lesion_prob, p.max_shift, p.prefix)
    print(f"wrote {len(manifest)} phantoms -> {out / 'manifest.csv'}")


COMMANDS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "render": cmd_render,
    "probe": cmd_probe,
    "regress": cmd_regress,
    "project": cmd_project,
    "phantom": cmd_phantom,
}


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ustex", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. train.batch_size=16 (repeatable)")
        return p

    p = add("train", "train a texture autoencoder")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--manifest", help="overrides data.manifest")

    p = add("encode", "encode a manifest into a latent table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="latent table CSV")

    p = add("render", "render texture maps and per-channel panels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, nargs="+", help="image files or a .txt list of paths")
    p.add_argument("--out", required=True, help="output directory")

    for name, help_text in (("probe", "linear-probe a latent table"), ("regress", "fit attention regression heads")):
        p = add(name, help_text)
        p.add_argument("--latents", required=True)
        p.add_argument("--protocol", help="YAML evaluation protocol")
        p.add_argument("--protocol-set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a protocol key (repeatable)")
        p.add_argument("--out", required=True, help="metrics table CSV")
        p.add_argument("--dataset", help="dataset name for the metrics table")
        p.add_argument("--model-name", default="ustex", help="model name for the metrics table")

    p = add("project", "2-D projection of a latent table")
    p.add_argument("--latents", required=True)
    p.add_argument("--backend", default="pca", help="pca (built in) or umap")
    p.add_argument("--label", help="label column used to colour the scatter plot")
    p.add_argument("--out", required=True, help="coordinates CSV; the plot goes next to it")

    p = add("phantom", "render a synthetic phantom set")
    p.add_argument("--spec", help="YAML phantom set description")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, args.overrides)
        COMMANDS[args.command](args, cfg)
    except UstexError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: io-error: {exc}" if isinstance(exc, OSError) else f"error: invalid-input: {exc}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
