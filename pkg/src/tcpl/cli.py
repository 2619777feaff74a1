"""Command line: ``tcpl train | explain | audit | export-prototypes | eval``.

Every command writes its outputs to ``--out`` together with ``manifest.json``
(written atomically at start, completed with artifact checksums at the end).
Exit codes: 0 success, 2 configuration or input error, 3 runtime failure; on
failure a JSON error object goes to stderr.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import parameter_digest
from .config import TrainConfig, apply_overrides, load_config_dict
from .data import AugmentationPolicy, _read_image, datasets_from_config, load_folder_dataset
from .exceptions import ConfigError, DatasetError, ShapeError
from .interpret import (activation_map, build_trace, crop, high_activation_box, nearest_patch_preview,
                        prototype_card)
from .report import draw_box, overlay, save_png, to_uint8
from .selftrain import audit_document, refresh_pseudo_labels
from .trainer import accuracy, committee_policy, fit, load_state, target_monitor

logger = logging.getLogger("tcpl")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MANIFEST = "manifest.json"


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_json_atomic(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1) + "\n")
    os.replace(tmp, path)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """``manifest.json`` of one command invocation."""

    def __init__(self, out_dir, command, argv, config_path=None, config=None, seed=None):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / MANIFEST
        self.doc = {
            "schema_version": SCHEMA_VERSION, "command": command, "argv": list(argv),
            "config_path": str(config_path) if config_path else None,
            "config": config.to_dict() if isinstance(config, TrainConfig) else config,
            "out_dir": str(self.out_dir), "seed": seed, "started_at": _now(),
            "finished_at": None, "status": "running", "artifacts": {},
        }
        write_json_atomic(self.path, self.doc)

    def finish(self, status="ok", error=None):
        self.doc["status"] = status
        self.doc["finished_at"] = _now()
        if error is not None:
            self.doc["error"] = error
        self.doc["artifacts"] = {
            str(p.relative_to(self.out_dir).as_posix()): sha256_file(p)
            for p in sorted(self.out_dir.rglob("*")) if p.is_file() and p.name != MANIFEST
        }
        write_json_atomic(self.path, self.doc)

    @staticmethod
    def verify(out_dir):
        """Names of artifacts whose checksum no longer matches (missing files included)."""
        out_dir = Path(out_dir)
        doc = json.loads((out_dir / MANIFEST).read_text())
        bad = []
        for name, digest in doc["artifacts"].items():
            p = out_dir / name
            if not p.is_file() or sha256_file(p) != digest:
                bad.append(name)
        return bad


# ---------------------------------------------------------------------------
# helpers


def resolve_config(path=None, overrides=(), epochs=None, seed=None) -> TrainConfig:
    raw = load_config_dict(path) if path else {}
    raw = apply_overrides(raw, overrides or [])
    extra = []
    if epochs is not None:
        extra.append(("epochs", epochs))
        if epochs == 0:
            extra.append(("epoch_update_proto", 0))
    if seed is not None:
        extra.append(("seed", seed))
    return TrainConfig.from_dict(apply_overrides(raw, extra))


def _checkpoint_config(payload, overrides=()):
    return TrainConfig.from_dict(apply_overrides(payload["config"], overrides or []))


def _image_size(config):
    data = config.data
    return data.image_size if data.source is not None else data.synthetic.image_size


def _render_card(model, j, source, percentile, rule):
    """``(rgb, meta)`` for prototype ``j``; unprojected prototypes get a nearest-patch preview."""
    card = prototype_card(model, j, percentile, rule)
    if card.status == "projected":
        image = model.provenance[j]["image"]
        meta = dict(card.provenance)
        meta.update(status="projected", cosine=card.cosine, box=list(card.box))
    else:
        preview = nearest_patch_preview(model, j, source) if source is not None else None
        if preview is None:
            return None, {"status": "unprojected"}
        image = preview["image"]
        amap = activation_map(image, model, j, level=preview["level"])
        box = high_activation_box(amap.values, percentile, rule)
        meta = {k: v for k, v in preview.items() if k != "image"}
        meta.update(status="preview", box=list(box))
        card.box = box
    full = draw_box(to_uint8(image), card.box)
    patch = to_uint8(crop(image, card.box))
    # patch scaled to the image height, shown next to the boxed source image
    h = full.shape[0]
    scale = max(1, h // max(patch.shape[0], 1))
    patch = patch.repeat(scale, axis=0).repeat(scale, axis=1)[:h]
    pad = np.zeros((h, patch.shape[1], 3), dtype=np.uint8)
    pad[:patch.shape[0]] = patch
    gap = np.full((h, 2, 3), 255, dtype=np.uint8)
    return np.concatenate([full, gap, pad], axis=1), meta


def _fig3_table(trace, k=None):
    lines = [f"sample {trace.sample_id}: predicted {trace.class_names[trace.predicted] if trace.class_names else trace.predicted}",
             f"{'prototype':>9} {'similarity':>12} {'weight':>10} {'contribution':>13}"]
    for e in trace.top_evidence(k=k):
        lines.append(f"{e.prototype_index:>9d} {e.similarity:>12.4f} {e.weight:>10.4f} {e.contribution:>13.4f}")
    lines.append("logits: " + ", ".join(
        f"{(trace.class_names[c] if trace.class_names else c)}={v:.4f}" for c, v in enumerate(trace.logits)))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, manifest_argv):
    config = resolve_config(args.config, args.set, args.epochs, args.seed)
    out = Path(args.out)
    manifest = RunManifest(out, "train", manifest_argv, args.config, config, config.seed)
    try:
        source, target = datasets_from_config(config)
        monitor = target_monitor(target) if target is not None and target.has_eval_labels() else None
        state = fit(config, source, target, out_dir=out, monitor=monitor)
        metrics = {
            "schema_version": SCHEMA_VERSION, "epochs": state.epoch, "steps": state.step,
            "source_accuracy": accuracy(state.model, source),
            "n_pseudo_labeled": len(state.plt),
            "n_projected": sum(p is not None for p in state.model.provenance),
            "parameter_digest": parameter_digest(state.model),
        }
        if monitor is not None:
            metrics.update(monitor(state.model, state.plt))
        write_json_atomic(out / "metrics.json", metrics)
    except Exception as exc:
        manifest.finish("failed", {"type": type(exc).__name__, "message": str(exc)})
        raise
    manifest.finish()
    print(json.dumps(metrics, indent=1))
    return EXIT_OK


def _lookup_image(spec, config, size):
    path = Path(spec)
    if path.is_file():
        return path.stem, _read_image(path, size)
    source, target = datasets_from_config(config)
    for ds in (source, target):
        if ds is not None and spec in ds:
            return spec, ds.get(spec).image
    raise DatasetError(f"{spec!r} is neither an image file nor a sample id of the configured data")


def cmd_explain(args, manifest_argv):
    state, payload = load_state(args.checkpoint)
    config = _checkpoint_config(payload)
    out = Path(args.out)
    manifest = RunManifest(out, "explain", manifest_argv, None, config, config.seed)
    model = state.model.eval()
    sample_id, image = _lookup_image(args.image, config, _image_size(config))
    trace = build_trace(image, model, sample_id, payload["class_names"], config.box_percentile, config.box_rule)
    (out / "trace.json").write_text(json.dumps(trace.to_json(), indent=1) + "\n")
    (out / "report.txt").write_text(_fig3_table(trace))

    need_preview = any(model.provenance[e.prototype_index] is None for e in trace.per_class[trace.predicted])
    source = datasets_from_config(config)[0] if need_preview else None
    if need_preview:
        logger.warning("prototypes were never projected; cards show nearest-patch previews")
    boxed = overlay(image, np.zeros(image.shape[:2]), alpha=0.0)
    cards = {}
    for e in trace.per_class[trace.predicted]:
        if e.box is None:
            continue
        j = e.prototype_index
        amap = activation_map(image, model, j)
        save_png(out / f"activation_{j}.png", draw_box(overlay(image, amap.values), e.box))
        boxed = draw_box(boxed, e.box)
        rgb, meta = _render_card(model, j, source, config.box_percentile, config.box_rule)
        if rgb is not None:
            save_png(out / f"prototype_{j}_card.png", rgb)
        cards[j] = meta["status"]
    save_png(out / "box_overlay.png", boxed)
    manifest.doc["cards"] = {str(k): v for k, v in cards.items()}
    manifest.finish()
    print(_fig3_table(trace), end="")
    return EXIT_OK


def cmd_audit(args, manifest_argv):
    state, payload = load_state(args.checkpoint)
    config = _checkpoint_config(payload, args.set)
    out = Path(args.out)
    manifest = RunManifest(out, "audit", manifest_argv, None, config, config.seed)
    if args.target:
        target = load_folder_dataset(args.target, "target", _image_size(config))
        target.class_names = list(payload["class_names"])
    else:
        target = datasets_from_config(config)[1]
    if target is None:
        raise ConfigError("data.target", "no target dataset configured; pass --target")
    thresholds = config.thresholds
    if args.V is not None:
        if not 0.0 <= args.V <= 1.0:
            raise ConfigError("V", f"must be in [0, 1], got {args.V}")
        thresholds = type(thresholds)(V=args.V, q=thresholds.q)
    policy = committee_policy(config)
    if args.identity:
        policy = AugmentationPolicy(thresholds.q, [{"op": "identity"}], config.seed)
    plt = refresh_pseudo_labels(target, state.model, policy, thresholds, payload["epoch"],
                                config.criteria, config.prototype_block_multiplier)
    doc = audit_document(plt.verdicts, payload["epoch"], target)
    doc["V"] = thresholds.V
    write_json_atomic(out / "audit.json", doc)
    manifest.finish()
    print(json.dumps(doc["summary"], indent=1))
    return EXIT_OK


def cmd_export_prototypes(args, manifest_argv):
    state, payload = load_state(args.checkpoint)
    config = _checkpoint_config(payload)
    out = Path(args.out)
    manifest = RunManifest(out, "export-prototypes", manifest_argv, None, config, config.seed)
    model = state.model.eval()
    names = payload["class_names"]
    source = None
    if any(p is None for p in model.provenance):
        logger.warning("bank is not (fully) projected; unprojected cards are nearest-patch previews")
        source = datasets_from_config(config)[0]
    rows = []
    for j in range(model.n_prototypes):
        rgb, meta = _render_card(model, j, source, config.box_percentile, config.box_rule)
        if rgb is not None:
            save_png(out / f"prototype_{j}_card.png", rgb)
        c = model.class_of(j)
        rows.append({"index": j, "class": c, "class_name": names[c], **meta,
                     "card": f"prototype_{j}_card.png" if rgb is not None else None})
    bank = {"schema_version": SCHEMA_VERSION, "epoch": payload["epoch"], "class_names": names,
            "n_per_class": model.n_per_class, "prototypes": rows}
    write_json_atomic(out / "bank.json", bank)
    manifest.finish()
    print(f"{len(rows)} prototype cards written to {out}")
    return EXIT_OK


def cmd_eval(args, manifest_argv):
    state, payload = load_state(args.checkpoint)
    config = _checkpoint_config(payload)
    out = Path(args.out)
    manifest = RunManifest(out, "eval", manifest_argv, None, config, config.seed)
    source, target = datasets_from_config(config)
    metrics = {"schema_version": SCHEMA_VERSION, "epoch": payload["epoch"],
               "source_accuracy": accuracy(state.model, source)}
    if target is not None and target.has_eval_labels():
        metrics["target_accuracy"] = accuracy(state.model, target)
    write_json_atomic(out / "metrics.json", metrics)
    manifest.finish()
    print(json.dumps(metrics, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="tcpl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", help="YAML or JSON run config (defaults apply to missing keys)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="explanation report for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="image file or sample id of the configured data")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("audit", help="dump committee verdicts for the target set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", help="target image folder (default: the configured target)")
    p.add_argument("--V", type=float, help="confidence threshold for this audit, in [0, 1]")
    p.add_argument("--identity", action="store_true", help="use identity views instead of augmentations")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("export-prototypes", help="prototype gallery and bank.json")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_export_prototypes)

    p = sub.add_parser("eval", help="source/target accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    for p in sub.choices.values():
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, e.g. thresholds.V=0.99 (repeatable)")
    return parser


def _error(kind, exc, code):
    doc = {"schema_version": SCHEMA_VERSION, "error": kind, "type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        doc["field"] = exc.field
    print(json.dumps(doc), file=sys.stderr)
    return code


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return args.func(args, argv)
    except (ConfigError, ShapeError, DatasetError) as exc:
        return _error("config", exc, EXIT_CONFIG)
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        logger.debug("command failed", exc_info=True)
        return _error("runtime", exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
