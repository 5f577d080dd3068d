"""Command line: ``drn synth | train | eval | demo | plot``.

Configuration is merged as defaults < ``--config`` file < environment <
flags, and the resolved result is written into every output directory.
Failures exit nonzero with one JSON line on stderr.
"""
import argparse
import copy
import json
import logging
import os
import sys

import numpy as np
import yaml

log = logging.getLogger("drn")

ENV_OUTPUT_ROOT = "DRN_OUTPUT_ROOT"
ENV_SEED = "DRN_SEED"
RESOLVED_NAME = "resolved_config.yaml"

# desk-scale profile: 256 px inputs and a width-16 backbone
DEFAULTS = {
    "seed": None,
    "ablation": "full",
    "model": {"input_size": 256, "width": 16},
    "scene": {},
    "train": {},
    "eval": {"nms": True, "iou_threshold": 0.5, "suppress_threshold": 0.03},
}


class CliError(Exception):
    """A user-facing failure (bad arguments, missing inputs)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config_file(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise CliError(f"{path}: expected a mapping at the top level")
    unknown = set(data) - set(DEFAULTS) - {"out"}
    if unknown:
        raise CliError(f"{path}: unknown top-level keys {sorted(unknown)}")
    return data


def env_overrides(environ):
    out = {}
    if environ.get(ENV_SEED):
        try:
            out["seed"] = int(environ[ENV_SEED])
        except ValueError:
            raise CliError(f"{ENV_SEED} must be an integer, got {environ[ENV_SEED]!r}") from None
    return out


def resolve(args, environ=None):
    """Merge defaults, the config file, environment and flags into one dict."""
    environ = os.environ if environ is None else environ
    cfg = _merge(DEFAULTS, load_config_file(args.config))
    cfg = _merge(cfg, env_overrides(environ))
    flags = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.ablation is not None:
        flags["ablation"] = args.ablation
    if args.out is not None:
        flags["out"] = args.out
    for section, mapping in FLAG_SECTIONS.get(args.command, {}).items():
        for attr, key in mapping.items():
            value = getattr(args, attr, None)
            if value is not None:
                flags.setdefault(section, {})[key] = value
    cfg = _merge(cfg, flags)
    if cfg["seed"] is not None:
        cfg["scene"]["seed"] = cfg["seed"]
        cfg["train"]["seed"] = cfg["seed"]
    if not cfg.get("out"):
        cfg["out"] = os.path.join(environ.get(ENV_OUTPUT_ROOT, "runs"), args.command)
    return cfg


def model_config(cfg):
    from .detector import ModelConfig

    return ModelConfig.from_dict(cfg["model"]).with_ablation(cfg["ablation"])


def write_resolved(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, RESOLVED_NAME), "w") as f:
        yaml.safe_dump(cfg, f, sort_keys=True)


def _save_png(path, image):
    from PIL import Image

    tmp = path + ".tmp"
    Image.fromarray(image).save(tmp, format="PNG")
    os.replace(tmp, path)


def _write_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
    os.replace(tmp, path)


def cmd_synth(cfg, args):
    from .annotations import write_annotations
    from .synth import GENERATOR_VERSION, SceneConfig, generate_scene, rotate_dataset

    scene_cfg = SceneConfig.from_dict(cfg["scene"])
    count = args.count
    if count < 1:
        raise CliError("--count must be positive")
    angles = args.angles or []
    if args.augment and not angles:
        raise CliError("--augment needs --angles")
    # render everything first so a failure leaves nothing half-written
    items = [generate_scene(scene_cfg, i) for i in range(count)]
    if args.augment:
        items = rotate_dataset(items, angles, include_originals=True)
    out = cfg["out"]
    os.makedirs(os.path.join(out, "images"), exist_ok=True)
    for image, ann in items:
        _save_png(os.path.join(out, "images", ann.image_id + ".png"), image)
    anns = [a for _, a in items]
    write_annotations(os.path.join(out, "annotations.jsonl"), anns)
    manifest = {
        "generator": GENERATOR_VERSION, "seed": scene_cfg.seed, "scene_config": scene_cfg.to_dict(),
        "base_images": count, "images": len(items), "objects": sum(len(a.objects) for a in anns),
        "rotations_deg": list(angles) if args.augment else [],
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)
    write_resolved(cfg, out)
    return {"out": out, "images": len(items), "objects": manifest["objects"]}


def cmd_train(cfg, args):
    from .detector import parameter_report
    from .training import TrainConfig, load_dataset, train

    if not args.data:
        raise CliError("train needs --data")
    mcfg = model_config(cfg)
    tcfg = TrainConfig.from_dict(cfg["train"])
    dataset = load_dataset(args.data)
    out = cfg["out"]
    write_resolved(cfg, out)
    report = parameter_report(mcfg)
    _write_json(os.path.join(out, "parameters.json"), {"ablation": cfg["ablation"], **report})

    def progress(rec):
        if rec["step"] % 50 == 0 or rec["step"] == tcfg.steps:
            log.info("step %d total %.4f", rec["step"], rec["total"])

    _, history = train(mcfg, tcfg, dataset, out_dir=out, resume=args.resume, callback=progress)
    return {"out": out, "steps": tcfg.steps, "final_total": history[-1]["total"] if history else None,
            "parameters": report["total"]}


def cmd_eval(cfg, args):
    from .annotations import write_detections
    from .evaluation import coco_metrics
    from .geometry import Detection, angle_soft_nms
    from .training import load_checkpoint, load_dataset, predict

    if not args.data:
        raise CliError("eval needs --data")
    dataset = load_dataset(args.data)
    ev = cfg["eval"]
    if args.gt_as_pred:
        dets = [[Detection(b, c, 1.0) for c, b in a.objects] for a in dataset.annotations]
    else:
        if not args.checkpoint:
            raise CliError("eval needs --checkpoint (or --gt-as-pred)")
        if not os.path.exists(args.checkpoint):
            raise CliError(f"checkpoint not found: {args.checkpoint}")
        expected = model_config(cfg) if args.config else None
        model, _ = load_checkpoint(args.checkpoint, expected)
        dets = predict(model, dataset, nms=False)
        if ev["nms"]:
            dets = [angle_soft_nms(d, ev["iou_threshold"], ev["suppress_threshold"]) for d in dets]
    gts = [a.objects for a in dataset.annotations]
    report = coco_metrics(dets, gts)
    out = cfg["out"]
    write_resolved(cfg, out)
    report.save(os.path.join(out, "report.json"))
    write_detections(os.path.join(out, "detections.jsonl"), [a.image_id for a in dataset.annotations], dets)
    return {"out": out, "map": report.map, "ap50": report.ap50, "ap75": report.ap75, "ar300": report.ar300,
            "detections": report.num_detections}


def draw_detections(image, detections, class_names=None):
    """Return a copy of ``image`` with one labelled quad per detection."""
    from PIL import Image, ImageDraw

    from .geometry import corners_from_septet

    palette = [(255, 64, 64), (64, 200, 255), (255, 200, 0), (120, 255, 120), (255, 90, 255)]
    canvas = Image.fromarray(image).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    for d in detections:
        quad = [tuple(p) for p in corners_from_septet(d.box).polygon()]
        color = palette[d.class_id % len(palette)]
        draw.polygon(quad, outline=color)
        name = class_names[d.class_id] if class_names else str(d.class_id)
        draw.text(quad[0], f"{name} {d.score:.2f}", fill=color)
    return np.asarray(canvas)


def cmd_demo(cfg, args):
    from PIL import Image

    from .annotations import SceneAnnotation, write_detections
    from .training import SceneDataset, load_checkpoint, predict

    if not args.checkpoint or not os.path.exists(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    if not args.image or not os.path.exists(args.image):
        raise CliError(f"image not found: {args.image}")
    model, _ = load_checkpoint(args.checkpoint)
    image = np.asarray(Image.open(args.image).convert("RGB"))
    image_id = os.path.splitext(os.path.basename(args.image))[0]
    ds = SceneDataset([image], [SceneAnnotation(image_id, image.shape[1], image.shape[0])])
    ev = cfg["eval"]
    (dets,) = predict(model, ds, nms=ev["nms"], iou_threshold=ev["iou_threshold"],
                      suppress_threshold=ev["suppress_threshold"])
    dets = [d for d in dets if d.score >= args.score_threshold]
    out = cfg["out"]
    write_resolved(cfg, out)
    path = os.path.join(out, f"{image_id}_demo.png")
    _save_png(path, draw_detections(image, dets))
    write_detections(os.path.join(out, f"{image_id}_detections.jsonl"), [image_id], [dets])
    return {"out": path, "detections": len(dets)}


LOSS_TERMS = ("heatmap", "size", "offset", "angle")


def cmd_plot(cfg, args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evaluation import MetricReport

    if not args.log and not args.report:
        raise CliError("plot needs --log and/or --report")
    for path, what in ((args.log, "training log"), (args.report, "report")):
        if path and not os.path.exists(path):
            raise CliError(f"{what} not found: {path}")
    out = cfg["out"]
    if args.log:
        with open(args.log) as f:
            recs = [json.loads(line) for line in f if line.strip()]
        if not recs:
            raise CliError(f"training log is empty: {args.log}")
    write_resolved(cfg, out)
    written = []
    if args.log:
        steps = [r["step"] for r in recs]
        for term in LOSS_TERMS:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.plot(steps, [r[term] for r in recs], lw=1)
            ax.set(xlabel="step", ylabel=f"{term} loss", yscale="log", title=term)
            fig.tight_layout()
            path = os.path.join(out, f"loss_{term}.png")
            fig.savefig(path, dpi=100)
            plt.close(fig)
            written.append(path)
    if args.report:
        report = MetricReport.load(args.report)
        for c, curve in sorted(report.pr_curves.items()):
            fig, ax = plt.subplots(figsize=(4, 4))
            ax.plot(curve["recall"], curve["precision"], lw=1.5)
            ap = report.per_class_ap.get(c, {}).get(0.5)
            ax.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.02),
                   title=f"class {c}, IoU 0.5" + (f", AP {ap:.3f}" if ap is not None else ""))
            fig.tight_layout()
            path = os.path.join(out, f"pr_class{c}.png")
            fig.savefig(path, dpi=100)
            plt.close(fig)
            written.append(path)
    return {"out": out, "figures": written}


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "demo": cmd_demo, "plot": cmd_plot}

# flag attribute -> config key, per section, for each verb
FLAG_SECTIONS = {
    "synth": {"scene": {"image_size": "image_size", "num_classes": "num_classes"}},
    "train": {"train": {"steps": "steps", "batch_size": "batch_size", "lr": "lr", "threads": "threads",
                        "augment": "augment"},
              "model": {"width": "width", "input_size": "input_size", "num_classes": "num_classes"}},
    "eval": {"eval": {"nms": "nms"}},
    "demo": {},
    "plot": {},
}


def _angles(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated degrees, got {text!r}") from None


def build_parser():
    from .detector import ABLATIONS

    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML file with model/scene/train/eval sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help=f"output directory (default ${ENV_OUTPUT_ROOT}/<verb>)")
    common.add_argument("--ablation", choices=sorted(ABLATIONS))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="drn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic dataset")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--image-size", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--angles", type=_angles, help="rotation angles in degrees, e.g. -45,-30,-15,15,30,45")
    p.add_argument("--augment", action="store_true", help="add rotated copies at --angles")

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--data", help="dataset directory written by synth")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--input-size", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--no-nms", dest="nms", action="store_const", const=False)
    p.add_argument("--gt-as-pred", action="store_true", help="score the ground truth against itself")

    p = sub.add_parser("demo", parents=[common], help="draw detections on one image")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--score-threshold", type=float, default=0.3)

    p = sub.add_parser("plot", parents=[common], help="loss curves and PR curves")
    p.add_argument("--log", help="train_log.jsonl")
    p.add_argument("--report", help="report.json from eval")
    return parser


def _fail(exc):
    msg = {"error": type(exc).__name__, "message": str(exc).replace("\n", " ")}
    for attr in ("term", "step"):
        if hasattr(exc, attr):
            msg[attr] = getattr(exc, attr)
    sys.stderr.write(json.dumps(msg) + "\n")
    return 2 if isinstance(exc, CliError) else 1


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except CliError as e:
        return _fail(e)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve(args)
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        result = COMMANDS[args.command](cfg, args)
    except (CliError, ValueError, OSError, RuntimeError, KeyError) as e:
        return _fail(e)
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
