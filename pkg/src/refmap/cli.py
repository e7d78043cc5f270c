"""Command-line front end.

Exit codes: 0 success, 1 validation failures found, 2 bad input,
3 write failure, 4 invalid metric weights.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import RefmapError
from .formats import (
    AnnotationSet,
    encode_png,
    decode_png,
    is_manifest,
    load_annotations,
    read_manifest,
    read_map,
    read_tensors,
    write_annotations,
    write_tensor,
    write_tensors,
)
from .fusion import POOL_MODES, check_levels, encode_params, fusion_forward, init_params, load_params
from .hmsa import bilinear_upsample, hmsa_forward
from .mcmg import McmgConfig, mcmg_compile, quantize_u8
from .metrics import MetricReport, RmiWeights, evaluate_query, validate_annotations
from .synth import synthetic_annotations, synthetic_embeddings

log = logging.getLogger("refmap")

EXIT_FAILED = 1
EXIT_INPUT = 2
EXIT_WRITE = 3
EXIT_WEIGHTS = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --- helpers ---------------------------------------------------------------


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("size extents must be >= 1")
    return w, h


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _run_parallel(fn, items, threads: int) -> list:
    """Apply ``fn`` to each item, results in input order regardless of ``threads``."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class _StagedWriter:
    """Collects outputs under a ``.partial`` suffix and publishes them together."""

    def __init__(self):
        self.staged: list[tuple[Path, Path]] = []

    def write(self, path: Path, data: bytes) -> None:
        tmp = path.with_name(path.name + ".partial")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp.write_bytes(data)
        except OSError as exc:
            raise CliError(EXIT_WRITE, f"cannot write {path}: {exc}") from exc
        self.staged.append((tmp, path))

    def commit(self) -> None:
        try:
            for tmp, path in self.staged:
                os.replace(tmp, path)
        except OSError as exc:
            raise CliError(EXIT_WRITE, f"cannot finalize {path}: {exc}") from exc
        self.staged = []

    def discard(self) -> None:
        for tmp, _ in self.staged:
            try:
                tmp.unlink()
            except OSError:
                pass
        self.staged = []


def _load_annotations(path: Path) -> AnnotationSet:
    if not path.is_file():
        raise CliError(EXIT_INPUT, f"annotation file not found: {path}")
    try:
        ann, _ = load_annotations(path)
    except (RefmapError, OSError, UnicodeDecodeError) as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from exc
    return ann


def _annotation_inputs(path: Path, image_id: str | None) -> list[tuple[str, AnnotationSet]]:
    """(image id, annotations) pairs from a single annotation file or a manifest."""
    if not path.is_file():
        raise CliError(EXIT_INPUT, f"input not found: {path}")
    if is_manifest(path):
        try:
            entries = read_manifest(path)
        except (RefmapError, OSError) as exc:
            raise CliError(EXIT_INPUT, f"{path}: {exc}") from exc
        return [(e.id, _load_annotations(e.annotations)) for e in entries]
    return [(image_id or path.stem, _load_annotations(path))]


def _dumps(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8")


# --- subcommands -----------------------------------------------------------


def cmd_mcmg(args) -> int:
    inputs = _annotation_inputs(Path(args.input), args.image_id)
    config = McmgConfig(levels=args.levels, sigma=args.sigma, radius=args.radius, output_size=args.size)
    tasks = []
    for image_id, ann in inputs:
        try:
            resolved = config.resolve(ann.image_width, ann.image_height)
        except ValueError as exc:
            raise CliError(EXIT_INPUT, str(exc)) from exc
        for qi, q in enumerate(ann.queries):
            tasks.append((image_id, qi, q, ann, resolved))

    def run(task):
        image_id, qi, q, ann, cfg = task
        try:
            return mcmg_compile(q.regions, ann.image_width, ann.image_height, cfg)
        except (RefmapError, ValueError) as exc:
            raise CliError(EXIT_INPUT, f"{image_id} query {qi}: {exc}") from exc

    maps = _run_parallel(run, tasks, args.threads)
    out_dir = Path(args.out_dir)
    writer = _StagedWriter()
    try:
        for (image_id, qi, _, _, _), m in zip(tasks, maps):
            if args.format == "png":
                writer.write(out_dir / f"{image_id}_{qi}.png", encode_png(m))
            else:
                writer.write(out_dir / f"{image_id}_{qi}.xten", write_tensor(m))
        for image_id, ann in inputs:
            sidecar = {
                "image_id": image_id,
                "image": {"width": ann.image_width, "height": ann.image_height},
                "queries": len(ann.queries),
                "format": args.format,
                "config": config.resolve(ann.image_width, ann.image_height).to_dict(),
            }
            writer.write(out_dir / f"{image_id}.mcmg.json", _dumps(sidecar))
        writer.commit()
    finally:
        writer.discard()
    log.info("wrote %d maps to %s", len(maps), out_dir)
    return 0


def _load_stream(path: Path, what: str) -> list[np.ndarray]:
    if not path.is_file():
        raise CliError(EXIT_INPUT, f"{what} file not found: {path}")
    try:
        tensors = read_tensors(path.read_bytes())
    except (RefmapError, OSError) as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from exc
    if not tensors or any(t.dtype != np.float32 for t in tensors):
        raise CliError(EXIT_INPUT, f"{path}: expected float32 XTEN tensors")
    return tensors


def cmd_infer(args) -> int:
    levels = _load_stream(Path(args.features), "features")
    text = _load_stream(Path(args.text), "text")
    if len(text) != 1 or text[0].ndim != 2:
        raise CliError(EXIT_INPUT, f"{args.text}: expected one (S, D) tensor")
    text = text[0]
    try:
        dim = check_levels(levels, require_decreasing=not args.no_level_check)
        if text.shape[1] != dim:
            raise CliError(EXIT_INPUT, f"text dim {text.shape[1]} does not match feature dim {dim}")
        if args.weights:
            params = load_params(args.weights)
        else:
            params = init_params(dim, len(levels), args.heads, args.points, args.blocks, seed=args.seed)
        width, height = args.size or (levels[0].shape[1] * 4, levels[0].shape[0] * 4)
        w_text, rows, dims = fusion_forward(text, levels, params, n_blocks=args.blocks)
        out = hmsa_forward(rows, dims, w_text, height, width, POOL_MODES[args.pool])
    except CliError:
        raise
    except (RefmapError, ValueError, OSError) as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc

    writer = _StagedWriter()
    try:
        writer.write(Path(args.out), write_tensor(out.astype(np.float32)))
        if args.png:
            writer.write(Path(args.png), encode_png(quantize_u8(out)))
        writer.commit()
    finally:
        writer.discard()
    return 0


def _parse_weights(text: str) -> RmiWeights:
    try:
        su, as_, da = (float(v) for v in text.split(","))
        return RmiWeights(su, as_, da)
    except ValueError as exc:
        raise CliError(EXIT_WEIGHTS, f"invalid --weights {text!r}: {exc}") from exc


def _find_prediction(pred_dir: Path, stem: str) -> Path | None:
    for ext in (".png", ".xten"):
        p = pred_dir / f"{stem}{ext}"
        if p.is_file():
            return p
    return None


def cmd_eval(args) -> int:
    weights = _parse_weights(args.weights)
    pred_dir = Path(args.pred_dir)
    if not pred_dir.is_dir():
        raise CliError(EXIT_INPUT, f"prediction directory not found: {pred_dir}")
    inputs = _annotation_inputs(Path(args.input), args.image_id)
    tasks = []
    for image_id, ann in inputs:
        for qi, q in enumerate(ann.queries):
            stem = f"{image_id}_{qi}"
            path = _find_prediction(pred_dir, stem)
            if path is None:
                raise CliError(EXIT_INPUT, f"missing prediction for {stem} in {pred_dir}")
            tasks.append((stem, path, q, ann))

    def run(task):
        stem, path, q, ann = task
        try:
            m = read_map(path)
            return evaluate_query(m, q, ann.image_width, ann.image_height, weights, args.tau, stem)
        except (RefmapError, OSError) as exc:
            raise CliError(EXIT_INPUT, f"{path}: {exc}") from exc

    report = MetricReport(_run_parallel(run, tasks, args.threads), weights, {"tau_frac": args.tau})
    writer = _StagedWriter()
    try:
        writer.write(Path(args.report), _dumps(report.to_dict()))
        writer.commit()
    finally:
        writer.discard()
    agg = report.aggregate()
    for key in ("r_su", "r_as", "r_da", "r_mi"):
        print(f"{key} {agg[key]:.6f}")
    return 0


def cmd_validate(args) -> int:
    a = _load_annotations(Path(args.group_a))
    b = _load_annotations(Path(args.group_b))
    try:
        results = validate_annotations(a, b, args.iou)
    except RefmapError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc
    for r in results:
        status = "pass" if r.passed else "fail"
        line = f"query {r.index}\t{status}\tiou={r.iou:.4f}\tarea={r.area:.6f}"
        if r.reasons:
            line += "\t" + "; ".join(r.reasons)
        print(line)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} passed")
    return EXIT_FAILED if failed else 0


def colormap(values: np.ndarray, name: str = "bluered") -> np.ndarray:
    """(H, W) uint8 -> (H, W, 3) uint8; 0 maps to blue, 255 to red."""
    v = values.astype(np.int32)
    if name == "bluered":
        rgb = np.stack([v, np.zeros_like(v), 255 - v], axis=-1)
    elif name == "jet":
        t = v / 255.0
        r = np.clip(1.5 - np.abs(4 * t - 3), 0, 1)
        g = np.clip(1.5 - np.abs(4 * t - 2), 0, 1)
        b = np.clip(1.5 - np.abs(4 * t - 1), 0, 1)
        rgb = np.floor(np.stack([r, g, b], axis=-1) * 255 + 0.5).astype(np.int32)
    else:
        raise ValueError(f"unknown colormap {name!r}")
    return rgb.astype(np.uint8)


def cmd_render(args) -> int:
    path = Path(args.map)
    if not path.is_file():
        raise CliError(EXIT_INPUT, f"map not found: {path}")
    try:
        m = read_map(path)
        base = None
        if args.image:
            base = decode_png(Path(args.image).read_bytes(), "RGB")
            if m.shape != base.shape[:2]:
                m = bilinear_upsample(m, base.shape[0], base.shape[1])
        rgb = colormap(quantize_u8(np.clip(m, 0.0, 1.0)), args.colormap)
    except (RefmapError, OSError, ValueError) as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc
    if base is not None:
        a = int(round(args.alpha * 255))
        blend = (a * rgb.astype(np.int32) + (255 - a) * base.astype(np.int32) + 127) // 255
        rgb = blend.astype(np.uint8)
    writer = _StagedWriter()
    try:
        writer.write(Path(args.out), encode_png(rgb))
        writer.commit()
    finally:
        writer.discard()
    return 0


_DIM_KEYS = ("seq", "dim", "height", "width", "levels", "heads", "points", "blocks")
_DIM_DEFAULTS = {"seq": 6, "dim": 16, "height": 64, "width": 64, "levels": 4, "heads": 4, "points": 4, "blocks": 1}


def _parse_dims(text: str | None) -> dict[str, int]:
    dims = dict(_DIM_DEFAULTS)
    if not text:
        return dims
    for part in text.split(","):
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in _DIM_KEYS:
            raise CliError(EXIT_INPUT, f"unknown --dims key {key!r}; expected one of {', '.join(_DIM_KEYS)}")
        try:
            dims[key] = int(value)
        except ValueError:
            raise CliError(EXIT_INPUT, f"--dims {key} needs an integer, got {value!r}") from None
        if dims[key] < 1:
            raise CliError(EXIT_INPUT, f"--dims {key} must be >= 1")
    return dims


def cmd_synth(args) -> int:
    dims = _parse_dims(args.dims)
    if dims["dim"] % dims["heads"]:
        raise CliError(EXIT_INPUT, f"embedding dim {dims['dim']} is not divisible by head count {dims['heads']}")
    width, height = args.image or (dims["width"] * 4, dims["height"] * 4)
    rng = np.random.default_rng(args.seed)
    text, feats = synthetic_embeddings(rng, dims["seq"], dims["dim"], dims["height"], dims["width"], dims["levels"])
    ann = synthetic_annotations(rng, width, height, args.queries)
    params = init_params(dims["dim"], dims["levels"], dims["heads"], dims["points"], dims["blocks"], seed=args.seed)

    out = Path(args.out_dir)
    writer = _StagedWriter()
    try:
        writer.write(out / "text.xten", write_tensor(text))
        writer.write(out / "features.xten", write_tensors(feats))
        writer.write(out / "synth.json", write_annotations(ann).encode("utf-8"))
        manifest = [{"id": "synth", "annotations": "synth.json", "features": ["features.xten"], "text": "text.xten"}]
        writer.write(out / "manifest.json", _dumps(manifest))
        index, stream = encode_params(params, "weights.xten")
        writer.write(out / "weights.json", index)
        writer.write(out / "weights.xten", stream)
        writer.commit()
    finally:
        writer.discard()
    return 0


# --- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads across queries")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="refmap", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mcmg", parents=[common], help="compile annotations into soft correlation maps")
    p.add_argument("input", help="annotation JSON file or manifest")
    p.add_argument("out_dir")
    p.add_argument("--image-id", help="id used in output names (default: input file stem)")
    p.add_argument("--levels", type=_parse_int_list, help="grid cell sizes in pixels, e.g. 16,32,64")
    p.add_argument("--sigma", type=float, help="Gaussian std-dev in pixels (default: finest cell / 2)")
    p.add_argument("--radius", type=int, help="kernel radius in pixels (default: ceil(3 sigma))")
    p.add_argument("--size", type=_parse_size, help="resize maps to WIDTHxHEIGHT, e.g. 512x512")
    p.add_argument("--format", choices=("png", "xten"), default="png")
    p.set_defaults(func=cmd_mcmg)

    p = sub.add_parser("infer", parents=[common], help="correlation map from embeddings")
    p.add_argument("features", help="XTEN stream of (H_l, W_l, D) levels, finest first")
    p.add_argument("text", help="XTEN (S, D) text embeddings")
    p.add_argument("out", help="output XTEN float32 map")
    p.add_argument("--weights", help="weights index JSON (default: seeded initialization)")
    p.add_argument("--pool", choices=("avg", "average", "max", "first"), default="avg")
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--points", type=int, default=4)
    p.add_argument("--size", type=_parse_size, help="output WIDTHxHEIGHT (default: 4x the finest level)")
    p.add_argument("--png", help="also write the quantized map as PNG")
    p.add_argument("--no-level-check", action="store_true", help="allow non-decreasing level extents")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score predicted maps against annotations")
    p.add_argument("pred_dir")
    p.add_argument("input", help="annotation JSON file or manifest")
    p.add_argument("report", help="output report JSON")
    p.add_argument("--image-id")
    p.add_argument("--weights", default="0.4,0.35,0.25", help="r_mi weights su,as,da")
    p.add_argument("--tau", type=float, default=0.5, help="attention-point threshold, fraction of peak")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate", parents=[common], help="check two annotation groups against the protocol")
    p.add_argument("group_a")
    p.add_argument("group_b")
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("render", parents=[common], help="colorize a map, optionally over an image")
    p.add_argument("map")
    p.add_argument("out")
    p.add_argument("--image", help="PNG to blend under the heatmap")
    p.add_argument("--colormap", choices=("bluered", "jet"), default="bluered")
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("synth", parents=[common], help="write seeded synthetic fixtures")
    p.add_argument("out_dir")
    p.add_argument("--dims", help="key=value list over " + ",".join(_DIM_KEYS))
    p.add_argument("--image", type=_parse_size, help="annotation image WIDTHxHEIGHT (default: 4x finest level)")
    p.add_argument("--queries", type=int, default=3)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.threads = max(1, getattr(args, "threads", 1))
    args.seed = getattr(args, "seed", 0)
    verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"refmap {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
