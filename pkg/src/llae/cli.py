"""Command-line driver and bit-exact file I/O.

File formats owned here: IDX tensors (big-endian, as published for the
MNIST family), binary P5 PGM images, and a plain text row format for
encoded feature-layer datasets.  The `main` entry point wires the
pipeline into subcommands; every run directory receives the fully
defaulted config for provenance.

Exit codes: 0 success, 1 usage error, 2 data/format error.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from pathlib import Path

import numpy as np

from . import circuit as circuit_mod
from . import vtree as vtree_mod
from .circuit import PartialAssignment, conditional_probability
from .codecs import FeatureLayerSpec, encode_domain
from .errors import IdxFormatError, TrainingDivergedError, ZeroEvidenceError
from .learn import BinaryDataset


# ----------------------------------------------------------------- IDX files


def read_idx(path) -> np.ndarray:
    """Parse an IDX tensor file (unsigned-byte payload only).

    Header: 0x00 0x00 <dtype> <ndims>, then ndims big-endian uint32
    sizes, then the row-major payload.  Trailing bytes are rejected.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise IdxFormatError("file shorter than the 4-byte magic", 0)
    zero0, zero1, dtype, ndims = struct.unpack_from(">BBBB", blob, 0)
    if zero0 != 0 or zero1 != 0:
        raise IdxFormatError(
            f"bad magic {blob[:4].hex()}; first two bytes must be zero", 0)
    if dtype != 0x08:
        raise IdxFormatError(f"unsupported dtype 0x{dtype:02x}; only "
                             "0x08 (unsigned byte) is handled", 2)
    if ndims < 1:
        raise IdxFormatError("dimension count must be at least 1", 3)
    header_end = 4 + 4 * ndims
    if len(blob) < header_end:
        raise IdxFormatError(
            f"truncated header: {ndims} dims need {header_end} bytes",
            len(blob))
    dims = struct.unpack_from(f">{ndims}I", blob, 4)
    count = 1
    for d in dims:
        count *= d
    if len(blob) - header_end < count:
        raise IdxFormatError(
            f"truncated payload: need {count} bytes, have "
            f"{len(blob) - header_end}", len(blob))
    if len(blob) - header_end > count:
        raise IdxFormatError("trailing bytes after the payload",
                             header_end + count)
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=header_end)
    return data.reshape(dims).copy()


def write_idx(tensor: np.ndarray, path) -> None:
    """Inverse of read_idx for unsigned-byte tensors."""
    tensor = np.ascontiguousarray(tensor, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, 0x08, tensor.ndim))
        fh.write(struct.pack(f">{tensor.ndim}I", *tensor.shape))
        fh.write(tensor.tobytes())


# ----------------------------------------------------------------- PGM files


def write_pgm(image: np.ndarray, path) -> None:
    """Binary P5 image; pixel byte = round-half-up(value * 255)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("image must be a 2-D array")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    h, w = image.shape
    pixels = np.floor(image * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 image back to floats in [0, 1]."""
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (missing P5 header)")
    # header tokens may be separated by any whitespace and # comments
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    if len(blob) - pos != w * h:
        raise ValueError(f"{path}: payload is {len(blob) - pos} bytes, "
                         f"expected {w * h}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).astype(np.float64) / 255.0


# ----------------------------------------------------- FL dataset text files


def write_fl_rows(data: BinaryDataset, path) -> None:
    """One `weight bit bit ...` line per row; weights keep compressed
    datasets exact."""
    lines = []
    for row, weight in zip(data.rows, data.weights):
        lines.append(f"{float(weight)!r} " + " ".join(str(int(b)) for b in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_fl_rows(path) -> BinaryDataset:
    rows, weights = [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        try:
            weights.append(float(parts[0]))
            rows.append([int(b) for b in parts[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}:{ln}: bad row ({exc})") from exc
    return BinaryDataset.from_rows(np.asarray(rows, dtype=np.uint8),
                                   np.asarray(weights))


# ------------------------------------------------------------ evidence syntax


def parse_evidence(text: str, fl_spec: FeatureLayerSpec | None = None
                   ) -> PartialAssignment:
    """`+12,-3` sets variable 12 true and 3 false (0-based); `label=4`
    expands to the one-hot slice of the label domain."""
    mapping: dict[int, bool] = {}

    def put(var: int, value: bool):
        if mapping.get(var, value) != value:
            raise ValueError(f"conflicting literals for variable {var}")
        mapping[var] = value

    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" in item:
            name, _, raw = item.partition("=")
            if fl_spec is None:
                raise ValueError("domain evidence needs a feature-layer spec")
            bits = encode_domain(fl_spec, name, [int(raw)])
            start, _ = fl_spec.domain_range(name)
            for i, b in enumerate(bits):
                put(start + i, bool(b))
        elif item[0] in "+-":
            put(int(item[1:]), item[0] == "+")
        else:
            raise ValueError(f"bad evidence literal {item!r}; "
                             "use +N, -N, or domain=value")
    return PartialAssignment(mapping)


# ------------------------------------------------------------------- driver


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the contract here is exit 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="llae", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON experiment config file")
    parser.add_argument("--out", default="run", help="run directory")
    parser.add_argument("--seed", type=int, help="override the config seed")
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("train-ae", help="phase I: train the autoencoder")
    sub.add_parser("encode", help="discretize the dataset to FL rows")
    sub.add_parser("train-psdd", help="phase II: learn the circuit")

    p = sub.add_parser("classify", help="predict the category of one image")
    p.add_argument("--image", required=True, help="PGM file to classify")

    p = sub.add_parser("sample", help="class-conditional image generation")
    p.add_argument("--class", dest="category", type=int, required=True)
    p.add_argument("--count", type=int, default=1)

    p = sub.add_parser("query", help="print Pr(target | evidence)")
    p.add_argument("--circuit", help="circuit file (default: <out>/circuit.psdd)")
    p.add_argument("--evidence", default="", help="e.g. +0,-3,label=2")
    p.add_argument("--target", required=True, help="same syntax as --evidence")

    sub.add_parser("analyze-fl", help="render per-variable visualizations")

    p = sub.add_parser("run-task", help="full experiment end to end")
    p.add_argument("task", choices=["classify", "noisy", "successor",
                                    "xor", "plus"])

    p = sub.add_parser("validate-circuit", help="structural checks")
    p.add_argument("--circuit", help="circuit file (default: <out>/circuit.psdd)")
    return parser


def _load_config(args, out: Path):
    """Explicit --config wins; otherwise reuse the run directory's saved
    config, falling back to full defaults."""
    from .pipeline import ExperimentConfig

    if args.config:
        config = ExperimentConfig.from_json(Path(args.config).read_text())
    elif (out / "config.json").exists():
        config = ExperimentConfig.from_json((out / "config.json").read_text())
    else:
        config = ExperimentConfig()
    if args.seed is not None:
        config.seed = args.seed
    return config


def _artifacts(out: Path):
    """Load the trained pieces a post-training command needs."""
    from .neural import load_network

    fl_spec = FeatureLayerSpec.from_json((out / "fl_spec.json").read_text())
    vt = vtree_mod.load(out / "circuit.vtree")
    psdd = circuit_mod.load(out / "circuit.psdd", vt)
    encoder = load_network(out / "encoder.llae")
    decoder = load_network(out / "decoder.llae")
    return fl_spec, psdd, encoder, decoder


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command is None:
        _build_parser().print_help()
        return 1
    out = Path(args.out)
    try:
        return _dispatch(args, out)
    except (OSError, ValueError, KeyError, TrainingDivergedError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args, out: Path) -> int:
    from . import pipeline

    if args.command == "run-task":
        config = _load_config(args, out)
        config.task = args.task
        metrics = pipeline.run_experiment(config, out)
        print(json.dumps(metrics, sort_keys=True, indent=2))
        return 0

    if args.command == "train-ae":
        config = _load_config(args, out)
        out.mkdir(parents=True, exist_ok=True)
        train_ds, _ = pipeline.load_dataset(config)
        fl_spec = pipeline.make_fl_spec(config)
        encoder, decoder, curve, _ = pipeline.run_phase1(config, train_ds,
                                                         fl_spec)
        from .neural import save_network

        (out / "config.json").write_text(config.to_json())
        (out / "fl_spec.json").write_text(fl_spec.to_json())
        save_network(encoder, out / "encoder.llae")
        save_network(decoder, out / "decoder.llae")
        (out / "phase1_curve.json").write_text(
            json.dumps(curve, sort_keys=True) + "\n")
        print(f"trained autoencoder: final loss "
              f"{curve[-1]['train_loss']:.4f}")
        return 0

    if args.command == "encode":
        config = _load_config(args, out)
        from .neural import load_network

        encoder = load_network(out / "encoder.llae")
        fl_spec = FeatureLayerSpec.from_json((out / "fl_spec.json").read_text())
        train_ds, _ = pipeline.load_dataset(config)
        data = pipeline.encode_fl_rows(
            encoder, fl_spec, config.latent,
            {"image": (train_ds.images, train_ds.labels)})
        write_fl_rows(data, out / "fl_rows.txt")
        print(f"encoded {len(data)} rows of {data.num_vars} variables")
        return 0

    if args.command == "train-psdd":
        config = _load_config(args, out)
        from .codecs import fl_constraint

        fl_spec = FeatureLayerSpec.from_json((out / "fl_spec.json").read_text())
        data = read_fl_rows(out / "fl_rows.txt")
        vt = pipeline.build_domain_vtree(fl_spec, data)
        psdd = pipeline.run_phase2(
            data.compress(), vt, config.learn_config, fl_constraint(fl_spec),
            rng=np.random.default_rng((config.seed, 5)),
            log_path=out / "train_log.jsonl")
        vtree_mod.save(vt, out / "circuit.vtree")
        circuit_mod.save(psdd, out / "circuit.psdd",
                         vtree_path=out / "circuit.vtree")
        print(f"learned circuit: {psdd.num_nodes} nodes, "
              f"{psdd.num_parameters} parameters")
        return 0

    if args.command == "classify":
        config = _load_config(args, out)
        fl_spec, psdd, encoder, _ = _artifacts(out)
        image = read_pgm(args.image).reshape(-1)
        category, zero = pipeline.classify(psdd, encoder, fl_spec,
                                           config.latent, image)
        suffix = " (zero-evidence fallback)" if zero else ""
        print(f"{category}{suffix}")
        return 0

    if args.command == "sample":
        config = _load_config(args, out)
        fl_spec, psdd, _, decoder = _artifacts(out)
        side = int(_image_side(decoder.output_dim))
        images = pipeline.sample_class_images(
            psdd, decoder, fl_spec, config.latent, args.category, args.count,
            rng=np.random.default_rng((config.seed, 7, args.category)))
        sample_dir = out / "samples"
        sample_dir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(images):
            path = sample_dir / f"class_{args.category}_{i}.pgm"
            write_pgm(img.reshape(side, side), path)
            print(path)
        return 0

    if args.command == "query":
        path = Path(args.circuit) if args.circuit else out / "circuit.psdd"
        psdd = circuit_mod.load(path)
        fl_spec = None
        if (out / "fl_spec.json").exists():
            fl_spec = FeatureLayerSpec.from_json(
                (out / "fl_spec.json").read_text())
        evidence = parse_evidence(args.evidence, fl_spec)
        target = parse_evidence(args.target, fl_spec)
        try:
            p = conditional_probability(psdd, target, evidence)
        except ZeroEvidenceError:
            print("error: evidence has probability zero", file=sys.stderr)
            return 2
        print(f"{p:.9f}")
        return 0

    if args.command == "analyze-fl":
        config = _load_config(args, out)
        fl_spec, psdd, _, decoder = _artifacts(out)
        side = int(_image_side(decoder.output_dim))
        flvis = out / "flvis"
        flvis.mkdir(parents=True, exist_ok=True)
        start, stop = fl_spec.domain_range(fl_spec.domains[0].name)
        for v in range(start, stop):
            vis = pipeline.visualize_fl_variable(
                psdd, decoder, fl_spec, config.latent, v, config.vis_samples,
                rng=np.random.default_rng((config.seed, 8, v)),
                image_domain=fl_spec.domains[0].name)
            if vis.constant:
                print(f"var {v}: constant "
                      f"(Pr(true) = {vis.probability_true:.6f})")
                continue
            for tag, img in (("true", vis.visual_true),
                             ("false", vis.visual_false)):
                write_pgm(img.reshape(side, side),
                          flvis / f"var_{v}_{tag}.pgm")
            print(f"var {v}: written")
        return 0

    if args.command == "validate-circuit":
        path = Path(args.circuit) if args.circuit else out / "circuit.psdd"
        psdd = circuit_mod.load(path)
        problems = circuit_mod.validate(psdd)
        if problems:
            for p in problems:
                print(p, file=sys.stderr)
            return 2
        print("ok")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def _image_side(n: int) -> int:
    import math

    side = math.isqrt(n)
    if side * side != n:
        raise ValueError(f"decoder output size {n} is not a square image")
    return side


if __name__ == "__main__":
    sys.exit(main())
