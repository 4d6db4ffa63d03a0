"""Two-phase experiment orchestration.

Phase I trains the categorical autoencoder on raw images and discretizes
every example into feature-layer bits; phase II learns a circuit over
those bits plus symbolic domains (labels, function results).  On top of
the learned pair this module implements the evaluation protocols:
exact-MAP and sampled classification, class-conditional image sampling,
noisy-label training, functional pair tasks (successor, xor, plus), and
per-variable visualization of what each latent bit encodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import circuit as circuit_mod
from . import vtree as vtree_mod
from .circuit import (
    Circuit,
    PartialAssignment,
    complete_evidence_batch,
    conditional_probability,
)
from .codecs import (
    DomainSpec,
    FeatureLayerSpec,
    decode_domain,
    encode_domain,
    fl_constraint,
)
from .errors import ZeroEvidenceError
from .learn import BinaryDataset, LearnConfig, learn_structure, log_likelihood
from .neural import (
    LatentSpec,
    MlpNetwork,
    TrainConfig,
    encode_hard_batch,
    init_mlp,
    save_network,
    train,
)

TASKS = ("classify", "noisy", "successor", "xor", "plus")


# ------------------------------------------------------------------ datasets


@dataclass
class ImageDataset:
    """Flat images in [0,1] with integer category labels."""

    images: np.ndarray  # [N, height*width] float64
    labels: np.ndarray  # [N] int64
    height: int
    width: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape != (len(self.labels), self.height * self.width):
            raise ValueError("image matrix does not match labels/geometry")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.images)


def downsample_images(images: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool [N, h, w] images over factor x factor blocks."""
    if factor == 1:
        return np.asarray(images, dtype=np.float64)
    n, h, w = images.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} images not divisible by factor {factor}")
    return (
        images.reshape(n, h // factor, factor, w // factor, factor)
        .mean(axis=(2, 4))
        .astype(np.float64)
    )


def _pad_center(images8: np.ndarray, side: int = 14) -> np.ndarray:
    """Embed 8x8 bitmaps in the middle of a side x side frame."""
    margin = (side - 8) // 2
    out = np.zeros((len(images8), side, side))
    out[:, margin:margin + 8, margin:margin + 8] = images8
    return out


def load_digits14(train_size: int = 2000, test_size: int = 500,
                  rng=None) -> tuple[ImageDataset, ImageDataset]:
    """Desk-scale 10-class image data: the bundled 8x8 digit scans,
    centered on a 14x14 canvas.

    The test set stays clean and centered; training examples beyond the
    base pool are random +/-2 pixel shifts of pool images, which also
    makes the encoder tolerant to small translations.
    """
    from sklearn.datasets import load_digits

    rng = np.random.default_rng(rng)
    raw = load_digits()
    images = raw.images / 16.0
    order = rng.permutation(len(images))
    test_idx = order[:test_size]
    pool_idx = order[test_size:]
    if test_size > len(images) // 2:
        raise ValueError("test_size leaves too small a training pool")

    test = ImageDataset(
        _pad_center(images[test_idx]).reshape(test_size, -1),
        raw.target[test_idx], 14, 14,
    )

    frames = list(_pad_center(images[pool_idx]))
    labels = list(raw.target[pool_idx])
    while len(frames) < train_size:
        i = int(rng.integers(len(pool_idx)))
        dy, dx = (int(v) for v in rng.integers(-2, 3, size=2))
        frame = np.zeros((14, 14))
        frame[3 + dy:11 + dy, 3 + dx:11 + dx] = images[pool_idx[i]]
        frames.append(frame)
        labels.append(raw.target[pool_idx[i]])
    frames = np.asarray(frames[:train_size])
    labels = np.asarray(labels[:train_size])
    train_ds = ImageDataset(frames.reshape(train_size, -1), labels, 14, 14)
    return train_ds, test


def load_mnist14(data_dir, train_size: int = 2000, test_size: int = 500,
                 downsample: int = 2) -> tuple[ImageDataset, ImageDataset]:
    """28x28 IDX image/label files pooled down to 14x14.

    Expects the standard four files (train/t10k images/labels) under
    `data_dir`; raises FileNotFoundError when absent.
    """
    from .cli import read_idx

    data_dir = Path(data_dir)
    names = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    arrays = {k: read_idx(data_dir / v) for k, v in names.items()}
    out = []
    for split, size in (("train", train_size), ("test", test_size)):
        imgs = arrays[f"{split}_images"][:size].astype(np.float64) / 255.0
        small = downsample_images(imgs, downsample)
        side = small.shape[1]
        out.append(ImageDataset(
            small.reshape(size, -1), arrays[f"{split}_labels"][:size], side, side
        ))
    return out[0], out[1]


# ------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    dataset: str = "digits14"
    data_dir: str | None = None
    downsample: int = 2
    num_vars: int = 16
    cat_dim: int = 2
    hidden: int = 256
    train_config: TrainConfig = field(default_factory=TrainConfig)
    learn_config: LearnConfig = field(default_factory=LearnConfig)
    task: str = "classify"
    noise_k: int = 0
    category_count: int = 10
    train_size: int = 2000
    test_size: int = 500
    sample_count: int = 2
    vis_samples: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not 0 <= self.noise_k <= self.category_count - 1:
            raise ValueError("noise_k must be in [0, category_count - 1]")

    @property
    def latent(self) -> LatentSpec:
        return LatentSpec(self.num_vars, self.cat_dim)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        raw = json.loads(text)
        if "train_config" in raw:
            raw["train_config"] = TrainConfig(**raw["train_config"])
        if "learn_config" in raw:
            raw["learn_config"] = LearnConfig(**raw["learn_config"])
        return cls(**raw)


def load_dataset(config: ExperimentConfig) -> tuple[ImageDataset, ImageDataset]:
    if config.dataset == "digits14":
        return load_digits14(config.train_size, config.test_size,
                             rng=np.random.default_rng((config.seed, 1)))
    if config.dataset == "mnist14":
        if config.data_dir is None:
            raise ValueError("mnist14 needs data_dir pointing at the IDX files")
        return load_mnist14(config.data_dir, config.train_size,
                            config.test_size, config.downsample)
    raise ValueError(f"unknown dataset {config.dataset!r}")


def make_fl_spec(config: ExperimentConfig) -> FeatureLayerSpec:
    """Feature-layer layout for the configured task."""
    image = DomainSpec("image", config.num_vars, config.cat_dim, "neural", False)
    if config.task in ("classify", "noisy"):
        label = DomainSpec("label", 1, config.category_count,
                           "one_hot_symbolic", False)
        return FeatureLayerSpec([image, label])
    a = DomainSpec("image_a", config.num_vars, config.cat_dim, "neural", False)
    b = DomainSpec("image_b", config.num_vars, config.cat_dim, "neural", False)
    if config.task == "successor":
        return FeatureLayerSpec([a, b])
    if config.task == "xor":
        result = DomainSpec("result", 1, 2, "one_hot_symbolic", False)
    else:  # plus: sums 0..18
        result = DomainSpec("result", 1, 2 * config.category_count - 1,
                            "one_hot_symbolic", False)
    return FeatureLayerSpec([a, b, result])


# ------------------------------------------------------------ encoding glue


def encode_images(encoder: MlpNetwork, images: np.ndarray,
                  lspec: LatentSpec) -> np.ndarray:
    """Hard-encode images to FL bits: for binary latents the bit is the
    argmax index, otherwise the flattened one-hot block."""
    codes = encode_hard_batch(encoder, images, lspec)
    if lspec.cat_dim == 2:
        return codes.argmax(axis=2).astype(np.uint8)
    return codes.reshape(len(codes), lspec.flat_dim)


def bits_to_decoder_input(bits: np.ndarray, lspec: LatentSpec) -> np.ndarray:
    """Inverse of encode_images at the representation level: FL bits of
    one image domain -> the decoder's flat one-hot input, batched."""
    bits = np.atleast_2d(np.asarray(bits, dtype=np.float64))
    if lspec.cat_dim == 2:
        out = np.zeros((len(bits), lspec.flat_dim))
        out[:, 0::2] = 1.0 - bits
        out[:, 1::2] = bits
        return out
    return bits


def decode_image_bits(decoder: MlpNetwork, bits, lspec: LatentSpec) -> np.ndarray:
    return decoder.forward(bits_to_decoder_input(bits, lspec))


# ------------------------------------------------------------------ phase I


def run_phase1(config: ExperimentConfig, train_ds: ImageDataset,
               fl_spec: FeatureLayerSpec | None = None):
    """Train the autoencoder unsupervised on the image domain, then
    discretize every training example and assemble full FL rows.

    Returns (encoder, decoder, curve, BinaryDataset).  For pair tasks the
    rows hold both image slices plus the symbolic result; labels feed the
    symbolic slice through the domain codec.
    """
    fl_spec = make_fl_spec(config) if fl_spec is None else fl_spec
    lspec = config.latent
    pixels = train_ds.height * train_ds.width
    encoder = init_mlp(
        [pixels, config.hidden, lspec.flat_dim], ["relu", "identity"],
        rng=np.random.default_rng((config.seed, 2)),
    )
    decoder = init_mlp(
        [lspec.flat_dim, config.hidden, pixels], ["relu", "sigmoid"],
        rng=np.random.default_rng((config.seed, 3)),
    )
    holdout = len(train_ds) // 10
    fit_images = train_ds.images[:-holdout] if holdout else train_ds.images
    validation = train_ds.images[-holdout:] if holdout else None
    encoder, decoder, curve = train(
        encoder, decoder, fit_images, lspec, config.train_config,
        validation=validation,
    )
    data = encode_fl_rows(encoder, fl_spec, lspec,
                          {"image": (train_ds.images, train_ds.labels)})
    return encoder, decoder, curve, data


def encode_fl_rows(encoder: MlpNetwork, fl_spec: FeatureLayerSpec,
                   lspec: LatentSpec, sources: dict) -> BinaryDataset:
    """Assemble FL rows from per-domain sources.

    `sources` maps each neural domain name to (images, symbolic values);
    the symbolic values of the first entry that carries them fill the
    single symbolic domain, if the layout declares one.
    """
    parts = {}
    symbolic = [d for d in fl_spec.domains if d.codec == "one_hot_symbolic"]
    for name, (images, values) in sources.items():
        parts[name] = encode_images(encoder, images, lspec)
        if symbolic and values is not None:
            d = symbolic[0]
            rows = np.stack([encode_domain(fl_spec, d.name, [int(v)])
                             for v in values])
            parts[d.name] = rows
    n = len(next(iter(parts.values())))
    order = [d.name for d in fl_spec.domains]
    full = np.hstack([parts[name] for name in order])
    assert full.shape == (n, fl_spec.total_vars)
    return BinaryDataset.from_rows(full)


# ----------------------------------------------------------------- phase II


def build_domain_vtree(fl_spec: FeatureLayerSpec, data: BinaryDataset):
    """One subtree per domain, joined in declaration order.

    Neural domains get a mutual-information vtree learned from their bit
    columns; symbolic domains a balanced one (their group must form a
    subtree for the exactly-one constraint to compile).
    """
    vt = None
    for d in fl_spec.domains:
        start, stop = fl_spec.domain_range(d.name)
        if d.codec == "neural":
            local = BinaryDataset.from_rows(data.rows[:, start:stop],
                                            data.weights)
            sub = vtree_mod.learn_vtree_mi(local)
        else:
            sub = vtree_mod.build_balanced(stop - start)
        vt = sub if vt is None else vtree_mod.join(vt, sub)
    return vt


def run_phase2(data: BinaryDataset, vt, config: LearnConfig,
               constraint_groups=(), rng=None, log_path=None) -> Circuit:
    """Structure search from the constraint-compiled base; the result is
    checked against the full structural validator."""
    psdd = learn_structure(data, vt, config,
                           constraint_groups=constraint_groups,
                           rng=rng, log_path=log_path)
    problems = circuit_mod.validate(psdd)
    if problems:
        raise AssertionError(f"learned circuit failed validation: {problems}")
    return psdd


# ----------------------------------------------------------- classification


def map_predict_batch(psdd: Circuit, fl_spec: FeatureLayerSpec,
                      evidence_bits: dict, target: str):
    """Exact-MAP prediction of a symbolic domain given evidence bits.

    evidence_bits maps domain name -> uint8 [B, width].  Returns
    (predictions [B], zero_evidence mask [B]); rows whose evidence has
    probability zero get the uniform fallback (category 0) and a flag.
    """
    d = fl_spec.domain(target)
    n = fl_spec.total_vars
    sizes = {len(v) for v in evidence_bits.values()}
    if len(sizes) != 1:
        raise ValueError("evidence domains disagree on batch size")
    batch = sizes.pop()
    ev = np.full((batch, n), -1, dtype=np.int8)
    for name, bits in evidence_bits.items():
        start, stop = fl_spec.domain_range(name)
        ev[:, start:stop] = bits
    base = psdd.evaluate(ev)
    zero = np.isneginf(base)

    start, stop = fl_spec.domain_range(target)
    scores = np.empty((batch, d.cat_dim))
    for y in range(d.cat_dim):
        trial = ev.copy()
        trial[:, start:stop] = encode_domain(fl_spec, target, [y])
        scores[:, y] = psdd.evaluate(trial)
    preds = scores.argmax(axis=1)
    preds[zero] = 0
    return preds.astype(np.int64), zero


def sampled_predict_batch(psdd: Circuit, fl_spec: FeatureLayerSpec,
                          evidence_bits: dict, target: str, rng=None):
    """Predict by completing the evidence with one generative query per
    row and decoding the target slice of the sample."""
    rng = np.random.default_rng(rng)
    n = fl_spec.total_vars
    batch = len(next(iter(evidence_bits.values())))
    ev = np.full((batch, n), -1, dtype=np.int8)
    for name, bits in evidence_bits.items():
        start, stop = fl_spec.domain_range(name)
        ev[:, start:stop] = bits
    base = psdd.evaluate(ev)
    zero = np.isneginf(base)
    preds = np.zeros(batch, dtype=np.int64)
    if (~zero).any():
        completed = complete_evidence_batch(psdd, ev[~zero], fl_spec, rng)
        start, stop = fl_spec.domain_range(target)
        preds[~zero] = [
            decode_domain(fl_spec, target, row[start:stop])[0]
            for row in completed
        ]
    return preds, zero


def classify(psdd: Circuit, encoder: MlpNetwork, fl_spec: FeatureLayerSpec,
             lspec: LatentSpec, image: np.ndarray):
    """MAP category for one image: argmax_y Pr(label=y | image bits).
    Returns (category, zero_evidence flag)."""
    bits = encode_images(encoder, np.asarray(image)[None, :], lspec)
    preds, zero = map_predict_batch(psdd, fl_spec, {"image": bits}, "label")
    return int(preds[0]), bool(zero[0])


def classify_sampled(psdd: Circuit, encoder: MlpNetwork,
                     fl_spec: FeatureLayerSpec, lspec: LatentSpec,
                     image: np.ndarray, rng=None):
    """Single-sample variant: complete the FL via a generative query and
    read the label the sample carries."""
    bits = encode_images(encoder, np.asarray(image)[None, :], lspec)
    preds, zero = sampled_predict_batch(psdd, fl_spec, {"image": bits},
                                        "label", rng)
    return int(preds[0]), bool(zero[0])


def sample_class_images(psdd: Circuit, decoder: MlpNetwork,
                        fl_spec: FeatureLayerSpec, lspec: LatentSpec,
                        category: int, count: int, rng=None) -> np.ndarray:
    """Class-conditional generation: fix the label slice, complete the
    image slice by generative query, decode each sampled code."""
    rng = np.random.default_rng(rng)
    n = fl_spec.total_vars
    ev = np.full((count, n), -1, dtype=np.int8)
    start, stop = fl_spec.domain_range("label")
    ev[:, start:stop] = encode_domain(fl_spec, "label", [category])
    completed = complete_evidence_batch(psdd, ev, fl_spec, rng)
    istart, istop = fl_spec.domain_range("image")
    return decode_image_bits(decoder, completed[:, istart:istop], lspec)


# ------------------------------------------------------------- noisy labels


def make_noisy_labels(data: BinaryDataset, fl_spec: FeatureLayerSpec,
                      k: int, rng=None) -> BinaryDataset:
    """OR k distinct wrong one-hots into every label slice; k=0 is the
    identity.  Operates on uncompressed rows so each example draws its
    own noise."""
    if k == 0:
        return data
    rng = np.random.default_rng(rng)
    d = fl_spec.domain("label")
    if not 0 <= k <= d.cat_dim - 1:
        raise ValueError("k must leave at least one unset label")
    rows = data.rows.copy()
    start, stop = fl_spec.domain_range("label")
    for row in rows:
        true_cat = int(row[start:stop].argmax())
        others = [c for c in range(d.cat_dim) if c != true_cat]
        for c in rng.choice(others, size=k, replace=False):
            row[start + int(c)] = 1
    return BinaryDataset.from_rows(rows, data.weights)


# --------------------------------------------------------- functional tasks


@dataclass
class FunctionalPairs:
    """Index pairs into an ImageDataset plus the symbolic result values
    (None for the successor task, whose relation stays implicit)."""

    first: np.ndarray
    second: np.ndarray
    result: np.ndarray | None


def make_functional_dataset(ds: ImageDataset, task: str, rng=None,
                            count: int = 2000, classes=(0, 1),
                            wrap: bool = True) -> FunctionalPairs:
    rng = np.random.default_rng(rng)
    labels = ds.labels
    if task == "successor":
        by_label = {y: np.flatnonzero(labels == y) for y in range(10)}
        missing = [y for y, idx in by_label.items() if len(idx) == 0]
        if missing:
            raise ValueError(f"no examples for labels {missing}")
        first, second = [], []
        while len(first) < count:
            i = int(rng.integers(len(ds)))
            la = int(labels[i])
            if la == 9 and not wrap:
                continue
            nxt = (la + 1) % 10
            first.append(i)
            second.append(int(rng.choice(by_label[nxt])))
        return FunctionalPairs(np.array(first), np.array(second), None)
    if task == "xor":
        pool = np.flatnonzero(np.isin(labels, classes))
        if len(pool) < 2:
            raise ValueError("need examples of both designated classes")
        first = pool[rng.integers(len(pool), size=count)]
        second = pool[rng.integers(len(pool), size=count)]
        truth = {classes[0]: 0, classes[1]: 1}
        result = np.array([truth[int(labels[a])] ^ truth[int(labels[b])]
                           for a, b in zip(first, second)])
        return FunctionalPairs(first, second, result)
    if task == "plus":
        first = rng.integers(len(ds), size=count)
        second = rng.integers(len(ds), size=count)
        result = labels[first] + labels[second]
        return FunctionalPairs(np.array(first), np.array(second), result)
    raise ValueError(f"unknown functional task {task!r}")


def encode_functional(encoder: MlpNetwork, fl_spec: FeatureLayerSpec,
                      lspec: LatentSpec, ds: ImageDataset,
                      pairs: FunctionalPairs) -> BinaryDataset:
    bits = encode_images(encoder, ds.images, lspec)
    parts = [bits[pairs.first], bits[pairs.second]]
    if pairs.result is not None:
        parts.append(np.stack([
            encode_domain(fl_spec, "result", [int(v)]) for v in pairs.result
        ]))
    return BinaryDataset.from_rows(np.hstack(parts))


# -------------------------------------------------------- FL visualization


@dataclass
class FlVisualization:
    variable: int
    visual_true: np.ndarray | None
    visual_false: np.ndarray | None
    sample_count: int
    probability_true: float
    constant: bool = False


def visualize_fl_variable(psdd: Circuit, decoder: MlpNetwork,
                          fl_spec: FeatureLayerSpec, lspec: LatentSpec,
                          variable: int, sample_count: int = 200,
                          rng=None, image_domain: str = "image") -> FlVisualization:
    """Contrast decoded expectations under fl_i = true vs false.

    diff = E[decode | true] - E[decode | false], estimated from
    sample_count generative completions per polarity; the emitted pair is
    ((diff+1)/2, (-diff+1)/2), so the two images sum to 1 pixelwise.
    Degenerate variables (probability 0 or 1) carry no images.
    """
    rng = np.random.default_rng(rng)
    p_true = conditional_probability(
        psdd, PartialAssignment({variable: True}), PartialAssignment({})
    )
    if p_true < 1e-12 or p_true > 1 - 1e-12:
        return FlVisualization(variable, None, None, sample_count,
                               p_true, constant=True)
    start, stop = fl_spec.domain_range(image_domain)
    means = {}
    for value in (1, 0):
        ev = np.full((sample_count, fl_spec.total_vars), -1, dtype=np.int8)
        ev[:, variable] = value
        completed = complete_evidence_batch(psdd, ev, fl_spec, rng)
        decoded = decode_image_bits(decoder, completed[:, start:stop], lspec)
        means[value] = decoded.mean(axis=0)
    diff = means[1] - means[0]
    return FlVisualization(variable, (diff + 1) / 2, (-diff + 1) / 2,
                           sample_count, p_true)


# -------------------------------------------------------------- experiments


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _save_artifacts(out: Path, config, fl_spec, encoder, decoder, psdd, vt):
    (out / "config.json").write_text(config.to_json())
    (out / "fl_spec.json").write_text(fl_spec.to_json())
    save_network(encoder, out / "encoder.llae")
    save_network(decoder, out / "decoder.llae")
    vtree_mod.save(vt, out / "circuit.vtree")
    circuit_mod.save(psdd, out / "circuit.psdd", vtree_path=out / "circuit.vtree")


def run_experiment(config: ExperimentConfig, out_dir) -> dict:
    """Run the configured task end to end and write all artifacts under
    out_dir.  Returns the metrics dict (also written as metrics.json)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.task in ("classify", "noisy"):
        metrics = _run_classification(config, out)
    else:
        metrics = _run_functional(config, out)
    _write_json(out / "metrics.json", metrics)
    return metrics


def _accuracy(preds, zero, truth) -> float:
    # zero-evidence fallbacks are counted as errors regardless of the guess
    return float((np.asarray(preds) == np.asarray(truth))[~zero].sum() / len(truth))


def _run_classification(config: ExperimentConfig, out: Path) -> dict:
    from .cli import write_pgm

    train_ds, test_ds = load_dataset(config)
    fl_spec = make_fl_spec(config)
    lspec = config.latent
    encoder, decoder, curve, data = run_phase1(config, train_ds, fl_spec)
    (out / "phase1_curve.json").write_text(
        json.dumps(curve, sort_keys=True) + "\n")

    noisy = config.task == "noisy" and config.noise_k > 0
    if noisy:
        data = make_noisy_labels(data, fl_spec, config.noise_k,
                                 rng=np.random.default_rng((config.seed, 4)))
    # multi-hot labels violate the exactly-one support, so noisy runs
    # learn without the constraint
    groups = [] if noisy else fl_constraint(fl_spec)
    vt = build_domain_vtree(fl_spec, data)
    psdd = run_phase2(data.compress(), vt, config.learn_config, groups,
                      rng=np.random.default_rng((config.seed, 5)),
                      log_path=out / "train_log.jsonl")

    test_bits = encode_images(encoder, test_ds.images, lspec)
    preds_map, zero = map_predict_batch(psdd, fl_spec,
                                        {"image": test_bits}, "label")
    preds_sampled, zero_s = sampled_predict_batch(
        psdd, fl_spec, {"image": test_bits}, "label",
        rng=np.random.default_rng((config.seed, 6)),
    )
    _save_artifacts(out, config, fl_spec, encoder, decoder, psdd, vt)

    samples_dir = out / "samples"
    samples_dir.mkdir(exist_ok=True)
    for y in range(config.category_count):
        try:
            images = sample_class_images(
                psdd, decoder, fl_spec, lspec, y, config.sample_count,
                rng=np.random.default_rng((config.seed, 7, y)),
            )
        except ZeroEvidenceError:
            continue
        for i, img in enumerate(images):
            write_pgm(img.reshape(test_ds.height, test_ds.width),
                      samples_dir / f"class_{y}_{i}.pgm")

    flvis_dir = out / "flvis"
    flvis_dir.mkdir(exist_ok=True)
    istart, istop = fl_spec.domain_range("image")
    constant_vars = []
    for v in range(istart, istop):
        vis = visualize_fl_variable(
            psdd, decoder, fl_spec, lspec, v, config.vis_samples,
            rng=np.random.default_rng((config.seed, 8, v)),
        )
        if vis.constant:
            constant_vars.append(v)
            continue
        for tag, img in (("true", vis.visual_true), ("false", vis.visual_false)):
            write_pgm(img.reshape(test_ds.height, test_ds.width),
                      flvis_dir / f"var_{v}_{tag}.pgm")

    return {
        "task": config.task,
        "noise_k": config.noise_k if noisy else 0,
        "accuracy_map": _accuracy(preds_map, zero, test_ds.labels),
        "accuracy_sampled": _accuracy(preds_sampled, zero_s, test_ds.labels),
        "zero_evidence_fraction": float(zero.mean()),
        "train_ll_per_example": float(log_likelihood(psdd, data)
                                      / data.total_weight),
        "circuit_size": psdd.size,
        "circuit_parameters": psdd.num_parameters,
        "phase1_final_train_loss": curve[-1]["train_loss"],
        "constant_fl_variables": constant_vars,
        "test_size": len(test_ds),
    }


def _reference_classifier(train_ds: ImageDataset):
    """Small logistic model on raw pixels; used only to grade generated
    successor images, mirroring evaluation by an external classifier."""
    from sklearn.linear_model import LogisticRegression

    clf = LogisticRegression(max_iter=400)
    clf.fit(train_ds.images, train_ds.labels)
    return clf


def _run_functional(config: ExperimentConfig, out: Path) -> dict:
    train_ds, test_ds = load_dataset(config)
    fl_spec = make_fl_spec(config)
    lspec = config.latent
    phase1_ds = train_ds
    if config.task == "xor":
        # the task only ever sees the two designated classes, so the
        # autoencoder trains on exactly that image distribution
        keep = np.isin(train_ds.labels, (0, 1))
        phase1_ds = ImageDataset(train_ds.images[keep],
                                 train_ds.labels[keep],
                                 train_ds.height, train_ds.width)
    encoder, decoder, curve, _ = run_phase1(
        config, phase1_ds,
        FeatureLayerSpec([DomainSpec("image", config.num_vars,
                                     config.cat_dim, "neural", False)]),
    )
    pair_rng = np.random.default_rng((config.seed, 4))
    train_pairs = make_functional_dataset(train_ds, config.task, pair_rng,
                                          count=config.train_size)
    test_pairs = make_functional_dataset(test_ds, config.task, pair_rng,
                                         count=config.test_size)
    data = encode_functional(encoder, fl_spec, lspec, train_ds, train_pairs)
    vt = build_domain_vtree(fl_spec, data)
    psdd = run_phase2(data.compress(), vt, config.learn_config,
                      fl_constraint(fl_spec),
                      rng=np.random.default_rng((config.seed, 5)),
                      log_path=out / "train_log.jsonl")
    _save_artifacts(out, config, fl_spec, encoder, decoder, psdd, vt)

    test_bits = encode_images(encoder, test_ds.images, lspec)
    evidence = {"image_a": test_bits[test_pairs.first],
                "image_b": test_bits[test_pairs.second]}
    metrics = {
        "task": config.task,
        "circuit_size": psdd.size,
        "circuit_parameters": psdd.num_parameters,
        "train_ll_per_example": float(log_likelihood(psdd, data)
                                      / data.total_weight),
        "phase1_final_train_loss": curve[-1]["train_loss"],
        "test_size": len(test_pairs.first),
    }
    if config.task == "successor":
        # grade generated second images with an external pixel classifier
        ev = np.full((len(test_pairs.first), fl_spec.total_vars), -1,
                     dtype=np.int8)
        astart, astop = fl_spec.domain_range("image_a")
        ev[:, astart:astop] = test_bits[test_pairs.first]
        base = psdd.evaluate(ev)
        zero = np.isneginf(base)
        completed = complete_evidence_batch(
            psdd, ev[~zero], fl_spec,
            rng=np.random.default_rng((config.seed, 6)))
        bstart, bstop = fl_spec.domain_range("image_b")
        generated = decode_image_bits(decoder, completed[:, bstart:bstop], lspec)
        clf = _reference_classifier(train_ds)
        grades = clf.predict(generated)
        want = (test_ds.labels[test_pairs.first[~zero]] + 1) % 10
        correct = int((grades == want).sum())
        metrics["accuracy_generated"] = correct / len(test_pairs.first)
        metrics["zero_evidence_fraction"] = float(zero.mean())
    else:
        preds_map, zero = map_predict_batch(psdd, fl_spec, evidence, "result")
        preds_sampled, zero_s = sampled_predict_batch(
            psdd, fl_spec, evidence, "result",
            rng=np.random.default_rng((config.seed, 6)))
        metrics["accuracy_map"] = _accuracy(preds_map, zero, test_pairs.result)
        metrics["accuracy_sampled"] = _accuracy(preds_sampled, zero_s,
                                                test_pairs.result)
        metrics["zero_evidence_fraction"] = float(zero.mean())
    return metrics
