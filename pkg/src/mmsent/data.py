"""Dataset manifests, the binary tensor container, embedding files, the
synthetic cross-modal dataset generator, and attention-record export.

File formats
------------
Tensor container (``.dmlt``): magic ``DMLT``, format version u32, rank u32,
one u32 per extent, then the row-major float64 payload, all little-endian.
Round-trips are bit-exact.

Manifest: JSON with ``class_count``, ``class_names``, ``vocab_file`` and a
``samples`` list; every sample carries exactly one visual source (``image``
or ``features`` path, relative to the manifest), a ``tokens`` id list and a
``label``. Vocabulary files hold one token per line, id = line number, and
line 0 is the padding token. Embedding files use the common text layout of
one ``word v1 ... ve`` line per word.

Attention dumps: JSON lines, one record per sample.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"DMLT"
FORMAT_VERSION = 1


class DataError(ValueError):
    """Malformed file or invalid dataset content."""


# ---------------------------------------------------------------------------
# binary tensor container


def write_tensor(path: str | Path, values: np.ndarray) -> None:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim:
        arr = np.ascontiguousarray(arr)
    if not np.all(np.isfinite(arr)):
        raise DataError("refusing to write non-finite values")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()

    def need(n: int, offset: int, what: str) -> None:
        if len(raw) < offset + n:
            raise DataError(
                f"{path}: truncated {what} at byte {len(raw)} (need {offset + n})")

    need(4, 0, "magic")
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r} at byte 0")
    need(8, 4, "header")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version} at byte 4")
    need(4 * rank, 12, "extents")
    shape = struct.unpack_from(f"<{rank}I", raw, 12)
    count = int(np.prod(shape)) if rank else 1
    data_off = 12 + 4 * rank
    need(8 * count, data_off, "payload")
    if len(raw) != data_off + 8 * count:
        raise DataError(f"{path}: trailing bytes after payload at byte {data_off + 8 * count}")
    flat = np.frombuffer(raw, dtype="<f8", count=count, offset=data_off)
    return flat.reshape(shape).astype(np.float64)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Sample:
    """One loaded document: a visual source, token ids and a label."""

    id: str
    visual: np.ndarray
    precomputed: bool  # True when visual is an [H, W, C] feature map
    tokens: tuple[int, ...]
    label: int


@dataclass
class Dataset:
    class_count: int
    class_names: list[str]
    vocab: list[str]
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)


def load_vocab(path: str | Path) -> list[str]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"vocabulary file not found: {p}")
    words = p.read_text().splitlines()
    if not words:
        raise DataError(f"empty vocabulary file: {p}")
    return words


def resolve_label_pair(text_label: int, image_label: int,
                       neutral: int | None) -> int | None:
    """Merge per-modality labels: agreeing labels stand, a neutral defers to
    the polar label, and conflicting polar labels drop the sample (None)."""
    if text_label == image_label:
        return text_label
    if neutral is not None:
        if text_label == neutral:
            return image_label
        if image_label == neutral:
            return text_label
    return None


def load_manifest(path: str | Path, max_tokens: int = 64,
                  resolve_dual_labels: bool = False) -> Dataset:
    """Load and validate a dataset manifest.

    Every sample is checked (label range, token ids inside the vocabulary,
    visual file readable) before anything is returned; the first bad record
    aborts the load. With ``resolve_dual_labels`` records may carry
    ``text_label`` / ``image_label`` pairs instead of ``label``; conflicting
    polar pairs are dropped with a logged count.
    """
    p = Path(path)
    if not p.exists():
        raise DataError(f"manifest not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    for key in ("class_count", "class_names", "vocab_file", "samples"):
        if key not in doc:
            raise DataError(f"{p}: manifest missing key {key!r}")
    k = int(doc["class_count"])
    names = list(doc["class_names"])
    if len(names) != k:
        raise DataError(f"{p}: class_names length {len(names)} != class_count {k}")
    vocab = load_vocab(p.parent / doc["vocab_file"])
    records = doc["samples"]
    if not records:
        raise DataError(f"{p}: empty dataset")

    neutral = names.index("neutral") if "neutral" in names else None
    samples: list[Sample] = []
    dropped = 0
    for pos, rec in enumerate(records):
        rid = rec.get("id", f"<record {pos}>")

        def bad(msg: str) -> DataError:
            return DataError(f"{p}: sample {pos} (id {rid!r}): {msg}")

        if resolve_dual_labels and "label" not in rec:
            if "text_label" not in rec or "image_label" not in rec:
                raise bad("needs label or text_label/image_label")
            label = resolve_label_pair(int(rec["text_label"]),
                                       int(rec["image_label"]), neutral)
            if label is None:
                dropped += 1
                continue
        else:
            if "label" not in rec:
                raise bad("missing label")
            label = int(rec["label"])
        if not 0 <= label < k:
            raise bad(f"label {label} outside [0, {k})")
        has_image = "image" in rec
        has_features = "features" in rec
        if has_image == has_features:
            raise bad("needs exactly one of image/features")
        tokens = tuple(int(t) for t in rec.get("tokens", ()))
        if not tokens:
            raise bad("empty token list")
        if len(tokens) > max_tokens:
            raise bad(f"sequence length {len(tokens)} exceeds limit {max_tokens}")
        for tpos, t in enumerate(tokens):
            if not 0 <= t < len(vocab):
                raise bad(f"token id {t} at position {tpos} outside vocabulary")
        rel = rec["image"] if has_image else rec["features"]
        tensor_path = p.parent / rel
        if not tensor_path.exists():
            raise bad(f"visual file not found: {tensor_path}")
        visual = read_tensor(tensor_path)
        if has_image and (visual.ndim != 3 or visual.shape[2] != 3):
            raise bad(f"image must be [H, W, 3], got {visual.shape}")
        if has_features and visual.ndim != 3:
            raise bad(f"feature map must be [H, W, C], got {visual.shape}")
        samples.append(Sample(str(rid), visual, has_features, tokens, label))
    if dropped:
        logger.info("dropped %d samples with conflicting modality labels", dropped)
    if not samples:
        raise DataError(f"{p}: empty dataset")
    return Dataset(k, names, vocab, samples)


def write_manifest(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write a dataset to disk in the manifest layout; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for s in dataset.samples:
        rel = f"images/{s.id}.dmlt"
        write_tensor(out / rel, s.visual)
        key = "features" if s.precomputed else "image"
        records.append({"id": s.id, key: rel,
                        "tokens": list(s.tokens), "label": s.label})
    (out / "vocab.txt").write_text("\n".join(dataset.vocab) + "\n")
    doc = {
        "class_count": dataset.class_count,
        "class_names": dataset.class_names,
        "vocab_file": "vocab.txt",
        "samples": records,
    }
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(doc, indent=1))
    return manifest


# ---------------------------------------------------------------------------
# embedding files


def load_embeddings(path: str | Path, vocab: list[str]):
    """Build an [V, e] embedding matrix from a text vector file.

    Vocabulary words missing from the file keep zero rows (count logged);
    row 0 is forced to zero regardless of the file contents.
    """
    from .text import EmbeddingMatrix
    from .tensor import Tensor

    p = Path(path)
    if not p.exists():
        raise DataError(f"embedding file not found: {p}")
    table: dict[str, np.ndarray] = {}
    width: int | None = None
    with open(p) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2 or not parts[0]:
                raise DataError(f"{p}:{lineno}: malformed embedding line")
            vec = np.array([float(x) for x in parts[1:]])
            if width is None:
                width = vec.size
            elif vec.size != width:
                raise DataError(
                    f"{p}:{lineno}: width {vec.size} differs from previous {width}")
            table[parts[0]] = vec
    if width is None:
        raise DataError(f"{p}: empty embedding file")
    values = np.zeros((len(vocab), width))
    missing = 0
    for i, word in enumerate(vocab):
        if i == 0:
            continue  # padding row stays zero
        if word in table:
            values[i] = table[word]
        else:
            missing += 1
    if missing:
        logger.info("%d of %d vocabulary words missing from %s, rows left zero",
                    missing, len(vocab), p)
    return EmbeddingMatrix(Tensor(values))


# ---------------------------------------------------------------------------
# synthetic cross-modal dataset

IMAGE_SIZE = 32
# quadrant -> (row half, col half); the 3-class set uses the first three
_QUADRANTS = ((0, 0), (0, 1), (1, 0), (1, 1))
_FILLER_COUNT = 20


def _synth_vocab(class_count: int) -> list[str]:
    keywords = [f"keyword_{'abc'[i]}" for i in range(class_count)]
    fillers = [f"filler_{i:02d}" for i in range(_FILLER_COUNT)]
    return ["<pad>"] + keywords + fillers


def _blob(rng: np.random.Generator, image: np.ndarray, quadrant: int,
          amplitude: float, sigma: float) -> None:
    half = IMAGE_SIZE // 2
    r0 = _QUADRANTS[quadrant][0] * half
    c0 = _QUADRANTS[quadrant][1] * half
    cy = r0 + rng.integers(4, half - 4)
    cx = c0 + rng.integers(4, half - 4)
    ys = np.arange(IMAGE_SIZE)[:, None]
    xs = np.arange(IMAGE_SIZE)[None, :]
    bump = amplitude * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma ** 2))
    image += bump[:, :, None]


def synth_generate(class_count: int, per_class: int, seed: int,
                   out_dir: str | Path) -> Path:
    """Generate the cross-modal synthetic dataset and run its self-test.

    Each sample pairs a 32x32x3 image whose bright blob sits in the quadrant
    encoding the visual cue with a 5-12 token sentence containing one planted
    keyword encoding the textual cue; the label is ``(visual + textual) mod
    K``, so neither modality alone carries any label information. Images also
    get a dimmer distractor blob and pixel noise; sentences are padded with
    filler words. Generation is fully determined by the seed.

    The self-test fits least-squares linear probes on each single modality
    (both must stay below 70% accuracy), checks the majority-class baseline,
    and records the results in ``selftest.json``.
    """
    if class_count not in (2, 3):
        raise DataError(f"class count must be 2 or 3, got {class_count}")
    if per_class < 1:
        raise DataError("per_class must be positive")
    rng = np.random.default_rng(seed)
    vocab = _synth_vocab(class_count)
    # the 2-class set uses opposite corners so the cue quadrants stay disjoint
    quadrant_of_cue = (0, 3) if class_count == 2 else (0, 1, 2)

    samples: list[Sample] = []
    cues: list[tuple[int, int]] = []
    for i in range(per_class):
        for label in range(class_count):
            visual_cue = (i + label) % class_count
            text_cue = (label - visual_cue) % class_count
            image = rng.normal(0.0, 0.08, size=(IMAGE_SIZE, IMAGE_SIZE, 3))
            _blob(rng, image, quadrant_of_cue[visual_cue], 1.0, 2.5)
            _blob(rng, image, int(rng.integers(0, 4)), 0.3, 2.0)
            length = int(rng.integers(5, 13))
            tokens = list(1 + class_count
                          + rng.integers(0, _FILLER_COUNT, size=length))
            tokens[rng.integers(0, length)] = 1 + text_cue
            assert label == (visual_cue + text_cue) % class_count
            sid = f"s{len(samples):05d}"
            samples.append(Sample(sid, image, False, tuple(int(t) for t in tokens),
                                  label))
            cues.append((visual_cue, text_cue))

    names = (["negative", "positive"] if class_count == 2
             else ["negative", "neutral", "positive"])
    dataset = Dataset(class_count, names, vocab, samples)
    out = Path(out_dir)
    manifest = write_manifest(dataset, out)
    selftest = _synth_selftest(dataset, cues)
    (out / "selftest.json").write_text(json.dumps(selftest, indent=1))
    return manifest


def _linear_probe(features: np.ndarray, labels: np.ndarray,
                  class_count: int) -> float:
    """Least-squares one-vs-all linear probe; returns held-out accuracy."""
    n = len(labels)
    cut = int(n * 0.7)
    onehot = np.zeros((cut, class_count))
    onehot[np.arange(cut), labels[:cut]] = 1.0
    x = np.hstack([features, np.ones((n, 1))])
    w, *_ = np.linalg.lstsq(x[:cut], onehot, rcond=None)
    pred = (x[cut:] @ w).argmax(axis=1)
    return float((pred == labels[cut:]).mean())


def _synth_selftest(dataset: Dataset, cues: list[tuple[int, int]]) -> dict:
    k = dataset.class_count
    labels = np.array([s.label for s in dataset.samples])
    counts = np.bincount(labels, minlength=k)
    if counts.min() != counts.max():
        raise DataError("generated labels are not balanced")
    for s, (v, w) in zip(dataset.samples, cues):
        if s.label != (v + w) % k:
            raise DataError("joint label function violated")

    bow = np.zeros((len(dataset), len(dataset.vocab)))
    for i, s in enumerate(dataset.samples):
        for t in s.tokens:
            bow[i, t] = 1.0
    pooled = np.stack([
        s.visual.mean(axis=2).reshape(8, 4, 8, 4).mean(axis=(1, 3)).ravel()
        for s in dataset.samples
    ])
    text_acc = _linear_probe(bow, labels, k)
    image_acc = _linear_probe(pooled, labels, k)

    cut = int(len(labels) * 0.7)
    majority = int(np.argmax(np.bincount(labels[:cut], minlength=k)))
    majority_acc = float((labels[cut:] == majority).mean())

    # the probe bounds are statistical: only enforce them once the held-out
    # split is large enough for chance-level accuracy to stay below them
    enforced = len(labels) - cut >= 25
    result = {
        "class_count": k,
        "samples": len(dataset),
        "text_probe_accuracy": text_acc,
        "image_probe_accuracy": image_acc,
        "majority_accuracy": majority_acc,
        "joint_label_deterministic": True,
        "bounds_enforced": enforced,
    }
    if enforced:
        if text_acc >= 0.70 or image_acc >= 0.70:
            raise DataError(f"unimodal probe too strong: {result}")
        if majority_acc > 1.0 / k + 0.02:
            raise DataError(f"majority baseline too strong: {result}")
    return result


# ---------------------------------------------------------------------------
# attention export


def export_attention(model, samples: list[Sample], vocab: list[str],
                     out_path: str | Path) -> int:
    """Write one JSON line of learned attention weights per sample.

    The spatial map is exported raw and max-normalized to [0, 1]; word
    weights are aligned with the word strings. Returns the record count.
    """
    from .tensor import no_grad

    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh, no_grad():
        for s in samples:
            _, rec = model.forward(s, training=False)
            if rec.spatial is not None:
                peak = rec.spatial.max()
                norm = rec.spatial / peak if peak > 0 else np.zeros_like(rec.spatial)
                spatial = rec.spatial.tolist()
                spatial_norm = norm.tolist()
            else:
                spatial = spatial_norm = None
            row = {
                "id": s.id,
                "words": [vocab[t] for t in s.tokens],
                "alpha": None if rec.word_weights is None else rec.word_weights.tolist(),
                "u": None if rec.modality_weights is None else rec.modality_weights.tolist(),
                "a_s": spatial,
                "a_s_norm": spatial_norm,
                "predicted": rec.predicted,
                "true": s.label,
            }
            fh.write(json.dumps(row) + "\n")
    return len(samples)
