"""Detection-count restoration scores over (input, predicted, ground truth) trios.

For every trio the detector counts cars in the clear ground truth (``n_c``),
the distorted input (``n_d``) and the generator's prediction (``n_p``).
The two aggregate scores are the means of ``n_d / n_c`` and ``n_p / n_c``
over trios with ``n_c > 0``; trios without any detected car in the ground
truth are skipped and counted.
"""
from __future__ import annotations

import hashlib
import json
import os
import shlex
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.signal import correlate

from .corruption import GLYPH_SIZE, car_glyph
from .data import AlignedPair, EvaluationTrio, as_raster, quantize, write_image
from .errors import AllTriosSkipped, DetectorUnavailable, IoFailure

# Full-scale reference values measured on the real stereo test set.
REFERENCE_SCORES = {"term1": 0.12, "term2": 0.94}


@dataclass(frozen=True)
class Detection:
    box: tuple[int, int, int, int]
    label: str = "car"
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class DetectorSpec:
    kind: str = "oracle"
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("oracle", "external"):
            raise ValueError(f"unknown detector kind {self.kind!r}")

    def to_json(self) -> dict:
        return {"kind": self.kind, "parameters": dict(self.parameters)}

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


ORACLE_DEFAULTS = {"glyph_width": GLYPH_SIZE[0], "glyph_height": GLYPH_SIZE[1], "threshold": 0.8}


def template_scores(image: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Zero-mean normalised cross-correlation of ``template`` at every valid offset.

    Windows with no variance score 0.
    """
    img = np.asarray(image, dtype=np.float64)
    tpl = np.asarray(template, dtype=np.float64)
    th, tw, _ = tpl.shape
    n = tpl.size
    tpl0 = tpl - tpl.mean()
    tnorm = np.sqrt((tpl0 ** 2).sum())
    dot = sum(correlate(img[..., c], tpl0[..., c], mode="valid", method="direct") for c in range(3))
    # window sums via integral images
    def box_sum(a):
        s = np.pad(a.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
        return s[th:, tw:] - s[:-th, tw:] - s[th:, :-tw] + s[:-th, :-tw]

    s1 = box_sum(img.sum(axis=2))
    s2 = box_sum((img ** 2).sum(axis=2))
    var = np.maximum(s2 - s1 * s1 / n, 0.0)
    denom = np.sqrt(var) * tnorm
    out = np.zeros_like(dot)
    ok = denom > 1e-9
    out[ok] = dot[ok] / denom[ok]
    return out


def _oracle_detect(image: np.ndarray, params: dict) -> list[Detection]:
    p = {**ORACLE_DEFAULTS, **params}
    gw, gh, thr = int(p["glyph_width"]), int(p["glyph_height"]), float(p["threshold"])
    h, w, _ = image.shape
    if gw > w or gh > h:
        return []
    scores = template_scores(image, car_glyph(gw, gh))
    ys, xs = np.nonzero(scores >= thr)
    order = sorted(zip(-scores[ys, xs], ys, xs))
    taken: list[tuple[int, int]] = []
    dets = []
    for neg, y, x in order:
        if any(abs(int(x) - tx) < gw and abs(int(y) - ty) < gh for tx, ty in taken):
            continue
        taken.append((int(x), int(y)))
        dets.append(Detection((int(x), int(y), gw, gh), "car", float(min(max(-neg, 0.0), 1.0))))
    dets.sort(key=lambda d: (d.box[1], d.box[0]))
    return dets


def _external_detect(image: np.ndarray, params: dict) -> list[Detection]:
    command = params.get("command")
    if not command:
        raise DetectorUnavailable("external detector selected but no command configured")
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    h, w, _ = image.shape
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "frame.png")
        write_image(path, image)
        try:
            proc = subprocess.run(argv + [path], capture_output=True, timeout=float(params.get("timeout", 120)))
        except (FileNotFoundError, PermissionError) as exc:
            raise DetectorUnavailable(f"cannot run detector {argv[0]!r}: {exc}") from exc
        except subprocess.TimeoutExpired as exc:
            raise DetectorUnavailable(f"detector timed out: {exc}") from exc
    if proc.returncode != 0:
        raise DetectorUnavailable(
            f"detector exited with {proc.returncode}: {proc.stderr.decode('utf-8', 'replace').strip()}"
        )
    try:
        payload = json.loads(proc.stdout.decode("utf-8"))
        raw = payload["detections"]
    except (ValueError, KeyError, TypeError) as exc:
        raise DetectorUnavailable(f"detector produced malformed output: {exc}") from exc
    dets = []
    for d in raw:
        x, y, bw, bh = (int(round(v)) for v in d["box"])
        # clip to the frame so every Detection stays in bounds
        x0, y0 = min(max(x, 0), w), min(max(y, 0), h)
        x1, y1 = min(max(x + bw, 0), w), min(max(y + bh, 0), h)
        conf = float(min(max(d.get("confidence", 1.0), 0.0), 1.0))
        dets.append(Detection((x0, y0, x1 - x0, y1 - y0), str(d.get("label", "car")), conf))
    return dets


def detect(spec: DetectorSpec, image: np.ndarray) -> list[Detection]:
    image = as_raster(image)
    if spec.kind == "oracle":
        return _oracle_detect(image, spec.parameters)
    return _external_detect(image, spec.parameters)


@dataclass(frozen=True)
class TrioCounts:
    n_c: int
    n_d: int
    n_p: int
    id: str = ""

    def __post_init__(self):
        if min(self.n_c, self.n_d, self.n_p) < 0:
            raise ValueError("detection counts must be non-negative")


def count_cars(spec: DetectorSpec, image: np.ndarray) -> int:
    return sum(1 for d in detect(spec, image) if d.label == "car")


def count_trio(spec: DetectorSpec, trio: EvaluationTrio) -> TrioCounts:
    return TrioCounts(
        n_c=count_cars(spec, trio.ground_truth),
        n_d=count_cars(spec, trio.input),
        n_p=count_cars(spec, trio.predicted),
        id=trio.id,
    )


@dataclass(frozen=True)
class RestorationScores:
    term1: float
    term2: float
    m_effective: int
    skipped: int

    def to_json(self) -> dict:
        return asdict(self)


def restoration_scores(counts: Sequence[TrioCounts]) -> RestorationScores:
    """Mean detection ratios for inputs (``term1``) and predictions (``term2``)."""
    if not counts:
        raise ValueError("restoration_scores needs at least one trio")
    # fixed order so the float sums do not depend on the caller's ordering
    kept = sorted((c for c in counts if c.n_c > 0), key=lambda c: (c.n_c, c.n_d, c.n_p))
    if not kept:
        raise AllTriosSkipped(f"all {len(counts)} trios have no car detected in the ground truth")
    m = len(kept)
    term1 = float(np.sum([c.n_d / c.n_c for c in kept])) / m
    term2 = float(np.sum([c.n_p / c.n_c for c in kept])) / m
    return RestorationScores(term1=term1, term2=term2, m_effective=m, skipped=len(counts) - m)


def trio_rows(counts: Iterable[TrioCounts]) -> list[dict]:
    rows = []
    for c in counts:
        rd = c.n_d / c.n_c if c.n_c else None
        rp = c.n_p / c.n_c if c.n_c else None
        rows.append({
            "id": c.id, "n_c": c.n_c, "n_d": c.n_d, "n_p": c.n_p,
            "ratio_input": rd, "ratio_predicted": rp,
            "skipped": c.n_c == 0,
            "ratio_above_one": bool((rd or 0) > 1 or (rp or 0) > 1),
        })
    return rows


@dataclass
class EvaluationResult:
    scores: RestorationScores
    table: list[dict]
    l1_predicted: float
    l1_input: float
    trios: list[EvaluationTrio] = field(repr=False, default_factory=list)


Predictor = Callable[[np.ndarray], np.ndarray]


def evaluate_model(
    predictor: Predictor,
    pairs: Sequence[AlignedPair],
    spec: DetectorSpec,
    store_quantized: bool = True,
) -> EvaluationResult:
    """Run ``predictor`` on each distorted image and score the resulting trios.

    ``predictor`` is any image-to-image callable, e.g. a trained
    :class:`~derain.networks.Generator` wrapped by ``networks.predictor``.
    Predictions are snapped to the 8-bit storage grid first so in-memory and
    on-disk evaluations agree.
    """
    trios = []
    for pair in sorted(pairs, key=lambda p: p.id):
        pred = predictor(pair.distorted)
        if store_quantized:
            pred = quantize(pred)
        trios.append(EvaluationTrio(input=pair.distorted, predicted=pred, ground_truth=pair.clear, id=pair.id))
    counts = [count_trio(spec, t) for t in trios]
    scores = restoration_scores(counts)
    l1_pred = float(np.mean([np.abs(t.predicted - t.ground_truth).mean() for t in trios]))
    l1_in = float(np.mean([np.abs(t.input - t.ground_truth).mean() for t in trios]))
    return EvaluationResult(scores, trio_rows(counts), l1_pred, l1_in, trios)


def emit_report(
    scores: RestorationScores,
    table: Sequence[dict],
    out_path: str | os.PathLike,
    fingerprint: str | None = None,
    extra: dict | None = None,
) -> tuple[Path, Path]:
    """Write ``report.json`` and ``ratios.png`` into ``out_path``."""
    if not table:
        raise ValueError("cannot report an empty trio table")
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    flagged = [r["id"] for r in table if r.get("ratio_above_one")]
    report = {
        "scores": scores.to_json(),
        "trios": list(table),
        "ratios_above_one": flagged,
        "config_fingerprint": fingerprint,
        "reference_scores": REFERENCE_SCORES,
        "counting": "raw detection cardinality, no box matching; trios with n_c == 0 skipped",
    }
    report.update(extra or {})
    report_path = out / "report.json"
    try:
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {report_path}: {exc}") from exc
    plot_path = out / "ratios.png"
    _plot_ratios(table, scores, plot_path)
    return report_path, plot_path


def _plot_ratios(table, scores, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rin = [r["ratio_input"] for r in table if r["ratio_input"] is not None]
    rpr = [r["ratio_predicted"] for r in table if r["ratio_predicted"] is not None]
    top = max([1.0] + rin + rpr)
    bins = np.linspace(0.0, top, 11)
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2), sharey=True)
    axes[0].hist(rin, bins=bins, color="tab:gray")
    axes[0].set_title(f"input  (mean {scores.term1:.3f})")
    axes[1].hist(rpr, bins=bins, color="tab:blue")
    axes[1].set_title(f"predicted  (mean {scores.term2:.3f})")
    for ax in axes:
        ax.set_xlabel("detected / detected in clear")
    axes[0].set_ylabel("trios")
    fig.tight_layout()
    try:
        fig.savefig(path, dpi=100)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)
