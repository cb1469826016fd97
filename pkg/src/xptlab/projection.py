"""Exact t-SNE to 2-D, per-language logistic boundaries on the embedding,
a boundary-alignment score, and a dependency-free SVG scatter writer."""

from __future__ import annotations

import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import kernels as K
from .errors import ContractError, InputError

log = logging.getLogger(__name__)

JITTER = 1e-10


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    step_size: float = 200.0
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    min_gain: float = 0.01
    kl_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.perplexity > 1:
            raise ContractError(f"perplexity must exceed 1, got {self.perplexity}")
        if self.iterations < self.exaggeration_iters or self.exaggeration_iters < 0:
            raise ContractError("iterations must cover the exaggeration phase")
        if self.iterations < 250:
            raise ContractError("iterations must be >= 250")
        if not self.step_size > 0 or self.kl_every < 1:
            raise ContractError("step_size must be positive and kl_every >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def squared_distances(X: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", X, X)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def conditional_affinities(X: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 50,
                           seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Row-conditional Gaussian affinities and each row's achieved perplexity.

    Each row's bandwidth is bisected until ``2**H`` (H the row entropy in bits)
    is within ``tol`` of ``perplexity``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError(f"X must be 2-D, got shape {X.shape}")
    n = X.shape[0]
    if n < 4:
        raise InputError(f"need at least 4 points, got {n}")
    if not 1 < perplexity < n / 3:
        raise ContractError(f"perplexity {perplexity} must lie in (1, n/3) for n={n}")
    d2 = squared_distances(X)
    off = ~np.eye(n, dtype=bool)
    if np.any(d2[off] == 0.0):
        log.warning("duplicate rows in t-SNE input; adding %.0e jitter", JITTER)
        rng = np.random.default_rng([seed, 7])
        X = X + JITTER * rng.standard_normal(X.shape)
        d2 = squared_distances(X)
    # perplexity = exp(H_nats), so a tolerance of tol on the perplexity is tol/perplexity in nats
    P, _, h = K.perplexity_search(np.ascontiguousarray(d2), math.log(perplexity), tol / perplexity, max_iter)
    return P, np.exp(h)


def pairwise_affinities(X: np.ndarray, perplexity: float = 30.0, seed: int = 0) -> np.ndarray:
    """Symmetric joint affinities ``(P_ij + P_ji) / 2n``: zero diagonal, sum 1."""
    P, _ = conditional_affinities(X, perplexity, seed=seed)
    n = P.shape[0]
    joint = (P + P.T) / (2.0 * n)
    np.fill_diagonal(joint, 0.0)
    return joint / joint.sum()


def pca_init(X: np.ndarray, scale: float = 1e-4) -> np.ndarray:
    """Top-2 principal coordinates with a sign convention, scaled to std ``scale`` on axis 0."""
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:2]
    signs = np.sign(comps[np.arange(2), np.argmax(np.abs(comps), axis=1)])
    signs[signs == 0] = 1.0
    Y = Xc @ (comps * signs[:, None]).T
    sd = Y[:, 0].std()
    return Y * (scale / sd) if sd > 0 else Y


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl_trace: list[tuple[int, float]] = field(default_factory=list)
    config: TsneConfig = field(default_factory=TsneConfig)


def run_tsne(X: np.ndarray, cfg: TsneConfig = TsneConfig()) -> TsneResult:
    """Gradient descent on KL(P || Q) with Student-t Q, momentum and per-coordinate gains."""
    X = np.asarray(X, dtype=np.float64)
    P = pairwise_affinities(X, cfg.perplexity, cfg.seed)
    Y = np.ascontiguousarray(pca_init(X))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    trace = []
    for it in range(1, cfg.iterations + 1):
        early = it <= cfg.exaggeration_iters
        exag = cfg.exaggeration if early else 1.0
        want_kl = it % cfg.kl_every == 0 or it == cfg.iterations
        grad, _ = K.tsne_gradient(P, Y, exag, False)
        momentum = cfg.momentum_early if early else cfg.momentum_late
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, cfg.min_gain, out=gains)
        update = momentum * update - cfg.step_size * gains * grad
        Y = np.ascontiguousarray(Y + update)
        Y -= Y.mean(axis=0)
        if want_kl:
            _, kl = K.tsne_gradient(P, Y, 1.0, True)
            if not math.isfinite(kl):
                raise FloatingPointError(f"t-SNE objective became non-finite at iteration {it}")
            trace.append((it, kl))
    return TsneResult(Y, trace, cfg)


def tsne(X: np.ndarray, cfg: TsneConfig = TsneConfig()) -> np.ndarray:
    return run_tsne(X, cfg).embedding


# --- logistic boundaries ----------------------------------------------------


@dataclass(frozen=True)
class Boundary:
    """Decision line ``w . y + b = 0``; label 1 on the positive side."""

    w: tuple[float, float]
    b: float
    lang: int = 0
    loss: float = float("nan")
    iterations: int = 0

    def decision(self, Y: np.ndarray) -> np.ndarray:
        Y = np.asarray(Y, dtype=np.float64)
        return Y[:, 0] * self.w[0] + Y[:, 1] * self.w[1] + self.b

    def predict(self, Y: np.ndarray) -> np.ndarray:
        return (self.decision(Y) > 0).astype(np.int64)

    def accuracy(self, Y: np.ndarray, labels) -> float:
        return float(np.mean(self.predict(Y) == np.asarray(labels)))


def logistic_objective(Y: np.ndarray, labels, w, b: float, l2: float) -> float:
    z = np.asarray(Y) @ np.asarray(w, dtype=np.float64) + b
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * float(np.dot(w, w)))


def fit_logistic(Y: np.ndarray, labels, l2: float = 1e-3, lang: int = 0,
                 tol: float = 1e-10, max_iter: int = 100_000) -> Boundary:
    """Mean logistic loss + (l2/2)|w|^2 by full-batch gradient descent.

    Coordinates are standardised for conditioning; the penalty is rescaled so
    the objective is exactly the one stated in original coordinates.
    """
    Y = np.asarray(Y, dtype=np.float64)
    y = np.asarray(labels)
    if Y.ndim != 2 or Y.shape[1] != 2 or y.shape != (Y.shape[0],):
        raise ContractError("fit_logistic expects Y [n, 2] and n labels")
    if not np.all(np.isin(y, (0, 1))):
        raise InputError("labels must be 0/1")
    if len(np.unique(y)) < 2:
        raise InputError("both classes must be present")
    mu = Y.mean(axis=0)
    sd = Y.std(axis=0)
    sd[sd == 0] = 1.0
    Z = np.ascontiguousarray((Y - mu) / sd)
    pen = l2 / (sd * sd)
    # step bound: 1 / Lipschitz constant of the standardised objective
    gram = np.column_stack([Z, np.ones(len(Z))])
    lip = 0.25 * np.linalg.eigvalsh(gram.T @ gram / len(Z)).max() + pen.max()
    w0, w1, bz, it, trace = K.logistic_gd(Z, y.astype(np.float64), float(pen[0]), float(pen[1]),
                                          1.0 / lip, tol, max_iter)
    w = (w0 / sd[0], w1 / sd[1])
    b = bz - w[0] * mu[0] - w[1] * mu[1]
    return Boundary((float(w[0]), float(w[1])), float(b), lang, float(trace[-1]), int(it))


@dataclass
class AlignmentScore:
    langs: list[int]
    angles: np.ndarray  # radians between boundary lines, in [0, pi/2]
    cross_accuracy: np.ndarray  # [a, b]: boundary of lang a on the points of lang b
    mean_angle: float
    mean_cross_accuracy: float

    def self_accuracy(self, lang: int) -> float:
        i = self.langs.index(lang)
        return float(self.cross_accuracy[i, i])

    def transfer_accuracy(self, lang: int) -> float:
        """Mean accuracy of ``lang``'s boundary on every other language."""
        i = self.langs.index(lang)
        row = np.delete(self.cross_accuracy[i], i)
        return float(row.mean())


def line_angle(w_a, w_b) -> float:
    """Angle between two lines given their normals; sign of either normal is irrelevant."""
    a = np.asarray(w_a, dtype=np.float64)
    b = np.asarray(w_b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("boundary normal is zero")
    return float(np.arccos(np.clip(abs(a @ b) / (na * nb), 0.0, 1.0)))


def boundary_alignment(
    boundaries: Sequence[Boundary],
    points: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
) -> AlignmentScore:
    k = len(boundaries)
    if k < 2:
        raise InputError("boundary alignment needs at least two languages")
    if len(points) != k or len(labels) != k:
        raise ContractError("one point set and label set per boundary")
    angles = np.zeros((k, k))
    acc = np.zeros((k, k))
    for a in range(k):
        for b in range(k):
            if a < b:
                angles[a, b] = angles[b, a] = line_angle(boundaries[a].w, boundaries[b].w)
            acc[a, b] = boundaries[a].accuracy(points[b], labels[b])
    off = ~np.eye(k, dtype=bool)
    return AlignmentScore([bd.lang for bd in boundaries], angles, acc,
                          float(angles[off].mean()), float(acc[off].mean()))


def fit_boundaries(Y: np.ndarray, labels, langs, l2: float = 1e-3) -> tuple[list[Boundary], list, list]:
    """One boundary per language, fit on that language's points only."""
    Y = np.asarray(Y)
    labels = np.asarray(labels)
    langs = np.asarray(langs)
    out, pts, labs = [], [], []
    for lang in sorted(set(langs.tolist())):
        sel = langs == lang
        out.append(fit_logistic(Y[sel], labels[sel], l2, lang=int(lang)))
        pts.append(Y[sel])
        labs.append(labels[sel])
    return out, pts, labs


# --- SVG scatter ----------------------------------------------------------------

LABEL_COLORS = ("#1f77b4", "#d62728")
PANEL = 320
MARGIN = 24
MARKER = 2.6


@dataclass
class Panel:
    title: str
    Y: np.ndarray
    labels: np.ndarray
    langs: np.ndarray
    boundaries: list[Boundary] = field(default_factory=list)


def _fmt(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def _marker(kind: int, x: float, y: float, color: str) -> str:
    r = MARKER
    kind %= 4
    if kind == 0:
        return f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(r)}" fill="{color}"/>'
    if kind == 1:
        return (f'<rect x="{_fmt(x - r)}" y="{_fmt(y - r)}" width="{_fmt(2 * r)}" '
                f'height="{_fmt(2 * r)}" fill="{color}"/>')
    if kind == 2:
        pts = [(x, y - r * 1.2), (x - r * 1.1, y + r), (x + r * 1.1, y + r)]
    else:
        pts = [(x, y - r * 1.3), (x + r * 1.3, y), (x, y + r * 1.3), (x - r * 1.3, y)]
    path = " ".join(f"{_fmt(px)},{_fmt(py)}" for px, py in pts)
    return f'<polygon points="{path}" fill="{color}"/>'


def clip_line(w, b: float, lo: np.ndarray, hi: np.ndarray):
    """Segment of ``w . y + b = 0`` inside the box ``[lo, hi]``, or None."""
    w0, w1 = float(w[0]), float(w[1])
    pts = []
    if w1 != 0:
        for x in (lo[0], hi[0]):
            y = -(w0 * x + b) / w1
            if lo[1] - 1e-12 <= y <= hi[1] + 1e-12:
                pts.append((x, y))
    if w0 != 0:
        for y in (lo[1], hi[1]):
            x = -(w1 * y + b) / w0
            if lo[0] - 1e-12 <= x <= hi[0] + 1e-12:
                pts.append((x, y))
    uniq = []
    for p in pts:
        if all(abs(p[0] - q[0]) > 1e-12 or abs(p[1] - q[1]) > 1e-12 for q in uniq):
            uniq.append(p)
    if len(uniq) < 2:
        return None
    uniq.sort()
    return uniq[0], uniq[-1]


def _panel_svg(panel: Panel, ox: float) -> list[str]:
    Y = np.asarray(panel.Y, dtype=np.float64)
    labels = np.asarray(panel.labels)
    langs = np.asarray(panel.langs)
    if not (len(Y) == len(labels) == len(langs)):
        raise ContractError("Y, labels and langs must have equal length")
    inner = PANEL - 2 * MARGIN
    parts = [f'<g transform="translate({_fmt(ox)},0)">',
             f'<rect x="0" y="0" width="{PANEL}" height="{PANEL}" fill="none" stroke="#999999"/>',
             f'<text x="{PANEL / 2:.1f}" y="16" text-anchor="middle" font-size="12">{_escape(panel.title)}</text>']
    if len(Y):
        lo, hi = Y.min(axis=0), Y.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)

        def to_px(p):
            return (MARGIN + (p[0] - lo[0]) / span[0] * inner,
                    PANEL - MARGIN - (p[1] - lo[1]) / span[1] * inner)

        lang_ids = sorted(set(langs.tolist()))
        for i in range(len(Y)):
            x, y = to_px(Y[i])
            parts.append(_marker(lang_ids.index(langs[i]), x, y, LABEL_COLORS[int(labels[i]) % 2]))
        for bd in panel.boundaries:
            seg = clip_line(bd.w, bd.b, lo, hi)
            if seg is None:
                continue
            (x1, y1), (x2, y2) = to_px(seg[0]), to_px(seg[1])
            parts.append(f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
                         f'stroke="#333333" stroke-width="1" data-lang="{bd.lang}"/>')
    parts.append("</g>")
    return parts


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit_scatter(panels: Sequence[Panel], path) -> str:
    """Write side-by-side scatter panels as SVG; output bytes depend only on the inputs.

    Marker shape encodes language, colour encodes label, lines are the per-language
    boundaries clipped to the panel's data box. Returns the SVG text.
    """
    width = PANEL * max(len(panels), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL}" '
             f'viewBox="0 0 {width} {PANEL}">']
    for i, panel in enumerate(panels):
        parts.extend(_panel_svg(panel, i * PANEL))
    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    ET.parse(path)  # self-check: well-formed XML
    return text
