"""Global and local interpretation of trained models: position importance,
peaks, class mean motifs, per-input reports and sequence logos."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .kernel import k0_matrix
from .seqdata import circle_positions, map_position, normalize_columns

# ------------------------------------------------------------- importance


@dataclass
class PositionImportance:
    class_index: int
    values: np.ndarray       # (P,) mean over anchors at each position
    per_neuron: np.ndarray   # (n, P) importance of every kernel-layer output

    @property
    def normalized(self):
        return self.values - self.values.mean()

    @property
    def num_positions(self):
        return self.values.shape[0]


def interpretable_layers(model):
    """Dense layers with a two-output head.

    A single-logit head ``z`` is rewritten as logits ``(-z/2, z/2)``; the
    softmax of those equals ``(1 - sigmoid(z), sigmoid(z))``.
    """
    for i, layer in enumerate(model.layers):
        if layer.activation != "identity":
            raise ConfigError(f"dense layer {i} is not linear; importance needs an all-linear head")
    layers = list(model.layers)
    if model.single_logit:
        last = layers[-1]
        w = np.vstack([-0.5 * last.weights, 0.5 * last.weights])
        b = np.array([-0.5 * last.bias[0], 0.5 * last.bias[0]])
        layers[-1] = type(last)(w, b, last.activation)
    return layers


def neuron_importance(weight_mats, c):
    """Importance of every input neuron of a stack of dense weight matrices.

    Output neuron ``c`` scores 1 and every other output 0; each earlier neuron
    sums ``w * importance`` over its positive outgoing edges.
    """
    score = np.zeros(weight_mats[-1].shape[0])
    score[c] = 1.0
    for w in reversed(weight_mats):
        score = np.maximum(w, 0.0).T @ score
    return score


def position_importance(model, c):
    layers = interpretable_layers(model)
    n_out = layers[-1].weights.shape[0]
    if not 0 <= c < n_out:
        raise ValueError(f"class index {c} outside 0..{n_out - 1}")
    per = neuron_importance([l.weights for l in layers], c)
    per = per.reshape(model.anchors.n, model.num_positions)  # anchor-major flattening
    return PositionImportance(c, per.mean(axis=0), per)


# ------------------------------------------------------------------ peaks


@dataclass(frozen=True)
class Peak:
    position: int  # 1-based
    score: float


def peak_scores(values, window=11):
    values = np.asarray(values, dtype=float)
    p = values.shape[0]
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd number, got {window}")
    if window > p:
        raise ValueError(f"window {window} exceeds the {p} positions")
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(values)])
    lo = np.maximum(np.arange(p) - half, 0)
    hi = np.minimum(np.arange(p) + half + 1, p)
    return values - (csum[hi] - csum[lo]) / (hi - lo)


def detect_peaks(importance, window=11, top=10):
    """Positions ranked by how far they rise above their local window mean."""
    values = importance.values if isinstance(importance, PositionImportance) else importance
    scores = peak_scores(values, window)
    order = np.argsort(-scores, kind="stable")
    if top is not None:
        order = order[:top]
    return [Peak(int(i) + 1, float(scores[i])) for i in order]


# ------------------------------------------------------------ mean motifs


@dataclass
class MeanMotif:
    matrix: np.ndarray   # (|A|, k)
    position: int
    class_index: int
    anchors: np.ndarray  # contributing anchor indices
    weights: np.ndarray
    symbols: tuple = ()
    empty: bool = False

    @property
    def flat(self):
        return self.matrix.reshape(-1, order="F")

    def top_letters(self, count=None):
        """Per column, symbols sorted by decreasing entry (ties by alphabet order)."""
        out = []
        for j in range(self.matrix.shape[1]):
            order = np.argsort(-self.matrix[:, j], kind="stable")
            ranked = [self.symbols[i] for i in order if self.matrix[i, j] > 0]
            out.append(ranked[:count] if count is not None else ranked)
        return out

    def consensus(self):
        return "".join(self.symbols[i] for i in self.matrix.argmax(axis=0))

    def to_dict(self):
        return {
            "position": self.position,
            "class_index": self.class_index,
            "empty": self.empty,
            "matrix": self.matrix.tolist(),
            "anchors": self.anchors.tolist(),
            "weights": self.weights.tolist(),
        }


def mean_motif_at(model, p, c, importance=None):
    if not 1 <= p <= model.num_positions:
        raise ValueError(f"position {p} outside 1..{model.num_positions}")
    if importance is None or importance.class_index != c:
        importance = position_importance(model, c)
    a, k = model.alphabet.size, model.params.k
    column = importance.per_neuron[:, p - 1]
    idx = np.flatnonzero(column > 0)
    symbols = tuple(model.alphabet.symbols)
    if idx.size == 0:
        return MeanMotif(np.zeros((a, k)), p, c, idx, np.zeros(0), symbols, empty=True)
    w = column[idx]
    avg = (w @ model.anchors.motifs[idx]) / w.sum()
    matrix = normalize_columns(avg.reshape(k, a).T)
    return MeanMotif(matrix, p, c, idx, w, symbols)


# ---------------------------------------------------------- local reports


@dataclass
class LocalEntry:
    position: int
    letters: str
    scores: list          # raw norm per class, None for an empty mean motif
    scaled: list
    assigned: int | None
    tie: bool = False
    skipped: bool = False


@dataclass
class LocalReport:
    sequence_id: str
    class_names: tuple
    entries: list = field(default_factory=list)

    def to_dict(self):
        return {
            "sequence_id": self.sequence_id,
            "class_names": list(self.class_names),
            "positions": [e.__dict__ for e in self.entries],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


TIE_RTOL = 1e-12


def local_report(model, x, positions, importances=None, classes=None):
    """Class assignment of selected positions of one input sequence.

    For every class the mean motif at the position is compared to all input
    windows through K0; the l2 norm of those values is the class score.
    """
    model.check_input(x)
    k = model.params.k
    n_classes = interpretable_layers(model)[-1].weights.shape[0]
    classes = list(range(n_classes)) if classes is None else list(classes)
    if importances is None:
        importances = {c: position_importance(model, c) for c in classes}
    windows = x.windows(k)
    win_pos = circle_positions(model.seq_length, model.num_positions)
    report = LocalReport(x.id, tuple(model.class_names))
    for p in positions:
        p = int(p)
        if not 1 <= p <= model.num_positions:
            raise ValueError(f"position {p} outside 1..{model.num_positions}")
        pt = np.asarray(map_position(p, model.seq_length), dtype=float)[None]
        scores = []
        for c in classes:
            mm = mean_motif_at(model, p, c, importances[c])
            if mm.empty:
                scores.append(None)
                continue
            vals = k0_matrix(mm.flat[None], pt, windows, win_pos, model.params)[0]
            scores.append(float(np.linalg.norm(vals)))
        defined = [s for s in scores if s is not None]
        letters = x.raw[p - 1:p - 1 + k] if x.raw else ""
        if not defined:
            report.entries.append(LocalEntry(p, letters, scores, [None] * len(scores), None, skipped=True))
            continue
        top = max(defined)
        scaled = [None if s is None else (s / top if top > 0 else 0.0) for s in scores]
        # rounding must not break a tie that holds exactly in real arithmetic
        winners = [classes[i] for i, s in enumerate(scores) if s is not None and s >= top * (1 - TIE_RTOL)]
        report.entries.append(LocalEntry(p, letters, scores, scaled, winners[0], tie=len(winners) > 1))
    return report


# -------------------------------------------------------------------- logos

_DNA_COLORS = {"A": "#109648", "C": "#255c99", "G": "#f7b32b", "T": "#d62839", "U": "#d62839"}
_PROTEIN_GROUPS = (
    ("DE", "#d62839"), ("KRH", "#255c99"), ("STYCNQG", "#109648"), ("AVLIPWFM", "#333333"),
)


def _color(symbol):
    if symbol in _DNA_COLORS:
        return _DNA_COLORS[symbol]
    for group, color in _PROTEIN_GROUPS:
        if symbol in group:
            return color
    return "#888888"


def emit_logo(motif, symbols=None, column_width=40, height=100):
    """Standalone SVG logo; letter heights are the squared column entries."""
    matrix = np.asarray(motif.matrix if isinstance(motif, MeanMotif) else motif, dtype=float)
    if symbols is None:
        symbols = motif.symbols
    a, k = matrix.shape
    if len(symbols) != a:
        raise ValueError("need one symbol per matrix row")
    margin = 20
    width = k * column_width + 2 * margin
    total_h = height + 2 * margin
    out = io.StringIO()
    out.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total_h}" '
              f'viewBox="0 0 {width} {total_h}">\n')
    out.write(f'<rect width="{width}" height="{total_h}" fill="white"/>\n')
    heights = matrix ** 2
    for j in range(k):
        x0 = margin + j * column_width
        y = margin + height
        # smallest at the bottom so the dominant letter sits on top
        for i in sorted(range(a), key=lambda r: (heights[r, j], -r)):
            h = heights[i, j] * height
            if h < 1e-6:
                continue
            y -= h
            # glyph cap height is taken as 0.72 em
            sy = h / (0.72 * height)
            out.write(f'<text x="0" y="0" font-family="monospace" font-weight="bold" '
                      f'font-size="{height}" fill="{_color(symbols[i])}" '
                      f'textLength="{column_width}" lengthAdjust="spacingAndGlyphs" '
                      f'transform="translate({x0:.3f},{y + h:.3f}) scale(1,{sy:.6f})">'
                      f'{symbols[i]}</text>\n')
        out.write(f'<text x="{x0 + column_width / 2:.3f}" y="{margin + height + 15}" '
                  f'font-family="sans-serif" font-size="10" text-anchor="middle">{j + 1}</text>\n')
    out.write("</svg>\n")
    return out.getvalue()


# ------------------------------------------------------------ global report

def global_report(model, window=11, top=10, n_letters=2):
    """Per class: importance curve, normalized curve and the top peaks with mean motifs."""
    layers = interpretable_layers(model)
    report = {}
    for c in range(layers[-1].weights.shape[0]):
        imp = position_importance(model, c)
        peaks = []
        for pk in detect_peaks(imp, window, top):
            mm = mean_motif_at(model, pk.position, c, imp)
            peaks.append({
                "position": pk.position,
                "score": pk.score,
                "mean_motif": mm.matrix.tolist(),
                "empty": mm.empty,
                "top_letters": mm.top_letters(n_letters),
            })
        report[model.class_names[c]] = {
            "importance": imp.values.tolist(),
            "normalized": imp.normalized.tolist(),
            "peaks": peaks,
        }
    return report


def global_report_json(report):
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def global_report_csv(report):
    """Flat form: one row per class and position."""
    out = io.StringIO()
    out.write("class,position,importance,normalized,peak_rank,peak_score,top_letters\n")
    for name, entry in report.items():
        ranks = {pk["position"]: (r + 1, pk) for r, pk in enumerate(entry["peaks"])}
        for p, (v, nv) in enumerate(zip(entry["importance"], entry["normalized"]), start=1):
            rank, pk = ranks.get(p, (None, None))
            letters = "" if pk is None else "|".join("".join(col) for col in pk["top_letters"])
            out.write(f"{name},{p},{v:.17g},{nv:.17g},{'' if rank is None else rank},"
                      f"{'' if pk is None else format(pk['score'], '.17g')},{letters}\n")
    return out.getvalue()
