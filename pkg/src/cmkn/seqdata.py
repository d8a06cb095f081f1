"""Sequence data: alphabets, encoding, nPFMs, FASTA/HIVdb I/O, synthetic data, splits.

Positions are 1-based in every public function of this module.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ParseError

# ----------------------------------------------------------------------- rng

def make_rng(seed):
    """Counter-based generator (Philox) driven by a single 64-bit seed."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def spawn_rngs(seed, n):
    """``n`` independent child generators derived from ``seed``."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


# ----------------------------------------------------------------- alphabets

@dataclass(frozen=True)
class Alphabet:
    """Ordered symbol set plus ambiguity codes mapping onto subsets of it."""

    symbols: tuple
    ambiguity: Mapping[str, frozenset] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        symbols = tuple(s.upper() for s in self.symbols)
        object.__setattr__(self, "symbols", symbols)
        if len(symbols) < 2:
            raise ValueError("an alphabet needs at least two symbols")
        if len(set(symbols)) != len(symbols):
            raise ValueError("alphabet symbols must be unique")
        if any(len(s) != 1 for s in symbols):
            raise ValueError("alphabet symbols must be single characters")
        amb = {}
        for code, members in dict(self.ambiguity).items():
            members = frozenset(m.upper() for m in members)
            if not members or not members <= set(symbols):
                raise ValueError(f"ambiguity code {code!r} maps outside the alphabet")
            if code.upper() in symbols:
                raise ValueError(f"ambiguity code {code!r} collides with a symbol")
            amb[code.upper()] = members
        object.__setattr__(self, "ambiguity", amb)
        table = {}
        for i, s in enumerate(symbols):
            col = np.zeros(len(symbols))
            col[i] = 1.0
            table[s] = col
        for code, members in amb.items():
            col = np.zeros(len(symbols))
            idx = [symbols.index(m) for m in members]
            col[idx] = 1.0 / math.sqrt(len(idx))
            table[code] = col
        object.__setattr__(self, "_columns", table)

    @property
    def size(self):
        return len(self.symbols)

    def column(self, char):
        return self._columns[char.upper()]

    def is_valid(self, char):
        return char.upper() in self._columns

    def to_dict(self):
        return {
            "name": self.name,
            "symbols": "".join(self.symbols),
            "ambiguity": {c: "".join(sorted(m)) for c, m in sorted(self.ambiguity.items())},
        }

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["symbols"]),
                   {c: frozenset(m) for c, m in data.get("ambiguity", {}).items()},
                   data.get("name", ""))


DNA = Alphabet(
    tuple("ACGT"),
    {
        "N": frozenset("ACGT"), "R": frozenset("AG"), "Y": frozenset("CT"),
        "S": frozenset("CG"), "W": frozenset("AT"), "K": frozenset("GT"),
        "M": frozenset("AC"), "B": frozenset("CGT"), "D": frozenset("AGT"),
        "H": frozenset("ACT"), "V": frozenset("ACG"),
    },
    "DNA",
)

PROTEIN = Alphabet(
    tuple("ACDEFGHIKLMNPQRSTVWY"),
    {
        "X": frozenset("ACDEFGHIKLMNPQRSTVWY"), "B": frozenset("DN"),
        "Z": frozenset("EQ"), "J": frozenset("IL"),
    },
    "PROTEIN",
)

_ALPHABETS = {"DNA": DNA, "PROTEIN": PROTEIN}


def get_alphabet(name):
    try:
        return _ALPHABETS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown alphabet {name!r}; expected one of {sorted(_ALPHABETS)}") from None


# ------------------------------------------------------------------ encoding

class CirclePoint(NamedTuple):
    x: float
    y: float


def map_position(p, length):
    """Map position ``p`` (1..length) onto the upper unit half-circle."""
    if length < 1 or not 1 <= p <= length:
        raise ValueError(f"position {p} outside 1..{length}")
    angle = p * math.pi / length
    return CirclePoint(math.cos(angle), math.sin(angle))


def circle_positions(length, count=None):
    """Circle-mapped coordinates of positions ``1..count`` as a ``(count, 2)`` array."""
    count = length if count is None else count
    angle = np.arange(1, count + 1) * (np.pi / length)
    return np.column_stack([np.cos(angle), np.sin(angle)])


@dataclass(frozen=True, eq=False)
class EncodedSequence:
    """``|A| x L`` matrix with unit-norm columns, plus bookkeeping."""

    matrix: np.ndarray
    id: str = ""
    label: int | None = None
    raw: str = ""

    @property
    def length(self):
        return self.matrix.shape[1]

    def num_windows(self, k):
        return self.length - k + 1

    def windows(self, k):
        """All valid windows, flattened column-wise, as a ``(L-k+1, |A|k)`` array."""
        if self.length < k:
            raise ValueError(f"sequence {self.id!r} of length {self.length} is shorter than k={k}")
        cols = self.matrix.T  # (L, |A|)
        view = np.lib.stride_tricks.sliding_window_view(cols, (k, cols.shape[1]))[:, 0]
        return view.reshape(self.length - k + 1, -1)

    def window_positions(self, k):
        return circle_positions(self.length, self.num_windows(k))


def encode_sequence(raw, alphabet=DNA, id="", label=None):
    if not raw:
        raise ParseError(f"empty sequence {id!r}")
    upper = raw.upper()
    cols = np.empty((alphabet.size, len(upper)))
    for i, ch in enumerate(upper):
        try:
            cols[:, i] = alphabet.column(ch)
        except KeyError:
            raise ParseError(
                f"unknown symbol {raw[i]!r} at position {i + 1} of sequence {id!r}") from None
    cols.setflags(write=False)
    return EncodedSequence(cols, id, label, upper)


def extract_window(seq, p, k):
    """Flattened motif of length ``k`` starting at 1-based position ``p``."""
    last = seq.length - k + 1
    if k < 1 or not 1 <= p <= last:
        raise ValueError(f"window start {p} outside 1..{last} for k={k}")
    return seq.matrix[:, p - 1:p - 1 + k].T.reshape(-1).copy()


# ---------------------------------------------------------------------- nPFM

@dataclass(frozen=True, eq=False)
class MotifNPFM:
    matrix: np.ndarray

    @property
    def k(self):
        return self.matrix.shape[1]

    @property
    def flat(self):
        return self.matrix.T.reshape(-1)

    @classmethod
    def from_flat(cls, flat, alphabet_size):
        return cls(np.asarray(flat, dtype=float).reshape(-1, alphabet_size).T.copy())


def normalize_columns(matrix):
    """Scale columns to unit l2-norm; all-zero columns stay zero."""
    norms = np.linalg.norm(matrix, axis=0)
    out = np.zeros_like(matrix, dtype=float)
    nz = norms > 0
    out[:, nz] = matrix[:, nz] / norms[nz]
    return out


def build_npfm(kmers, alphabet=DNA):
    """nPFM of equal-length windows.

    ``kmers`` may hold strings, :class:`EncodedSequence` objects or ``|A| x k``
    arrays. Ambiguous columns count fractionally (1/s per candidate symbol).
    """
    kmers = list(kmers)
    if not kmers:
        raise ValueError("build_npfm needs at least one window")
    mats = []
    for km in kmers:
        if isinstance(km, str):
            km = encode_sequence(km, alphabet)
        mat = km.matrix if isinstance(km, EncodedSequence) else np.asarray(km, dtype=float)
        mats.append(mat)
    if any(m.shape != mats[0].shape for m in mats):
        raise ValueError("all windows passed to build_npfm must share one shape")
    counts = np.zeros_like(mats[0])
    for m in mats:
        counts += m / m.sum(axis=0, keepdims=True)
    return MotifNPFM(normalize_columns(counts))


# ------------------------------------------------------------------- dataset

@dataclass(frozen=True, eq=False)
class LabeledDataset:
    sequences: tuple
    alphabet: Alphabet = DNA
    class_names: tuple = ("0", "1")

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        for s in self.sequences:
            if s.matrix.shape[0] != self.alphabet.size:
                raise ValueError(f"sequence {s.id!r} was encoded with a different alphabet")
            if s.label is not None and not 0 <= s.label < len(self.class_names):
                raise ValueError(f"label {s.label} of {s.id!r} outside 0..{len(self.class_names) - 1}")

    def __len__(self):
        return len(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    @property
    def labels(self):
        return np.array([-1 if s.label is None else s.label for s in self.sequences], dtype=np.int64)

    @property
    def class_counts(self):
        labels = self.labels
        return np.array([(labels == c).sum() for c in range(len(self.class_names))], dtype=np.int64)

    @property
    def lengths(self):
        return np.array([s.length for s in self.sequences], dtype=np.int64)

    def subset(self, indices):
        return LabeledDataset(tuple(self.sequences[i] for i in indices), self.alphabet, self.class_names)


# --------------------------------------------------------------------- FASTA

_HEADER_RE = re.compile(r"^>(\S+)(.*)$")


def _parse_header(line, lineno):
    m = _HEADER_RE.match(line)
    if not m:
        raise ParseError(f"line {lineno}: malformed FASTA header {line!r}")
    seq_id, rest = m.group(1), m.group(2)
    attrs = {}
    for token in rest.split():
        if "=" not in token:
            continue
        key, _, value = token.partition("=")
        attrs[key] = value
    label = None
    if "label" in attrs:
        try:
            label = int(attrs["label"])
        except ValueError:
            raise ParseError(f"line {lineno}: label {attrs['label']!r} is not an integer") from None
        if label < 0:
            raise ParseError(f"line {lineno}: negative label {label}")
    return seq_id, label


def parse_fasta(text, alphabet=DNA, require_labels=True, class_names=None):
    """Parse FASTA text with ``>id label=<int>`` headers into a dataset."""
    records = []
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith(">"):
            seq_id, label = _parse_header(line, lineno)
            if require_labels and label is None:
                raise ParseError(f"line {lineno}: record {seq_id!r} has no label=<int>")
            current = [seq_id, label, []]
            records.append(current)
        else:
            if current is None:
                raise ParseError(f"line {lineno}: sequence data before the first header")
            current[2].append(line)
    if not records:
        raise ParseError("no FASTA records found")
    seqs = [encode_sequence("".join(body), alphabet, seq_id, label) for seq_id, label, body in records]
    if class_names is None:
        top = max((s.label for s in seqs if s.label is not None), default=1)
        class_names = tuple(str(c) for c in range(max(2, top + 1)))
    return LabeledDataset(tuple(seqs), alphabet, tuple(class_names))


def format_fasta(records, width=80):
    """FASTA text for ``(id, sequence, label)`` triples or a dataset."""
    if isinstance(records, LabeledDataset):
        records = [(s.id, s.raw, s.label) for s in records.sequences]
    out = io.StringIO()
    for seq_id, seq, label in records:
        header = f">{seq_id}" if label is None else f">{seq_id} label={int(label)}"
        out.write(header + "\n")
        for i in range(0, len(seq), width):
            out.write(seq[i:i + width] + "\n")
    return out.getvalue()


def read_fasta(path, alphabet=DNA, require_labels=True, class_names=None):
    with open(path, encoding="utf-8") as fh:
        return parse_fasta(fh.read(), alphabet, require_labels, class_names)


# --------------------------------------------------------------------- HIVdb

_POSITION_COL = re.compile(r"^P(\d+)$")
_MISSING = {"", "NA", "N/A", "NAN", "NONE", "."}
# non-residue markers in HIVdb cells: no coverage, deletion, insertion, stop
_UNKNOWN_MARKERS = set(".~#*")


def convert_hivdb(table, reference, thresholds, drug, id_column="SeqID", unknown="X"):
    """Translate an HIVdb genotype-phenotype table into labelled FASTA text.

    ``thresholds`` maps drug name to ``(low, high)`` fold-resistance cutoffs (or
    is such a pair). Fold below ``low`` is class 0 (susceptible); anything else
    is class 1 (medium and high resistance merged). Rows without a fold value
    for ``drug`` are skipped.
    """
    if isinstance(thresholds, Mapping):
        if drug not in thresholds:
            raise ConfigError(f"no thresholds given for drug {drug!r}")
        low, _high = thresholds[drug]
    else:
        low, _high = thresholds
    reference = reference.strip().upper()
    reader = csv.reader(io.StringIO(table), delimiter="\t")
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty HIVdb table") from None
    header = [h.strip() for h in header]
    if drug not in header:
        raise ParseError(f"drug column {drug!r} not found in table header")
    pos_cols = sorted(((int(m.group(1)), i) for i, h in enumerate(header)
                       if (m := _POSITION_COL.match(h))), key=lambda t: t[0])
    if len(pos_cols) != len(reference):
        raise ParseError(
            f"table has {len(pos_cols)} position columns but the reference has length {len(reference)}")
    drug_idx = header.index(drug)
    id_idx = header.index(id_column) if id_column in header else None
    records = []
    for rowno, row in enumerate(reader, start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) < len(header):
            raise ParseError(f"row {rowno}: expected {len(header)} cells, found {len(row)}")
        fold_text = row[drug_idx].strip()
        if fold_text.upper() in _MISSING:
            continue
        try:
            fold = float(fold_text)
        except ValueError:
            raise ParseError(f"row {rowno}: unparseable fold value {fold_text!r} for {drug}") from None
        residues = []
        for (pos, col), ref in zip(pos_cols, reference):
            cell = row[col].strip().upper()
            if cell in ("", "-"):
                residues.append(ref)
            elif cell[0] in _UNKNOWN_MARKERS:
                residues.append(unknown)
            else:
                # mixtures such as "KR" keep the first listed residue
                residues.append(cell[0])
        seq_id = row[id_idx].strip() if id_idx is not None else f"row{rowno - 1}"
        records.append((seq_id, "".join(residues), 0 if fold < low else 1))
    return format_fasta(records)


# ----------------------------------------------------------------- synthetic

@dataclass
class MotifSpec:
    """Per-class embedded motif: per-column symbol distributions, start, jitter."""

    consensus: list
    center: int
    jitter: int = 5


def _default_motifs():
    # negative class at 20, positive class at 80; variable columns are 2/3 vs 1/3
    return [
        MotifSpec([{"A": 1.0}, {"C": 2 / 3, "T": 1 / 3}, {"G": 1.0}, {"T": 1.0}, {"A": 2 / 3, "G": 1 / 3}],
                  center=20, jitter=5),
        MotifSpec([{"G": 1.0}, {"T": 2 / 3, "A": 1 / 3}, {"C": 1.0}, {"A": 2 / 3, "C": 1 / 3}, {"T": 1.0}],
                  center=80, jitter=5),
    ]


@dataclass
class SyntheticConfig:
    num_sequences: int = 1000
    sequence_length: int = 100
    motif_length: int = 5
    motifs: list = field(default_factory=_default_motifs)
    seed: int = 0
    alphabet: str = "DNA"

    def __post_init__(self):
        self.motifs = [m if isinstance(m, MotifSpec) else MotifSpec(**m) for m in self.motifs]
        self.validate()

    def validate(self):
        if self.num_sequences < len(self.motifs) or len(self.motifs) < 2:
            raise ConfigError("need at least two classes and one sequence per class")
        alphabet = get_alphabet(self.alphabet)
        last = self.sequence_length - self.motif_length + 1
        for c, m in enumerate(self.motifs):
            if len(m.consensus) != self.motif_length:
                raise ConfigError(f"class {c}: consensus has {len(m.consensus)} columns, k={self.motif_length}")
            if m.jitter < 0 or m.center - m.jitter < 1 or m.center + m.jitter > last:
                raise ConfigError(f"class {c}: center {m.center} +- {m.jitter} leaves 1..{last}")
            for j, dist in enumerate(m.consensus):
                if any(s.upper() not in alphabet.symbols for s in dist):
                    raise ConfigError(f"class {c} column {j}: symbol outside {alphabet.name}")
                if any(v < 0 for v in dist.values()) or abs(sum(dist.values()) - 1.0) > 1e-9:
                    raise ConfigError(f"class {c} column {j}: distribution must sum to 1")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def generate_synthetic(config=None, rng=None, return_starts=False):
    """Random background sequences with one class-specific motif embedded in each.

    With ``return_starts`` the 1-based motif start of every sequence is
    returned alongside the dataset.
    """
    config = config or SyntheticConfig()
    rng = make_rng(config.seed if rng is None else rng)
    alphabet = get_alphabet(config.alphabet)
    n, length = config.num_sequences, config.sequence_length
    n_classes = len(config.motifs)
    labels = np.repeat(np.arange(n_classes), -(-n // n_classes))[:n]
    labels = rng.permutation(labels)
    background = rng.integers(0, alphabet.size, size=(n, length))
    letters = np.array(alphabet.symbols)
    seqs = []
    starts = np.empty(n, dtype=np.int64)
    for i in range(n):
        spec = config.motifs[labels[i]]
        start = spec.center + int(rng.integers(-spec.jitter, spec.jitter + 1))
        row = letters[background[i]]
        for j, dist in enumerate(spec.consensus):
            symbols = sorted(dist)
            probs = np.array([dist[s] for s in symbols])
            row[start - 1 + j] = symbols[int(rng.choice(len(symbols), p=probs / probs.sum()))].upper()
        starts[i] = start
        seqs.append(encode_sequence("".join(row), alphabet, f"syn{i:05d}", int(labels[i])))
    ds = LabeledDataset(tuple(seqs), alphabet, tuple(str(c) for c in range(n_classes)))
    return (ds, starts) if return_starts else ds


# ---------------------------------------------------------------- resampling

def undersample_negatives(ds, ratio, rng, positive=1):
    """Drop random negatives until ``N_pos / N_neg >= ratio``."""
    if ratio <= 0:
        return ds
    labels = ds.labels
    pos = np.flatnonzero(labels == positive)
    neg = np.flatnonzero(labels != positive)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("undersampling needs both positive and negative samples")
    target = math.floor(len(pos) / ratio + 1e-9)
    if len(neg) <= target:
        return ds
    rng = make_rng(rng)
    keep_neg = np.sort(rng.choice(neg, size=target, replace=False))
    keep = np.sort(np.concatenate([pos, keep_neg]))
    return ds.subset(keep)


def stratified_kfold(labels, folds=5, seed=0):
    """Stratified fold assignment: list of ``(train_idx, val_idx)`` pairs.

    Each class is shuffled and dealt round-robin over the folds; the starting
    fold rotates between classes so fold sizes stay balanced as well.
    """
    if isinstance(labels, LabeledDataset):
        labels = labels.labels
    labels = np.asarray(labels)
    if folds < 2:
        raise ValueError("need at least two folds")
    rng = make_rng(seed)
    assignment = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < folds:
            raise ValueError(f"class {c} has {len(idx)} samples, fewer than {folds} folds")
        idx = rng.permutation(idx)
        assignment[idx] = (np.arange(len(idx)) + offset) % folds
        offset = (offset + len(idx)) % folds
    all_idx = np.arange(len(labels))
    return [(all_idx[assignment != f], all_idx[assignment == f]) for f in range(folds)]
