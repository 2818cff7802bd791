"""Pre-tokenized corpus ingestion and empirical conditional operators.

Counts (context, continuation) windows with stride 1 inside each document
(windows never cross document boundaries), applies the two-stage frequency
filter (contexts first, then continuations among retained contexts), and
builds Laplace-smoothed conditional probability matrices. Two counting
policies are supported: "paper" divides by the raw context occurrence count,
which leaves columns sub-stochastic once continuations have been filtered;
"stochastic" divides by the retained-row sum so every column is exactly
normalized, which is what the decomposition machinery requires.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distribution import ConditionalOperator

Sequence = tuple[int, ...]


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class TokenStream:
    """Documents of token ids over an alphabet of the given size."""

    records: tuple[tuple[int, ...], ...]
    alphabet_size: int

    def __post_init__(self):
        if self.alphabet_size < 1:
            raise CorpusError("alphabet_size must be positive")
        for doc in self.records:
            if not doc:
                raise CorpusError("documents must be non-empty")
            for tok in doc:
                if not 0 <= tok < self.alphabet_size:
                    raise CorpusError(
                        f"token id {tok} outside alphabet of size {self.alphabet_size}"
                    )


@dataclass
class CountTable:
    """Window counts for a (k, l) split, after frequency filtering.

    ``x_counts`` are raw window-prefix occurrence counts of each retained
    context (windows whose continuation ran past the document end are
    dropped, not padded).
    """

    k: int
    l: int
    xy_counts: dict[tuple[Sequence, Sequence], int]
    x_counts: dict[Sequence, int]
    min_count: int
    min_y_count: int
    alphabet_size: int = 0
    meta: dict = field(default_factory=dict)

    def x_sequences(self) -> list[Sequence]:
        return sorted(self.x_counts)

    def y_sequences(self) -> list[Sequence]:
        return sorted({y for (_, y) in self.xy_counts})

    def total_windows(self) -> int:
        """Number of full (x, y) windows before filtering."""
        return int(self.meta.get("total_windows", sum(self.xy_counts.values())))


def _count_shard(
    docs, k: int, l: int
) -> tuple[dict[tuple[Sequence, Sequence], int], dict[Sequence, int]]:
    # x occurrences are counted wherever the k-gram fits; (x, y) windows
    # additionally need the continuation to fit (no padding at document ends).
    xy: dict[tuple[Sequence, Sequence], int] = {}
    xc: dict[Sequence, int] = {}
    width = k + l
    for doc in docs:
        for i in range(len(doc) - k + 1):
            x = tuple(doc[i : i + k])
            xc[x] = xc.get(x, 0) + 1
            if i + width <= len(doc):
                y = tuple(doc[i + k : i + width])
                xy[(x, y)] = xy.get((x, y), 0) + 1
    return xy, xc


def merge_counts(shards) -> tuple[dict, dict]:
    """Deterministic (sorted-key) reduction of per-shard counts."""
    xy: dict[tuple[Sequence, Sequence], int] = {}
    xc: dict[Sequence, int] = {}
    for shard_xy, shard_xc in shards:
        for key in sorted(shard_xy):
            xy[key] = xy.get(key, 0) + shard_xy[key]
        for key in sorted(shard_xc):
            xc[key] = xc.get(key, 0) + shard_xc[key]
    return xy, xc


def stream_ngram_counts(
    stream: TokenStream,
    k: int,
    l: int,
    min_count: int = 1,
    min_y_count: int = 1,
    shards: int = 1,
) -> CountTable:
    """Count (length-k, length-l) windows and apply the two-stage filter.

    Contexts with fewer than ``min_count`` windows are dropped first; then
    continuations with fewer than ``min_y_count`` occurrences after a
    retained context are dropped.
    """
    if k < 1 or l < 1:
        raise CorpusError("k and l must be >= 1")
    if not stream.records:
        raise CorpusError("empty corpus")
    if shards <= 1:
        xy, xc = _count_shard(stream.records, k, l)
    else:
        chunks = [stream.records[i::shards] for i in range(shards)]
        xy, xc = merge_counts(_count_shard(chunk, k, l) for chunk in chunks)
    if not xy:
        raise CorpusError(f"no windows: every document is shorter than k + l = {k + l}")
    total_windows = sum(xy.values())

    retained_x = {x for x, c in xc.items() if c >= min_count}
    xy = {key: c for key, c in xy.items() if key[0] in retained_x}
    y_totals: dict[Sequence, int] = {}
    for (x, y), c in xy.items():
        y_totals[y] = y_totals.get(y, 0) + c
    retained_y = {y for y, c in y_totals.items() if c >= min_y_count}
    xy = {key: c for key, c in xy.items() if key[1] in retained_y}
    xc = {x: c for x, c in xc.items() if x in retained_x}
    return CountTable(
        k=k,
        l=l,
        xy_counts=xy,
        x_counts=xc,
        min_count=min_count,
        min_y_count=min_y_count,
        alphabet_size=stream.alphabet_size,
        meta={"total_windows": total_windows},
    )


def build_conditional_matrix(
    counts: CountTable, lambda_smooth: float = 0.0, policy: str = "stochastic"
) -> ConditionalOperator:
    """Smoothed conditional probability matrix P(y|x) from a count table.

    P(y|x) = (count(x,y) + λ) / (count(x) + λ|Y|). Under ``stochastic``,
    count(x) is the retained-row sum so columns are exactly normalized;
    under ``paper``, count(x) is the raw occurrence count and columns may
    sum to less than one. The marginal is the renormalized raw context count
    either way. Contexts left without any retained continuation are dropped.
    """
    if lambda_smooth < 0:
        raise CorpusError("lambda_smooth must be >= 0")
    if policy not in ("paper", "stochastic"):
        raise CorpusError(f"unknown policy {policy!r}")
    if not counts.xy_counts:
        raise CorpusError("empty table: all counts were filtered away")

    y_labels = counts.y_sequences()
    y_index = {y: i for i, y in enumerate(y_labels)}
    row_sums: dict[Sequence, int] = {}
    for (x, y), c in counts.xy_counts.items():
        row_sums[x] = row_sums.get(x, 0) + c
    x_labels = [x for x in counts.x_sequences() if row_sums.get(x, 0) > 0]
    if not x_labels:
        raise CorpusError("empty table: all counts were filtered away")
    x_index = {x: i for i, x in enumerate(x_labels)}

    n_y, n_x = len(y_labels), len(x_labels)
    raw = np.zeros((n_y, n_x))
    for (x, y), c in counts.xy_counts.items():
        if x in x_index:
            raw[y_index[y], x_index[x]] = c
    if policy == "stochastic":
        denom_counts = raw.sum(axis=0)
    else:
        denom_counts = np.array([counts.x_counts[x] for x in x_labels], dtype=float)
    matrix = (raw + lambda_smooth) / (denom_counts + lambda_smooth * n_y)[None, :]

    x_raw = np.array([counts.x_counts[x] for x in x_labels], dtype=float)
    marginal = x_raw / x_raw.sum()
    return ConditionalOperator(
        k=counts.k,
        l=counts.l,
        matrix=matrix,
        marginal=marginal,
        x_labels=tuple(x_labels),
        y_labels=tuple(y_labels),
        meta={
            "policy": policy,
            "lambda_smooth": lambda_smooth,
            "min_count": counts.min_count,
            "min_y_count": counts.min_y_count,
            "alphabet_size": counts.alphabet_size,
        },
    )


def extract_contextual_examples(
    stream: TokenStream,
    dec,
    component: int,
    window: int = 50,
    loading_fraction: float = 0.1,
) -> list[tuple[tuple[int, ...], Sequence, Sequence, tuple[int, ...]]]:
    """Corpus occurrences illustrating one singular component.

    The continuation is the top-loaded entry of the component's left vector;
    contexts are those whose right-vector loading magnitude is within
    ``loading_fraction`` of the maximum, relaxing in 10% bands up to 50% if
    nothing matches. Returns (before, x, y, after) context tuples; empty list
    when the pair never occurs even at the widest band.
    """
    if component < 0 or component >= dec.singular_values.shape[0]:
        raise CorpusError(f"component {component} out of range")
    if not 0 < loading_fraction <= 1:
        raise CorpusError("loading_fraction must be in (0, 1]")
    left = dec.left_vectors[:, component]
    right = dec.right_vectors[:, component]
    top_y = dec.y_labels[int(np.argmax(np.abs(left)))]
    max_mag = float(np.max(np.abs(right)))
    if max_mag == 0:
        return []
    k, l = dec.k, dec.l

    band = loading_fraction
    while True:
        threshold = (1.0 - band) * max_mag
        chosen = {
            dec.x_labels[i]
            for i in range(len(dec.x_labels))
            if abs(right[i]) >= threshold - 1e-15
        }
        matches = []
        for doc in stream.records:
            for i in range(len(doc) - k - l + 1):
                x = tuple(doc[i : i + k])
                y = tuple(doc[i + k : i + k + l])
                if y == top_y and x in chosen:
                    before = tuple(doc[max(0, i - window) : i])
                    after = tuple(doc[i + k + l : i + k + l + window])
                    matches.append((before, x, y, after))
        if matches or band >= 0.5:
            return matches
        band = min(band + 0.1, 0.5)


# ---------------------------------------------------------------------------
# File formats: newline-delimited documents with an alphabet header, and a
# TSV of counts with comment-line metadata.
# ---------------------------------------------------------------------------

def read_token_stream(path: str | Path) -> TokenStream:
    path = Path(path)
    alphabet_size = None
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#alphabet"):
                parts = line.split()
                if len(parts) != 2:
                    raise CorpusError(f"{path}:{lineno}: malformed alphabet header")
                alphabet_size = int(parts[1])
                continue
            if line.startswith("#"):
                continue
            try:
                records.append(tuple(int(tok) for tok in line.split()))
            except ValueError as exc:
                raise CorpusError(f"{path}:{lineno}: bad token id ({exc})") from None
    if alphabet_size is None:
        raise CorpusError(f"{path}: missing '#alphabet <n>' header")
    if not records:
        raise CorpusError("empty corpus")
    return TokenStream(records=tuple(records), alphabet_size=alphabet_size)


def write_token_stream(stream: TokenStream, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"#alphabet {stream.alphabet_size}\n")
        for doc in stream.records:
            fh.write(" ".join(str(t) for t in doc) + "\n")


def write_count_table(counts: CountTable, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"#k {counts.k}\n#l {counts.l}\n")
        fh.write(f"#min_count {counts.min_count}\n#min_y_count {counts.min_y_count}\n")
        fh.write(f"#alphabet {counts.alphabet_size}\n")
        fh.write("#columns x_ids\ty_ids\tcount\n")
        for x, y in sorted(counts.xy_counts):
            c = counts.xy_counts[(x, y)]
            fh.write(
                ",".join(str(t) for t in x)
                + "\t"
                + ",".join(str(t) for t in y)
                + f"\t{c}\n"
            )
        for x in sorted(counts.x_counts):
            fh.write("#x_count " + ",".join(str(t) for t in x) + f"\t{counts.x_counts[x]}\n")


def read_count_table(path: str | Path) -> CountTable:
    path = Path(path)
    header = {"k": None, "l": None, "min_count": 1, "min_y_count": 1, "alphabet": 0}
    xy: dict[tuple[Sequence, Sequence], int] = {}
    xc: dict[Sequence, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#x_count "):
                body = line[len("#x_count "):]
                x_part, count = body.split("\t")
                xc[tuple(int(t) for t in x_part.split(","))] = int(count)
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts and parts[0] in header:
                    header[parts[0]] = int(parts[1])
                continue
            try:
                x_part, y_part, count = line.split("\t")
                x = tuple(int(t) for t in x_part.split(","))
                y = tuple(int(t) for t in y_part.split(","))
                xy[(x, y)] = int(count)
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: malformed count row") from None
    if header["k"] is None or header["l"] is None:
        raise CorpusError(f"{path}: missing k/l header")
    if not xc:
        # tolerate tables written without per-context rows
        for (x, _), c in xy.items():
            xc[x] = xc.get(x, 0) + c
    return CountTable(
        k=header["k"],
        l=header["l"],
        xy_counts=xy,
        x_counts=xc,
        min_count=header["min_count"],
        min_y_count=header["min_y_count"],
        alphabet_size=header["alphabet"],
    )


# Document-sampling sizes and filter thresholds used as configuration
# defaults for empirical runs; not enforced anywhere.
DEFAULT_DOC_SAMPLES = {(1, 1): 20000, (2, 2): 15000, (3, 3): 25000}
DEFAULT_MIN_COUNTS = {(1, 1): 5, (2, 2): 10, (3, 3): 20}
