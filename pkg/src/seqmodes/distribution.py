"""Exact finite sequence distributions.

A language is stored as the single top-level joint distribution over length-K
token strings; every shorter joint is obtained by marginalization, so the
consistency condition between lengths holds by construction. This module also
provides the column-stochastic conditional operator between a length-k context
and its length-l continuation, synthetic generators used as fixtures, and the
planted bigram constructions used to verify exact mode structure.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from ._streams import LANGUAGE_TAG, keyed_generator

JOINT_ATOL = 1e-12


class DistributionError(ValueError):
    pass


class ZeroProbabilityError(DistributionError):
    """A context with zero probability was used where positive mass is required."""


@dataclass(frozen=True)
class Alphabet:
    """Finite token alphabet; token ids are 0..size-1."""

    size: int
    display: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.size < 1:
            raise DistributionError(f"alphabet size must be >= 1, got {self.size}")
        if self.display is not None and len(self.display) != self.size:
            raise DistributionError("display strings must match alphabet size")

    def label(self, token: int) -> str:
        if self.display is not None:
            return self.display[token]
        return str(token)

    def sequences(self, k: int) -> list[tuple[int, ...]]:
        """All length-k sequences in row-major (lexicographic) order."""
        return list(itertools.product(range(self.size), repeat=k))


def _sequence_labels(size: int, k: int) -> tuple[tuple[int, ...], ...]:
    return tuple(itertools.product(range(size), repeat=k))


@dataclass(frozen=True, eq=False)
class Language:
    """A consistent family of joint distributions, stored as the joint over Σ^K.

    ``positivity_relaxed`` marks languages (e.g. planted bigrams) that contain
    exact zeros; consumers restrict to the positive-probability domain instead
    of failing.
    """

    alphabet: Alphabet
    K: int
    joint: np.ndarray
    positivity_relaxed: bool = False

    def __post_init__(self):
        joint = np.asarray(self.joint, dtype=float)
        expected = (self.alphabet.size,) * self.K
        if joint.shape != expected:
            raise DistributionError(
                f"joint shape {joint.shape} does not match Σ^{self.K} = {expected}"
            )
        if np.any(joint < 0):
            raise DistributionError("joint probabilities must be non-negative")
        total = float(joint.sum())
        if abs(total - 1.0) > JOINT_ATOL:
            raise DistributionError(f"joint must sum to 1 within {JOINT_ATOL}, got {total!r}")
        joint = joint.copy()
        joint.setflags(write=False)
        object.__setattr__(self, "joint", joint)
        if not self.positivity_relaxed:
            for axis in range(self.K):
                unigram = _marginal_to_axis(joint, axis)
                if np.any(unigram <= 0):
                    raise DistributionError(
                        "unigram marginals must be strictly positive; "
                        "use positivity_relaxed=True for planted constructions"
                    )

    @property
    def size(self) -> int:
        return self.alphabet.size


def _marginal_to_axis(joint: np.ndarray, axis: int) -> np.ndarray:
    axes = tuple(a for a in range(joint.ndim) if a != axis)
    return joint.sum(axis=axes)


def fundamental_tensor(lang: Language, k: int) -> np.ndarray:
    """Order-k tensor of joint probabilities of length-k strings."""
    if not 1 <= k <= lang.K:
        raise DistributionError(f"k must be in 1..{lang.K}, got {k}")
    return marginalize(lang.joint, 0, lang.K - k)


def marginalize(tensor: np.ndarray, i: int, j: int) -> np.ndarray:
    """Sum out the first i and last j positions of an order-K tensor."""
    tensor = np.asarray(tensor)
    K = tensor.ndim
    if i < 0 or j < 0 or i + j >= K:
        raise DistributionError(f"need i >= 0, j >= 0, i + j < {K}; got i={i}, j={j}")
    axes = tuple(range(i)) + tuple(range(K - j, K))
    if not axes:
        return tensor.copy()
    return tensor.sum(axis=axes)


def check_language(family: list[np.ndarray]) -> float:
    """Maximum deviation of the family from the marginal-consistency condition.

    ``family[k-1]`` must be the order-k joint. For every k and every split
    i + j = K - k, the (i, j)-marginal of the top joint is compared entrywise
    against the stored order-k joint.
    """
    if not family:
        raise DistributionError("empty family")
    K = len(family)
    size = family[0].shape[0] if family[0].ndim else 0
    for k, tensor in enumerate(family, start=1):
        t = np.asarray(tensor)
        if t.ndim != k or any(s != size for s in t.shape):
            raise DistributionError(
                f"family[{k - 1}] has shape {t.shape}; expected ({size},) * {k}"
            )
    top = np.asarray(family[K - 1])
    worst = 0.0
    for k in range(1, K + 1):
        for i in range(K - k + 1):
            j = K - k - i
            dev = np.max(np.abs(marginalize(top, i, j) - family[k - 1]))
            worst = max(worst, float(dev))
    return worst


@dataclass(frozen=True, eq=False)
class ConditionalOperator:
    """Matrix of q(y|x): rows indexed by y ∈ Σ^l, columns by x ∈ Σ^k.

    ``marginal`` holds q(x) for the retained columns. Columns are stochastic
    except under the corpus module's raw-occurrence ("paper") counting
    policy, which is recorded in ``meta``.
    """

    k: int
    l: int
    matrix: np.ndarray
    marginal: np.ndarray
    x_labels: tuple[tuple[int, ...], ...]
    y_labels: tuple[tuple[int, ...], ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        marginal = np.asarray(self.marginal, dtype=float)
        if matrix.shape != (len(self.y_labels), len(self.x_labels)):
            raise DistributionError("matrix shape does not match labels")
        if marginal.shape != (len(self.x_labels),):
            raise DistributionError("marginal shape does not match x labels")
        if np.any(marginal <= 0):
            raise ZeroProbabilityError("operator marginal must be strictly positive")
        if abs(marginal.sum() - 1.0) > JOINT_ATOL:
            raise DistributionError("operator marginal must sum to 1")
        matrix = matrix.copy()
        matrix.setflags(write=False)
        marginal = marginal.copy()
        marginal.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "marginal", marginal)

    @property
    def n_x(self) -> int:
        return len(self.x_labels)

    @property
    def n_y(self) -> int:
        return len(self.y_labels)

    def max_column_defect(self) -> float:
        return float(np.max(np.abs(self.matrix.sum(axis=0) - 1.0)))

    def joint(self) -> np.ndarray:
        """Joint q(x, y) = q(y|x) q(x) as a (n_y, n_x) array."""
        return self.matrix * self.marginal[None, :]


def conditional_operator(lang: Language, k: int, l: int) -> ConditionalOperator:
    """Column-stochastic operator sending x ∈ Σ^k to its conditional over Σ^l.

    Zero-probability contexts are dropped for positivity-relaxed languages
    (restricting the domain) and are an error otherwise.
    """
    if k < 1 or l < 1 or k + l > lang.K:
        raise DistributionError(f"need k, l >= 1 with k + l <= {lang.K}; got ({k}, {l})")
    size = lang.size
    joint_kl = fundamental_tensor(lang, k + l).reshape(size**k, size**l)
    q_x = fundamental_tensor(lang, k).reshape(size**k)
    x_labels = _sequence_labels(size, k)
    y_labels = _sequence_labels(size, l)
    positive = q_x > 0
    if not positive.all():
        if not lang.positivity_relaxed:
            bad = x_labels[int(np.argmin(positive))]
            raise ZeroProbabilityError(f"context {bad} has zero probability")
        joint_kl = joint_kl[positive]
        q_x = q_x[positive]
        x_labels = tuple(lab for lab, keep in zip(x_labels, positive) if keep)
    matrix = (joint_kl / q_x[:, None]).T
    return ConditionalOperator(
        k=k, l=l, matrix=matrix, marginal=q_x, x_labels=x_labels, y_labels=y_labels
    )


def _stationary_vector(transition: np.ndarray) -> np.ndarray:
    """Stationary distribution of a column-stochastic matrix, polished to ~1e-15."""
    n = transition.shape[0]
    system = transition - np.eye(n)
    system[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    pi = np.linalg.solve(system, rhs)
    pi = np.maximum(pi, 1e-300)
    pi /= pi.sum()
    for _ in range(200):
        nxt = transition @ pi
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - pi)) < 1e-16:
            pi = nxt
            break
        pi = nxt
    return pi


def random_language(
    seed: int, alphabet: Alphabet | int, K: int, concentration: float = 1.0
) -> Language:
    """Strictly positive stationary joint over Σ^K.

    Next-token conditionals for every length-(K-1) context are drawn from a
    symmetric Dirichlet (positivity and entropy control via concentration);
    the context marginal is the stationary distribution of the induced
    context chain, so every length-k window of the joint has the same
    marginal and the consistency condition holds for all splits.
    """
    if isinstance(alphabet, int):
        alphabet = Alphabet(alphabet)
    if alphabet.size < 2:
        raise DistributionError("random languages require alphabet size >= 2")
    if concentration <= 0:
        raise DistributionError("concentration must be positive")
    rng = keyed_generator(seed, LANGUAGE_TAG)
    size = alphabet.size
    if K == 1:
        joint = rng.dirichlet(np.full(size, concentration))
        joint = np.maximum(joint, 1e-300)
        joint /= joint.sum()
        return Language(alphabet=alphabet, K=1, joint=joint)
    n_ctx = size ** (K - 1)
    cond = rng.dirichlet(np.full(size, concentration), size=n_ctx)  # rows P(y|ctx)
    # Context chain: (x_1..x_{K-1}) -> (x_2..x_{K-1}, y). Row-major context
    # indices shift as c -> (c mod size^{K-2})*size + y.
    transition = np.zeros((n_ctx, n_ctx))
    tail = size ** (K - 2)
    for c in range(n_ctx):
        base = (c % tail) * size
        for y in range(size):
            transition[base + y, c] += cond[c, y]
    pi = _stationary_vector(transition)
    joint = (pi[:, None] * cond).reshape((size,) * K)
    joint = np.maximum(joint, 1e-300)
    joint /= joint.sum()
    return Language(alphabet=alphabet, K=K, joint=joint)


def random_doubly_stochastic_language(
    seed: int, size: int, concentration: float = 1.0, sinkhorn_tol: float = 1e-15
) -> Language:
    """Bigram language (K=2) with uniform marginals on both positions.

    The conditional q(y|x) is then doubly stochastic, which makes the uniform
    conditional expressible in the span of the top mode; these are the
    fixtures on which mode truncation stays feasible at every cutoff.
    """
    if size < 2:
        raise DistributionError("need size >= 2")
    rng = keyed_generator(seed, LANGUAGE_TAG)
    m = rng.gamma(concentration, size=(size, size)) + 1e-12
    for _ in range(10_000):
        m /= m.sum(axis=1, keepdims=True)
        m /= m.sum(axis=0, keepdims=True)
        row_err = np.max(np.abs(m.sum(axis=1) - 1.0))
        col_err = np.max(np.abs(m.sum(axis=0) - 1.0))
        if max(row_err, col_err) < sinkhorn_tol:
            break
    joint = m / m.sum()
    return Language(alphabet=Alphabet(size), K=2, joint=joint)


def _as_index(x: tuple[int, ...] | int, size: int, k: int) -> tuple[int, ...]:
    if isinstance(x, int):
        x = (x,)
    x = tuple(int(t) for t in x)
    if len(x) != k or any(t < 0 or t >= size for t in x):
        raise DistributionError(f"{x} is not a valid length-{k} sequence over {size} tokens")
    return x


def plant_absolute_bigram(
    lang: Language, x: tuple[int, ...] | int, y: tuple[int, ...] | int
) -> Language:
    """Force y to be the only continuation of x and x the only precursor of y.

    Requires len(x) + len(y) = K. Zeros are planted exactly, so the result is
    positivity-relaxed.
    """
    x = _as_index(x, lang.size, len(x) if not isinstance(x, int) else 1)
    k = len(x)
    l = lang.K - k
    y = _as_index(y, lang.size, l)
    joint = np.array(lang.joint)
    # q(xz) = 0 for z != y
    xy_slice = joint[x]
    keep = xy_slice[y]
    joint[x] = 0.0
    joint[x + y] = keep
    # q(ty) = 0 for t != x
    full = joint.reshape(lang.size**k, lang.size**l)
    y_flat = int(np.ravel_multi_index(y, (lang.size,) * l))
    x_flat = int(np.ravel_multi_index(x, (lang.size,) * k))
    column = full[:, y_flat].copy()
    full[:, y_flat] = 0.0
    full[x_flat, y_flat] = column[x_flat]
    total = full.sum()
    if total <= 0:
        raise DistributionError("planting would zero out the whole distribution")
    return Language(
        alphabet=lang.alphabet,
        K=lang.K,
        joint=(full / total).reshape(lang.joint.shape),
        positivity_relaxed=True,
    )


def is_absolute_bigram(lang: Language, x: tuple[int, ...], y: tuple[int, ...]) -> bool:
    k, l = len(x), len(y)
    if k + l != lang.K:
        return False
    full = lang.joint.reshape(lang.size**k, lang.size**l)
    x_flat = int(np.ravel_multi_index(tuple(x), (lang.size,) * k))
    y_flat = int(np.ravel_multi_index(tuple(y), (lang.size,) * l))
    if full[x_flat, y_flat] <= 0:
        return False
    row_ok = np.all(np.delete(full[x_flat], y_flat) == 0)
    col_ok = np.all(np.delete(full[:, y_flat], x_flat) == 0)
    return bool(row_ok and col_ok)


def plant_collective_bigram(
    lang: Language, S: list[tuple[int, ...]], y: tuple[int, ...]
) -> Language:
    """Make y the deterministic continuation of every s ∈ S and of nothing else.

    Per-column renormalization preserves every context marginal q(t) exactly,
    so q(y) = Σ_{s∈S} q(s) afterwards.
    """
    if not S:
        raise DistributionError("S must be non-empty")
    k = len(S[0])
    l = lang.K - k
    y = _as_index(y, lang.size, l)
    S = [_as_index(s, lang.size, k) for s in S]
    size = lang.size
    full = np.array(lang.joint).reshape(size**k, size**l)
    y_flat = int(np.ravel_multi_index(y, (size,) * l))
    s_flat = {int(np.ravel_multi_index(s, (size,) * k)) for s in S}
    for xf in range(size**k):
        mass = full[xf].sum()
        if xf in s_flat:
            full[xf] = 0.0
            full[xf, y_flat] = mass
        else:
            removed = full[xf, y_flat]
            rest = mass - removed
            if mass > 0 and rest <= 0:
                raise DistributionError(
                    f"context {np.unravel_index(xf, (size,) * k)} has all its mass "
                    f"on {tuple(y)}; requiring q(y|t)=0 there is infeasible"
                )
            full[xf, y_flat] = 0.0
            if rest > 0:
                full[xf] *= mass / rest
    total = full.sum()
    if total <= 0:
        raise DistributionError("planting would zero out the whole distribution")
    return Language(
        alphabet=lang.alphabet,
        K=lang.K,
        joint=(full / total).reshape(lang.joint.shape),
        positivity_relaxed=True,
    )


def write_operator_csv(op: ConditionalOperator, path) -> None:
    """Dense CSV with a metadata header; rows y, columns x, plus the marginal."""
    from pathlib import Path

    path = Path(path)
    lines = [f"#k {op.k}", f"#l {op.l}"]
    for key in sorted(op.meta):
        lines.append(f"#{key} {op.meta[key]}")
    lines.append("#x_labels " + ";".join(",".join(map(str, x)) for x in op.x_labels))
    lines.append("#y_labels " + ";".join(",".join(map(str, y)) for y in op.y_labels))
    lines.append("#marginal " + ";".join(f"{v:.17g}" for v in op.marginal))
    for row in op.matrix:
        lines.append(",".join(f"{v:.17g}" for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_operator_csv(path) -> ConditionalOperator:
    from pathlib import Path

    path = Path(path)
    meta: dict = {}
    header: dict = {}
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(" ")
            if key in ("k", "l"):
                header[key] = int(value)
            elif key in ("x_labels", "y_labels"):
                header[key] = tuple(
                    tuple(int(t) for t in part.split(",")) for part in value.split(";")
                )
            elif key == "marginal":
                header[key] = np.array([float(v) for v in value.split(";")])
            else:
                meta[key] = value
            continue
        rows.append([float(v) for v in line.split(",")])
    return ConditionalOperator(
        k=header["k"],
        l=header["l"],
        matrix=np.asarray(rows),
        marginal=header["marginal"],
        x_labels=header["x_labels"],
        y_labels=header["y_labels"],
        meta=meta,
    )


def language_to_json(lang: Language) -> str:
    payload = {
        "alphabet_size": lang.size,
        "K": lang.K,
        "positivity_relaxed": lang.positivity_relaxed,
        "probabilities": [float(v) for v in lang.joint.ravel()],
    }
    return json.dumps(payload)


def language_from_json(text: str) -> Language:
    payload = json.loads(text)
    size = int(payload["alphabet_size"])
    K = int(payload["K"])
    joint = np.asarray(payload["probabilities"], dtype=float).reshape((size,) * K)
    return Language(
        alphabet=Alphabet(size),
        K=K,
        joint=joint,
        positivity_relaxed=bool(payload.get("positivity_relaxed", False)),
    )
