"""Effective distributions by mode truncation.

Keeping only the modes up to a cutoff index defines a subspace of the weighted
function space. Three routes from the subspace back to an actual conditional
distribution are provided: the raw orthogonal projection (generally signed and
unnormalized), the clip-and-normalize surrogate, and the KL-closest member of
the subspace that is also a genuine conditional distribution. The latter is
found by projected gradient descent with a Dykstra projection onto
(subspace ∩ product-of-simplices) at every step; whether that intersection is
non-empty at all is surfaced explicitly, because for most operators it is not
unless the cutoff retains the direction of the square-root marginal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distribution import ConditionalOperator, Language, conditional_operator, fundamental_tensor
from .modes import (
    ModeDecomposition,
    coefficients_to_function,
    hs_norm,
    mode_coefficients,
    reconstruct_matrix,
    weighted_svd,
)


class TruncationError(ValueError):
    pass


class InfeasibleTruncationError(TruncationError):
    """Alternating projections could not reach the constraint intersection.

    Carries diagnostics; the feasible set is possibly empty for this cutoff.
    """

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TruncationSpec:
    chi: int
    solver: str = "kl"  # {"projection_only", "normalized", "kl"}
    tolerance: float = 1e-9
    max_iterations: int = 10000

    def validate(self, n_modes: int) -> None:
        if not 0 <= self.chi < n_modes:
            raise TruncationError(f"chi must be in [0, {n_modes}), got {self.chi}")
        if self.solver not in ("projection_only", "normalized", "kl"):
            raise TruncationError(f"unknown solver {self.solver!r}")


@dataclass(frozen=True, eq=False)
class EffectiveDistribution:
    """A truncated conditional distribution with its construction record."""

    k: int
    l: int
    conditional: np.ndarray
    marginal: np.ndarray
    x_labels: tuple[tuple[int, ...], ...]
    y_labels: tuple[tuple[int, ...], ...]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        cond = np.asarray(self.conditional, dtype=float)
        if np.any(cond < 0):
            raise TruncationError("effective conditional has negative entries")
        defect = np.max(np.abs(cond.sum(axis=0) - 1.0))
        if defect > 1e-10:
            raise TruncationError(f"effective conditional columns sum defect {defect:.3e}")
        cond = cond.copy()
        cond.setflags(write=False)
        object.__setattr__(self, "conditional", cond)

    def joint(self) -> np.ndarray:
        return self.conditional * self.marginal[None, :]

    def as_operator(self) -> ConditionalOperator:
        return ConditionalOperator(
            k=self.k,
            l=self.l,
            matrix=self.conditional,
            marginal=self.marginal,
            x_labels=self.x_labels,
            y_labels=self.y_labels,
            meta=dict(self.provenance),
        )


def _allowed_mask(dec: ModeDecomposition, chi: int) -> np.ndarray:
    mask = np.zeros((dec.n_modes, dec.n_left), dtype=bool)
    alpha_top = min(chi, dec.n_modes - 1)
    beta_top = min(chi, dec.n_plus - 1)
    if beta_top >= 0:
        mask[: alpha_top + 1, : beta_top + 1] = True
    return mask


def project_leq_chi(dec: ModeDecomposition, f: np.ndarray, chi: int) -> np.ndarray:
    """Orthogonal projection of f onto the span of the retained basis elements.

    Retained indices: α ≤ chi over all modes, β ≤ chi over positive modes.
    """
    coeffs = mode_coefficients(dec, f)
    coeffs = np.where(_allowed_mask(dec, chi), coeffs, 0.0)
    return coefficients_to_function(dec, coeffs)


def subspace_distance(dec: ModeDecomposition, f: np.ndarray, chi: int) -> float:
    return hs_norm(f - project_leq_chi(dec, f, chi), dec.marginal)


def kl_conditional(
    q_cond: np.ndarray, p_cond: np.ndarray, marginal: np.ndarray
) -> float:
    """D(q‖p) = Σ_x q(x) Σ_y q(y|x) log(q(y|x)/p(y|x)); +inf if p misses support."""
    support = q_cond > 0
    if np.any(p_cond[support] <= 0):
        return float("inf")
    ratio = np.zeros_like(q_cond)
    ratio[support] = q_cond[support] * (np.log(q_cond[support]) - np.log(p_cond[support]))
    return float(ratio.sum(axis=0) @ marginal)


def _project_columns_to_simplex(f: np.ndarray) -> np.ndarray:
    """Euclidean projection of each column onto the probability simplex."""
    n_y, n_x = f.shape
    sorted_desc = -np.sort(-f, axis=0)
    cumsum = np.cumsum(sorted_desc, axis=0) - 1.0
    denom = np.arange(1, n_y + 1)[:, None]
    candidate = sorted_desc - cumsum / denom
    rho = n_y - 1 - np.argmax((candidate > 0)[::-1, :], axis=0)
    theta = cumsum[rho, np.arange(n_x)] / (rho + 1.0)
    return np.maximum(f - theta[None, :], 0.0)


def _dykstra(
    dec: ModeDecomposition,
    chi: int,
    start: np.ndarray,
    tolerance: float,
    max_iterations: int,
) -> tuple[np.ndarray, dict]:
    """Dykstra's alternating projections onto subspace ∩ simplices.

    Both projections are taken in the weighted inner product; the per-column
    scalar weights drop out of the simplex projection. Returns the final
    simplex-feasible iterate and diagnostics; convergence means its distance
    to the subspace fell below tolerance.
    """
    x = start.copy()
    inc_subspace = np.zeros_like(x)
    inc_simplex = np.zeros_like(x)
    distance = float("inf")
    stalled = False
    it = 0
    prev_distance = None
    for it in range(1, max_iterations + 1):
        y = project_leq_chi(dec, x + inc_subspace, chi)
        inc_subspace = x + inc_subspace - y
        x = _project_columns_to_simplex(y + inc_simplex)
        inc_simplex = y + inc_simplex - x
        distance = hs_norm(x - y, dec.marginal)
        if distance < tolerance:
            break
        if prev_distance is not None and abs(prev_distance - distance) < tolerance * 1e-3:
            stalled = True
            break
        prev_distance = distance
    diagnostics = {
        "iterations": it,
        "subspace_distance": distance,
        "stalled": stalled,
        "converged": distance < tolerance,
    }
    return x, diagnostics


def truncate_normalized(dec: ModeDecomposition, chi: int) -> EffectiveDistribution:
    """Clip the truncated reconstruction at zero and renormalize per column."""
    if not 0 <= chi < dec.n_modes:
        raise TruncationError(f"chi must be in [0, {dec.n_modes}), got {chi}")
    raw = reconstruct_matrix(dec, chi=chi)
    clipped = np.maximum(raw, 0.0)
    sums = clipped.sum(axis=0)
    bad = np.nonzero(sums <= 0)[0]
    if bad.size:
        raise TruncationError(
            f"column for context {dec.x_labels[bad[0]]} clipped to all zeros"
        )
    cond = clipped / sums[None, :]
    truth = reconstruct_matrix(dec)
    return EffectiveDistribution(
        k=dec.k,
        l=dec.l,
        conditional=cond,
        marginal=dec.marginal.copy(),
        x_labels=dec.x_labels,
        y_labels=dec.y_labels,
        provenance={
            "chi": chi,
            "solver": "normalized",
            "kl_divergence": kl_conditional(truth, cond, dec.marginal),
            "subspace_distance": subspace_distance(dec, cond, chi),
            "clipped_mass": float(np.sum(raw[raw < 0])),
        },
    )


def truncate_kl(
    dec: ModeDecomposition, chi: int, spec: TruncationSpec | None = None
) -> EffectiveDistribution:
    """KL-closest conditional distribution whose representative lies in the subspace.

    Projected gradient descent on the conditional entries with a Dykstra
    projection per step; raises :class:`InfeasibleTruncationError` when the
    feasibility phase cannot reach the intersection.
    """
    chi = int(chi)
    if spec is None:
        spec = TruncationSpec(chi=chi)
    spec = TruncationSpec(
        chi=chi, solver="kl", tolerance=spec.tolerance, max_iterations=spec.max_iterations
    )
    spec.validate(dec.n_modes)
    truth = reconstruct_matrix(dec)
    q = dec.marginal

    if chi >= dec.n_modes - 1:
        # Every mode retained: the truth itself is the unique minimizer.
        return EffectiveDistribution(
            k=dec.k, l=dec.l,
            conditional=np.clip(truth, 0.0, None) / np.clip(truth, 0.0, None).sum(axis=0),
            marginal=q.copy(),
            x_labels=dec.x_labels, y_labels=dec.y_labels,
            provenance={
                "chi": chi, "solver": "kl", "kl_divergence": 0.0,
                "iterations": 0, "subspace_distance": 0.0, "feasible": True,
                "converged": True,
            },
        )

    feas_tol = max(spec.tolerance, 1e-11)
    p, feas = _dykstra(dec, chi, truth, feas_tol, spec.max_iterations)
    if not feas["converged"]:
        raise InfeasibleTruncationError(
            "alternating projections did not reach the constraint intersection; "
            f"the feasible set for chi={chi} is possibly empty "
            f"(subspace distance stalled at {feas['subspace_distance']:.3e})",
            diagnostics=feas,
        )

    support = truth > 0

    def objective(cand: np.ndarray) -> float:
        if np.any(cand[support] <= 0):
            return float("inf")
        val = -np.sum((truth[support] * np.log(cand[support])) * np.broadcast_to(q, truth.shape)[support])
        return float(val)

    current = objective(p)
    step = 1.0
    iterations = 0
    converged = False
    for iterations in range(1, spec.max_iterations + 1):
        # Metric gradient of the cross-entropy part; the denominator is clamped
        # so boundary iterates get a finite, inward-pointing direction.
        grad = np.zeros_like(p)
        np.divide(truth, np.maximum(p, 1e-9), out=grad, where=support)
        grad = -grad
        improved = False
        while step > 1e-14:
            cand, _ = _dykstra(dec, chi, p - step * grad, feas_tol, 500)
            value = objective(cand)
            move = hs_norm(cand - p, q)
            if value < current - 1e-4 * move**2 / max(step, 1e-14) or (
                value < current and move < feas_tol
            ):
                improved = True
                break
            step *= 0.5
        if not improved:
            converged = True
            break
        gain = current - value
        p, current = cand, value
        step = min(step * 1.5, 1e3)
        if gain < spec.tolerance:
            converged = True
            break

    kl = kl_conditional(truth, p, q)
    dist = subspace_distance(dec, p, chi)
    return EffectiveDistribution(
        k=dec.k, l=dec.l,
        conditional=p,
        marginal=q.copy(),
        x_labels=dec.x_labels, y_labels=dec.y_labels,
        provenance={
            "chi": chi, "solver": "kl", "kl_divergence": kl,
            "iterations": iterations, "subspace_distance": dist,
            "feasible": True, "converged": converged and dist < feas_tol * 10,
        },
    )


def truncate(dec: ModeDecomposition, spec: TruncationSpec) -> EffectiveDistribution:
    spec.validate(dec.n_modes)
    if spec.solver == "normalized":
        return truncate_normalized(dec, spec.chi)
    if spec.solver == "kl":
        return truncate_kl(dec, spec.chi, spec)
    raise TruncationError(
        "projection_only does not yield a distribution; use project_leq_chi"
    )


# ---------------------------------------------------------------------------
# Composite truncation across a chain of (k, l) splits.
# ---------------------------------------------------------------------------

def validate_decomposition_chain(pairs: list[tuple[int, int]], K: int) -> None:
    if not pairs:
        raise TruncationError("empty decomposition chain")
    k1, l1 = pairs[0]
    if k1 + l1 != K:
        raise TruncationError(f"first pair must satisfy k+l = {K}, got {pairs[0]}")
    for (k_prev, _), (k_next, l_next) in zip(pairs, pairs[1:]):
        if k_next + l_next != k_prev:
            raise TruncationError(
                f"chain broken: need k_i = k_(i+1) + l_(i+1), got {k_prev} vs {(k_next, l_next)}"
            )
    if any(k < 1 or l < 1 for k, l in pairs):
        raise TruncationError("all k_i, l_i must be positive")


@dataclass(frozen=True, eq=False)
class CompositeTruncation:
    K: int
    pairs: tuple[tuple[int, int], ...]
    chis: tuple[int, ...]
    joint: np.ndarray
    levels: tuple[EffectiveDistribution, ...]
    epsilon_sum: float | None = None

    def level_marginal(self, i: int) -> np.ndarray:
        """Composite marginal over the first k_i positions (flat, row-major)."""
        k_i = self.pairs[i][0]
        axes = tuple(range(k_i, self.K))
        return self.joint.sum(axis=axes).reshape(-1)


def multi_length_truncation(
    lang: Language,
    pairs: list[tuple[int, int]],
    chis: list[int],
    solver: str = "kl",
    spec_template: TruncationSpec | None = None,
    constants: list[float] | None = None,
) -> CompositeTruncation:
    """Composite distribution Π_i q^(χ_i)(·|·) · q(base) over Σ^K.

    ``chis[i]`` cuts the (k_i, l_i) operator; a cutoff of n_modes-1 (or -1 as
    shorthand) keeps everything at that level exactly. When per-level
    insensitivity constants are supplied their sum is recorded.
    """
    K = lang.K
    validate_decomposition_chain(pairs, K)
    if len(chis) != len(pairs):
        raise TruncationError("need one cutoff per pair")
    size = lang.size
    levels = []
    for (k_i, l_i), chi in zip(pairs, chis):
        op = conditional_operator(lang, k_i, l_i)
        dec = weighted_svd(op)
        chi_eff = dec.n_modes - 1 if chi in (-1, dec.n_modes - 1) else int(chi)
        spec = TruncationSpec(
            chi=chi_eff,
            solver=solver,
            tolerance=spec_template.tolerance if spec_template else 1e-9,
            max_iterations=spec_template.max_iterations if spec_template else 10000,
        )
        levels.append(truncate(dec, spec))

    k_base = pairs[-1][0]
    joint_flat = fundamental_tensor(lang, k_base).reshape(-1)
    for eff in reversed(levels):
        # extend over the next block: J(x, y) = q'(y|x) J(x)
        joint_flat = (eff.conditional * joint_flat[None, :]).T.reshape(-1)
    joint = joint_flat.reshape((size,) * K)
    eps_sum = None
    if constants is not None:
        if len(constants) != len(pairs):
            raise TruncationError("need one constant per pair")
        eps_sum = float(np.sum(constants))
    return CompositeTruncation(
        K=K,
        pairs=tuple(tuple(p) for p in pairs),
        chis=tuple(int(c) for c in chis),
        joint=joint,
        levels=tuple(levels),
        epsilon_sum=eps_sum,
    )
