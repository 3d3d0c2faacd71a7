"""Hidden-state geometry: layer-wise cosine profiles, split proposal, PCA.

States are tapped post-residual at every layer output, with the embedding
output first; the final norm is not part of the profile. Distances are
averaged over a sample's tokens first, then over samples.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError
from .model import BlockSplit

FLAT_TOL = 1e-9


@dataclass
class DepthProfile:
    """Mean cosine distance across each consecutive pair of layer states."""

    distances: np.ndarray
    n_samples: int
    n_excluded: int = 0
    averaging: str = "token-then-batch"

    def __len__(self) -> int:
        return len(self.distances)


@dataclass
class SplitProposal:
    split: BlockSplit
    staged: bool
    differences: np.ndarray

    @property
    def note(self) -> str:
        return "staged structure detected" if self.staged else "no staged structure detected"


@dataclass
class Trajectory2D:
    coords: np.ndarray
    explained: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    groups: list = field(default_factory=list)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``1 - cos`` along the last axis; NaN where either vector has zero norm."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.sum(a * b, axis=-1) / denom
    cos = np.where(denom > 0, np.clip(cos, -1.0, 1.0), np.nan)
    return 1.0 - cos


def cosine_profile_from_states(states, mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, int]:
    """Per-sample, per-boundary distances from a list of ``[batch, T, h]`` states.

    Returns ``(per_sample [batch, n_boundaries], weights, n_excluded)``; rows
    whose tokens were all excluded get weight 0.
    """
    if len(states) < 2:
        raise ContractError("need at least two layer states")
    n_b = len(states) - 1
    batch, t = states[0].shape[:2]
    valid = np.ones((batch, t), bool) if mask is None else np.asarray(mask, bool)
    per_sample = np.zeros((batch, n_b))
    ok_rows = np.ones((batch, n_b), bool)
    excluded = 0
    for l in range(n_b):
        d = cosine_distance(states[l], states[l + 1])
        bad = np.isnan(d) & valid
        excluded += int(bad.sum())
        use = valid & ~np.isnan(d)
        cnt = use.sum(axis=1)
        per_sample[:, l] = np.where(cnt > 0, np.where(use, d, 0.0).sum(axis=1) / np.maximum(cnt, 1), 0.0)
        ok_rows[:, l] = cnt > 0
    return per_sample, ok_rows, excluded


def layer_cosine_profile(model, batches, masks=None) -> DepthProfile:
    """Cosine-distance profile over token batches ``[batch, T]``.

    ``model`` needs a ``layer_states(tokens)`` method (a :class:`Transformer`
    or anything wrapping one as ``.transformer``), or may itself be a callable
    returning the list of states.
    """
    batches = list(batches)
    if not batches:
        raise ContractError("need at least one batch")
    fn = getattr(model, "layer_states", None)
    if fn is None and hasattr(model, "transformer"):
        fn = model.transformer.layer_states
    if fn is None:
        fn = model
    masks = [None] * len(batches) if masks is None else list(masks)
    sums = None
    counts = None
    excluded = 0
    n_samples = 0
    for tokens, mask in zip(batches, masks):
        per_sample, ok, exc = cosine_profile_from_states(fn(tokens), mask)
        excluded += exc
        n_samples += per_sample.shape[0]
        s = np.where(ok, per_sample, 0.0).sum(axis=0)
        c = ok.sum(axis=0)
        sums = s if sums is None else sums + s
        counts = c if counts is None else counts + c
    if excluded:
        warnings.warn(f"{excluded} zero-norm hidden vectors excluded from the cosine profile", RuntimeWarning)
    dist = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return DepthProfile(dist, n_samples, excluded)


def propose_split(profile, n_layers: int | None = None) -> SplitProposal:
    """Place boundaries at the sharpest profile changes in each half.

    Boundary ``l`` measures the change made by layer ``l``. A jump between
    ``d_l`` and ``d_{l+1}`` puts a stage boundary before layer ``l + 1``.
    """
    d = np.asarray(getattr(profile, "distances", profile), np.float64)
    if d.ndim != 1 or len(d) < 3:
        raise ContractError("profile must cover at least 3 boundaries")
    n_layers = n_layers or len(d)
    diffs = np.abs(np.diff(d))
    if not np.any(diffs >= FLAT_TOL):
        return SplitProposal(BlockSplit(1, n_layers - 1), False, diffs)
    half = (len(diffs) + 1) // 2
    # argmax returns the first maximum, i.e. the shallower layer on ties
    enc = int(np.argmax(diffs[:half])) + 1
    dec = int(half + np.argmax(diffs[half:])) + 1 if len(diffs) > half else enc
    dec = max(dec, enc)
    split = BlockSplit(enc, min(dec, n_layers - 1))
    split.validate(n_layers)
    return SplitProposal(split, True, diffs)


def _sign_fix(vt: np.ndarray) -> np.ndarray:
    for i in range(vt.shape[0]):
        row = vt[i]
        tol = 1e-12 * max(np.abs(row).max(), 1e-300)
        nz = np.flatnonzero(np.abs(row) > tol)
        if len(nz) and row[nz[0]] < 0:
            vt[i] = -row
    return vt


def pca_trajectory(states, n_components: int = 2) -> Trajectory2D:
    """Project states into their shared top principal-component plane.

    ``states`` is a sequence of vectors, or a list of ``[n_i, d]`` groups
    fitted jointly; ``groups`` then holds each group's coordinates.
    """
    groups = [np.atleast_2d(np.asarray(s, np.float64)) for s in states]
    if groups and groups[0].shape[0] == 1:
        x = np.concatenate(groups, axis=0)
        sizes = None
    else:
        x = np.concatenate(groups, axis=0)
        sizes = [g.shape[0] for g in groups]
    if x.shape[0] < 3:
        raise ContractError("need at least 3 states")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s**2
    total = var.sum()
    explained = var / total if total > 0 else np.zeros_like(var)
    vt = _sign_fix(vt.copy())
    if vt.shape[0] < n_components:
        pad = n_components - vt.shape[0]
        vt = np.vstack([vt, np.zeros((pad, vt.shape[1]))])
        explained = np.concatenate([explained, np.zeros(pad)])
    comps = vt[:n_components]
    coords = xc @ comps.T
    out = Trajectory2D(coords, explained[:n_components], comps, mean)
    if sizes is not None:
        out.groups = np.split(coords, np.cumsum(sizes)[:-1])
    return out


def loop_distance_trace(traj) -> np.ndarray:
    """Per-iteration ``||h^(b+1) - h^(b)||`` over the full sequence, batch-averaged."""
    states = traj.states if hasattr(traj, "states") else traj
    out = []
    for a, b in zip(states[:-1], states[1:]):
        diff = (np.asarray(b, np.float64) - np.asarray(a, np.float64)).reshape(len(a), -1)
        out.append(np.linalg.norm(diff, axis=1).mean())
    return np.asarray(out)


def token_distribution_trace(model, traj, position: int, k: int = 5, sample: int = 0):
    """Top-``k`` next-token probabilities at ``position`` for every state.

    Returns ``(ids [n_states, k], probs [n_states, k])`` sorted by probability.
    """
    states = traj.states if hasattr(traj, "states") else traj
    ids, probs = [], []
    with ag.no_grad():
        for h in states:
            logits = model.decode(Tensor(np.asarray(h)[sample : sample + 1])).data[0, position]
            p = ag._np_softmax(logits.astype(np.float64), -1)
            kk = min(k, p.shape[-1])
            top = np.argsort(-p, kind="stable")[:kk]
            ids.append(top)
            probs.append(p[top])
    return np.array(ids), np.array(probs)


def write_distance_tsv(path, values, label: str = "layer_or_iter") -> None:
    with open(path, "w") as f:
        f.write(f"{label}\tdistance\n")
        for i, v in enumerate(values):
            f.write(f"{i}\t{float(v):.8g}\n")


def write_pca_tsv(path, traj: Trajectory2D) -> None:
    with open(path, "w") as f:
        f.write(f"# explained\t{traj.explained[0]:.6g}\t{traj.explained[1]:.6g}\n")
        f.write("iter\tpc1\tpc2\n")
        for i, (a, b) in enumerate(traj.coords[:, :2]):
            f.write(f"{i}\t{a:.8g}\t{b:.8g}\n")
