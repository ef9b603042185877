"""Multi-subject neural datasets: reduction, splits, batching, synthesis.

Responses live as (n_samples, M, d_in) patch sequences per subject, with M
and d_in identical across subjects of one experiment.  PCA projections are
always fit on training rows only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .stimfeat import StimulusFeatureSet


class NeuroDataError(Exception):
    pass


@dataclass
class SubjectDataset:
    subject_id: str
    responses: np.ndarray  # (n_i, M, d_in)
    stimulus_ids: list
    labels: np.ndarray  # (n_i, C)

    def __post_init__(self):
        if self.responses.ndim != 3:
            raise NeuroDataError(f"responses must be 3-D, got shape {self.responses.shape}")
        n = self.responses.shape[0]
        if n < 1 or len(self.stimulus_ids) != n or self.labels.shape[0] != n:
            raise NeuroDataError("sample counts disagree within subject dataset")

    @property
    def n_samples(self):
        return self.responses.shape[0]


@dataclass
class Batch:
    patches: np.ndarray  # (B, M, d_in)
    subject_index: list  # subject ids, length B
    labels: np.ndarray  # (B, C)
    f_llv: np.ndarray  # (B, d_l)
    f_hlv: np.ndarray  # (B, d_h)
    stimulus_ids: list = field(default_factory=list)


@dataclass
class SplitSpec:
    mode: str  # same-stimuli | disjoint-stimuli
    counts: tuple | None = None  # (train, val, test) sample counts
    fractions: tuple | None = None  # (train, val, test) fractions
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("same-stimuli", "disjoint-stimuli"):
            raise NeuroDataError(f"unknown split mode {self.mode!r}")
        if (self.counts is None) == (self.fractions is None):
            raise NeuroDataError("exactly one of counts/fractions must be given")


@dataclass
class PcaProjection:
    mean: np.ndarray  # (d_roi,)
    components: np.ndarray  # (d_roi, target_dim)
    rank_deficient: bool

    def apply(self, block: np.ndarray) -> np.ndarray:
        return (block - self.mean) @ self.components


def pca_fit(train_rows: np.ndarray, target_dim: int) -> PcaProjection:
    n, d = train_rows.shape
    if target_dim > min(n, d):
        raise NeuroDataError(f"target_dim {target_dim} exceeds min(n, d) = {min(n, d)}")
    mean = train_rows.mean(axis=0)
    centered = train_rows - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    nonzero = int((s > s.max() * 1e-12).sum()) if s.size and s.max() > 0 else 0
    components = vt[:target_dim].T.copy()
    rank_deficient = nonzero < target_dim
    if rank_deficient:
        components[:, nonzero:] = 0.0
    return PcaProjection(mean, components, rank_deficient)


def pca_reduce(roi_blocks, target_dim: int, train_rows: np.ndarray):
    """Reduce each (subject, ROI) block to target_dim with train-fit PCA.

    `roi_blocks` is a list (per subject) of lists (per ROI) of (n_i, d_roi)
    arrays; `train_rows` gives the row indices used for fitting.  Returns the
    reduced blocks in the same nesting plus the fitted projections.
    """
    reduced, projections = [], []
    for blocks in roi_blocks:
        sub_red, sub_proj = [], []
        for block in blocks:
            proj = pca_fit(block[train_rows], target_dim)
            sub_red.append(proj.apply(block))
            sub_proj.append(proj)
        reduced.append(sub_red)
        projections.append(sub_proj)
    return reduced, projections


def zero_pad(block: np.ndarray, target_dim: int) -> np.ndarray:
    n, d = block.shape
    if d > target_dim:
        raise NeuroDataError(f"cannot pad width {d} down to {target_dim}")
    out = np.zeros((n, target_dim), dtype=block.dtype)
    out[:, :d] = block
    return out


def patchify_rois(reduced_blocks) -> np.ndarray:
    """Stack one subject's ROI blocks into an (n_i, M, d_in) patch sequence."""
    widths = {b.shape[1] for b in reduced_blocks}
    if len(widths) != 1:
        raise NeuroDataError(f"inconsistent ROI widths {sorted(widths)}")
    counts = {b.shape[0] for b in reduced_blocks}
    if len(counts) != 1:
        raise NeuroDataError("inconsistent ROI sample counts")
    return np.stack(reduced_blocks, axis=1)


def _resolve_counts(spec: SplitSpec, total: int) -> tuple:
    if spec.counts is not None:
        counts = tuple(int(c) for c in spec.counts)
    else:
        counts = tuple(int(round(f * total)) for f in spec.fractions)
    if sum(counts) > total or min(counts) < 0:
        raise NeuroDataError(f"infeasible split {counts} for {total} samples")
    return counts


def split_dataset(datasets: list, spec: SplitSpec) -> dict:
    """Return per-subject train/val/test row index arrays.

    same-stimuli: one shared stimulus permutation split into the three sets,
    identical across subjects.  disjoint-stimuli: a shared test pool plus
    pairwise-disjoint train/val stimuli across subjects.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "same-stimuli":
        ids0 = sorted(datasets[0].stimulus_ids)
        for ds in datasets[1:]:
            if sorted(ds.stimulus_ids) != ids0:
                raise NeuroDataError("same-stimuli mode requires identical stimulus sets")
        n_train, n_val, n_test = _resolve_counts(spec, len(ids0))
        perm = rng.permutation(len(ids0))
        id_split = {
            "train": {ids0[i] for i in perm[:n_train]},
            "val": {ids0[i] for i in perm[n_train : n_train + n_val]},
            "test": {ids0[i] for i in perm[n_train + n_val : n_train + n_val + n_test]},
        }
        out = {}
        for ds in datasets:
            out[ds.subject_id] = {
                part: np.array(
                    [i for i, sid in enumerate(ds.stimulus_ids) if sid in chosen], dtype=np.int64
                )
                for part, chosen in id_split.items()
            }
        return out

    # disjoint-stimuli: the shared pool is held out for test, remaining
    # stimuli are partitioned across subjects without overlap
    n_sub = len(datasets)
    per_counts = _resolve_counts(spec, datasets[0].n_samples)
    n_train, n_val, n_test = per_counts
    id_sets = [set(ds.stimulus_ids) for ds in datasets]
    shared = sorted(set.intersection(*id_sets))
    if len(shared) < n_test:
        raise NeuroDataError(f"only {len(shared)} shared stimuli, need {n_test} for test")
    test_ids = set(rng.permutation(shared)[:n_test].tolist())

    claimed: set = set(test_ids)
    out = {}
    order = rng.permutation(n_sub)
    for k in order:
        ds = datasets[k]
        avail = [i for i, sid in enumerate(ds.stimulus_ids) if sid not in claimed]
        if len(avail) < n_train + n_val:
            raise NeuroDataError(f"subject {ds.subject_id}: not enough unclaimed stimuli")
        pick = rng.permutation(len(avail))[: n_train + n_val]
        rows = [avail[i] for i in pick]
        claimed.update(ds.stimulus_ids[i] for i in rows)
        test_rows = [i for i, sid in enumerate(ds.stimulus_ids) if sid in test_ids]
        out[ds.subject_id] = {
            "train": np.sort(np.array(rows[:n_train], dtype=np.int64)),
            "val": np.sort(np.array(rows[n_train:], dtype=np.int64)),
            "test": np.sort(np.array(test_rows, dtype=np.int64)),
        }
    return out


def gather_batch(datasets_by_id, features: StimulusFeatureSet, members) -> Batch:
    """Assemble an aligned batch from (subject_id, row) pairs."""
    patches, subject_index, labels, stim_ids = [], [], [], []
    for sid, row in members:
        ds = datasets_by_id[sid]
        patches.append(ds.responses[row])
        subject_index.append(sid)
        labels.append(ds.labels[row])
        stim_ids.append(ds.stimulus_ids[row])
    f_llv, f_hlv, feat_labels = features.rows(stim_ids)
    labels = np.stack(labels)
    if not np.array_equal(labels, feat_labels):
        raise NeuroDataError("batch label rows disagree with feature-set labels")
    return Batch(np.stack(patches), subject_index, labels, f_llv, f_hlv, stim_ids)


def make_batches(datasets: list, features: StimulusFeatureSet, index_sets: dict, batch_size: int, rng: np.random.Generator):
    """One epoch of globally shuffled cross-subject batches (short tail dropped)."""
    if batch_size < 2:
        raise NeuroDataError("batch size must be >= 2 for the RSA terms")
    pool = []
    for ds in datasets:
        for row in index_sets[ds.subject_id]["train"]:
            pool.append((ds.subject_id, int(row)))
    if len(pool) < batch_size:
        raise NeuroDataError(f"pool of {len(pool)} samples is smaller than batch size {batch_size}")
    by_id = {ds.subject_id: ds for ds in datasets}
    order = rng.permutation(len(pool))
    batches = []
    for start in range(0, len(pool) - batch_size + 1, batch_size):
        members = [pool[i] for i in order[start : start + batch_size]]
        batches.append(gather_batch(by_id, features, members))
    return batches


def synth_generate(
    n_subjects: int,
    n_per_subject: int,
    n_patches: int,
    patch_dim: int,
    features: StimulusFeatureSet,
    snr: float,
    seed: int,
    subject_scramble: float = 1.0,
) -> tuple:
    """Synthesize per-subject responses from a shared stimulus latent.

    The latent u concatenates a style code (from f_llv) and a semantic code
    (from labels).  Each subject observes reshape(O_n u) + noise, where O_n
    composes a subject patch permutation with a within-patch rotation whose
    strength is `subject_scramble` (0 = identity, 1 = full random rotation).
    Returns (datasets, ground_truth).
    """
    if snr <= 0:
        raise NeuroDataError("snr must be positive")
    rng = np.random.default_rng(seed)
    n_s, n_classes = features.labels.shape
    d_total = n_patches * patch_dim
    d_sem = d_total // 2
    d_style = d_total - d_sem

    style_map = rng.normal(size=(features.f_llv.shape[1], d_style)) / np.sqrt(features.f_llv.shape[1])
    sem_codes = rng.normal(size=(n_classes, d_sem)) / np.sqrt(n_classes)
    u = np.concatenate([features.f_llv @ style_map, features.labels @ sem_codes], axis=1)

    signal_rms = float(np.sqrt((u**2).mean()))
    noise_std = signal_rms / snr if np.isfinite(snr) else 0.0

    datasets, truth = [], {"style_map": style_map, "sem_codes": sem_codes, "subjects": {}}
    for n in range(n_subjects):
        perm = rng.permutation(n_patches)
        # rotation strength is controlled on the skew-symmetric generator, so
        # any subject_scramble yields an exactly orthonormal map
        a = rng.normal(size=(patch_dim, patch_dim)) / np.sqrt(patch_dim)
        skew = (a - a.T) / 2.0
        rot = expm(subject_scramble * skew) if subject_scramble > 0.0 else np.eye(patch_dim)
        rows = rng.permutation(n_s)[:n_per_subject]
        base = u[rows].reshape(n_per_subject, n_patches, patch_dim)
        resp = base[:, perm, :] @ rot.T
        resp = resp + noise_std * rng.normal(size=resp.shape)
        sid = f"sub_{n:02d}"
        truth["subjects"][sid] = {"perm": perm, "rot": rot, "rows": rows}
        datasets.append(
            SubjectDataset(
                sid,
                resp,
                [features.stimulus_ids[i] for i in rows],
                features.labels[rows].copy(),
            )
        )
    return datasets, truth
