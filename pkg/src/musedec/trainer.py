"""Adam training loop, early stopping, grid search, and method comparison.

All randomness flows through one numpy Generator seeded from the config, so
identical (config, data, seed) produce bitwise-identical checkpoints in
float64 mode, and a saved checkpoint resumes bitwise-identically.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore, metrics, model, msed, neurodata, objectives
from .model import EncoderConfig
from .neurodata import Batch
from .objectives import LossWeights
from .stimfeat import StimulusFeatureSet, compute_stimulus_rsm

METHOD_VARIANT = {
    "clip-mused": "clip-mused",
    "mapping-based": "clip-mused",
    "clip-ss-vit": "clip-mused",
    "ss-vit": "ss-vit",
    "ss-mlp": "ss-mlp",
    "ms-smodel": "ms-smodel",
    "ms-emb": "ms-emb",
}
SINGLE_SUBJECT_METHODS = ("ss-vit", "ss-mlp", "clip-ss-vit")
GUIDED_VARIANTS = ("clip-mused",)


class TrainerError(Exception):
    pass


class TrainingDiverged(TrainerError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    method: str = "clip-mused"
    grid: dict | None = None  # name -> list of candidate lambda values
    grad_clip: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainerError("learning rate must be positive")
        if self.batch_size < 2:
            raise TrainerError("batch size must be >= 2")
        if self.patience < 1:
            raise TrainerError("patience must be >= 1")
        if self.method not in METHOD_VARIANT:
            raise TrainerError(
                f"unknown method {self.method!r}; valid: {sorted(METHOD_VARIANT)}"
            )


# regimes from the two dataset-scale experiments
HCP_PRESET = TrainConfig(learning_rate=0.001, batch_size=64, weights=objectives.HCP_WEIGHTS)
NSD_PRESET = TrainConfig(learning_rate=0.0001, batch_size=64, weights=objectives.NSD_WEIGHTS)


@dataclass
class TrainData:
    datasets: list
    features: StimulusFeatureSet
    splits: dict  # subject_id -> {train/val/test: row indices}

    def restrict(self, subject_id: str, train_limit: int | None = None) -> "TrainData":
        ds = [d for d in self.datasets if d.subject_id == subject_id]
        if not ds:
            raise TrainerError(f"no dataset for subject {subject_id!r}")
        splits = {subject_id: {k: np.array(v) for k, v in self.splits[subject_id].items()}}
        if train_limit is not None:
            splits[subject_id]["train"] = splits[subject_id]["train"][:train_limit]
        return TrainData(ds, self.features, splits)


@dataclass
class Checkpoint:
    params: dict
    m: dict
    v: dict
    t: int
    epoch: int
    best_epoch: int
    best_val_map: float
    best_params: dict
    epochs_since_improve: int
    rng_state: dict
    train_cfg: TrainConfig
    model_cfg: EncoderConfig
    loss_history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    events: list = field(default_factory=list)
    stopped: bool = False


@dataclass
class RunReport:
    method: str
    seed: int
    epochs_run: int
    best_epoch: int
    best_val: dict
    loss_history: list
    val_history: list
    events: list


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params, grads, moments, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    """Bias-corrected Adam update over every parameter (in place).

    Returns (params, moments, skipped): a non-finite gradient skips the whole
    step so one bad batch cannot poison the parameters.
    """
    if t < 1:
        raise TrainerError("Adam step count must be >= 1")
    m, v = moments
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            return params, moments, True
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        mhat = m[name] / bc1
        vhat = v[name] / bc2
        params[name] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return params, moments, False


def _clip_grads(grads, max_norm):
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return grads


# ---------------------------------------------------------------------------
# training graphs


def _build_loss_graph(cfg, weights: LossWeights, subject_index, batch, mapping):
    g = model.build_forward_graph(cfg, subject_index, batch)
    y = g.input("labels")
    parts = {"loss_c": objectives.add_bce_loss(g, g.outputs["y_hat"], y, cfg.n_classes)}
    if cfg.variant == "clip-mused":
        z_llv, z_hlv = g.outputs["z_llv"], g.outputs["z_hlv"]
        parts["loss_perp"] = objectives.add_orthogonality_loss(g, z_llv, z_hlv, batch)
        if mapping:
            parts["loss_map"] = objectives.add_mapping_loss(
                g, z_llv, z_hlv, g.input("f_llv"), g.input("f_hlv"), batch
            )
        else:
            parts["loss_llv"] = objectives.add_rsa_loss(g, g.input("m_llv"), z_llv, batch)
            parts["loss_hlv"] = objectives.add_rsa_loss(g, g.input("m_hlv"), z_hlv, batch)
        total = objectives.add_total_loss(g, parts, weights, mapping)
    else:
        total = parts["loss_c"]
    for name, node in parts.items():
        g.mark_output(name, node)
    g.mark_output("loss", total)
    return g


def _batch_bindings(batch: Batch, cfg: EncoderConfig, mapping: bool, rsm_warnings):
    bindings = {"patches": batch.patches, "labels": batch.labels}
    if cfg.variant == "clip-mused":
        if mapping:
            bindings["f_llv"] = batch.f_llv
            bindings["f_hlv"] = batch.f_hlv
        else:
            bindings["m_llv"] = compute_stimulus_rsm(batch.f_llv, warn_counter=rsm_warnings)
            bindings["m_hlv"] = compute_stimulus_rsm(batch.f_hlv, warn_counter=rsm_warnings)
    return bindings


# ---------------------------------------------------------------------------
# prediction


def predict(params, cfg: EncoderConfig, data: TrainData, split: str, chunk: int = 256):
    """Scores/labels over one split, pooled across subjects (row-aligned)."""
    scores, labels = [], []
    graph_cache = {}
    for ds in data.datasets:
        rows = data.splits[ds.subject_id][split]
        for start in range(0, len(rows), chunk):
            sel = rows[start : start + chunk]
            b = len(sel)
            key = (ds.subject_id, b)
            if key not in graph_cache:
                graph_cache[key] = model.build_forward_graph(cfg, [ds.subject_id] * b, b)
            g = graph_cache[key]
            out = diffcore.evaluate(g, {**params, "patches": ds.responses[sel]})
            scores.append(out["y_hat"])
            labels.append(ds.labels[sel])
    return np.concatenate(scores), np.concatenate(labels)


def evaluate_split(params, cfg, data: TrainData, split: str) -> metrics.EvalResult:
    scores, labels = predict(params, cfg, data, split)
    return metrics.evaluate_scores(scores, labels)


# ---------------------------------------------------------------------------
# training


def _copy_params(params):
    return {k: v.copy() for k, v in params.items()}


def _init_state(cfg: TrainConfig, model_cfg: EncoderConfig, data: TrainData) -> Checkpoint:
    rng = np.random.default_rng(cfg.seed)
    subject_ids = [ds.subject_id for ds in data.datasets]
    params = model.init_params(model_cfg, subject_ids, rng)
    if cfg.method == "mapping-based":
        params.update(
            model.init_mapping_params(
                model_cfg.d_model, data.features.f_llv.shape[1], data.features.f_hlv.shape[1], rng
            )
        )
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return Checkpoint(
        params=params,
        m=zeros,
        v={k: np.zeros_like(vv) for k, vv in params.items()},
        t=0,
        epoch=0,
        best_epoch=-1,
        best_val_map=-np.inf,
        best_params=_copy_params(params),
        epochs_since_improve=0,
        rng_state=rng.bit_generator.state,
        train_cfg=cfg,
        model_cfg=model_cfg,
    )


def train(
    cfg: TrainConfig,
    model_cfg: EncoderConfig,
    data: TrainData,
    out_dir=None,
    state: Checkpoint | None = None,
):
    """Train one model; returns (final Checkpoint, RunReport).

    Passing a loaded `state` resumes that checkpoint bitwise-identically.
    """
    if METHOD_VARIANT[cfg.method] != model_cfg.variant:
        raise TrainerError(
            f"method {cfg.method!r} needs model variant {METHOD_VARIANT[cfg.method]!r}"
        )
    mapping = cfg.method == "mapping-based"
    if state is None:
        state = _init_state(cfg, model_cfg, data)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state

    graph_cache: dict = {}
    rsm_warnings = [0]

    for epoch in range(state.epoch, cfg.max_epochs):
        try:
            batches = neurodata.make_batches(
                data.datasets, data.features, data.splits, cfg.batch_size, rng
            )
            part_sums: dict = {}
            for batch in batches:
                key = (tuple(batch.subject_index), len(batch.subject_index))
                if key not in graph_cache:
                    graph_cache[key] = _build_loss_graph(
                        model_cfg, cfg.weights, batch.subject_index, len(batch.subject_index), mapping
                    )
                g = graph_cache[key]
                bindings = {**state.params, **_batch_bindings(batch, model_cfg, mapping, rsm_warnings)}
                outputs, grads = diffcore.evaluate_with_gradient(g, bindings, "loss")
                if cfg.grad_clip is not None:
                    grads = _clip_grads(grads, cfg.grad_clip)
                state.t += 1
                _, _, skipped = adam_step(
                    state.params, grads, (state.m, state.v), cfg.learning_rate, t=state.t
                )
                if skipped:
                    state.events.append({"epoch": epoch, "step": state.t, "event": "nonfinite-grad-skip"})
                for name in outputs:
                    if name.startswith("loss"):
                        part_sums[name] = part_sums.get(name, 0.0) + float(outputs[name][0])
        except diffcore.NonFiniteOutput as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc

        n_batches = max(1, len(batches))
        state.loss_history.append(
            {"epoch": epoch, **{k: s / n_batches for k, s in part_sums.items()}}
        )
        val = evaluate_split(state.params, model_cfg, data, "val")
        state.val_history.append({"epoch": epoch, **val.as_dict()})
        if val.map > state.best_val_map:
            state.best_val_map = val.map
            state.best_epoch = epoch
            state.best_params = _copy_params(state.params)
            state.epochs_since_improve = 0
        else:
            state.epochs_since_improve += 1
        state.epoch = epoch + 1
        state.rng_state = rng.bit_generator.state
        if state.epochs_since_improve >= cfg.patience:
            state.stopped = True
            break

    if rsm_warnings[0]:
        state.events.append({"event": "degenerate-rsm-rows", "count": rsm_warnings[0]})
    report = RunReport(
        method=cfg.method,
        seed=cfg.seed,
        epochs_run=state.epoch,
        best_epoch=state.best_epoch,
        best_val=state.val_history[state.best_epoch] if state.best_epoch >= 0 else {},
        loss_history=state.loss_history,
        val_history=state.val_history,
        events=state.events,
    )
    if out_dir is not None:
        _write_run_dir(Path(out_dir), cfg, model_cfg, state, report)
    return state, report


# ---------------------------------------------------------------------------
# run directory + checkpoint IO


def _cfg_dict(cfg):
    d = dataclasses.asdict(cfg)
    return d


def _write_run_dir(out_dir: Path, cfg, model_cfg, state: Checkpoint, report: RunReport):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump({"train": _cfg_dict(cfg), "model": _cfg_dict(model_cfg)}, fh, indent=2, default=str)
    with open(out_dir / "losses.csv", "w") as fh:
        keys = sorted({k for row in state.loss_history for k in row if k != "epoch"})
        fh.write("epoch," + ",".join(keys) + "\n")
        for row in state.loss_history:
            fh.write(str(row["epoch"]) + "," + ",".join(f"{row.get(k, '')}" for k in keys) + "\n")
    with open(out_dir / "metrics.csv", "w") as fh:
        fh.write("epoch,map,auc,hamming\n")
        for row in state.val_history:
            fh.write(f"{row['epoch']},{row['map']},{row['auc']},{row['hamming']}\n")
    with open(out_dir / "report.json", "w") as fh:
        json.dump(dataclasses.asdict(report), fh, indent=2, default=str)
    save_checkpoint(out_dir / "checkpoint", state)


def _safe_name(name: str) -> str:
    return name.replace("/", "__")


def save_checkpoint(ckpt_dir, state: Checkpoint):
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for group, tensors in (
        ("params", state.params),
        ("best_params", state.best_params),
        ("m", state.m),
        ("v", state.v),
    ):
        gdir = ckpt_dir / group
        gdir.mkdir(exist_ok=True)
        for name, arr in tensors.items():
            msed.write_tensor(gdir / f"{_safe_name(name)}.msed", arr)
    header = {
        "t": state.t,
        "epoch": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val_map": state.best_val_map,
        "epochs_since_improve": state.epochs_since_improve,
        "rng_state": state.rng_state,
        "stopped": state.stopped,
        "param_names": list(state.params.keys()),
        "train_cfg": _cfg_dict(state.train_cfg),
        "model_cfg": _cfg_dict(state.model_cfg),
        "loss_history": state.loss_history,
        "val_history": state.val_history,
        "events": state.events,
    }
    with open(ckpt_dir / "header.json", "w") as fh:
        json.dump(header, fh, indent=2, default=str)


def load_checkpoint(ckpt_dir) -> Checkpoint:
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "header.json") as fh:
        header = json.load(fh)
    names = header["param_names"]

    def load_group(group):
        return {
            name: msed.read_tensor(ckpt_dir / group / f"{_safe_name(name)}.msed") for name in names
        }

    tc = dict(header["train_cfg"])
    tc["weights"] = LossWeights(**tc["weights"])
    train_cfg = TrainConfig(**tc)
    mc = dict(header["model_cfg"])
    if mc.get("conv"):
        conv = dict(mc["conv"])
        for k in ("input_shape", "channels", "kernels", "strides"):
            conv[k] = tuple(conv[k])
        mc["conv"] = model.ConvConfig(**conv)
    model_cfg = EncoderConfig(**mc)
    rng_state = header["rng_state"]
    # JSON round-trips the PCG64 state ints as Python ints; restore exactly
    rng_state["state"] = {k: int(v) for k, v in rng_state["state"].items()}
    return Checkpoint(
        params=load_group("params"),
        m=load_group("m"),
        v=load_group("v"),
        t=header["t"],
        epoch=header["epoch"],
        best_epoch=header["best_epoch"],
        best_val_map=header["best_val_map"],
        best_params=load_group("best_params"),
        epochs_since_improve=header["epochs_since_improve"],
        rng_state=rng_state,
        train_cfg=train_cfg,
        model_cfg=model_cfg,
        loss_history=header["loss_history"],
        val_history=header["val_history"],
        events=header["events"],
        stopped=header["stopped"],
    )


# ---------------------------------------------------------------------------
# grid search and comparison


def grid_search(cfg: TrainConfig, model_cfg: EncoderConfig, data: TrainData):
    """Train every lambda combination with the same seed; best validation mAP wins."""
    if not cfg.grid:
        raise TrainerError("grid_search needs non-empty grid lists")
    names = sorted(cfg.grid.keys())
    grids = [cfg.grid[n] for n in names]
    if any(len(g) == 0 for g in grids):
        raise TrainerError("grid lists must be non-empty")
    cells = []
    best = None
    for values in itertools.product(*grids):
        weights = replace(cfg.weights, **dict(zip(names, values)))
        cell_cfg = replace(cfg, weights=weights, grid=None)
        state, report = train(cell_cfg, model_cfg, data)
        cell = {
            "weights": dataclasses.asdict(weights),
            "val_map": state.best_val_map,
            "val": report.best_val,
        }
        cells.append(cell)
        if best is None or state.best_val_map > best[0]:
            best = (state.best_val_map, weights, state, report)
    return {"best_weights": best[1], "best_state": best[2], "cells": cells}


def compare(
    methods: list,
    cfg: TrainConfig,
    model_cfg: EncoderConfig,
    data: TrainData,
    seeds: list,
    split: str = "test",
    method_overrides: dict | None = None,
    paired: bool = True,
    alpha: float = 0.05,
):
    """Train each method per seed; aggregate metrics and test significance
    of clip-mused against every other method (Holm-corrected per metric)."""
    for m_name in methods:
        if m_name not in METHOD_VARIANT:
            raise TrainerError(f"unknown method {m_name!r}")
    method_overrides = method_overrides or {}
    per_method: dict = {}
    for m_name in methods:
        variant = METHOD_VARIANT[m_name]
        mcfg = replace(model_cfg, variant=variant)
        rows = []
        for seed in seeds:
            run_cfg = replace(cfg, method=m_name, seed=seed)
            if m_name in SINGLE_SUBJECT_METHODS:
                limit = method_overrides.get(m_name, {}).get("train_limit")
                subj_results = []
                for ds in data.datasets:
                    sub_data = data.restrict(ds.subject_id, train_limit=limit)
                    state, _ = train(run_cfg, mcfg, sub_data)
                    res = evaluate_split(state.best_params, mcfg, sub_data, split)
                    subj_results.append(res.as_dict())
                rows.append(
                    {k: float(np.mean([r[k] for r in subj_results])) for k in ("map", "auc", "hamming")}
                )
            else:
                state, _ = train(run_cfg, mcfg, data)
                res = evaluate_split(state.best_params, mcfg, data, split)
                rows.append(res.as_dict())
        per_method[m_name] = rows

    summary = {}
    for m_name, rows in per_method.items():
        summary[m_name] = {
            k: {"mean": float(np.mean([r[k] for r in rows])), "std": float(np.std([r[k] for r in rows]))}
            for k in ("map", "auc", "hamming")
        }
    significance = {}
    if "clip-mused" in per_method:
        others = [m_name for m_name in methods if m_name != "clip-mused"]
        for metric_name in ("map", "auc", "hamming"):
            ours = [r[metric_name] for r in per_method["clip-mused"]]
            raw = []
            for m_name in others:
                theirs = [r[metric_name] for r in per_method[m_name]]
                raw.append(metrics.t_test(ours, theirs, paired=paired).p_value)
            if raw:
                adjusted, reject = metrics.holm_bonferroni(raw, alpha=alpha)
                significance[metric_name] = {
                    m_name: {"p_raw": raw[i], "p_adjusted": adjusted[i], "significant": reject[i]}
                    for i, m_name in enumerate(others)
                }
    return {
        "methods": methods,
        "seeds": list(seeds),
        "split": split,
        "paired": paired,
        "per_run": per_method,
        "summary": summary,
        "significance": significance,
        "columns": {"map": "up", "auc": "up", "hamming": "down"},
    }
