"""Subject-token Transformer encoder, baseline variants, and introspection.

The clip-mused variant prepends two learnable per-subject tokens (low-level,
high-level) to the patch sequence; every other parameter is shared across
subjects.  Baselines cover class-token ViTs (ss-vit, ms-smodel), an identity
token model (ms-emb), and a flat MLP (ss-mlp).  All forward/backward passes
run through the diffcore graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore
from .diffcore import Graph, cosine_similarity_matrix

VARIANTS = ("clip-mused", "ss-vit", "ms-smodel", "ms-emb", "ss-mlp")
INIT_STD = 0.02
LN_EPS = 1e-5


class ModelConfigError(Exception):
    pass


class UnknownSubject(Exception):
    pass


@dataclass
class ConvConfig:
    """Strided 3D conv front-end turning volumes into patch sequences."""

    input_shape: tuple  # (D1, D2, D3)
    channels: tuple  # output channels per layer
    kernels: tuple  # cubic kernel size per layer
    strides: tuple  # stride per layer
    in_channels: int = 1

    def output_shape(self):
        dims = list(self.input_shape)
        for k, s in zip(self.kernels, self.strides):
            for ax in range(3):
                dims[ax] = (dims[ax] - k) // s + 1
                if dims[ax] < 1:
                    raise ModelConfigError("conv config yields zero spatial cells")
        return tuple(dims), self.channels[-1]

    def patch_geometry(self):
        dims, cout = self.output_shape()
        return int(np.prod(dims)), cout  # (M, d_in)


@dataclass
class EncoderConfig:
    layers: int
    heads: int
    d_model: int
    patch_dim: int
    patch_count: int
    n_classes: int
    residual_variant: str = "paper"  # paper | conventional
    variant: str = "clip-mused"
    mlp_ratio: int = 4
    head_hidden: int | None = None  # classifier hidden width, defaults to d_model
    conv: ConvConfig | None = None
    interleave_conv: bool = False  # alternate conv/transformer layers: not implemented

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelConfigError(f"unknown variant {self.variant!r}")
        if self.residual_variant not in ("paper", "conventional"):
            raise ModelConfigError(f"unknown residual variant {self.residual_variant!r}")
        if self.layers < 1 or self.patch_count < 1:
            raise ModelConfigError("layers and patch_count must be >= 1")
        if self.d_model % self.heads != 0:
            raise ModelConfigError("d_model must be divisible by heads")
        if self.head_hidden is None:
            self.head_hidden = self.d_model
        if self.head_hidden < 1:
            raise ModelConfigError("classifier hidden width must be >= 1")
        if self.interleave_conv:
            raise ModelConfigError("interleaved conv/transformer layers are not implemented")
        if self.conv is not None:
            m, d_in = self.conv.patch_geometry()
            if (m, d_in) != (self.patch_count, self.patch_dim):
                raise ModelConfigError(
                    f"conv front-end yields (M={m}, d_in={d_in}), "
                    f"config declares (M={self.patch_count}, d_in={self.patch_dim})"
                )

    @property
    def n_lead_tokens(self):
        if self.variant in ("clip-mused", "ms-emb"):
            return 2
        if self.variant == "ss-mlp":
            return 0
        return 1

    @property
    def seq_len(self):
        return self.patch_count + self.n_lead_tokens


@dataclass
class AttentionRecord:
    layer: int
    weights: np.ndarray  # (B, H, T, T)
    n_lead_tokens: int


def param_shapes(cfg: EncoderConfig, subject_ids: list) -> dict:
    """Shape of every named parameter; token rows are the only per-subject ones."""
    d = cfg.d_model
    shapes = {}
    if cfg.variant == "ss-mlp":
        flat = cfg.patch_count * cfg.patch_dim
        shapes["mlp/W1"] = (flat, cfg.head_hidden)
        shapes["mlp/b1"] = (cfg.head_hidden,)
        shapes["mlp/W2"] = (cfg.head_hidden, cfg.n_classes)
        shapes["mlp/b2"] = (cfg.n_classes,)
        return shapes

    shapes["embed/E"] = (cfg.patch_dim, d)
    shapes["embed/E_pos"] = (cfg.seq_len, d)
    if cfg.conv is not None:
        cin = cfg.conv.in_channels
        for i, (cout, k) in enumerate(zip(cfg.conv.channels, cfg.conv.kernels)):
            shapes[f"conv{i}/w"] = (k, k, k, cin, cout)
            shapes[f"conv{i}/b"] = (cout,)
            cin = cout
    for l in range(cfg.layers):
        p = f"layer{l}"
        shapes[f"{p}/ln1/gamma"] = (d,)
        shapes[f"{p}/ln1/beta"] = (d,)
        for w in ("Wq", "Wk", "Wv", "Wo"):
            shapes[f"{p}/attn/{w}"] = (d, d)
        for b in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}/attn/{b}"] = (d,)
        shapes[f"{p}/ln2/gamma"] = (d,)
        shapes[f"{p}/ln2/beta"] = (d,)
        hidden = cfg.mlp_ratio * d
        shapes[f"{p}/mlp/W1"] = (d, hidden)
        shapes[f"{p}/mlp/b1"] = (hidden,)
        shapes[f"{p}/mlp/W2"] = (hidden, d)
        shapes[f"{p}/mlp/b2"] = (d,)
    shapes["final_ln/gamma"] = (d,)
    shapes["final_ln/beta"] = (d,)

    head_in = 2 * d if cfg.variant == "clip-mused" else d
    shapes["head/W1"] = (head_in, cfg.head_hidden)
    shapes["head/b1"] = (cfg.head_hidden,)
    shapes["head/W2"] = (cfg.head_hidden, cfg.n_classes)
    shapes["head/b2"] = (cfg.n_classes,)

    if cfg.variant in ("ss-vit", "ms-smodel", "ms-emb"):
        shapes["token/class"] = (d,)
    if cfg.variant == "clip-mused":
        for sid in subject_ids:
            shapes[f"token/llv/{sid}"] = (d,)
            shapes[f"token/hlv/{sid}"] = (d,)
    elif cfg.variant == "ms-emb":
        for sid in subject_ids:
            shapes[f"token/emb/{sid}"] = (d,)
    return shapes


def init_params(cfg: EncoderConfig, subject_ids: list, rng: np.random.Generator) -> dict:
    """Gaussian std-0.02 weights and tokens, zero biases, unit LN gains."""
    params = {}
    for name, shape in param_shapes(cfg, subject_ids).items():
        if name.endswith("/gamma"):
            params[name] = np.ones(shape)
        elif name.endswith(("/beta", "b1", "b2", "bq", "bk", "bv", "bo", "/b")):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, INIT_STD, size=shape)
    return params


def init_mapping_params(d_model: int, d_l: int, d_h: int, rng: np.random.Generator) -> dict:
    return {
        "map/Pl": rng.normal(0.0, INIT_STD, size=(d_model, d_l)),
        "map/Ph": rng.normal(0.0, INIT_STD, size=(d_model, d_h)),
    }


def shared_param_count(cfg: EncoderConfig) -> int:
    shapes = param_shapes(cfg, [])
    return int(sum(np.prod(s) for s in shapes.values()))


def total_param_count(cfg: EncoderConfig, n_subjects: int) -> int:
    per_subject = {"clip-mused": 2, "ms-emb": 1}.get(cfg.variant, 0)
    return shared_param_count(cfg) + per_subject * n_subjects * cfg.d_model


def count_params(params: dict) -> int:
    return int(sum(v.size for v in params.values()))


# ---------------------------------------------------------------------------
# graph construction


def _affine_ln(g: Graph, x, gamma_name, beta_name):
    normed = g.layer_norm(x, eps=LN_EPS)
    return g.add(g.elementwise_mul(normed, g.param(gamma_name)), g.param(beta_name))


def _linear(g: Graph, x, w_name, b_name):
    return g.add(g.matmul(x, g.param(w_name)), g.param(b_name))


def _mhsa(g: Graph, x, prefix: str, cfg: EncoderConfig, batch: int, record_attn: bool):
    d, h = cfg.d_model, cfg.heads
    dh = d // h
    t = cfg.seq_len
    q = _linear(g, x, f"{prefix}/Wq", f"{prefix}/bq")
    k = _linear(g, x, f"{prefix}/Wk", f"{prefix}/bk")
    v = _linear(g, x, f"{prefix}/Wv", f"{prefix}/bv")

    def heads(node):
        r = g.reshape(node, (batch, t, h, dh))
        return g.transpose(r, (0, 2, 1, 3))  # (B, H, T, dh)

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = g.scale(g.matmul(qh, g.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = g.softmax_rows(scores)  # (B, H, T, T)
    ctx = g.matmul(attn, vh)
    merged = g.reshape(g.transpose(ctx, (0, 2, 1, 3)), (batch, t, d))
    out = _linear(g, merged, f"{prefix}/Wo", f"{prefix}/bo")
    return out, (attn if record_attn else None)


def _encoder_block(g: Graph, z_prev, layer: int, cfg: EncoderConfig, batch: int, record_attn: bool):
    ln1 = _affine_ln(g, z_prev, f"layer{layer}/ln1/gamma", f"layer{layer}/ln1/beta")
    attn_out, attn = _mhsa(g, ln1, f"layer{layer}/attn", cfg, batch, record_attn)
    z_mid = g.add(attn_out, z_prev)
    ln2 = _affine_ln(g, z_mid, f"layer{layer}/ln2/gamma", f"layer{layer}/ln2/beta")
    h1 = g.gelu(_linear(g, ln2, f"layer{layer}/mlp/W1", f"layer{layer}/mlp/b1"))
    mlp_out = _linear(g, h1, f"layer{layer}/mlp/W2", f"layer{layer}/mlp/b2")
    # Eq-faithful residual routes the block input into the second residual;
    # "conventional" uses the attention output instead
    residual = z_prev if cfg.residual_variant == "paper" else z_mid
    return g.add(mlp_out, residual), attn


def _subject_token_rows(g: Graph, prefix: str, subject_index: list, d: int):
    parts = [g.reshape(g.param(f"{prefix}/{sid}"), (1, 1, d)) for sid in subject_index]
    return g.concat(parts, axis=0)  # (B, 1, d)


def _tiled_shared_token(g: Graph, name: str, batch: int, d: int):
    tok = g.reshape(g.param(name), (1, 1, d))
    return g.add(tok, g.const(np.zeros((batch, 1, d))))


def _conv_front_end(g: Graph, volumes, cfg: EncoderConfig, batch: int):
    x = volumes
    for i in range(len(cfg.conv.channels)):
        x = g.conv3d(x, g.param(f"conv{i}/w"), cfg.conv.strides[i])
        x = g.gelu(g.add(x, g.param(f"conv{i}/b")))
    return g.reshape(x, (batch, cfg.patch_count, cfg.patch_dim))


def _classifier(g: Graph, z, cfg: EncoderConfig):
    h = g.gelu(_linear(g, z, "head/W1", "head/b1"))
    return g.sigmoid(_linear(g, h, "head/W2", "head/b2"))


def build_forward_graph(
    cfg: EncoderConfig,
    subject_index: list,
    batch: int,
    want_attention: bool = False,
) -> Graph:
    """Forward graph for one batch: inputs 'patches' (or 'volumes'), outputs
    'y_hat' plus 'z_llv'/'z_hlv' (clip-mused) or 'z' (class-token variants)."""
    g = Graph()
    d = cfg.d_model

    if cfg.variant == "ss-mlp":
        patches = g.input("patches")
        flat = g.reshape(patches, (batch, cfg.patch_count * cfg.patch_dim))
        h = g.gelu(_linear(g, flat, "mlp/W1", "mlp/b1"))
        g.mark_output("y_hat", g.sigmoid(_linear(g, h, "mlp/W2", "mlp/b2")))
        g.mark_output("z", h)
        return g

    if cfg.conv is not None:
        patches = _conv_front_end(g, g.input("volumes"), cfg, batch)
    else:
        patches = g.input("patches")
    embedded = g.matmul(patches, g.param("embed/E"))  # (B, M, d)

    if cfg.variant == "clip-mused":
        lead = [
            _subject_token_rows(g, "token/llv", subject_index, d),
            _subject_token_rows(g, "token/hlv", subject_index, d),
        ]
    elif cfg.variant == "ms-emb":
        lead = [
            _tiled_shared_token(g, "token/class", batch, d),
            _subject_token_rows(g, "token/emb", subject_index, d),
        ]
    else:  # ss-vit, ms-smodel
        lead = [_tiled_shared_token(g, "token/class", batch, d)]

    z = g.add(g.concat(lead + [embedded], axis=1), g.param("embed/E_pos"))
    for l in range(cfg.layers):
        z, attn = _encoder_block(g, z, l, cfg, batch, want_attention)
        if want_attention and attn is not None:
            g.mark_output(f"attn/{l}", attn)

    if cfg.variant == "clip-mused":
        z_llv = _affine_ln(g, g.slice_row(z, 0), "final_ln/gamma", "final_ln/beta")
        z_hlv = _affine_ln(g, g.slice_row(z, 1), "final_ln/gamma", "final_ln/beta")
        g.mark_output("z_llv", z_llv)
        g.mark_output("z_hlv", z_hlv)
        g.mark_output("y_hat", _classifier(g, g.concat([z_llv, z_hlv], axis=1), cfg))
    else:
        z_out = _affine_ln(g, g.slice_row(z, 0), "final_ln/gamma", "final_ln/beta")
        g.mark_output("z", z_out)
        g.mark_output("y_hat", _classifier(g, z_out, cfg))
    return g


def _check_subjects(cfg, subject_index, params):
    if cfg.variant == "clip-mused":
        missing = [s for s in subject_index if f"token/llv/{s}" not in params]
    elif cfg.variant == "ms-emb":
        missing = [s for s in subject_index if f"token/emb/{s}" not in params]
    else:
        missing = []
    if missing:
        raise UnknownSubject(f"no tokens for subjects {sorted(set(missing))}")


def encode(patches: np.ndarray, subject_index: list, params: dict, cfg: EncoderConfig, want_attention: bool = False):
    """Run the clip-mused encoder; returns (z_llv, z_hlv, attention records)."""
    if cfg.variant != "clip-mused":
        raise ModelConfigError("encode() is the clip-mused path; use forward_baseline")
    _check_subjects(cfg, subject_index, params)
    batch = patches.shape[0]
    g = build_forward_graph(cfg, subject_index, batch, want_attention)
    out = diffcore.evaluate(g, {**params, "patches": patches})
    records = [
        AttentionRecord(l, out[f"attn/{l}"], cfg.n_lead_tokens)
        for l in range(cfg.layers)
        if f"attn/{l}" in out
    ]
    return out["z_llv"], out["z_hlv"], records


def classify(z_llv: np.ndarray, z_hlv: np.ndarray, params: dict, cfg: EncoderConfig) -> np.ndarray:
    if z_llv.shape[0] != z_hlv.shape[0]:
        raise ModelConfigError("batch sizes of the two representations differ")
    g = Graph()
    z = g.concat([g.input("z_llv"), g.input("z_hlv")], axis=1)
    g.mark_output("y_hat", _classifier(g, z, cfg))
    head = {k: v for k, v in params.items() if k.startswith("head/")}
    return diffcore.evaluate(g, {**head, "z_llv": z_llv, "z_hlv": z_hlv})["y_hat"]


def forward_baseline(patches: np.ndarray, subject_index: list, params: dict, cfg: EncoderConfig, want_attention: bool = False):
    """Forward pass for the baseline variants; returns (z, y_hat, attention)."""
    if cfg.variant not in ("ss-vit", "ms-smodel", "ms-emb", "ss-mlp"):
        raise ModelConfigError(f"unknown baseline variant {cfg.variant!r}")
    _check_subjects(cfg, subject_index, params)
    batch = patches.shape[0]
    g = build_forward_graph(cfg, subject_index, batch, want_attention)
    out = diffcore.evaluate(g, {**params, "patches": patches})
    records = [
        AttentionRecord(l, out[f"attn/{l}"], cfg.n_lead_tokens)
        for l in range(cfg.layers)
        if f"attn/{l}" in out
    ]
    return out["z"], out["y_hat"], records


def volume_patchify_cnn(volumes: np.ndarray, conv: ConvConfig, params: dict) -> np.ndarray:
    """Apply the strided conv + gelu front-end to (B, D1, D2, D3[, Cin]) volumes."""
    if volumes.ndim == 4:
        volumes = volumes[..., None]
    m, d_in = conv.patch_geometry()
    batch = volumes.shape[0]
    g = Graph()
    x = g.input("volumes")
    for i in range(len(conv.channels)):
        x = g.conv3d(x, g.param(f"conv{i}/w"), conv.strides[i])
        x = g.gelu(g.add(x, g.param(f"conv{i}/b")))
    g.mark_output("patches", g.reshape(x, (batch, m, d_in)))
    return diffcore.evaluate(g, {**params, "volumes": volumes})["patches"]


TOKEN_POSITIONS = {
    "clip-mused": {"llv": 0, "hlv": 1},
    "ms-emb": {"emb": 1},
}


def extract_attention(record: AttentionRecord, token: str, variant: str = "clip-mused") -> np.ndarray:
    """Head-averaged attention of a lead token over patch positions, renormalized."""
    positions = TOKEN_POSITIONS.get(variant, {})
    if token not in positions:
        raise ModelConfigError(f"variant {variant!r} has no {token!r} token")
    pos = positions[token]
    row = record.weights[:, :, pos, record.n_lead_tokens :].mean(axis=1)  # (B, M)
    sums = row.sum(axis=1, keepdims=True)
    return row / sums


def token_rsm(params: dict, subject_ids: list) -> tuple:
    """Cosine RSMs across subjects' llv and hlv tokens."""
    if len(subject_ids) < 2:
        raise ModelConfigError("token RSM needs at least two subjects")
    llv = np.stack([params[f"token/llv/{s}"] for s in subject_ids])
    hlv = np.stack([params[f"token/hlv/{s}"] for s in subject_ids])
    return cosine_similarity_matrix(llv), cosine_similarity_matrix(hlv)
