import numpy as np
import pytest
from scipy.special import erf

from musedec import diffcore, model
from musedec.model import (
    AttentionRecord,
    ConvConfig,
    EncoderConfig,
    ModelConfigError,
    UnknownSubject,
    build_forward_graph,
    classify,
    count_params,
    encode,
    extract_attention,
    forward_baseline,
    init_params,
    param_shapes,
    shared_param_count,
    token_rsm,
    total_param_count,
    volume_patchify_cnn,
)

SUBJECTS = ["sub_00", "sub_01", "sub_02"]


def tiny_cfg(**kw):
    defaults = dict(layers=2, heads=2, d_model=8, patch_dim=5, patch_count=3, n_classes=4)
    defaults.update(kw)
    return EncoderConfig(**defaults)


def make_inputs(cfg, batch, seed=0):
    rng = np.random.default_rng(seed)
    patches = rng.normal(size=(batch, cfg.patch_count, cfg.patch_dim))
    subject_index = [SUBJECTS[i % len(SUBJECTS)] for i in range(batch)]
    return patches, subject_index


# ---------------------------------------------------------------------------
# independent numpy re-implementation used as the forward oracle


def _np_gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _np_ln(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _np_affine_ln(x, p, prefix):
    return _np_ln(x) * p[f"{prefix}/gamma"] + p[f"{prefix}/beta"]


def _np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_mhsa(x, p, prefix, n_heads):
    b, t, d = x.shape
    dh = d // n_heads

    def lin(w, bias):
        return x @ p[f"{prefix}/{w}"] + p[f"{prefix}/{bias}"]

    def split(a):
        return a.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split(lin("Wq", "bq")), split(lin("Wk", "bk")), split(lin("Wv", "bv"))
    attn = _np_softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh))
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return ctx @ p[f"{prefix}/Wo"] + p[f"{prefix}/bo"]


def np_forward(cfg, patches, subject_index, params):
    b = patches.shape[0]
    emb = patches @ params["embed/E"]
    if cfg.variant == "clip-mused":
        lead = [
            np.stack([params[f"token/llv/{s}"] for s in subject_index])[:, None, :],
            np.stack([params[f"token/hlv/{s}"] for s in subject_index])[:, None, :],
        ]
    elif cfg.variant == "ms-emb":
        lead = [
            np.tile(params["token/class"], (b, 1, 1)),
            np.stack([params[f"token/emb/{s}"] for s in subject_index])[:, None, :],
        ]
    else:
        lead = [np.tile(params["token/class"], (b, 1, 1))]
    z = np.concatenate(lead + [emb], axis=1) + params["embed/E_pos"]
    for l in range(cfg.layers):
        ln1 = _np_affine_ln(z, params, f"layer{l}/ln1")
        z_mid = _np_mhsa(ln1, params, f"layer{l}/attn", cfg.heads) + z
        ln2 = _np_affine_ln(z_mid, params, f"layer{l}/ln2")
        h1 = _np_gelu(ln2 @ params[f"layer{l}/mlp/W1"] + params[f"layer{l}/mlp/b1"])
        mlp = h1 @ params[f"layer{l}/mlp/W2"] + params[f"layer{l}/mlp/b2"]
        z = mlp + (z if cfg.residual_variant == "paper" else z_mid)
    return z


def np_head(cfg, z, params):
    h = _np_gelu(z @ params["head/W1"] + params["head/b1"])
    return 1.0 / (1.0 + np.exp(-(h @ params["head/W2"] + params["head/b2"])))


# ---------------------------------------------------------------------------


class TestConfig:
    def test_unknown_variant(self):
        with pytest.raises(ModelConfigError):
            tiny_cfg(variant="gpt")

    def test_unknown_residual(self):
        with pytest.raises(ModelConfigError):
            tiny_cfg(residual_variant="dense")

    def test_head_divisibility(self):
        with pytest.raises(ModelConfigError):
            tiny_cfg(d_model=7, heads=2)

    def test_interleave_not_implemented(self):
        with pytest.raises(ModelConfigError):
            tiny_cfg(interleave_conv=True)

    def test_lead_tokens(self):
        assert tiny_cfg().n_lead_tokens == 2
        assert tiny_cfg(variant="ms-emb").n_lead_tokens == 2
        assert tiny_cfg(variant="ss-vit").n_lead_tokens == 1
        assert tiny_cfg(variant="ms-smodel").n_lead_tokens == 1
        assert tiny_cfg(variant="ss-mlp").n_lead_tokens == 0

    def test_conv_geometry_mismatch(self):
        conv = ConvConfig((12, 12, 12), (16,), (6,), (3,))
        with pytest.raises(ModelConfigError):
            tiny_cfg(patch_count=5, patch_dim=16, conv=conv)


class TestParamCounts:
    def test_shapes_complete_and_tokens_per_subject(self):
        cfg = tiny_cfg()
        shapes = param_shapes(cfg, SUBJECTS)
        for sid in SUBJECTS:
            assert shapes[f"token/llv/{sid}"] == (cfg.d_model,)
            assert shapes[f"token/hlv/{sid}"] == (cfg.d_model,)
        assert shapes["embed/E_pos"] == (cfg.patch_count + 2, cfg.d_model)
        assert shapes["head/W1"] == (2 * cfg.d_model, cfg.head_hidden)

    def test_total_count_formula(self):
        # hand count for layers=1, heads=1, d=4, patch_dim=3, M=2, C=2:
        #   embed/E 12, E_pos (2+2)*4=16
        #   per layer: ln1 8 + attn 4*16+4*4=80 + ln2 8 + mlp (4*16+16+16*4+4)=148 -> 244
        #   final_ln 8, head (8*4+4+4*2+2)=46
        cfg = tiny_cfg(layers=1, heads=1, d_model=4, patch_dim=3, patch_count=2, n_classes=2)
        expected_shared = 12 + 16 + 244 + 8 + 46
        assert shared_param_count(cfg) == expected_shared
        assert total_param_count(cfg, 3) == expected_shared + 2 * 3 * 4
        rng = np.random.default_rng(0)
        params = init_params(cfg, SUBJECTS, rng)
        assert count_params(params) == total_param_count(cfg, 3)

    def test_ms_emb_adds_one_token_per_subject(self):
        cfg = tiny_cfg(variant="ms-emb")
        base = shared_param_count(cfg)
        assert total_param_count(cfg, 4) == base + 4 * cfg.d_model

    def test_shared_variants_add_nothing(self):
        for v in ("ss-vit", "ms-smodel", "ss-mlp"):
            cfg = tiny_cfg(variant=v)
            assert total_param_count(cfg, 5) == shared_param_count(cfg)

    def test_init_conventions(self):
        cfg = tiny_cfg()
        params = init_params(cfg, SUBJECTS, np.random.default_rng(1))
        assert np.array_equal(params["layer0/ln1/gamma"], np.ones(cfg.d_model))
        assert np.array_equal(params["layer0/attn/bq"], np.zeros(cfg.d_model))
        assert np.array_equal(params["head/b2"], np.zeros(cfg.n_classes))
        assert abs(params["embed/E"].std() - 0.02) < 0.01


class TestForwardOracle:
    @pytest.mark.parametrize("residual", ["paper", "conventional"])
    def test_clip_mused_matches_numpy(self, residual):
        cfg = tiny_cfg(residual_variant=residual)
        params = init_params(cfg, SUBJECTS, np.random.default_rng(2))
        # non-trivial gains/biases so the affine LN path is exercised
        rng = np.random.default_rng(3)
        for k in params:
            if k.endswith(("gamma", "beta")):
                params[k] = params[k] + 0.1 * rng.normal(size=params[k].shape)
        patches, idx = make_inputs(cfg, 4)
        z_llv, z_hlv, _ = encode(patches, idx, params, cfg)
        z_ref = np_forward(cfg, patches, idx, params)
        np.testing.assert_allclose(z_llv, _np_affine_ln(z_ref[:, 0], params, "final_ln"), atol=1e-10)
        np.testing.assert_allclose(z_hlv, _np_affine_ln(z_ref[:, 1], params, "final_ln"), atol=1e-10)
        y = classify(z_llv, z_hlv, params, cfg)
        np.testing.assert_allclose(
            y, np_head(cfg, np.concatenate([z_llv, z_hlv], axis=1), params), atol=1e-10
        )

    def test_residual_variants_differ(self):
        params = None
        outs = {}
        patches = None
        for residual in ("paper", "conventional"):
            cfg = tiny_cfg(residual_variant=residual)
            if params is None:
                params = init_params(cfg, SUBJECTS, np.random.default_rng(4))
                patches, idx = make_inputs(cfg, 3)
            z_llv, _, _ = encode(patches, idx, params, cfg)
            outs[residual] = z_llv
        assert not np.allclose(outs["paper"], outs["conventional"])

    @pytest.mark.parametrize("variant", ["ss-vit", "ms-smodel", "ms-emb"])
    def test_baselines_match_numpy(self, variant):
        cfg = tiny_cfg(variant=variant)
        params = init_params(cfg, SUBJECTS, np.random.default_rng(5))
        patches, idx = make_inputs(cfg, 4, seed=6)
        z, y, _ = forward_baseline(patches, idx, params, cfg)
        z_ref = _np_affine_ln(np_forward(cfg, patches, idx, params)[:, 0], params, "final_ln")
        np.testing.assert_allclose(z, z_ref, atol=1e-10)
        np.testing.assert_allclose(y, np_head(cfg, z_ref, params), atol=1e-10)

    def test_ss_mlp_matches_numpy(self):
        cfg = tiny_cfg(variant="ss-mlp")
        params = init_params(cfg, [], np.random.default_rng(7))
        patches, idx = make_inputs(cfg, 5, seed=8)
        z, y, _ = forward_baseline(patches, idx, params, cfg)
        flat = patches.reshape(5, -1)
        h = _np_gelu(flat @ params["mlp/W1"] + params["mlp/b1"])
        y_ref = 1.0 / (1.0 + np.exp(-(h @ params["mlp/W2"] + params["mlp/b2"])))
        np.testing.assert_allclose(z, h, atol=1e-10)
        np.testing.assert_allclose(y, y_ref, atol=1e-10)

    def test_outputs_in_unit_interval(self):
        cfg = tiny_cfg()
        params = init_params(cfg, SUBJECTS, np.random.default_rng(9))
        patches, idx = make_inputs(cfg, 6)
        z_llv, z_hlv, _ = encode(patches, idx, params, cfg)
        y = classify(z_llv, z_hlv, params, cfg)
        assert y.shape == (6, cfg.n_classes)
        assert ((y > 0) & (y < 1)).all()


class TestSubjectIsolation:
    def test_other_subjects_rows_unchanged(self):
        cfg = tiny_cfg()
        params = init_params(cfg, SUBJECTS, np.random.default_rng(10))
        patches, _ = make_inputs(cfg, 4, seed=11)
        idx = ["sub_00", "sub_01", "sub_00", "sub_02"]
        base_llv, base_hlv, _ = encode(patches, idx, params, cfg)
        bumped = dict(params)
        # a uniform shift would be invisible to layer norm; perturb one coord
        bump = np.zeros(cfg.d_model)
        bump[0] = 0.5
        bumped["token/llv/sub_01"] = params["token/llv/sub_01"] + bump
        new_llv, new_hlv, _ = encode(patches, idx, bumped, cfg)
        for i, sid in enumerate(idx):
            if sid == "sub_01":
                assert not np.allclose(new_llv[i], base_llv[i])
            else:
                np.testing.assert_array_equal(new_llv[i], base_llv[i])
                np.testing.assert_array_equal(new_hlv[i], base_hlv[i])

    def test_unknown_subject_raises(self):
        cfg = tiny_cfg()
        params = init_params(cfg, SUBJECTS, np.random.default_rng(0))
        patches, _ = make_inputs(cfg, 2)
        with pytest.raises(UnknownSubject):
            encode(patches, ["sub_00", "sub_99"], params, cfg)

    def test_token_gradients_flow_only_to_present_subjects(self):
        cfg = tiny_cfg(layers=1)
        params = init_params(cfg, SUBJECTS, np.random.default_rng(12))
        idx = ["sub_00", "sub_01"]
        g = build_forward_graph(cfg, idx, 2)
        g.mark_output("scalar", g.mean(g.outputs["y_hat"]))
        patches, _ = make_inputs(cfg, 2, seed=13)
        grads = diffcore.gradient(g, {**params, "patches": patches}, "scalar")
        assert np.abs(grads["token/llv/sub_00"]).max() > 0
        assert np.abs(grads["token/hlv/sub_01"]).max() > 0
        assert "token/llv/sub_02" not in grads or np.abs(grads["token/llv/sub_02"]).max() == 0


class TestGradients:
    def test_full_forward_grad_check(self):
        cfg = EncoderConfig(layers=1, heads=2, d_model=4, patch_dim=3, patch_count=2, n_classes=2)
        params = init_params(cfg, ["a", "b"], np.random.default_rng(14))
        patches = np.random.default_rng(15).normal(size=(2, 2, 3))
        g = build_forward_graph(cfg, ["a", "b"], 2)
        g.mark_output("scalar", g.frobenius_sq(g.outputs["y_hat"]))
        report = diffcore.grad_check(g, {**params, "patches": patches}, "scalar", tol=1e-4)
        assert report.passed, f"max rel err {report.max_rel_err}"


class TestConvFrontEnd:
    def test_patch_geometry_12_cube(self):
        conv = ConvConfig((12, 12, 12), (16,), (6,), (3,))
        (dims, cout) = conv.output_shape()
        assert dims == (3, 3, 3) and cout == 16
        assert conv.patch_geometry() == (27, 16)

    def test_two_layer_geometry(self):
        conv = ConvConfig((15, 15, 15), (4, 8), (4, 2), (2, 2))
        dims, cout = conv.output_shape()
        # 15 -> (15-4)//2+1 = 6 -> (6-2)//2+1 = 3
        assert dims == (3, 3, 3) and cout == 8

    def test_degenerate_geometry_raises(self):
        with pytest.raises(ModelConfigError):
            ConvConfig((4, 4, 4), (2,), (6,), (1,)).output_shape()

    def test_volume_patchify_matches_manual_conv(self):
        rng = np.random.default_rng(16)
        conv = ConvConfig((5, 5, 5), (2,), (3,), (2,))
        params = {
            "conv0/w": rng.normal(size=(3, 3, 3, 1, 2)),
            "conv0/b": rng.normal(size=(2,)),
        }
        vols = rng.normal(size=(2, 5, 5, 5))
        patches = volume_patchify_cnn(vols, conv, params)
        assert patches.shape == (2, 8, 2)
        # brute-force a single output cell
        w, b = params["conv0/w"], params["conv0/b"]
        cell = np.zeros(2)
        for c in range(2):
            cell[c] = (vols[0, 0:3, 0:3, 2:5, None] * w[:, :, :, :, c]).sum() + b[c]
        expect = _np_gelu(cell)
        # cell (0,0,1) in the 2x2x2 grid flattens to patch index 1
        np.testing.assert_allclose(patches[0, 1], expect, atol=1e-10)

    def test_conv_model_end_to_end_shapes(self):
        conv = ConvConfig((5, 5, 5), (2,), (3,), (2,))
        cfg = tiny_cfg(patch_count=8, patch_dim=2, d_model=4, heads=2, layers=1, conv=conv)
        params = init_params(cfg, SUBJECTS, np.random.default_rng(17))
        vols = np.random.default_rng(18).normal(size=(3, 5, 5, 5, 1))
        g = build_forward_graph(cfg, SUBJECTS, 3)
        out = diffcore.evaluate(g, {**params, "volumes": vols})
        assert out["y_hat"].shape == (3, cfg.n_classes)
        assert out["z_llv"].shape == (3, cfg.d_model)


class TestAttention:
    def test_records_shape_and_rows_sum_to_one(self):
        cfg = tiny_cfg()
        params = init_params(cfg, SUBJECTS, np.random.default_rng(19))
        patches, idx = make_inputs(cfg, 3, seed=20)
        _, _, records = encode(patches, idx, params, cfg, want_attention=True)
        assert len(records) == cfg.layers
        t = cfg.seq_len
        for rec in records:
            assert rec.weights.shape == (3, cfg.heads, t, t)
            np.testing.assert_allclose(rec.weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_extract_attention_renormalized(self):
        cfg = tiny_cfg()
        params = init_params(cfg, SUBJECTS, np.random.default_rng(21))
        patches, idx = make_inputs(cfg, 2, seed=22)
        _, _, records = encode(patches, idx, params, cfg, want_attention=True)
        amap = extract_attention(records[-1], "hlv")
        assert amap.shape == (2, cfg.patch_count)
        np.testing.assert_allclose(amap.sum(axis=1), 1.0, atol=1e-12)
        # hand-check against the raw weights
        raw = records[-1].weights[:, :, 1, 2:].mean(axis=1)
        np.testing.assert_allclose(amap, raw / raw.sum(axis=1, keepdims=True), atol=1e-12)

    def test_extract_attention_bad_token(self):
        rec = AttentionRecord(0, np.full((1, 1, 4, 4), 0.25), 2)
        with pytest.raises(ModelConfigError):
            extract_attention(rec, "class", variant="clip-mused")
        with pytest.raises(ModelConfigError):
            extract_attention(rec, "llv", variant="ss-vit")


class TestTokenRsm:
    def test_shapes_and_self_similarity(self):
        cfg = tiny_cfg()
        params = init_params(cfg, SUBJECTS, np.random.default_rng(23))
        r_llv, r_hlv = token_rsm(params, SUBJECTS)
        assert r_llv.shape == (3, 3) and r_hlv.shape == (3, 3)
        np.testing.assert_allclose(np.diag(r_llv), 1.0)
        np.testing.assert_allclose(r_hlv, r_hlv.T, atol=1e-14)

    def test_identical_tokens_full_similarity(self):
        params = {
            "token/llv/a": np.array([1.0, 0.0]),
            "token/llv/b": np.array([2.0, 0.0]),
            "token/hlv/a": np.array([0.0, 1.0]),
            "token/hlv/b": np.array([1.0, 0.0]),
        }
        r_llv, r_hlv = token_rsm(params, ["a", "b"])
        np.testing.assert_allclose(r_llv, np.ones((2, 2)), atol=1e-12)
        np.testing.assert_allclose(r_hlv, np.eye(2), atol=1e-12)

    def test_needs_two_subjects(self):
        with pytest.raises(ModelConfigError):
            token_rsm({}, ["solo"])
