import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinyvlm import checkpoint as C
from tinyvlm import merging as MG
from tinyvlm.model import ModelConfig, ParameterSet, init_model

CFG = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, vocab_size=17,
                  max_len=12, feat_dim=5, img_token_id=4, seed=0)


def _pair(seed=0, dtype=np.float64, cfg=CFG):
    rng = np.random.default_rng(seed)
    a = init_model(cfg, dtype=dtype)
    b = init_model(cfg, dtype=dtype)
    for name in b.names():
        b.tensors[name] = rng.normal(size=b[name].shape).astype(dtype)
    return a, b


def test_endpoint_identity_exact():
    a, b = _pair()
    m1 = MG.merge(a, b, 1.0)
    m0 = MG.merge(a, b, 0.0)
    for name in a.names():
        assert np.array_equal(m1[name], a[name])
        assert np.array_equal(m0[name], b[name])


def test_scalar_example():
    a, b = _pair()
    a.tensors["proj.b1"][:2] = [2.0, 4.0]
    b.tensors["proj.b1"][:2] = [0.0, 2.0]
    m = MG.merge(a, b, 0.5)
    assert list(m["proj.b1"][:2]) == [1.0, 3.0]


def test_symmetry_exact_for_dyadic_alpha():
    # exactness needs 1 - (1 - alpha) == alpha, which holds for dyadic alphas
    a, b = _pair(3)
    for alpha in (0.5, 0.25, 0.375, 0.8125):
        m1 = MG.merge(a, b, alpha)
        m2 = MG.merge(b, a, 1.0 - alpha)
        for name in a.names():
            assert np.array_equal(m1[name], m2[name])


def test_symmetry_close_for_any_alpha():
    a, b = _pair(4)
    for alpha in (0.3, 0.8, 0.123456):
        m1 = MG.merge(a, b, alpha)
        m2 = MG.merge(b, a, 1.0 - alpha)
        for name in a.names():
            assert np.allclose(m1[name], m2[name], rtol=1e-14, atol=1e-14)


def test_idempotence_exact_for_all_alphas():
    a, _ = _pair(5)
    for alpha in (0.0, 0.3, 0.5, 0.7, 1.0):
        m = MG.merge(a, a, alpha)
        for name in a.names():
            assert np.array_equal(m[name], a[name])


@settings(max_examples=25, deadline=None)
@given(alpha=st.floats(min_value=0.0, max_value=1.0), seed=st.integers(0, 1000))
def test_convexity_bounds(alpha, seed):
    a, b = _pair(seed)
    m = MG.merge(a, b, alpha)
    for name in a.names():
        lo = np.minimum(a[name], b[name])
        hi = np.maximum(a[name], b[name])
        assert np.all(m[name] >= lo)
        assert np.all(m[name] <= hi)


def test_alpha_range_checked():
    a, b = _pair()
    with pytest.raises(ValueError, match="alpha"):
        MG.merge(a, b, 1.2)
    with pytest.raises(ValueError, match="alpha"):
        MG.merge(a, b, -0.1)


def test_compatibility_self_passes():
    a, _ = _pair()
    MG.validate_compatibility(a, a)


def test_compatibility_layer_count_mismatch_names_tensor():
    a = init_model(CFG)
    big = init_model(ModelConfig(**{**CFG.to_dict(), "n_layers": 3}))
    with pytest.raises(MG.IncompatibleModelsError, match="layers."):
        MG.validate_compatibility(a, big)


def test_compatibility_shape_mismatch_names_tensor():
    a, b = _pair()
    b.tensors["proj.b1"] = np.zeros(9)
    with pytest.raises(MG.IncompatibleModelsError, match="proj.b1"):
        MG.validate_compatibility(a, b)


def test_compatibility_tokenizer_hash_mismatch():
    a, b = _pair()
    ma = C.CheckpointMeta(0, "text_only", 0, "hash_a")
    mb = C.CheckpointMeta(0, "multimodal", 0, "hash_b")
    with pytest.raises(MG.IncompatibleModelsError, match="tokenizer"):
        MG.validate_compatibility(a, b, ma, mb)


def _save_pair(tmp_path, hash_b="tok1"):
    a, b = _pair(7, dtype=np.float32)
    C.save_checkpoint(a, C.CheckpointMeta(1000, "text_only", 0, "tok1"), tmp_path / "llm")
    C.save_checkpoint(b, C.CheckpointMeta(2000, "multimodal", 0, hash_b), tmp_path / "vlm")
    return tmp_path / "llm", tmp_path / "vlm"


def test_merge_sweep_writes_three_checkpoints(tmp_path):
    llm, vlm = _save_pair(tmp_path)
    paths = MG.merge_sweep([0.3, 0.5, 0.8], llm, vlm, tmp_path / "out")
    assert [p.name for p in paths] == ["merged_a0.3", "merged_a0.5", "merged_a0.8"]
    for p, alpha in zip(paths, (0.3, 0.5, 0.8)):
        params, meta = C.load_checkpoint(p)
        assert meta.modality == "merged"
        assert meta.merge_info["alpha"] == alpha
        assert meta.merge_info["parent_llm"] != meta.merge_info["parent_vlm"]
        assert meta.words_seen == 2000  # the multimodal parent's progress


def test_merge_sweep_rejects_empty_and_duplicates(tmp_path):
    llm, vlm = _save_pair(tmp_path)
    with pytest.raises(ValueError, match="empty"):
        MG.merge_sweep([], llm, vlm, tmp_path / "out")
    with pytest.raises(ValueError, match="duplicate"):
        MG.merge_sweep([0.5, 0.5], llm, vlm, tmp_path / "out")


def test_merge_sweep_incompatible_parents(tmp_path):
    llm, vlm = _save_pair(tmp_path, hash_b="tok2")
    with pytest.raises(MG.IncompatibleModelsError):
        MG.merge_sweep([0.5], llm, vlm, tmp_path / "out")


def test_merge_sweep_cleans_partial_outputs(tmp_path, monkeypatch):
    llm, vlm = _save_pair(tmp_path)
    calls = {"n": 0}
    real = MG.save_checkpoint

    def flaky(params, meta, path):
        calls["n"] += 1
        if calls["n"] == 2:
            raise OSError("disk full")
        return real(params, meta, path)

    monkeypatch.setattr(MG, "save_checkpoint", flaky)
    with pytest.raises(OSError):
        MG.merge_sweep([0.3, 0.5], llm, vlm, tmp_path / "out")
    assert not (tmp_path / "out" / "merged_a0.3").exists()
    assert not (tmp_path / "out" / "merged_a0.5").exists()


def test_merged_params_preserve_dtype():
    a, b = _pair(dtype=np.float32)
    m = MG.merge(a, b, 0.3)
    assert m.dtype == np.float32
