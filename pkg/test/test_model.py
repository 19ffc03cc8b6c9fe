import sys
from pathlib import Path

import numpy as np
import pytest

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

from mtram.constants import PAD_ID
from mtram.corpus import EncodedDocument
from mtram.errors import ShapeError
from mtram.model import (
    GruDirection,
    GruWeights,
    RamWeights,
    attention_classify,
    bigru_forward,
    gru_cell,
    init_params,
    model_forward,
    predict,
    ram_forward,
    ram_trace,
)
from mtram.numcore import DiffTensor, Tape, grad_check
from mtram.schemas import ModelConfig
from mtram.train import bce_loss, joint_loss

VOCAB = 20
M_D, M_S = 5, 3


@pytest.fixture()
def toy_cfg() -> ModelConfig:
    """梯度检查用的小模型：d_e=6，d_r=4，k=3"""
    return ModelConfig(embed_dim=6, hidden_dim=4, kernel_size=3, dropout=0.0)


@pytest.fixture()
def toy_doc() -> EncodedDocument:
    """12 个词、细粒度 5 类、粗粒度 3 类的文档"""
    rng = np.random.default_rng(42)
    return EncodedDocument(
        id="toy",
        token_ids=rng.integers(2, VOCAB, size=12),
        fine_labels=np.array([1, 0, 0, 1, 0], dtype=np.int8),
        coarse_labels=np.array([1, 0, 1], dtype=np.int8),
    )


def _zero_direction(d_e: int, d_r: int) -> GruDirection:
    mats = [DiffTensor.zeros(d_e, d_r) for _ in range(3)]
    hidden = [DiffTensor.zeros(d_r, d_r) for _ in range(3)]
    bias = [DiffTensor.zeros(1, d_r) for _ in range(3)]
    return GruDirection(*mats, *hidden, *bias)


def _zero_ram(params):
    return params.map_tensors(
        lambda name, t: DiffTensor(np.zeros_like(t.values), name=name) if name.startswith("ram") else t
    )


# ---------- GRU ----------


def test_gru_cell_with_zero_weights_halves_state():
    w = _zero_direction(3, 2)
    tape = Tape()
    h = gru_cell(tape, tape.constant(np.ones((1, 3))), tape.constant([[1.0, 2.0]]), w)
    # z = r = σ(0) = 0.5，候选 tanh(0) = 0
    assert np.allclose(h.values, [[0.5, 1.0]])


def test_gru_cell_candidate_from_bias():
    w = _zero_direction(2, 2)
    w.b_h.values[:] = [[1.0, -2.0]]
    tape = Tape()
    h = gru_cell(tape, tape.constant(np.zeros((1, 2))), tape.constant(np.zeros((1, 2))), w)
    assert np.allclose(h.values, 0.5 * np.tanh([[1.0, -2.0]]))


def test_gru_cell_rejects_bad_shapes():
    w = _zero_direction(3, 2)
    tape = Tape()
    with pytest.raises(ShapeError):
        gru_cell(tape, tape.constant(np.ones((1, 4))), tape.constant(np.zeros((1, 2))), w)


def test_fused_gru_matches_step_composition(toy_cfg):
    params = init_params(toy_cfg, "off", VOCAB, M_D, M_S, seed=1)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(9, toy_cfg.embed_dim))
    upstream = rng.normal(size=(9, 2 * toy_cfg.hidden_dim))

    def run(fused: bool):
        tape = Tape()
        views = params.watch(tape)
        out = bigru_forward(tape, tape.constant(x), views.gru, fused=fused)
        tape.backward(tape.sum_all(tape.mul(out, tape.constant(upstream))))
        grads = {name: t.grad.copy() for name, t in views.named_tensors().items() if name.startswith("gru")}
        return out.values, grads

    out_fused, g_fused = run(True)
    out_steps, g_steps = run(False)
    assert np.max(np.abs(out_fused - out_steps)) <= 1e-12
    for name in g_fused:
        assert np.allclose(g_fused[name], g_steps[name], rtol=0, atol=1e-10), name


def test_bigru_reverse_symmetry(toy_cfg):
    params = init_params(toy_cfg, "off", VOCAB, M_D, M_S, seed=3)
    d_r = toy_cfg.hidden_dim
    x = np.random.default_rng(0).normal(size=(7, toy_cfg.embed_dim))
    out = bigru_forward(Tape(), DiffTensor(x), params.gru).values
    swapped = GruWeights(forward=params.gru.backward, backward=params.gru.forward)
    rev = bigru_forward(Tape(), DiffTensor(x[::-1]), swapped).values
    expected = np.concatenate([out[::-1, d_r:], out[::-1, :d_r]], axis=1)
    assert np.allclose(rev, expected, rtol=0, atol=1e-12)


# ---------- RAM ----------


def test_ram_zero_kernels(toy_cfg):
    h = np.random.default_rng(1).normal(size=(6, 2 * toy_cfg.hidden_dim))
    for mode, expected in (("mult", np.zeros_like(h)), ("add", np.tanh(h))):
        params = _zero_ram(init_params(toy_cfg, mode, VOCAB, M_D, M_S, seed=0))
        out = ram_forward(Tape(), DiffTensor(h), params.ram)
        assert np.allclose(out.values, expected, rtol=0, atol=1e-15), mode


@pytest.mark.parametrize("d_r", [4, 8, 16])
@pytest.mark.parametrize("n", range(1, 65))
def test_ram_preserves_shape(n, d_r):
    cfg = ModelConfig(embed_dim=6, hidden_dim=d_r, kernel_size=3, dropout=0.0)
    params = init_params(cfg, "mult", VOCAB, M_D, M_S, seed=0)
    h = DiffTensor(np.random.default_rng(n).normal(size=(n, 2 * d_r)))
    trace = ram_trace(Tape(), h, params.ram)
    assert trace.a.shape == (n, d_r)
    assert trace.a_prime.shape == (n, d_r // 2)
    assert trace.lateral.shape == (n, d_r // 2)
    assert trace.b.shape == (n, d_r)
    assert trace.o.shape == (n, 2 * d_r)
    assert trace.output.shape == (n, 2 * d_r)
    assert np.all(np.abs(trace.output.values) <= 1.0)


@pytest.mark.parametrize("mode", ["mult", "add"])
@pytest.mark.parametrize("d_r", [4, 8, 16])
def test_ram_stays_finite_on_large_inputs(mode, d_r):
    cfg = ModelConfig(embed_dim=6, hidden_dim=d_r, kernel_size=3, dropout=0.0)
    params = init_params(cfg, mode, VOCAB, M_D, M_S, seed=3)
    rng = np.random.default_rng(d_r)
    for n in (1, 7, 64):
        h = rng.uniform(-10.0, 10.0, size=(n, 2 * d_r))
        h[0, 0] = 10.0
        trace = ram_trace(Tape(), DiffTensor(h), params.ram)
        for part in (trace.a, trace.a_prime, trace.lateral, trace.b, trace.o, trace.output):
            assert np.all(np.isfinite(part.values))
        assert np.all(np.abs(trace.output.values) <= 1.0)


def test_ram_rejects_width_mismatch(toy_cfg):
    params = init_params(toy_cfg, "mult", VOCAB, M_D, M_S, seed=0)
    with pytest.raises(ShapeError):
        ram_forward(Tape(), DiffTensor(np.zeros((3, toy_cfg.hidden_dim))), params.ram)


def test_ram_weights_reject_unknown_mode(toy_cfg):
    params = init_params(toy_cfg, "mult", VOCAB, M_D, M_S, seed=0)
    r = params.ram
    with pytest.raises(ValueError):
        RamWeights(r.down1, r.down2, r.lateral, r.up1, r.up2, mode="gate")


# ---------- 注意力 ----------


def test_attention_single_position_is_one(toy_cfg):
    params = init_params(toy_cfg, "off", VOCAB, M_D, M_S, seed=0)
    h = DiffTensor(np.random.default_rng(2).normal(size=(1, 2 * toy_cfg.hidden_dim)))
    out = attention_classify(Tape(), h, params.head_fine)
    assert np.allclose(out.attn.values, 1.0)


def test_attention_zero_classifier_gives_half(toy_cfg):
    params = init_params(toy_cfg, "off", VOCAB, M_D, M_S, seed=0)
    params.head_fine.w.values[:] = 0.0
    h = DiffTensor(np.random.default_rng(3).normal(size=(5, 2 * toy_cfg.hidden_dim)))
    out = attention_classify(Tape(), h, params.head_fine)
    assert out.probs.shape == (M_D, 1)
    assert np.allclose(out.probs.values, 0.5)


def test_attention_columns_sum_to_one(toy_cfg):
    params = init_params(toy_cfg, "off", VOCAB, M_D, M_S, seed=0)
    h = DiffTensor(np.random.default_rng(4).normal(size=(8, 2 * toy_cfg.hidden_dim)))
    out = attention_classify(Tape(), h, params.head_coarse)
    assert out.attn.shape == (8, M_S)
    assert np.allclose(out.attn.values.sum(axis=0), 1.0, rtol=0, atol=1e-12)
    assert np.all(out.attn.values >= 0)


# ---------- 参数与前向 ----------


def test_init_params_layout(toy_cfg):
    params = init_params(toy_cfg, "mult", VOCAB, M_D, M_S, seed=0)
    names = list(params.named_tensors())
    assert names[0] == "embeddings"
    assert "gru.forward.w_z" in names
    assert "ram.down1.k1" in names
    assert "head_fine.u" in names
    assert not params.embeddings.values[PAD_ID].any()
    assert not params.head_fine.b.values.any()
    assert params.describe() == {
        "vocab_size": VOCAB, "embed_dim": 6, "hidden_dim": 4, "kernel_size": 3,
        "m_d": M_D, "m_s": M_S, "ram": "mult", "placement": "shared",
    }


def test_init_params_is_seeded(toy_cfg):
    a = init_params(toy_cfg, "mult", VOCAB, M_D, M_S, seed=5).named_tensors()
    b = init_params(toy_cfg, "mult", VOCAB, M_D, M_S, seed=5).named_tensors()
    c = init_params(toy_cfg, "mult", VOCAB, M_D, M_S, seed=6).named_tensors()
    assert all(np.array_equal(a[n].values, b[n].values) for n in a)
    assert not np.array_equal(a["gru.forward.w_z"].values, c["gru.forward.w_z"].values)


def test_init_params_uses_pretrained_embeddings(toy_cfg):
    table = np.random.default_rng(0).normal(size=(VOCAB, toy_cfg.embed_dim))
    params = init_params(toy_cfg, "off", VOCAB, M_D, M_S, seed=0, embeddings=table)
    assert np.array_equal(params.embeddings.values[1:], table[1:])
    assert not params.embeddings.values[PAD_ID].any()
    with pytest.raises(ShapeError):
        init_params(toy_cfg, "off", VOCAB, M_D, M_S, seed=0, embeddings=table[:, :3])


def test_ram_off_has_no_ram_tensors(toy_cfg):
    params = init_params(toy_cfg.model_copy(update={"ram_placement": "branch"}), "off", VOCAB, M_D, M_S, seed=0)
    assert params.ram is None and params.ram_coarse is None
    assert params.placement == "shared"
    assert not [n for n in params.named_tensors() if n.startswith("ram")]


def test_branch_placement_isolates_coarse_ram(toy_cfg, toy_doc):
    params = init_params(toy_cfg.model_copy(update={"ram_placement": "branch"}), "mult", VOCAB, M_D, M_S, seed=0)
    assert params.ram_coarse is not None
    assert any(n.startswith("ram_coarse.") for n in params.named_tensors())
    base = model_forward(toy_doc, params, training=False, rng=None)

    zeroed = params.map_tensors(
        lambda name, t: DiffTensor(np.zeros_like(t.values), name=name) if name.startswith("ram_coarse") else t
    )
    changed = model_forward(toy_doc, zeroed, training=False, rng=None)
    assert np.array_equal(base.probs_fine, changed.probs_fine)
    assert not np.allclose(base.probs_coarse, changed.probs_coarse)


def test_forward_outputs_probabilities(toy_cfg, toy_doc):
    params = init_params(toy_cfg, "mult", VOCAB, M_D, M_S, seed=0)
    result = model_forward(toy_doc, params, training=False, rng=None)
    assert result.probs_fine.shape == (M_D,)
    assert result.probs_coarse.shape == (M_S,)
    for p in (result.probs_fine, result.probs_coarse):
        assert np.all((p > 0) & (p < 1))


def test_eval_mode_ignores_dropout(toy_cfg, toy_doc):
    params = init_params(toy_cfg, "mult", VOCAB, M_D, M_S, seed=0)
    plain = model_forward(toy_doc, params, training=False, rng=None)
    dropped = model_forward(toy_doc, params, training=False, rng=np.random.default_rng(0), dropout=0.5)
    assert np.array_equal(plain.probs_fine, dropped.probs_fine)

    a = model_forward(toy_doc, params, training=True, rng=np.random.default_rng(1), dropout=0.5)
    b = model_forward(toy_doc, params, training=True, rng=np.random.default_rng(1), dropout=0.5)
    assert np.array_equal(a.probs_fine, b.probs_fine)
    assert not np.array_equal(a.probs_fine, plain.probs_fine)


def test_forward_rejects_empty_documents(toy_cfg):
    params = init_params(toy_cfg, "mult", VOCAB, M_D, M_S, seed=0)
    labels = dict(fine_labels=np.zeros(M_D, dtype=np.int8), coarse_labels=np.zeros(M_S, dtype=np.int8))
    with pytest.raises(ValueError):
        model_forward(EncodedDocument("pad", np.zeros(4, dtype=np.int64), **labels), params, False, None)
    with pytest.raises(ValueError):
        model_forward(EncodedDocument("empty", np.zeros(0, dtype=np.int64), **labels), params, False, None)


def test_forward_leaves_parameters_untouched(toy_cfg, toy_doc):
    params = init_params(toy_cfg, "mult", VOCAB, M_D, M_S, seed=0)
    before = {n: t.values.copy() for n, t in params.named_tensors().items()}
    result = model_forward(toy_doc, params, training=False, rng=None)
    result.tape.backward(result.tape.sum_all(result.fine.probs))
    for name, t in params.named_tensors().items():
        assert np.array_equal(t.values, before[name])
        assert not t.grad.any()


def test_predict_is_deterministic(toy_cfg, toy_doc):
    params = init_params(toy_cfg, "add", VOCAB, M_D, M_S, seed=0)
    docs = [toy_doc, EncodedDocument("short", np.array([3, 4]), toy_doc.fine_labels, toy_doc.coarse_labels)]
    f1, c1 = predict(docs, params)
    f2, c2 = predict(docs, params)
    assert f1.shape == (2, M_D) and c1.shape == (2, M_S)
    assert np.array_equal(f1, f2) and np.array_equal(c1, c2)


# ---------- 端到端梯度检查 ----------


@pytest.mark.parametrize("ram,placement", [("mult", "shared"), ("add", "branch"), ("off", "shared")])
def test_end_to_end_gradients(toy_cfg, toy_doc, ram, placement):
    params = init_params(toy_cfg.model_copy(update={"ram_placement": placement}), ram, VOCAB, M_D, M_S, seed=11)

    def loss_fn(tape, views):
        watched = params.map_tensors(lambda name, _t: views[name])
        result = model_forward(toy_doc, watched, training=False, rng=None, tape=tape, watched=True)
        lf = bce_loss(tape, result.fine.probs, toy_doc.fine_labels)
        ls = bce_loss(tape, result.coarse.probs, toy_doc.coarse_labels)
        return joint_loss(tape, lf, ls, (0.7, 0.3))

    report = grad_check(loss_fn, params.named_tensors(), h=1e-5, tol=1e-4, atol=0.0, max_entries=None)
    assert report.passed, report.failures()
    assert set(report.errors) == set(params.named_tensors())
    for name, t in params.named_tensors().items():
        assert report.checked_entries[name] == t.values.size, name
    assert report.worst[1] <= 1e-4
